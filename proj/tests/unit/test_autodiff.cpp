#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "autodiff/ops.hpp"
#include "autodiff/tensor_io.hpp"
#include "common/error.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

using namespace m3f;
using namespace m3f::ad;
using m3f::testing::grad_check;
using m3f::testing::random_tensor;

namespace {

constexpr double kGradTolerance = 1e-4;

bool throws_kind(const std::function<void()>& fn, ErrorKind kind) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind() == kind;
    }
    return false;
}

}  // namespace

TEST_CASE("matmul: identity and zeros") {
    Tape tape(false);
    const auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    const auto prod = matmul(tape, a, eye);
    CHECK(std::vector<float>(prod.values().begin(), prod.values().end()) == std::vector<float>{1, 2, 3, 4});

    Rng rng(3);
    const auto z = matmul(tape, Tensor::zeros({3, 4}), random_tensor({4, 2}, rng));
    CHECK(z.shape() == Shape{3, 2});
    for (float v : z.values()) {
        CHECK(v == 0.0f);
    }
}

TEST_CASE("matmul: mismatch names both shapes") {
    Tape tape;
    try {
        matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
        FAIL("expected dimension error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::dimension);
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul: gradient of sum(A*B) w.r.t. A is B^T row sums") {
    Rng rng(11);
    auto a = random_tensor({3, 3}, rng);
    auto b = random_tensor({3, 3}, rng, false);
    Tape tape;
    tape.backward(sum(tape, matmul(tape, a, b)));
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t k = 0; k < 3; ++k) {
            const float expected = b.at(k, 0) + b.at(k, 1) + b.at(k, 2);
            CHECK(a.grad()[i * 3 + k] == doctest::Approx(expected).epsilon(1e-6));
        }
    }
    const auto r = grad_check([&](Tape& t) { return matmul(t, a, b); }, {a}, 5);
    CHECK(r.relative_error < kGradTolerance);
}

TEST_CASE("softmax: symmetry, stability, normalization") {
    Tape tape(false);
    const auto flat = softmax(tape, Tensor::zeros({1, 4}), 1);
    for (float v : flat.values()) {
        CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
    }
    const auto peaked = softmax(tape, Tensor::from({1, 2}, {1000.0f, 0.0f}), 1);
    CHECK(std::isfinite(peaked.values()[0]));
    CHECK(peaked.values()[0] == doctest::Approx(1.0));
    CHECK(peaked.values()[1] == doctest::Approx(0.0));

    Rng rng(2);
    const auto x = random_tensor({3, 4, 5}, rng, false, -5.0f, 5.0f);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const auto y = softmax(tape, x, axis);
        const std::size_t len = x.dim(axis);
        std::size_t inner = 1;
        for (std::size_t i = axis + 1; i < 3; ++i) {
            inner *= x.dim(i);
        }
        for (std::size_t start = 0; start < y.size(); ++start) {
            if ((start / inner) % len != 0) {
                continue;
            }
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                CHECK(y.values()[start + j * inner] >= 0.0f);
                total += y.values()[start + j * inner];
            }
            CHECK(std::abs(total - 1.0) < 1e-6);
        }
    }
    CHECK(throws_kind([&] { softmax(tape, x, 3); }, ErrorKind::dimension));
}

TEST_CASE("layer_norm: constant rows and standardization") {
    Tape tape(false);
    const auto gain = Tensor::filled({6}, 1.0f);
    const auto bias = Tensor::zeros({6});
    const auto y = layer_norm(tape, Tensor::filled({2, 6}, 3.5f), gain, bias);
    for (float v : y.values()) {
        CHECK(v == 0.0f);
    }
    Rng rng(8);
    const auto x = random_tensor({1, 64}, rng, false, -3.0f, 3.0f);
    const auto z = layer_norm(tape, x, Tensor::filled({64}, 1.0f), Tensor::zeros({64}));
    double m = 0.0, var = 0.0;
    for (float v : z.values()) {
        m += v;
    }
    m /= 64.0;
    for (float v : z.values()) {
        var += (v - m) * (v - m);
    }
    var /= 64.0;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
}

TEST_CASE("cross_entropy: analytic values and ignore semantics") {
    Tape tape;
    auto peaked = Tensor::from({2, 3}, {100, 0, 0, 0, 0, 100}, true);
    const std::vector<std::int32_t> tgt{0, 2};
    CHECK(cross_entropy(tape, peaked, tgt).loss.item() < 1e-3f);

    const auto uniform = Tensor::zeros({1, 4});
    const std::vector<std::int32_t> t0{1};
    CHECK(cross_entropy(tape, uniform, t0).loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    auto logits = Tensor::from({2, 3}, {0.1f, 0.5f, -0.3f, 1.0f, 2.0f, 0.0f}, true);
    const std::vector<std::int32_t> partial{2, -100};
    Tape t2;
    const auto ce = cross_entropy(t2, logits, partial);
    CHECK(ce.counted == 1);
    t2.backward(ce.loss);
    for (std::size_t j = 3; j < 6; ++j) {
        CHECK(logits.grad()[j] == 0.0f);
    }

    auto all = Tensor::from({1, 3}, {1, 2, 3}, true);
    const std::vector<std::int32_t> none{-100};
    Tape t3;
    const auto empty = cross_entropy(t3, all, none);
    CHECK(empty.all_ignored);
    CHECK(empty.loss.item() == 0.0f);
    t3.backward(empty.loss);
    CHECK(!all.has_grad());

    const std::vector<std::int32_t> bad{7};
    CHECK(throws_kind([&] { cross_entropy(t3, all, bad); }, ErrorKind::validation));
}

TEST_CASE("backward: sum gradient, accumulation, detached branch, errors") {
    auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    Tape tape;
    const auto loss = sum(tape, x);
    tape.backward(loss);
    for (float g : x.grad()) {
        CHECK(g == 1.0f);
    }
    tape.backward(loss);
    for (float g : x.grad()) {
        CHECK(g == 2.0f);
    }

    auto w = Tensor::from({2, 2}, {1, 1, 1, 1}, true);
    Tape t2;
    const auto detached = w.detach();
    const auto l2 = sum(t2, add(t2, x, mul(t2, detached, detached)));
    x.zero_grad();
    t2.backward(l2);
    CHECK(!w.has_grad());

    Tape t3;
    const auto not_scalar = add(t3, x, x);
    CHECK(throws_kind([&] { t3.backward(not_scalar); }, ErrorKind::usage));
    Tape other;
    CHECK(throws_kind([&] { other.backward(l2); }, ErrorKind::usage));
}

TEST_CASE("tape: entries are topological and each visited once") {
    Rng rng(4);
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({3, 2}, rng);
    Tape tape;
    const auto loss = sum(tape, gelu(tape, matmul(tape, a, b)));
    std::vector<std::uint64_t> known{a.id(), b.id()};
    for (const auto& e : tape.entries()) {
        for (auto id : e.inputs) {
            CHECK(std::find(known.begin(), known.end(), id) != known.end());
        }
        known.push_back(e.output);
    }
    CHECK(tape.size() == 3);
    tape.backward(loss);
    CHECK(a.has_grad());
}

TEST_CASE("gradient checks for every differentiable op over random seeds") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        for (auto& c : m3f::testing::op_grad_cases(seed)) {
            CAPTURE(c.name);
            const auto r = grad_check(c.forward, c.leaves, seed, c.step);
            CAPTURE(r.max_abs_error);
            CHECK(r.relative_error < kGradTolerance);
        }
    }
}

TEST_CASE("forward is bitwise deterministic") {
    Rng rng(21);
    const auto a = random_tensor({7, 9}, rng, false);
    const auto w = random_tensor({5, 9}, rng, false);
    Tape t1(false), t2(false);
    const auto y1 = softmax(t1, linear(t1, a, w), 1);
    const auto y2 = softmax(t2, linear(t2, a, w), 1);
    CHECK(std::equal(y1.values().begin(), y1.values().end(), y2.values().begin()));
}

TEST_CASE("tensor file: round trip and truncation") {
    Rng rng(9);
    const auto t = random_tensor({2, 3, 4}, rng, false);
    std::stringstream buf;
    write_tensor(buf, t);
    const std::string bytes = buf.str();
    CHECK(bytes.substr(0, 4) == "M3FT");
    CHECK(bytes.size() == 7 + 3 * 4 + 24 * 4);

    std::stringstream in(bytes);
    const auto back = read_tensor(in, "buf");
    CHECK(back.shape == t.shape());
    CHECK(std::equal(back.values.begin(), back.values.end(), t.values().begin()));

    std::stringstream cut(bytes.substr(0, bytes.size() - 5));
    try {
        read_tensor(cut, "cut");
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::parse);
        const std::string msg = e.what();
        CHECK(msg.find("expected 96 bytes") != std::string::npos);
        CHECK(msg.find("read 91") != std::string::npos);
    }
}

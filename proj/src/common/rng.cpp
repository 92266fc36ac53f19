#include "common/rng.hpp"

#include <cmath>
#include <numeric>

namespace m3f {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::size_t Rng::uniform_index(std::size_t n) {
    // Lemire's rejection keeps the draw unbiased.
    const std::uint64_t range = n;
    const std::uint64_t threshold = (0 - range) % range;
    while (true) {
        const std::uint64_t x = engine_();
        const unsigned __int128 m = static_cast<unsigned __int128>(x) * range;
        if (static_cast<std::uint64_t>(m) >= threshold) {
            return static_cast<std::size_t>(m >> 64);
        }
    }
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::vector<std::size_t> Rng::choose(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    // Partial Fisher-Yates from the front.
    for (std::size_t i = 0; i < k && i < n; ++i) {
        std::swap(pool[i], pool[i + uniform_index(n - i)]);
    }
    pool.resize(k < n ? k : n);
    return pool;
}

}  // namespace m3f

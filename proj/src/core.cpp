// SPDX-License-Identifier: Apache-2.0
#include "mf/core.hpp"

#include <cmath>
#include <numbers>

namespace mf {

std::uint64_t mix64(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t k = counter_++;
    return mix64(mix64(seed_) ^ (k * 0xd1b54a32d192ed03ULL));
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gauss() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    spare_ = rad * std::sin(ang);
    has_spare_ = true;
    return rad * std::cos(ang);
}

std::uint64_t Rng::below(std::uint64_t n) {
    require(n > 0, "Rng::below: n must be positive");
    // rejection keeps the draw unbiased
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

Rng Rng::derive(std::uint64_t key) const {
    return Rng(mix64(seed_ ^ mix64(key + 0x632be59bd9b4e019ULL)));
}

Vec gauss_sample(Rng& rng, std::size_t n) {
    require(n >= 1, "gauss_sample: n must be >= 1");
    Vec out(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = rng.gauss();
    return out;
}

Vec axpy(double a, const Vec& x, const Vec& y) {
    if (x.size() != y.size()) throw ContractError("axpy: length mismatch");
    return a * x + y;
}

Vec matvec(const Mat& m, const Vec& x) {
    if (m.cols() != x.size()) throw ContractError("matvec: dimension mismatch");
    return m * x;
}

bool all_finite(const Vec& v) {
    return v.allFinite();
}

}  // namespace mf

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace mf {

/// Dense column vector of doubles. Every vector-valued quantity (noisy
/// points, velocities, fields, observations) is stored as one of these.
using Vec = Eigen::VectorXd;

/// Row-major dense matrix. Weights and flattened action chunks use this
/// layout so that serialization order is the storage order.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Broken caller contract: mismatched dimensions, out-of-range arguments.
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value or file.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Malformed input file (checkpoint, dataset, config).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite loss encountered during training.
struct DivergenceError : std::runtime_error {
    DivergenceError(std::size_t step, const std::string& what)
        : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
          step(step) {}
    std::size_t step;
};

/// Counter-based generator: output k is a bijective mix of (seed, k), so the
/// whole stream is a pure function of the seed and the number of draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64();
    /// Uniform on [0, 1) with 53 bits of resolution.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller; the second value of each pair is cached.
    double gauss();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    /// Independent child stream for sub-task `key` (episode, worker, epoch).
    /// Does not advance this generator.
    Rng derive(std::uint64_t key) const;

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

std::uint64_t mix64(std::uint64_t x);

/// n standard-normal draws.
Vec gauss_sample(Rng& rng, std::size_t n);

/// a*x + y.
Vec axpy(double a, const Vec& x, const Vec& y);

Vec matvec(const Mat& m, const Vec& x);

inline void require(bool cond, const char* what) {
    if (!cond) throw ContractError(what);
}

bool all_finite(const Vec& v);

}  // namespace mf

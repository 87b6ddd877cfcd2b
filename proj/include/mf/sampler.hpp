// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "mf/core.hpp"
#include "mf/nnet.hpp"

namespace mf {

enum class SampleMode { meanflow, euler_fm };

std::string to_string(SampleMode m);
SampleMode sample_mode_from_string(const std::string& s);

struct SampleConfig {
    std::size_t nfe = 1;
    SampleMode mode = SampleMode::meanflow;
    std::uint64_t seed = 0;
};

/// H x act_dim block of future actions.
struct ActionChunk {
    Mat actions;
    std::size_t horizon() const { return static_cast<std::size_t>(actions.rows()); }
    std::size_t act_dim() const { return static_cast<std::size_t>(actions.cols()); }
};

/// A_0 = A_1 - u(A_1, 0, 1 | cond), A_1 ~ N(0, I) drawn from rng.
Vec sample_one_step(const VectorField& field, const Vec& cond, Rng& rng);

/// nfe uniform intervals, A_r = A_t - (t - r) u(A_t, r, t | cond) from t = 1 down.
Vec sample_multi_step(const VectorField& field, const Vec& cond, std::size_t nfe, Rng& rng);

/// Euler integration of the instantaneous field (queried at r = t) with step 1/nfe.
Vec sample_euler_fm(const VectorField& field, const Vec& cond, std::size_t nfe, Rng& rng);

/// Dispatches on cfg.mode; nfe = 1 meanflow is the one-step sampler.
Vec sample(const VectorField& field, const Vec& cond, const SampleConfig& cfg, Rng& rng);

/// Samples a flattened chunk and reshapes it (row-major) to H x act_dim.
ActionChunk generate_chunk(const VectorField& field, const Vec& obs, const SampleConfig& cfg, std::size_t act_dim,
                           Rng& rng);

/// Exact mean field of a single data point x0 on the linear path:
/// u(z, r, t) = (z - x0) / t for every r. Also the exact instantaneous field.
class SingletonField final : public VectorField {
public:
    SingletonField(Vec x0, std::size_t cond_dim = 0) : x0_(std::move(x0)), cond_dim_(cond_dim) {}
    std::size_t z_dim() const override { return static_cast<std::size_t>(x0_.size()); }
    std::size_t cond_dim() const override { return cond_dim_; }
    Vec eval(const Vec& z, const Vec& cond, double r, double t) const override;

private:
    Vec x0_;
    std::size_t cond_dim_;
};

/// Exact instantaneous (marginal) field of an equal-weight finite point set:
/// v(z, t) = (z - E[x | z_t = z]) / t. Ignores r.
class PointSetVelocityField final : public VectorField {
public:
    explicit PointSetVelocityField(std::vector<Vec> points, std::size_t cond_dim = 0);
    std::size_t z_dim() const override { return static_cast<std::size_t>(points_.front().size()); }
    std::size_t cond_dim() const override { return cond_dim_; }
    Vec eval(const Vec& z, const Vec& cond, double r, double t) const override;

private:
    std::vector<Vec> points_;
    std::size_t cond_dim_;
};

class ZeroField final : public VectorField {
public:
    ZeroField(std::size_t z_dim, std::size_t cond_dim) : z_dim_(z_dim), cond_dim_(cond_dim) {}
    std::size_t z_dim() const override { return z_dim_; }
    std::size_t cond_dim() const override { return cond_dim_; }
    Vec eval(const Vec&, const Vec&, double, double) const override { return Vec::Zero(static_cast<Eigen::Index>(z_dim_)); }

private:
    std::size_t z_dim_, cond_dim_;
};

}  // namespace mf

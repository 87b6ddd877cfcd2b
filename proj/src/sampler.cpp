// SPDX-License-Identifier: Apache-2.0
#include "mf/sampler.hpp"

#include <cmath>
#include <limits>

namespace mf {

std::string to_string(SampleMode m) {
    return m == SampleMode::meanflow ? "meanflow" : "euler_fm";
}

SampleMode sample_mode_from_string(const std::string& s) {
    if (s == "meanflow") return SampleMode::meanflow;
    if (s == "euler_fm") return SampleMode::euler_fm;
    throw ConfigError("unknown sample mode '" + s + "' (expected meanflow or euler_fm)");
}

namespace {

Vec draw_noise(const VectorField& field, const Vec& cond, Rng& rng) {
    if (cond.size() != static_cast<Eigen::Index>(field.cond_dim())) throw ContractError("sampler: cond dimension mismatch");
    return gauss_sample(rng, field.z_dim());
}

void check_nfe(std::size_t nfe) {
    if (nfe < 1) throw ContractError("sampler: nfe must be >= 1");
}

}  // namespace

Vec sample_one_step(const VectorField& field, const Vec& cond, Rng& rng) {
    const Vec a1 = draw_noise(field, cond, rng);
    return a1 - field.eval(a1, cond, 0.0, 1.0);
}

Vec sample_multi_step(const VectorField& field, const Vec& cond, std::size_t nfe, Rng& rng) {
    check_nfe(nfe);
    Vec a = draw_noise(field, cond, rng);
    const double n = static_cast<double>(nfe);
    for (std::size_t k = nfe; k >= 1; --k) {
        const double t = static_cast<double>(k) / n;
        const double r = static_cast<double>(k - 1) / n;
        a -= (t - r) * field.eval(a, cond, r, t);
    }
    return a;
}

Vec sample_euler_fm(const VectorField& field, const Vec& cond, std::size_t nfe, Rng& rng) {
    check_nfe(nfe);
    Vec a = draw_noise(field, cond, rng);
    const double n = static_cast<double>(nfe);
    const double delta = 1.0 / n;
    for (std::size_t k = nfe; k >= 1; --k) {
        const double t = static_cast<double>(k) / n;
        a -= delta * field.eval(a, cond, t, t);
    }
    return a;
}

Vec sample(const VectorField& field, const Vec& cond, const SampleConfig& cfg, Rng& rng) {
    switch (cfg.mode) {
        case SampleMode::meanflow:
            return cfg.nfe == 1 ? sample_one_step(field, cond, rng) : sample_multi_step(field, cond, cfg.nfe, rng);
        case SampleMode::euler_fm:
            return sample_euler_fm(field, cond, cfg.nfe, rng);
    }
    throw ContractError("unknown sample mode");
}

ActionChunk generate_chunk(const VectorField& field, const Vec& obs, const SampleConfig& cfg, std::size_t act_dim,
                           Rng& rng) {
    if (act_dim < 1 || field.z_dim() % act_dim != 0)
        throw ContractError("generate_chunk: field dimension is not a multiple of act_dim");
    const Vec flat = sample(field, obs, cfg, rng);
    const auto h = static_cast<Eigen::Index>(field.z_dim() / act_dim);
    ActionChunk chunk;
    chunk.actions = Eigen::Map<const Mat>(flat.data(), h, static_cast<Eigen::Index>(act_dim));
    return chunk;
}

Vec SingletonField::eval(const Vec& z, const Vec&, double, double t) const {
    if (z.size() != x0_.size()) throw ContractError("SingletonField: dimension mismatch");
    if (t <= 0.0) return Vec::Zero(z.size());
    return (z - x0_) / t;
}

PointSetVelocityField::PointSetVelocityField(std::vector<Vec> points, std::size_t cond_dim)
    : points_(std::move(points)), cond_dim_(cond_dim) {
    if (points_.empty()) throw ContractError("PointSetVelocityField: empty point set");
    for (const auto& p : points_)
        if (p.size() != points_.front().size()) throw ContractError("PointSetVelocityField: ragged points");
}

Vec PointSetVelocityField::eval(const Vec& z, const Vec&, double, double t) const {
    if (z.size() != points_.front().size()) throw ContractError("PointSetVelocityField: dimension mismatch");
    if (t <= 0.0) return Vec::Zero(z.size());
    // posterior over points given z_t = (1 - t) x + t e, e ~ N(0, I)
    std::vector<double> logw(points_.size());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < points_.size(); ++k) {
        logw[k] = -(z - (1.0 - t) * points_[k]).squaredNorm() / (2.0 * t * t);
        best = std::max(best, logw[k]);
    }
    Vec mean = Vec::Zero(z.size());
    double total = 0.0;
    for (std::size_t k = 0; k < points_.size(); ++k) {
        const double w = std::exp(logw[k] - best);
        mean += w * points_[k];
        total += w;
    }
    mean /= total;
    return (z - mean) / t;
}

}  // namespace mf

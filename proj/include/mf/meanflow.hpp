// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mf/core.hpp"
#include "mf/flow.hpp"
#include "mf/nnet.hpp"

namespace mf {

/// Interval endpoints, 0 <= r <= t <= 1. r == t is the instantaneous
/// (flow-matching) case.
struct TimePair {
    double r = 0.0;
    double t = 1.0;
    bool degenerate() const { return r == t; }
};

struct TrainConfig {
    double flow_ratio = 0.2;  // fraction of pairs with r != t
    double gamma = 0.5;       // adaptive-loss exponent; 1 is plain L2
    double adaptive_c = 1e-3;
    std::size_t batch_size = 256;
    std::size_t steps = 2000;
    double learn_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    std::size_t chunk_h = 1;
    std::size_t act_dim = 2;
    std::size_t cond_dim = 0;
    std::vector<std::size_t> hidden_dims = {128, 128};
    std::size_t time_embed_dim = 2;
    Activation activation = Activation::tanh;
    enum class LrSchedule { constant, cosine };
    LrSchedule lr_schedule = LrSchedule::constant;
    /// Standardize conditions during training; the affine map is folded into
    /// the first layer afterwards, so the saved net takes raw conditions.
    bool normalize_cond = true;

    std::size_t z_dim() const { return chunk_h * act_dim; }
    NetShape net_shape() const;
    /// Throws ConfigError naming the first invalid field.
    void validate() const;
    /// Learning rate for 1-based step k; cosine anneals to 0 at k = steps.
    double learn_rate_at(std::size_t k) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path);

/// Supervised pairs (cond_i, x_i), one per row.
struct TrainingSet {
    Mat cond;  // N x cond_dim
    Mat x;     // N x z_dim
    std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
};

/// Per-feature affine standardization (c - mean) / scale.
struct CondNormalizer {
    Vec mean;
    Vec scale;

    /// Constant features get scale 1.
    static CondNormalizer fit(const Mat& cond);
    Mat apply(const Mat& cond) const;
    /// Rewrites the first layer so that net(raw) equals the old net(apply(raw)).
    void fold_into(MlpNet& net) const;
};

struct TrainBatch {
    Mat x;      // B x z_dim
    Mat cond;   // B x cond_dim
    Mat e;      // B x z_dim
    std::vector<TimePair> pairs;
    std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
};

struct TrainReport {
    std::vector<double> losses;
    std::string param_checksum;
    double wall_time_s = 0.0;
    TrainConfig config;

    nlohmann::json to_json() const;
    /// "step,loss" lines, step counted from 1.
    std::string loss_csv() const;
};

/// With probability 1 - flow_ratio returns r = t ~ U(0,1); otherwise two
/// uniforms sorted into r <= t.
TimePair sample_time_pair(Rng& rng, double flow_ratio);

/// u_tgt = v - (t - r) * d/dt u, with d/dt u the JVP along (v, 0, 1).
/// The result is a plain value: nothing differentiates through it.
/// r == t returns v unchanged.
Vec meanflow_target(const MlpNet& net, const Vec& z, const Vec& cond, TimePair pair, const Vec& v);

struct LossResult {
    double value = 0.0;
    Mat grad;  // d loss / d pred, B x dim
};

LossResult loss_l2(const Mat& pred, const Mat& tgt);
/// Per-sample weights 1 / (|d|^2 + c)^(1 - gamma) are treated as constants
/// when differentiating.
LossResult loss_adaptive(const Mat& pred, const Mat& tgt, double gamma, double c);

/// Interpolated inputs and detached targets for a batch.
struct PreparedBatch {
    BatchInput input;
    Mat target;
};
PreparedBatch prepare_batch(const MlpNet& net, const TrainBatch& batch);

/// Loss and parameter gradient for fixed targets: gradient flows only
/// through the prediction.
struct LossAndGrad {
    double loss = 0.0;
    GradBuffer grad;
};
LossAndGrad loss_and_grad(const MlpNet& net, const BatchInput& input, const Mat& target, const TrainConfig& cfg);

class AdamState {
public:
    AdamState() = default;
    explicit AdamState(const MlpNet& net);
    void apply(MlpNet& net, const GradBuffer& grad, const TrainConfig& cfg, double learn_rate);
    std::size_t step() const { return step_; }

private:
    GradBuffer m_, v_;
    std::size_t step_ = 0;
};

/// One optimizer step. Returns the loss before the update.
/// Throws DivergenceError(step_index) on a non-finite loss.
double train_step(MlpNet& net, const TrainBatch& batch, const TrainConfig& cfg, AdamState& opt,
                  std::size_t step_index = 0);

/// Draws the batch for step `step` (indices, noise, time pairs) from rng
/// streams derived from cfg.seed, so batches do not depend on earlier steps.
class BatchSampler {
public:
    BatchSampler(const TrainingSet& data, const TrainConfig& cfg);
    TrainBatch next();

private:
    const TrainingSet& data_;
    const TrainConfig& cfg_;
    Rng root_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
    std::size_t step_ = 0;
    void reshuffle();
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

struct TrainResult {
    MlpNet net;
    TrainReport report;
};

/// Full training run: cfg.steps train_steps over reshuffled minibatches.
TrainResult train(const TrainingSet& data, const TrainConfig& cfg, const ProgressFn& progress = {});

}  // namespace mf

// SPDX-License-Identifier: Apache-2.0
#include "mf/meanflow.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include "mf/io.hpp"

namespace mf {

using Eigen::Index;
using nlohmann::json;

NetShape TrainConfig::net_shape() const {
    NetShape s;
    s.z_dim = z_dim();
    s.cond_dim = cond_dim;
    s.time_embed_dim = time_embed_dim;
    s.hidden = hidden_dims;
    s.activation = activation;
    return s;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
    if (!(flow_ratio >= 0.0 && flow_ratio <= 1.0)) fail("flow_ratio must lie in [0, 1]");
    if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
    if (!(adaptive_c > 0.0)) fail("adaptive_c must be > 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (steps < 1) fail("steps must be >= 1");
    if (!(learn_rate >= 0.0) || !std::isfinite(learn_rate)) fail("learn_rate must be finite and >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
    if (chunk_h < 1) fail("chunk_h must be >= 1");
    if (act_dim < 1) fail("act_dim must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even and >= 2");
    for (auto h : hidden_dims)
        if (h < 1) fail("hidden_dims entries must be >= 1");
}

double TrainConfig::learn_rate_at(std::size_t k) const {
    if (lr_schedule == LrSchedule::constant || steps <= 1) return learn_rate;
    const double frac = static_cast<double>(std::min(k, steps) - 1) / static_cast<double>(steps - 1);
    return learn_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {
std::string schedule_name(TrainConfig::LrSchedule s) {
    return s == TrainConfig::LrSchedule::constant ? "constant" : "cosine";
}
}  // namespace

json to_json(const TrainConfig& c) {
    return json{{"flow_ratio", c.flow_ratio},   {"gamma", c.gamma},
                {"adaptive_c", c.adaptive_c},   {"batch_size", c.batch_size},
                {"steps", c.steps},             {"learn_rate", c.learn_rate},
                {"adam_beta1", c.adam_beta1},   {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},       {"seed", c.seed},
                {"chunk_h", c.chunk_h},         {"act_dim", c.act_dim},
                {"cond_dim", c.cond_dim},       {"hidden_dims", c.hidden_dims},
                {"time_embed_dim", c.time_embed_dim}, {"activation", to_string(c.activation)},
                {"lr_schedule", schedule_name(c.lr_schedule)}, {"normalize_cond", c.normalize_cond}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    static const std::set<std::string> known = {
        "flow_ratio", "gamma",   "adaptive_c", "batch_size", "steps",    "learn_rate",
        "adam_beta1", "adam_beta2", "adam_eps", "seed",      "chunk_h",  "act_dim",
        "cond_dim",   "hidden_dims", "time_embed_dim", "activation", "lr_schedule", "normalize_cond"};
    std::vector<std::string> unknown;
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) unknown.push_back(k);
    if (!unknown.empty()) {
        std::string msg = "unknown config key(s):";
        for (const auto& k : unknown) msg += " " + k;
        throw ConfigError(msg);
    }
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        get("flow_ratio", c.flow_ratio);
        get("gamma", c.gamma);
        get("adaptive_c", c.adaptive_c);
        get("batch_size", c.batch_size);
        get("steps", c.steps);
        get("learn_rate", c.learn_rate);
        get("adam_beta1", c.adam_beta1);
        get("adam_beta2", c.adam_beta2);
        get("adam_eps", c.adam_eps);
        get("seed", c.seed);
        get("chunk_h", c.chunk_h);
        get("act_dim", c.act_dim);
        get("cond_dim", c.cond_dim);
        get("hidden_dims", c.hidden_dims);
        get("time_embed_dim", c.time_embed_dim);
        get("normalize_cond", c.normalize_cond);
        if (j.contains("activation")) c.activation = activation_from_string(j.at("activation").get<std::string>());
        if (j.contains("lr_schedule")) {
            const auto name = j.at("lr_schedule").get<std::string>();
            if (name == "constant") c.lr_schedule = TrainConfig::LrSchedule::constant;
            else if (name == "cosine") c.lr_schedule = TrainConfig::LrSchedule::cosine;
            else throw ConfigError("unknown lr_schedule '" + name + "' (expected constant or cosine)");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config value has wrong type: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
    }
    return train_config_from_json(j);
}

json TrainReport::to_json() const {
    json j;
    j["config"] = mf::to_json(config);
    j["steps"] = losses.size();
    j["first_loss"] = losses.empty() ? 0.0 : losses.front();
    j["final_loss"] = losses.empty() ? 0.0 : losses.back();
    j["param_checksum"] = param_checksum;
    j["wall_time_s"] = wall_time_s;
    return j;
}

std::string TrainReport::loss_csv() const {
    std::string out = "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i)
        out += std::to_string(i + 1) + "," + format_double(losses[i]) + "\n";
    return out;
}

TimePair sample_time_pair(Rng& rng, double flow_ratio) {
    if (!(flow_ratio >= 0.0 && flow_ratio <= 1.0)) throw ContractError("flow_ratio must lie in [0, 1]");
    if (rng.uniform() < flow_ratio) {
        const double a = rng.uniform();
        const double b = rng.uniform();
        return a <= b ? TimePair{a, b} : TimePair{b, a};
    }
    const double t = rng.uniform();
    return {t, t};
}

Vec meanflow_target(const MlpNet& net, const Vec& z, const Vec& cond, TimePair pair, const Vec& v) {
    if (v.size() != z.size() || z.size() != static_cast<Index>(net.z_dim()))
        throw ContractError("meanflow_target: dimension mismatch");
    if (pair.degenerate()) return v;
    const Vec dudt = jvp(net, NetInput{z, cond, pair.r, pair.t}, v, 0.0, 1.0);
    return v - (pair.t - pair.r) * dudt;
}

namespace {

LossResult weighted_sq_loss(const Mat& pred, const Mat& tgt, const Vec* weights) {
    if (pred.rows() != tgt.rows() || pred.cols() != tgt.cols() || pred.rows() < 1)
        throw ContractError("loss: prediction/target shape mismatch");
    const Index b = pred.rows();
    const double inv_b = 1.0 / static_cast<double>(b);
    LossResult out;
    out.grad = pred - tgt;
    double sum = 0.0;
    for (Index i = 0; i < b; ++i) {
        const double w = weights ? (*weights)[i] : 1.0;
        sum += w * out.grad.row(i).squaredNorm();
        out.grad.row(i) *= w * 2.0 * inv_b;
    }
    out.value = sum * inv_b;
    return out;
}

}  // namespace

LossResult loss_l2(const Mat& pred, const Mat& tgt) {
    return weighted_sq_loss(pred, tgt, nullptr);
}

LossResult loss_adaptive(const Mat& pred, const Mat& tgt, double gamma, double c) {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("adaptive loss: gamma must lie in (0, 1]");
    if (!(c > 0.0)) throw ConfigError("adaptive loss: c must be > 0");
    if (pred.rows() != tgt.rows() || pred.cols() != tgt.cols()) throw ContractError("loss: prediction/target shape mismatch");
    Vec w(pred.rows());
    for (Index i = 0; i < pred.rows(); ++i) {
        const double sq = (pred.row(i) - tgt.row(i)).squaredNorm();
        w[i] = 1.0 / std::pow(sq + c, 1.0 - gamma);
    }
    return weighted_sq_loss(pred, tgt, &w);
}

PreparedBatch prepare_batch(const MlpNet& net, const TrainBatch& batch) {
    const Index b = static_cast<Index>(batch.size());
    if (b < 1 || batch.e.rows() != b || batch.cond.rows() != b || static_cast<Index>(batch.pairs.size()) != b)
        throw ContractError("train batch: inconsistent batch dimensions");
    if (batch.x.cols() != static_cast<Index>(net.z_dim()) || batch.e.cols() != batch.x.cols())
        throw ContractError("train batch: data dimension does not match net");

    const FlowPath path;
    PreparedBatch out;
    out.input.z.resize(b, batch.x.cols());
    out.input.cond = batch.cond;
    out.input.r.resize(b);
    out.input.t.resize(b);
    out.target.resize(b, batch.x.cols());

    std::vector<Index> mean_rows;
    for (Index i = 0; i < b; ++i) {
        const auto& p = batch.pairs[static_cast<std::size_t>(i)];
        const Vec x = batch.x.row(i).transpose();
        const Vec e = batch.e.row(i).transpose();
        out.input.z.row(i) = interpolate(path, x, e, p.t).transpose();
        out.input.r[i] = p.r;
        out.input.t[i] = p.t;
        out.target.row(i) = cond_velocity(path, x, e).transpose();
        if (!p.degenerate()) mean_rows.push_back(i);
    }
    if (mean_rows.empty()) return out;

    // JVP only for the non-degenerate rows; the others keep u_tgt = v.
    const Index m = static_cast<Index>(mean_rows.size());
    BatchInput sub;
    sub.z.resize(m, out.input.z.cols());
    sub.cond.resize(m, out.input.cond.cols());
    sub.r.resize(m);
    sub.t.resize(m);
    Mat tangent(m, out.input.z.cols());
    for (Index k = 0; k < m; ++k) {
        const Index i = mean_rows[static_cast<std::size_t>(k)];
        sub.z.row(k) = out.input.z.row(i);
        sub.cond.row(k) = out.input.cond.row(i);
        sub.r[k] = out.input.r[i];
        sub.t[k] = out.input.t[i];
        tangent.row(k) = out.target.row(i);
    }
    const Mat dudt = jvp_batch(net, sub, tangent, Vec::Zero(m), Vec::Ones(m));
    for (Index k = 0; k < m; ++k) {
        const Index i = mean_rows[static_cast<std::size_t>(k)];
        out.target.row(i) -= (sub.t[k] - sub.r[k]) * dudt.row(k);
    }
    return out;
}

LossAndGrad loss_and_grad(const MlpNet& net, const BatchInput& input, const Mat& target, const TrainConfig& cfg) {
    ForwardCache cache;
    const Mat pred = forward_batch(net, input, &cache);
    const LossResult lr = cfg.gamma == 1.0 ? loss_l2(pred, target) : loss_adaptive(pred, target, cfg.gamma, cfg.adaptive_c);
    LossAndGrad out;
    out.loss = lr.value;
    if (std::isfinite(lr.value)) out.grad = backward_batch(net, cache, lr.grad);
    return out;
}

AdamState::AdamState(const MlpNet& net) : m_(net.zero_grad()), v_(net.zero_grad()) {}

void AdamState::apply(MlpNet& net, const GradBuffer& grad, const TrainConfig& cfg, double learn_rate) {
    if (m_.layers.size() != net.layers().size()) *this = AdamState(net);
    ++step_;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        param.array() -= learn_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
    };
    auto& layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        update(layers[i].weight, m_.layers[i].weight, v_.layers[i].weight, grad.layers[i].weight);
        update(layers[i].bias, m_.layers[i].bias, v_.layers[i].bias, grad.layers[i].bias);
    }
}

double train_step(MlpNet& net, const TrainBatch& batch, const TrainConfig& cfg, AdamState& opt, std::size_t step_index) {
    const PreparedBatch prep = prepare_batch(net, batch);
    const LossAndGrad lg = loss_and_grad(net, prep.input, prep.target, cfg);
    if (!std::isfinite(lg.loss)) throw DivergenceError(step_index, "non-finite loss");
    opt.apply(net, lg.grad, cfg, cfg.learn_rate_at(step_index == 0 ? 1 : step_index));
    return lg.loss;
}

BatchSampler::BatchSampler(const TrainingSet& data, const TrainConfig& cfg)
    : data_(data), cfg_(cfg), root_(Rng(cfg.seed).derive(0xba7c4)) {
    if (data.size() == 0) throw ConfigError("training set is empty");
    order_.resize(data.size());
    reshuffle();
}

void BatchSampler::reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng shuf = root_.derive(1).derive(epoch_);
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[shuf.below(i)]);
    cursor_ = 0;
}

TrainBatch BatchSampler::next() {
    const Index b = static_cast<Index>(cfg_.batch_size);
    TrainBatch batch;
    batch.x.resize(b, data_.x.cols());
    batch.cond.resize(b, data_.cond.cols());
    batch.e.resize(b, data_.x.cols());
    batch.pairs.resize(cfg_.batch_size);
    Rng draw = root_.derive(2).derive(step_++);
    for (Index i = 0; i < b; ++i) {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        const auto row = static_cast<Index>(order_[cursor_++]);
        batch.x.row(i) = data_.x.row(row);
        batch.cond.row(i) = data_.cond.row(row);
        batch.pairs[static_cast<std::size_t>(i)] = sample_time_pair(draw, cfg_.flow_ratio);
        for (Index k = 0; k < batch.e.cols(); ++k) batch.e(i, k) = draw.gauss();
    }
    return batch;
}

CondNormalizer CondNormalizer::fit(const Mat& cond) {
    if (cond.rows() < 1) throw ConfigError("CondNormalizer: no rows");
    CondNormalizer n;
    n.mean = cond.colwise().mean().transpose();
    n.scale = (cond.rowwise() - n.mean.transpose()).array().square().colwise().mean().sqrt().transpose();
    for (Index j = 0; j < n.scale.size(); ++j)
        if (!(n.scale[j] > 1e-8)) n.scale[j] = 1.0;
    return n;
}

Mat CondNormalizer::apply(const Mat& cond) const {
    if (cond.cols() != mean.size()) throw ContractError("CondNormalizer: dimension mismatch");
    Mat out = cond.rowwise() - mean.transpose();
    for (Index j = 0; j < out.cols(); ++j) out.col(j) /= scale[j];
    return out;
}

void CondNormalizer::fold_into(MlpNet& net) const {
    const auto& s = net.shape();
    if (s.cond_dim != static_cast<std::size_t>(mean.size())) throw ContractError("CondNormalizer: dimension mismatch");
    if (s.cond_dim == 0) return;
    Layer& first = net.layers().front();
    auto wc = first.weight.middleCols(static_cast<Index>(s.z_dim), static_cast<Index>(s.cond_dim));
    for (Index j = 0; j < wc.cols(); ++j) wc.col(j) /= scale[j];
    first.bias -= wc * mean;
}

TrainResult train(const TrainingSet& data, const TrainConfig& cfg, const ProgressFn& progress) {
    cfg.validate();
    if (data.size() == 0) throw ConfigError("training set is empty");
    if (data.x.cols() != static_cast<Index>(cfg.z_dim()))
        throw ConfigError("training data has " + std::to_string(data.x.cols()) + " columns, config expects " +
                          std::to_string(cfg.z_dim()));
    if (data.cond.rows() != data.x.rows() || data.cond.cols() != static_cast<Index>(cfg.cond_dim))
        throw ConfigError("training conditions do not match cond_dim");

    const auto t0 = std::chrono::steady_clock::now();
    Rng init_rng = Rng(cfg.seed).derive(0);
    TrainResult res{MlpNet::init(cfg.net_shape(), init_rng), {}};
    AdamState opt(res.net);
    std::optional<CondNormalizer> norm;
    TrainingSet scaled;
    if (cfg.normalize_cond && cfg.cond_dim > 0) {
        norm = CondNormalizer::fit(data.cond);
        scaled = {norm->apply(data.cond), data.x};
    }
    BatchSampler sampler(norm ? scaled : data, cfg);
    res.report.losses.reserve(cfg.steps);
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        const TrainBatch batch = sampler.next();
        const double loss = train_step(res.net, batch, cfg, opt, s + 1);
        res.report.losses.push_back(loss);
        if (progress) progress(s + 1, loss);
    }
    if (norm) norm->fold_into(res.net);
    res.report.config = cfg;
    res.report.param_checksum = sha256_hex(serialize(res.net));
    res.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace mf

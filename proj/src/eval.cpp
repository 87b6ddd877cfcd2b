// SPDX-License-Identifier: Apache-2.0
#include "mf/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "mf/io.hpp"

namespace mf {

using Eigen::Index;
using nlohmann::json;

namespace {

double mean_pair_distance(const std::vector<Vec>& a, const std::vector<Vec>& b) {
    double sum = 0.0;
    for (const auto& x : a)
        for (const auto& y : b) sum += (x - y).norm();
    return sum / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

// Strict weak order on point sets so that energy_distance(a, b) and
// energy_distance(b, a) run the identical computation.
bool canonical_less(const std::vector<Vec>& a, const std::vector<Vec>& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) return a[i].size() < b[i].size();
        for (Index k = 0; k < a[i].size(); ++k)
            if (a[i][k] != b[i][k]) return a[i][k] < b[i][k];
    }
    return false;
}

double quantile(std::vector<double> v, double q) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::string fmt(double x) {
    return std::isfinite(x) ? format_double(x) : "nan";
}

Vec joined(const Vec& a, const Vec& b) {
    Vec out(a.size() + b.size());
    out << a, b;
    return out;
}

}  // namespace

double energy_distance(const std::vector<Vec>& a_in, const std::vector<Vec>& b_in) {
    if (a_in.empty() || b_in.empty()) throw ConfigError("energy_distance: both sets must be non-empty");
    const Index dim = a_in.front().size();
    for (const auto* set : {&a_in, &b_in})
        for (const auto& v : *set)
            if (v.size() != dim) throw ContractError("energy_distance: dimension mismatch");
    const bool swap = canonical_less(b_in, a_in);
    const auto& a = swap ? b_in : a_in;
    const auto& b = swap ? a_in : b_in;
    const double e = 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
    return std::max(0.0, e);
}

TimingResult time_generation(const VectorField& field, const SampleConfig& cfg, std::size_t act_dim,
                             std::size_t warmup, std::size_t reps) {
    if (reps < 3) throw ConfigError("time_generation: reps must be >= 3");
    Rng rng(cfg.seed);
    const Vec obs = Vec::Constant(static_cast<Index>(field.cond_dim()), 0.5);
    for (std::size_t i = 0; i < warmup; ++i) generate_chunk(field, obs, cfg, act_dim, rng);
    std::vector<double> times;
    times.reserve(reps);
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const ActionChunk c = generate_chunk(field, obs, cfg, act_dim, rng);
        const auto t1 = std::chrono::steady_clock::now();
        if (!c.actions.allFinite()) throw std::runtime_error("time_generation: non-finite chunk");
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    return {median(times), warmup == 0};
}

std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::flow_ratio: return "flow_ratio";
        case SweepAxis::gamma: return "gamma";
        case SweepAxis::nfe: return "nfe";
        case SweepAxis::chunk_size: return "chunk_size";
    }
    return "?";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "flow_ratio") return SweepAxis::flow_ratio;
    if (s == "gamma") return SweepAxis::gamma;
    if (s == "nfe") return SweepAxis::nfe;
    if (s == "chunk_size") return SweepAxis::chunk_size;
    throw ConfigError("unknown sweep axis '" + s + "'");
}

void SweepSpec::validate() const {
    if (values.empty()) throw ConfigError("sweep: values must be non-empty");
    if (seeds.empty()) throw ConfigError("sweep: seeds must be non-empty");
    for (double v : values) {
        const bool integral = v >= 1.0 && std::floor(v) == v;
        if ((axis == SweepAxis::nfe || axis == SweepAxis::chunk_size) && !integral)
            throw ConfigError("sweep: " + to_string(axis) + " values must be positive integers");
        if (axis == SweepAxis::flow_ratio && !(v >= 0.0 && v <= 1.0)) throw ConfigError("sweep: flow_ratio values must lie in [0, 1]");
        if (axis == SweepAxis::gamma && !(v > 0.0 && v <= 1.0)) throw ConfigError("sweep: gamma values must lie in (0, 1]");
    }
    if (axis == SweepAxis::chunk_size && task == TaskTag::gmm) throw ConfigError("sweep: chunk_size axis needs a manipulation task");
    if (sample.nfe < 1) throw ConfigError("sweep: nfe must be >= 1");
    if (rounds < 1 || trials < 1 || heldout < 1 || episodes < 1 || gmm_samples < 1)
        throw ConfigError("sweep: rounds, trials, heldout, episodes and gmm_samples must be >= 1");
    if (timing_reps < 3) throw ConfigError("sweep: timing_reps must be >= 3");
    base.validate();
}

json to_json(const SweepSpec& s) {
    return {{"axis", to_string(s.axis)},
            {"values", s.values},
            {"base", to_json(s.base)},
            {"seeds", s.seeds},
            {"task", to_string(s.task)},
            {"nfe", s.sample.nfe},
            {"mode", to_string(s.sample.mode)},
            {"episodes", s.episodes},
            {"gmm_samples", s.gmm_samples},
            {"gmm_modes", s.gmm_modes},
            {"gmm_modes_per_class", s.gmm_modes_per_class},
            {"rounds", s.rounds},
            {"trials", s.trials},
            {"max_steps", s.max_steps},
            {"heldout", s.heldout},
            {"timing_reps", s.timing_reps}};
}

SweepSpec sweep_spec_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("sweep spec must be a JSON object");
    static const std::set<std::string> known = {"axis",      "values",      "base",  "seeds",
                                                "task",      "nfe",         "mode",  "episodes",
                                                "gmm_samples", "gmm_modes", "gmm_modes_per_class",
                                                "rounds",    "trials",      "max_steps", "heldout", "timing_reps"};
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw ConfigError("unknown sweep key: " + k);
    SweepSpec s;
    try {
        s.axis = sweep_axis_from_string(j.at("axis").get<std::string>());
        s.values = j.at("values").get<std::vector<double>>();
        s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("base")) s.base = train_config_from_json(j.at("base"));
        if (j.contains("task")) s.task = task_from_string(j.at("task").get<std::string>());
        if (j.contains("nfe")) s.sample.nfe = j.at("nfe").get<std::size_t>();
        if (j.contains("mode")) s.sample.mode = sample_mode_from_string(j.at("mode").get<std::string>());
        auto get = [&](const char* k, std::size_t& f) {
            if (j.contains(k)) f = j.at(k).get<std::size_t>();
        };
        get("episodes", s.episodes);
        get("gmm_samples", s.gmm_samples);
        get("gmm_modes", s.gmm_modes);
        get("gmm_modes_per_class", s.gmm_modes_per_class);
        get("rounds", s.rounds);
        get("trials", s.trials);
        get("max_steps", s.max_steps);
        get("heldout", s.heldout);
        get("timing_reps", s.timing_reps);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("sweep spec: ") + e.what());
    }
    s.validate();
    return s;
}

double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

double iqr(std::vector<double> v) { return quantile(v, 0.75) - quantile(v, 0.25); }

std::vector<Summary> MetricReport::summarize() const {
    std::vector<double> order;
    std::map<double, std::vector<const MetricCell*>> by_value;
    for (const auto& c : cells) {
        if (!by_value.count(c.axis_value)) order.push_back(c.axis_value);
        by_value[c.axis_value].push_back(&c);
    }
    std::vector<Summary> out;
    for (double v : order) {
        std::vector<double> succ, energy, time;
        for (const auto* c : by_value[v]) {
            if (!c->ok()) continue;
            succ.push_back(c->success_pct);
            energy.push_back(c->energy_distance);
            time.push_back(c->gen_time_s);
        }
        Summary s;
        s.value = v;
        s.ok_cells = succ.size();
        s.success_median = median(succ);
        s.success_iqr = succ.empty() ? std::numeric_limits<double>::quiet_NaN() : iqr(succ);
        s.energy_median = median(energy);
        s.energy_iqr = energy.empty() ? std::numeric_limits<double>::quiet_NaN() : iqr(energy);
        s.time_median = median(time);
        out.push_back(s);
    }
    return out;
}

std::size_t MetricReport::failures() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const MetricCell& c) { return !c.ok(); }));
}

std::string MetricReport::csv(bool with_timing) const {
    std::string out = with_timing ? "axis_value,seed,success_pct,energy_distance,gen_time_s\n"
                                  : "axis_value,seed,success_pct,energy_distance\n";
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (const auto& c : cells) {
        out += fmt(c.axis_value) + "," + std::to_string(c.seed) + "," + fmt(c.ok() ? c.success_pct : nan) + "," +
               fmt(c.ok() ? c.energy_distance : nan);
        if (with_timing) out += "," + fmt(c.ok() ? c.gen_time_s : nan);
        out += "\n";
    }
    return out;
}

json MetricReport::summary_json() const {
    json rows = json::array();
    for (const auto& s : summarize()) {
        rows.push_back({{"value", s.value},
                        {"ok_cells", s.ok_cells},
                        {"success_median", s.success_median},
                        {"success_iqr", s.success_iqr},
                        {"energy_median", s.energy_median},
                        {"energy_iqr", s.energy_iqr},
                        {"gen_time_median_s", s.time_median}});
    }
    json failed = json::array();
    for (const auto& c : cells)
        if (!c.ok()) failed.push_back({{"value", c.axis_value}, {"seed", c.seed}, {"error", c.error}});
    return {{"axis", to_string(axis)}, {"summary", rows}, {"failed_cells", failed}};
}

CellMetrics evaluate_gmm(const VectorField& field, const GmmSpec& spec, const TrainingSet& heldout,
                         const SampleConfig& cfg, std::uint64_t seed) {
    const Rng root(seed);
    std::vector<Vec> gen, ref;
    std::size_t hits = 0;
    for (Index i = 0; i < heldout.x.rows(); ++i) {
        const Vec cond = heldout.cond.row(i).transpose();
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        const Vec x = sample(field, cond, cfg, rng);
        Index cls = 0;
        cond.maxCoeff(&cls);
        for (std::size_t m = 0; m < spec.modes(); ++m) {
            if (spec.class_of_mode[m] == static_cast<std::size_t>(cls) && (x - spec.means[m]).norm() <= 3.0 * spec.sigma) {
                ++hits;
                break;
            }
        }
        gen.push_back(joined(cond, x));
        ref.push_back(joined(cond, heldout.x.row(i).transpose()));
    }
    return {100.0 * static_cast<double>(hits) / static_cast<double>(heldout.x.rows()), energy_distance(gen, ref)};
}

CellMetrics evaluate_manipulation(const VectorField& field, TaskTag task, const TrainingSet& heldout,
                                  const SampleConfig& cfg, std::size_t rounds, std::size_t trials,
                                  std::size_t max_steps, std::uint64_t seed) {
    const FieldPolicy policy(field, cfg);
    const EvalResult er = eval_success(policy, task, rounds, trials, seed, 0, max_steps);
    const Rng root = Rng(seed).derive(0xed);
    std::vector<Vec> gen, ref;
    for (Index i = 0; i < heldout.x.rows(); ++i) {
        const Vec cond = heldout.cond.row(i).transpose();
        Rng rng = root.derive(static_cast<std::uint64_t>(i));
        gen.push_back(joined(cond, sample(field, cond, cfg, rng)));
        ref.push_back(joined(cond, heldout.x.row(i).transpose()));
    }
    return {er.mean_pct, energy_distance(gen, ref)};
}

TrainingSet subsample_rows(const TrainingSet& s, std::size_t n) {
    if (s.size() <= n) return s;
    TrainingSet out;
    out.cond.resize(static_cast<Index>(n), s.cond.cols());
    out.x.resize(static_cast<Index>(n), s.x.cols());
    for (std::size_t k = 0; k < n; ++k) {
        const auto row = static_cast<Index>(k * s.size() / n);
        out.cond.row(static_cast<Index>(k)) = s.cond.row(row);
        out.x.row(static_cast<Index>(k)) = s.x.row(row);
    }
    return out;
}

MetricReport run_sweep(const SweepSpec& spec, const LogFn& log) {
    spec.validate();
    MetricReport report;
    report.axis = spec.axis;
    const GmmSpec gmm = GmmSpec::circle(spec.gmm_modes, spec.gmm_modes_per_class);

    for (std::uint64_t seed : spec.seeds) {
        const Rng seed_rng(seed);
        TrainingSet gmm_train, gmm_heldout;
        std::vector<EpisodeRecord> demos, heldout_demos;
        if (spec.task == TaskTag::gmm) {
            Rng a = seed_rng.derive(10), b = seed_rng.derive(11);
            gmm_train = gen_gmm_dataset(a, spec.gmm_samples, gmm);
            gmm_heldout = gen_gmm_dataset(b, spec.heldout, gmm);
        } else {
            Rng a = seed_rng.derive(10), b = seed_rng.derive(11);
            demos = gen_demos(spec.task, a, spec.episodes);
            heldout_demos = gen_demos(spec.task, b, std::max<std::size_t>(5, spec.episodes / 5));
        }

        std::optional<MlpNet> shared;  // nfe axis: one net per seed
        for (double value : spec.values) {
            MetricCell cell;
            cell.axis_value = value;
            cell.seed = seed;
            try {
                TrainConfig cfg = spec.base;
                SampleConfig sc = spec.sample;
                sc.seed = seed;
                cfg.seed = seed;
                switch (spec.axis) {
                    case SweepAxis::flow_ratio: cfg.flow_ratio = value; break;
                    case SweepAxis::gamma: cfg.gamma = value; break;
                    case SweepAxis::nfe: sc.nfe = static_cast<std::size_t>(value); break;
                    case SweepAxis::chunk_size: cfg.chunk_h = static_cast<std::size_t>(value); break;
                }
                TrainingSet train_set, heldout;
                if (spec.task == TaskTag::gmm) {
                    cfg.chunk_h = 1;
                    cfg.act_dim = 2;
                    cfg.cond_dim = gmm.classes;
                    train_set = gmm_train;
                    heldout = gmm_heldout;
                } else {
                    cfg.act_dim = pp::kActDim;
                    cfg.cond_dim = PickPlaceState::observation_dim(spec.task);
                    train_set = chunk_dataset(demos, cfg.chunk_h);
                    heldout = subsample_rows(chunk_dataset(heldout_demos, cfg.chunk_h), spec.heldout);
                }

                const MlpNet* net = nullptr;
                MlpNet trained;
                if (spec.axis == SweepAxis::nfe && shared) {
                    net = &*shared;
                } else {
                    if (log) log("train " + to_string(spec.axis) + "=" + fmt(value) + " seed=" + std::to_string(seed));
                    trained = train(train_set, cfg).net;
                    if (spec.axis == SweepAxis::nfe) {
                        shared = trained;
                        net = &*shared;
                    } else {
                        net = &trained;
                    }
                }

                const CellMetrics m = spec.task == TaskTag::gmm
                                          ? evaluate_gmm(*net, gmm, heldout, sc, seed)
                                          : evaluate_manipulation(*net, spec.task, heldout, sc, spec.rounds, spec.trials,
                                                                  spec.max_steps, seed);
                cell.success_pct = m.success_pct;
                cell.energy_distance = m.energy_distance;
                cell.gen_time_s = time_generation(*net, sc, cfg.act_dim, 2, spec.timing_reps).median_s;
                if (log)
                    log("  " + to_string(spec.axis) + "=" + fmt(value) + " seed=" + std::to_string(seed) +
                        " success=" + fmt(cell.success_pct) + "% energy=" + fmt(cell.energy_distance));
            } catch (const std::exception& e) {
                cell.error = e.what();
                if (log) log("  cell failed: " + cell.error);
            }
            report.cells.push_back(cell);
        }
    }
    return report;
}

}  // namespace mf

// SPDX-License-Identifier: Apache-2.0
#include "mf/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "mf/io.hpp"

namespace mf {

using Eigen::Index;
using Eigen::Vector2d;
using nlohmann::json;

std::string to_string(TaskTag t) {
    switch (t) {
        case TaskTag::gmm: return "gmm";
        case TaskTag::pickplace: return "pickplace";
        case TaskTag::stacking: return "stacking";
        case TaskTag::sorting: return "sorting";
    }
    return "?";
}

TaskTag task_from_string(const std::string& s) {
    if (s == "gmm") return TaskTag::gmm;
    if (s == "pickplace") return TaskTag::pickplace;
    if (s == "stacking") return TaskTag::stacking;
    if (s == "sorting") return TaskTag::sorting;
    throw ConfigError("unknown task '" + s + "' (expected gmm, pickplace, stacking or sorting)");
}

bool is_manipulation(TaskTag t) { return t != TaskTag::gmm; }

// ---------------------------------------------------------------------------

GmmSpec GmmSpec::circle(std::size_t modes, std::size_t modes_per_class) {
    if (modes < 1 || modes_per_class < 1 || modes % modes_per_class != 0)
        throw ConfigError("gmm: modes must be a positive multiple of modes_per_class");
    GmmSpec g;
    g.classes = modes / modes_per_class;
    for (std::size_t m = 0; m < modes; ++m) {
        const double ang = 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(modes);
        g.means.emplace_back(std::cos(ang), std::sin(ang));
        g.class_of_mode.push_back(m % g.classes);
    }
    return g;
}

Vec GmmSpec::cond_for_class(std::size_t c) const {
    Vec v = Vec::Zero(static_cast<Index>(classes));
    v[static_cast<Index>(c)] = 1.0;
    return v;
}

TrainingSet gen_gmm_dataset(Rng& rng, std::size_t n, const GmmSpec& spec) {
    if (n < 1) throw ConfigError("gmm: n must be >= 1");
    if (spec.means.empty() || spec.class_of_mode.size() != spec.means.size() || spec.classes < 1)
        throw ConfigError("gmm: inconsistent mixture spec");
    TrainingSet set;
    set.cond = Mat::Zero(static_cast<Index>(n), static_cast<Index>(spec.classes));
    set.x.resize(static_cast<Index>(n), 2);
    for (Index i = 0; i < static_cast<Index>(n); ++i) {
        const auto m = static_cast<std::size_t>(rng.below(spec.modes()));
        set.cond(i, static_cast<Index>(spec.class_of_mode[m])) = 1.0;
        const double gx = rng.gauss();
        const double gy = rng.gauss();
        set.x(i, 0) = spec.means[m].x() + spec.sigma * gx;
        set.x(i, 1) = spec.means[m].y() + spec.sigma * gy;
    }
    return set;
}

TrainingSet gen_gmm_dataset(Rng& rng, std::size_t n, std::size_t modes) {
    return gen_gmm_dataset(rng, n, GmmSpec::circle(modes));
}

// ---------------------------------------------------------------------------

namespace {

std::size_t object_count(TaskTag t) {
    if (!is_manipulation(t)) throw ContractError("not a manipulation task: " + to_string(t));
    return t == TaskTag::sorting ? 2 : 1;
}

double clip(double v, double lim) {
    if (!std::isfinite(v)) return 0.0;
    return std::clamp(v, -lim, lim);
}

}  // namespace

double PickPlaceState::release_radius() const {
    return task == TaskTag::stacking ? pp::kStackReleaseRadius : pp::kReleaseRadius;
}

bool PickPlaceState::done() const {
    return std::all_of(placed.begin(), placed.end(), [](bool b) { return b; });
}

double PickPlaceState::score() const {
    const double unit = 0.5 / static_cast<double>(objects.size());
    double s = 0.0;
    for (std::size_t k = 0; k < objects.size(); ++k) {
        if (grasped[k]) s += unit;
        if (placed[k]) s += unit;
    }
    return s;
}

std::size_t PickPlaceState::observation_dim(TaskTag task) {
    const std::size_t n = object_count(task);
    return 3 + 4 * n + 2 * n;
}

Vec PickPlaceState::observation() const {
    Vec o(static_cast<Index>(observation_dim(task)));
    Index i = 0;
    o[i++] = agent.x();
    o[i++] = agent.y();
    o[i++] = gripper;
    for (std::size_t k = 0; k < objects.size(); ++k) {
        o[i++] = objects[k].x();
        o[i++] = objects[k].y();
        o[i++] = held == k ? 1.0 : 0.0;
        o[i++] = placed[k] ? 1.0 : 0.0;
    }
    for (const auto& g : goals) {
        o[i++] = g.x();
        o[i++] = g.y();
    }
    return o;
}

PickPlaceState PickPlaceState::from_observation(TaskTag task, const Vec& obs) {
    const std::size_t n = object_count(task);
    if (obs.size() != static_cast<Index>(observation_dim(task))) throw ContractError("observation dimension mismatch");
    PickPlaceState s;
    s.task = task;
    Index i = 0;
    s.agent = {obs[0], obs[1]};
    s.gripper = obs[2] >= 0.5 ? 1.0 : 0.0;
    i = 3;
    for (std::size_t k = 0; k < n; ++k) {
        s.objects.emplace_back(obs[i], obs[i + 1]);
        if (obs[i + 2] >= 0.5) s.held = k;
        s.placed.push_back(obs[i + 3] >= 0.5);
        s.grasped.push_back(s.held == k || s.placed.back());
        i += 4;
    }
    for (std::size_t k = 0; k < n; ++k, i += 2) s.goals.emplace_back(obs[i], obs[i + 1]);
    return s;
}

PickPlaceState random_start(TaskTag task, Rng& rng) {
    const std::size_t n = object_count(task);
    PickPlaceState s;
    s.task = task;
    s.agent = {rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2)};
    s.grasped.assign(n, false);
    s.placed.assign(n, false);
    if (n == 1) {
        s.objects.emplace_back(rng.uniform(0.2, 0.2 + pp::kStartRegion), rng.uniform(0.5, 0.5 + pp::kStartRegion));
        s.goals.emplace_back(0.8, 0.3);
    } else {
        Vector2d a, b;
        do {
            a = {rng.uniform(0.2, 0.2 + pp::kStartRegion), rng.uniform(0.35, 0.35 + pp::kStartRegion)};
            b = {rng.uniform(0.2, 0.2 + pp::kStartRegion), rng.uniform(0.35, 0.35 + pp::kStartRegion)};
        } while ((a - b).norm() < 0.1);
        s.objects = {a, b};
        s.goals = {Vector2d(0.8, 0.2), Vector2d(0.8, 0.8)};
    }
    return s;
}

PickPlaceState pickplace_step(const PickPlaceState& s, const Vec& a) {
    if (a.size() != static_cast<Index>(pp::kActDim)) throw ContractError("pickplace_step: action must be (dx, dy, g)");
    PickPlaceState n = s;
    n.agent.x() = std::clamp(s.agent.x() + clip(a[0], pp::kMaxMove), 0.0, 1.0);
    n.agent.y() = std::clamp(s.agent.y() + clip(a[1], pp::kMaxMove), 0.0, 1.0);
    if (n.held) n.objects[*n.held] = n.agent;

    const double cmd = a[2] >= 0.5 ? 1.0 : 0.0;
    if (s.gripper == 0.0 && cmd == 1.0) {
        n.gripper = 1.0;
        std::optional<std::size_t> best;
        double best_d = pp::kGraspRadius;
        for (std::size_t k = 0; k < n.objects.size(); ++k) {
            if (n.placed[k]) continue;
            const double d = (n.objects[k] - n.agent).norm();
            if (d <= best_d) {
                best = k;
                best_d = d;
            }
        }
        if (best) {
            n.held = best;
            n.grasped[*best] = true;
            n.objects[*best] = n.agent;
        }
    } else if (s.gripper == 1.0 && cmd == 0.0) {
        n.gripper = 0.0;
        if (n.held) {
            const std::size_t k = *n.held;
            n.held.reset();
            if ((n.objects[k] - n.goals[k]).norm() <= n.release_radius()) n.placed[k] = true;
        }
    }
    return n;
}

Vec scripted_expert(const PickPlaceState& s, Rng& noise) {
    constexpr double kArrive = 0.01;
    constexpr double kJitter = 0.005;
    Vec a = Vec::Zero(3);
    auto move_toward = [&](const Vector2d& target, double grip) {
        const Vector2d d = target - s.agent;
        const double dist = d.norm();
        const Vector2d step = dist > pp::kMaxMove ? Vector2d(d * (pp::kMaxMove / dist)) : d;
        a[0] = clip(step.x() + noise.uniform(-kJitter, kJitter), pp::kMaxMove);
        a[1] = clip(step.y() + noise.uniform(-kJitter, kJitter), pp::kMaxMove);
        a[2] = grip;
    };

    if (s.held) {
        const Vector2d& goal = s.goals[*s.held];
        if ((goal - s.agent).norm() <= kArrive) return a;  // open: release
        move_toward(goal, 1.0);
        return a;
    }
    if (s.gripper == 1.0) return a;  // closed on nothing: open first

    std::optional<std::size_t> target;
    double best = 0.0;
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
        if (s.placed[k]) continue;
        const double d = (s.objects[k] - s.agent).norm();
        if (!target || d < best) {
            target = k;
            best = d;
        }
    }
    if (!target) return a;  // finished
    if (best <= kArrive) {
        a[2] = 1.0;
        return a;
    }
    move_toward(s.objects[*target], 0.0);
    return a;
}

Vec ActionCodec::encode(const Vec& a) {
    if (a.size() != 3) throw ContractError("ActionCodec: action must have 3 entries");
    return Vec{{a[0] / pp::kMaxMove, a[1] / pp::kMaxMove, 2.0 * a[2] - 1.0}};
}

Vec ActionCodec::decode(const Vec& c) {
    if (c.size() != 3) throw ContractError("ActionCodec: code must have 3 entries");
    return Vec{{c[0] * pp::kMaxMove, c[1] * pp::kMaxMove, 0.5 * (c[2] + 1.0)}};
}

Vec ActionCodec::noop(double gripper) { return Vec{{0.0, 0.0, gripper}}; }

std::vector<EpisodeRecord> gen_demos(TaskTag task, Rng& rng, std::size_t episodes, std::size_t max_steps) {
    if (episodes < 1) throw ConfigError("gen_demos: episodes must be >= 1");
    object_count(task);
    const Rng base(rng.next_u64());
    std::vector<EpisodeRecord> out;
    out.reserve(episodes);
    for (std::size_t e = 0; e < episodes; ++e) {
        Rng ep = base.derive(e);
        Rng start_rng = ep.derive(1), noise = ep.derive(2);
        PickPlaceState s = random_start(task, start_rng);
        EpisodeRecord rec;
        rec.task = task;
        while (!s.done()) {
            if (rec.actions.size() >= max_steps)
                throw std::logic_error("scripted expert failed to finish episode " + std::to_string(e));
            const Vec a = scripted_expert(s, noise);
            rec.observations.push_back(s.observation());
            rec.actions.push_back(a);
            s = pickplace_step(s, a);
        }
        out.push_back(std::move(rec));
    }
    return out;
}

TrainingSet chunk_dataset(const std::vector<EpisodeRecord>& episodes, std::size_t chunk_h) {
    if (chunk_h < 1) throw ConfigError("chunk_h must be >= 1");
    std::size_t rows = 0;
    for (const auto& ep : episodes) rows += ep.actions.size();
    if (rows == 0 || episodes.empty()) throw ConfigError("chunk_dataset: no steps");
    const auto obs_dim = episodes.front().observations.front().size();
    TrainingSet set;
    set.cond.resize(static_cast<Index>(rows), obs_dim);
    set.x.resize(static_cast<Index>(rows), static_cast<Index>(chunk_h * pp::kActDim));
    Index row = 0;
    for (const auto& ep : episodes) {
        const std::size_t n = ep.actions.size();
        // gripper state after the last recorded action
        const double final_grip = n ? (ep.actions.back()[2] >= 0.5 ? 1.0 : 0.0) : 0.0;
        const Vec pad = ActionCodec::encode(ActionCodec::noop(final_grip));
        for (std::size_t i = 0; i < n; ++i, ++row) {
            set.cond.row(row) = ep.observations[i].transpose();
            for (std::size_t k = 0; k < chunk_h; ++k) {
                const Vec code = i + k < n ? ActionCodec::encode(ep.actions[i + k]) : pad;
                set.x.block(row, static_cast<Index>(k * pp::kActDim), 1, 3) = code.transpose();
            }
        }
    }
    return set;
}

// ---------------------------------------------------------------------------

FieldPolicy::FieldPolicy(const VectorField& field, SampleConfig cfg) : field_(field), cfg_(cfg) {
    if (field.z_dim() % pp::kActDim != 0) throw ContractError("FieldPolicy: field dimension is not a multiple of 3");
}

ActionChunk FieldPolicy::act(const Vec& obs, Rng& rng) const {
    ActionChunk c = generate_chunk(field_, obs, cfg_, pp::kActDim, rng);
    for (Index k = 0; k < c.actions.rows(); ++k) c.actions.row(k) = ActionCodec::decode(c.actions.row(k).transpose()).transpose();
    return c;
}

ActionChunk ExpertPolicy::act(const Vec& obs, Rng& rng) const {
    PickPlaceState s = PickPlaceState::from_observation(task_, obs);
    ActionChunk c;
    c.actions.resize(static_cast<Index>(chunk_h_), 3);
    for (std::size_t k = 0; k < chunk_h_; ++k) {
        const Vec a = scripted_expert(s, rng);
        c.actions.row(static_cast<Index>(k)) = a.transpose();
        s = pickplace_step(s, a);
    }
    return c;
}

RolloutResult rollout_policy(const ChunkPolicy& policy, TaskTag task, std::size_t exec_h, Rng& rng,
                             std::size_t max_steps, bool keep_trajectory) {
    const std::size_t h = policy.chunk_h();
    if (h < 1) throw ContractError("rollout: chunk_h must be >= 1");
    if (exec_h == 0) exec_h = h;
    if (exec_h > h) throw ContractError("rollout: exec_h must satisfy 1 <= exec_h <= chunk_h");
    Rng start_rng = rng.derive(1), policy_rng = rng.derive(2);
    PickPlaceState s = random_start(task, start_rng);
    RolloutResult res;
    if (keep_trajectory) res.trajectory.push_back(s);
    while (!s.done() && res.steps_used < max_steps) {
        const ActionChunk chunk = policy.act(s.observation(), policy_rng);
        ++res.replans;
        for (std::size_t k = 0; k < exec_h && !s.done() && res.steps_used < max_steps; ++k) {
            s = pickplace_step(s, chunk.actions.row(static_cast<Index>(k)).transpose());
            ++res.steps_used;
            if (keep_trajectory) res.trajectory.push_back(s);
        }
    }
    res.score = s.score();
    return res;
}

EvalResult eval_success(const ChunkPolicy& policy, TaskTag task, std::size_t rounds, std::size_t trials,
                        std::uint64_t master_seed, std::size_t exec_h, std::size_t max_steps) {
    if (rounds < 1 || trials < 1) throw ConfigError("eval: rounds and trials must be >= 1");
    const Rng master(master_seed);
    EvalResult out;
    double total = 0.0;
    for (std::size_t r = 0; r < rounds; ++r) {
        double sum = 0.0;
        for (std::size_t k = 0; k < trials; ++k) {
            Rng trial = master.derive(r * trials + k);
            sum += rollout_policy(policy, task, exec_h, trial, max_steps).score;
        }
        out.round_pct.push_back(100.0 * sum / static_cast<double>(trials));
        total += sum;
    }
    out.mean_pct = 100.0 * total / static_cast<double>(rounds * trials);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

json vec_json(const Vec& v) {
    return json(std::vector<double>(v.data(), v.data() + v.size()));
}

}  // namespace

Dataset make_dataset(TaskTag task, std::vector<EpisodeRecord> episodes, json generator) {
    if (episodes.empty()) throw ConfigError("dataset has no episodes");
    Dataset d;
    d.header.task = task;
    d.header.episodes = episodes.size();
    d.header.obs_dim = static_cast<std::size_t>(episodes.front().observations.front().size());
    d.header.act_dim = static_cast<std::size_t>(episodes.front().actions.front().size());
    for (const auto& e : episodes) d.header.steps += e.actions.size();
    d.header.generator = std::move(generator);
    d.episodes = std::move(episodes);
    return d;
}

std::string dataset_records_text(const Dataset& d) {
    std::string out;
    const std::string tag = to_string(d.header.task);
    for (std::size_t e = 0; e < d.episodes.size(); ++e) {
        const auto& ep = d.episodes[e];
        for (std::size_t i = 0; i < ep.actions.size(); ++i) {
            json rec = {{"task", tag}, {"episode", e}, {"step", i}, {"obs", vec_json(ep.observations[i])},
                        {"act", vec_json(ep.actions[i])}};
            out += rec.dump();
            out += '\n';
        }
    }
    return out;
}

json dataset_header_json(const Dataset& d) {
    return {{"format", "mfvla-dataset-v1"},  {"task", to_string(d.header.task)}, {"episodes", d.header.episodes},
            {"steps", d.header.steps},       {"obs_dim", d.header.obs_dim},      {"act_dim", d.header.act_dim},
            {"generator", d.header.generator}};
}

void write_dataset(const Dataset& d, const std::filesystem::path& records, const std::filesystem::path& header) {
    write_text(records, dataset_records_text(d));
    write_text(header, dataset_header_json(d).dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& records, const std::filesystem::path& header_path) {
    Dataset d;
    json h;
    try {
        h = json::parse(read_text(header_path));
        if (h.at("format").get<std::string>() != "mfvla-dataset-v1") throw ParseError("unsupported dataset format");
        d.header.task = task_from_string(h.at("task").get<std::string>());
        d.header.episodes = h.at("episodes").get<std::size_t>();
        d.header.steps = h.at("steps").get<std::size_t>();
        d.header.obs_dim = h.at("obs_dim").get<std::size_t>();
        d.header.act_dim = h.at("act_dim").get<std::size_t>();
        d.header.generator = h.value("generator", json::object());
    } catch (const json::exception& e) {
        throw ParseError("bad dataset header " + header_path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ParseError("bad dataset header " + header_path.string() + ": " + e.what());
    }

    std::ifstream in(records);
    if (!in) throw ParseError("cannot open " + records.string());
    std::string line;
    std::size_t lineno = 0;
    const std::string tag = to_string(d.header.task);
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fail = [&](const std::string& m) {
            throw ParseError(records.string() + ":" + std::to_string(lineno) + ": " + m);
        };
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            fail(e.what());
        }
        try {
            if (rec.at("task").get<std::string>() != tag) fail("task tag differs from header");
            const auto ep = rec.at("episode").get<std::size_t>();
            const auto step = rec.at("step").get<std::size_t>();
            const auto obs = rec.at("obs").get<std::vector<double>>();
            const auto act = rec.at("act").get<std::vector<double>>();
            if (obs.size() != d.header.obs_dim)
                fail("obs has " + std::to_string(obs.size()) + " entries, header says " + std::to_string(d.header.obs_dim));
            if (act.size() != d.header.act_dim)
                fail("act has " + std::to_string(act.size()) + " entries, header says " + std::to_string(d.header.act_dim));
            if (ep == d.episodes.size()) {
                if (step != 0) fail("episode must start at step 0");
                d.episodes.push_back({d.header.task, {}, {}});
            } else if (ep + 1 != d.episodes.size()) {
                fail("episode ids must be contiguous");
            }
            auto& cur = d.episodes.back();
            if (step != cur.actions.size()) fail("step ids must be consecutive");
            cur.observations.push_back(Eigen::Map<const Vec>(obs.data(), static_cast<Index>(obs.size())));
            cur.actions.push_back(Eigen::Map<const Vec>(act.data(), static_cast<Index>(act.size())));
        } catch (const json::exception& e) {
            fail(e.what());
        }
    }
    std::size_t steps = 0;
    for (const auto& e : d.episodes) steps += e.actions.size();
    if (d.episodes.size() != d.header.episodes || steps != d.header.steps)
        throw ParseError("dataset record counts do not match header");
    return d;
}

Dataset gmm_as_dataset(const TrainingSet& set, json generator) {
    std::vector<EpisodeRecord> eps;
    eps.reserve(set.size());
    for (Index i = 0; i < set.x.rows(); ++i)
        eps.push_back({TaskTag::gmm, {set.cond.row(i).transpose()}, {set.x.row(i).transpose()}});
    return make_dataset(TaskTag::gmm, std::move(eps), std::move(generator));
}

TrainingSet training_set(const Dataset& d, std::size_t chunk_h) {
    if (is_manipulation(d.header.task)) return chunk_dataset(d.episodes, chunk_h);
    if (chunk_h != 1) throw ConfigError("gmm datasets require chunk_h = 1");
    TrainingSet set;
    set.cond.resize(static_cast<Index>(d.episodes.size()), static_cast<Index>(d.header.obs_dim));
    set.x.resize(static_cast<Index>(d.episodes.size()), static_cast<Index>(d.header.act_dim));
    for (std::size_t i = 0; i < d.episodes.size(); ++i) {
        set.cond.row(static_cast<Index>(i)) = d.episodes[i].observations.front().transpose();
        set.x.row(static_cast<Index>(i)) = d.episodes[i].actions.front().transpose();
    }
    return set;
}

}  // namespace mf

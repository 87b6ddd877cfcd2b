// SPDX-License-Identifier: Apache-2.0
#include "mf/cli.hpp"

#include <chrono>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "mf/eval.hpp"
#include "mf/io.hpp"

namespace mf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

json Manifest::to_json() const {
    return json{{"command", command},       {"replay", replay},       {"config", config},
                {"seed", seed},             {"artifacts", artifacts}, {"inputs", inputs},
                {"tool_version", tool_version}, {"timestamp", timestamp}};
}

Manifest Manifest::from_json(const json& j) {
    try {
        Manifest m;
        m.command = j.at("command").get<std::string>();
        m.replay = j.at("replay").get<std::vector<std::string>>();
        m.config = j.value("config", json::object());
        m.seed = j.value("seed", std::uint64_t{0});
        m.artifacts = j.value("artifacts", json::object());
        m.inputs = j.value("inputs", json::object());
        m.tool_version = j.value("tool_version", std::string{});
        m.timestamp = j.value("timestamp", std::string{});
        return m;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed manifest: ") + e.what());
    }
}

Manifest Manifest::load(const fs::path& path) {
    try {
        return from_json(json::parse(read_text(path)));
    } catch (const json::parse_error& e) {
        throw ParseError("cannot parse manifest " + path.string() + ": " + e.what());
    }
}

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

json file_entry(const fs::path& p) { return json{{"path", p.string()}, {"sha256", file_sha256(p)}}; }

// Checksum taken over a timing-free rendering of the file.
json text_entry(const fs::path& p, const std::string& canonical) {
    return json{{"path", p.string()}, {"sha256", sha256_hex(canonical)}, {"excludes", "timing"}};
}

void prepare_out(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
}

void write_manifest(const fs::path& dir, Manifest m) {
    m.timestamp = utc_now();
    write_text(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

struct DataPaths {
    fs::path records, header;
};

DataPaths data_paths(const fs::path& dir) { return {dir / "dataset.jsonl", dir / "dataset.header.json"}; }

Dataset load_dataset_dir(const fs::path& dir) {
    const auto p = data_paths(dir);
    if (!fs::exists(p.records) || !fs::exists(p.header))
        throw std::runtime_error("no dataset in " + dir.string() + " (expected dataset.jsonl and dataset.header.json)");
    return read_dataset(p.records, p.header);
}

MlpNet load_ckpt(const fs::path& p) {
    if (!fs::exists(p)) throw std::runtime_error("checkpoint not found: " + p.string());
    return load_checkpoint(p);
}

Vec parse_vec(const std::string& text) {
    std::vector<double> vals;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            vals.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("not a number: '" + item + "'");
        }
    }
    Vec v(static_cast<Eigen::Index>(vals.size()));
    for (std::size_t i = 0; i < vals.size(); ++i) v[static_cast<Eigen::Index>(i)] = vals[i];
    return v;
}

std::string join_vec(const Vec& v) {
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
    return s;
}

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string config;
};

std::uint64_t seed_or(const Globals& g, std::uint64_t fallback) { return g.seed.value_or(fallback); }

fs::path require_out(const Globals& g) {
    if (g.out.empty()) throw UsageError("--out is required");
    return g.out;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string task = "pickplace";
    std::size_t episodes = 100;
    std::size_t modes = 4;
    std::size_t modes_per_class = 2;
};

int cmd_gen_data(const Globals& g, const GenDataArgs& a, std::ostream& out) {
    const TaskTag task = task_from_string(a.task);
    if (a.episodes < 1) throw UsageError("--episodes must be >= 1");
    const fs::path dir = require_out(g);
    const std::uint64_t seed = seed_or(g, 0);
    Rng rng(seed);
    json gen{{"seed", seed}, {"episodes", a.episodes}};
    Dataset d;
    if (task == TaskTag::gmm) {
        const GmmSpec spec = GmmSpec::circle(a.modes, a.modes_per_class);
        gen["modes"] = a.modes;
        gen["modes_per_class"] = a.modes_per_class;
        d = gmm_as_dataset(gen_gmm_dataset(rng, a.episodes, spec), gen);
    } else {
        d = make_dataset(task, gen_demos(task, rng, a.episodes), gen);
    }
    prepare_out(dir);
    const auto p = data_paths(dir);
    write_dataset(d, p.records, p.header);

    Manifest m;
    m.command = "gen-data";
    m.seed = seed;
    m.config = json{{"task", a.task},
                    {"episodes", a.episodes},
                    {"modes", a.modes},
                    {"modes_per_class", a.modes_per_class}};
    m.replay = {"gen-data",  "--task",  a.task, "--episodes", std::to_string(a.episodes), "--modes",
                std::to_string(a.modes), "--modes-per-class", std::to_string(a.modes_per_class), "--seed",
                std::to_string(seed)};
    m.artifacts["dataset"] = file_entry(p.records);
    m.artifacts["dataset_header"] = file_entry(p.header);
    write_manifest(dir, m);
    out << "wrote " << d.header.episodes << " episodes, " << d.header.steps << " steps, obs_dim " << d.header.obs_dim
        << ", act_dim " << d.header.act_dim << " to " << dir.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::optional<double> flow_ratio, gamma, learn_rate;
    std::optional<std::size_t> steps, batch_size, chunk_h, time_embed_dim;
    std::optional<std::vector<std::size_t>> hidden_dims;
    std::optional<std::string> lr_schedule, activation;
    std::size_t log_every = 0;
};

int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out) {
    const fs::path dir = require_out(g);
    if (a.data.empty()) throw UsageError("--data is required");
    const Dataset d = load_dataset_dir(a.data);

    TrainConfig cfg = g.config.empty() ? TrainConfig{} : load_train_config(g.config);
    json overrides = json::object();
    if (a.flow_ratio) overrides["flow_ratio"] = *a.flow_ratio;
    if (a.gamma) overrides["gamma"] = *a.gamma;
    if (a.learn_rate) overrides["learn_rate"] = *a.learn_rate;
    if (a.steps) overrides["steps"] = *a.steps;
    if (a.batch_size) overrides["batch_size"] = *a.batch_size;
    if (a.chunk_h) overrides["chunk_h"] = *a.chunk_h;
    if (a.time_embed_dim) overrides["time_embed_dim"] = *a.time_embed_dim;
    if (a.hidden_dims) overrides["hidden_dims"] = *a.hidden_dims;
    if (a.lr_schedule) overrides["lr_schedule"] = *a.lr_schedule;
    if (a.activation) overrides["activation"] = *a.activation;
    if (g.seed) overrides["seed"] = *g.seed;
    overrides["cond_dim"] = d.header.obs_dim;
    overrides["act_dim"] = d.header.act_dim;
    if (d.header.task == TaskTag::gmm) overrides["chunk_h"] = 1;
    cfg = train_config_from_json(overrides, cfg);

    const TrainingSet set = training_set(d, cfg.chunk_h);
    ProgressFn progress;
    if (a.log_every > 0)
        progress = [&](std::size_t step, double loss) {
            if (step % a.log_every == 0) out << "step " << step << " loss " << format_double(loss) << "\n";
        };
    const TrainResult res = train(set, cfg, progress);

    prepare_out(dir);
    const fs::path ckpt = dir / "ckpt.bin", loss = dir / "loss.csv", cfg_path = dir / "config.json",
                   report = dir / "train_report.json";
    save_checkpoint(res.net, ckpt);
    write_text(loss, res.report.loss_csv());
    write_text(cfg_path, to_json(cfg).dump(2) + "\n");
    write_text(report, res.report.to_json().dump(2) + "\n");

    const auto dp = data_paths(a.data);
    Manifest m;
    m.command = "train";
    m.seed = cfg.seed;
    m.config = to_json(cfg);
    m.replay = {"train", "--data", a.data, "--config", cfg_path.string()};
    m.inputs["dataset"] = file_entry(dp.records);
    m.inputs["dataset_header"] = file_entry(dp.header);
    m.artifacts["checkpoint"] = file_entry(ckpt);
    m.artifacts["loss"] = file_entry(loss);
    write_manifest(dir, m);
    out << "trained " << cfg.steps << " steps, final loss " << format_double(res.report.losses.back())
        << ", checkpoint " << ckpt.string() << " (sha256 " << res.report.param_checksum << ")\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string ckpt;
    std::string cond;
    std::size_t nfe = 1;
    std::string mode = "meanflow";
    std::size_t count = 1;
};

int cmd_sample(const Globals& g, const SampleArgs& a, std::ostream& out) {
    if (a.ckpt.empty()) throw UsageError("--ckpt is required");
    if (a.nfe < 1) throw UsageError("--nfe must be >= 1");
    if (a.count < 1) throw UsageError("--count must be >= 1");
    const MlpNet net = load_ckpt(a.ckpt);
    const Vec cond = a.cond.empty() ? Vec::Zero(static_cast<Eigen::Index>(net.cond_dim())) : parse_vec(a.cond);
    if (cond.size() != static_cast<Eigen::Index>(net.cond_dim()))
        throw UsageError("--cond has " + std::to_string(cond.size()) + " values, checkpoint expects " +
                         std::to_string(net.cond_dim()));
    const std::uint64_t seed = seed_or(g, 0);
    const SampleConfig sc{a.nfe, sample_mode_from_string(a.mode), seed};
    const Rng root(seed);
    std::string text;
    for (std::size_t i = 0; i < a.count; ++i) {
        Rng rng = root.derive(i);
        text += join_vec(sample(net, cond, sc, rng)) + "\n";
    }
    if (g.out.empty()) {
        out << text;
        return kOk;
    }
    const fs::path dir = g.out;
    prepare_out(dir);
    const fs::path samples = dir / "samples.csv";
    write_text(samples, text);
    Manifest m;
    m.command = "sample";
    m.seed = seed;
    m.config = json{{"nfe", a.nfe}, {"mode", a.mode}, {"count", a.count}, {"cond", a.cond}};
    m.replay = {"sample", "--ckpt", a.ckpt, "--nfe", std::to_string(a.nfe), "--mode", a.mode, "--count",
                std::to_string(a.count), "--seed", std::to_string(seed)};
    if (!a.cond.empty()) {
        m.replay.push_back("--cond");
        m.replay.push_back(a.cond);
    }
    m.inputs["checkpoint"] = file_entry(a.ckpt);
    m.artifacts["samples"] = file_entry(samples);
    write_manifest(dir, m);
    out << "wrote " << a.count << " samples to " << samples.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string task = "pickplace";
    std::vector<std::size_t> nfe{1};
    std::string mode = "meanflow";
    std::string data;
    std::size_t rounds = 10, trials = 20, max_steps = 200, heldout = 500, timing_reps = 20;
    std::size_t modes = 4, modes_per_class = 2;
};

int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
    if (a.ckpt.empty()) throw UsageError("--ckpt is required");
    const fs::path dir = require_out(g);
    const TaskTag task = task_from_string(a.task);
    const SampleMode mode = sample_mode_from_string(a.mode);
    for (auto n : a.nfe)
        if (n < 1) throw UsageError("--nfe values must be >= 1");
    if (a.timing_reps < 3) throw UsageError("--timing-reps must be >= 3");
    const MlpNet net = load_ckpt(a.ckpt);
    const std::uint64_t seed = seed_or(g, 0);
    const Rng seed_rng(seed);

    std::optional<GmmSpec> gmm;
    TrainingSet heldout;
    std::size_t act_dim = pp::kActDim;
    if (task == TaskTag::gmm) {
        gmm = GmmSpec::circle(a.modes, a.modes_per_class);
        if (net.cond_dim() != gmm->classes || net.z_dim() != 2)
            throw UsageError("checkpoint does not match a " + std::to_string(gmm->classes) + "-class gmm");
        act_dim = 2;
        if (!a.data.empty()) {
            heldout = subsample_rows(training_set(load_dataset_dir(a.data), 1), a.heldout);
        } else {
            Rng r = seed_rng.derive(11);
            heldout = gen_gmm_dataset(r, a.heldout, *gmm);
        }
    } else {
        if (net.cond_dim() != PickPlaceState::observation_dim(task) || net.z_dim() % pp::kActDim != 0)
            throw UsageError("checkpoint does not match task " + a.task);
        const std::size_t h = net.z_dim() / pp::kActDim;
        if (!a.data.empty()) {
            heldout = subsample_rows(training_set(load_dataset_dir(a.data), h), a.heldout);
        } else {
            Rng r = seed_rng.derive(11);
            heldout = subsample_rows(chunk_dataset(gen_demos(task, r, 20), h), a.heldout);
        }
    }

    MetricReport report;
    report.axis = SweepAxis::nfe;
    for (std::size_t nfe : a.nfe) {
        const SampleConfig sc{nfe, mode, seed};
        const CellMetrics cm = gmm ? evaluate_gmm(net, *gmm, heldout, sc, seed)
                                   : evaluate_manipulation(net, task, heldout, sc, a.rounds, a.trials, a.max_steps, seed);
        MetricCell cell;
        cell.axis_value = static_cast<double>(nfe);
        cell.seed = seed;
        cell.success_pct = cm.success_pct;
        cell.energy_distance = cm.energy_distance;
        cell.gen_time_s = time_generation(net, sc, act_dim, 2, a.timing_reps).median_s;
        report.cells.push_back(cell);
        out << "nfe " << nfe << " (" << a.mode << "): success " << format_double(cell.success_pct) << "%, energy "
            << format_double(cell.energy_distance) << ", " << format_double(cell.gen_time_s) << " s/chunk\n";
    }

    prepare_out(dir);
    const fs::path csv = dir / "report.csv", summary = dir / "summary.json";
    write_text(csv, report.csv(true));
    write_text(summary, report.summary_json().dump(2) + "\n");
    Manifest m;
    m.command = "eval";
    m.seed = seed;
    m.config = json{{"task", a.task},       {"nfe", a.nfe},         {"mode", a.mode},
                    {"rounds", a.rounds},   {"trials", a.trials},   {"max_steps", a.max_steps},
                    {"heldout", a.heldout}, {"modes", a.modes},     {"modes_per_class", a.modes_per_class},
                    {"timing_reps", a.timing_reps}, {"data", a.data}};
    m.replay = {"eval", "--ckpt", a.ckpt, "--task", a.task, "--mode", a.mode, "--rounds", std::to_string(a.rounds),
                "--trials", std::to_string(a.trials), "--max-steps", std::to_string(a.max_steps), "--heldout",
                std::to_string(a.heldout), "--modes", std::to_string(a.modes), "--modes-per-class",
                std::to_string(a.modes_per_class), "--timing-reps", std::to_string(a.timing_reps), "--seed",
                std::to_string(seed)};
    for (auto n : a.nfe) {
        m.replay.push_back("--nfe");
        m.replay.push_back(std::to_string(n));
    }
    if (!a.data.empty()) {
        m.replay.push_back("--data");
        m.replay.push_back(a.data);
    }
    m.inputs["checkpoint"] = file_entry(a.ckpt);
    m.artifacts["report"] = text_entry(csv, report.csv(false));
    write_manifest(dir, m);
    return kOk;
}

// ---------------------------------------------------------------------------

int cmd_sweep(const Globals& g, std::ostream& out) {
    if (g.config.empty()) throw UsageError("sweep needs --config <sweep spec>");
    const fs::path dir = require_out(g);
    json j;
    try {
        j = json::parse(read_text(g.config));
    } catch (const json::parse_error& e) {
        throw ConfigError("cannot parse sweep spec " + g.config + ": " + e.what());
    }
    SweepSpec spec = sweep_spec_from_json(j);
    if (g.seed) spec.seeds = {*g.seed};
    spec.validate();

    prepare_out(dir);
    const fs::path spec_path = dir / "sweep.json";
    write_text(spec_path, to_json(spec).dump(2) + "\n");
    const MetricReport report = run_sweep(spec, [&](const std::string& line) { out << line << "\n"; });
    const fs::path csv = dir / "report.csv", summary = dir / "summary.json";
    write_text(csv, report.csv(true));
    write_text(summary, report.summary_json().dump(2) + "\n");

    Manifest m;
    m.command = "sweep";
    m.seed = spec.seeds.front();
    m.config = to_json(spec);
    m.replay = {"sweep", "--config", spec_path.string()};
    m.artifacts["report"] = text_entry(csv, report.csv(false));
    write_manifest(dir, m);
    for (const auto& s : report.summarize())
        out << to_string(spec.axis) << "=" << format_double(s.value) << ": success median "
            << format_double(s.success_median) << "% (IQR " << format_double(s.success_iqr) << "), energy median "
            << format_double(s.energy_median) << "\n";
    if (report.failures() > 0) {
        out << report.failures() << " cell(s) failed; see " << summary.string() << "\n";
        return kPartial;
    }
    return kOk;
}

// ---------------------------------------------------------------------------

int cmd_replay(const Globals& g, const std::string& manifest_path, std::ostream& out, std::ostream& err) {
    if (manifest_path.empty()) throw UsageError("--manifest is required");
    const fs::path dir = require_out(g);
    const Manifest orig = Manifest::load(manifest_path);
    for (const auto& [name, entry] : orig.inputs.items()) {
        const fs::path p = entry.at("path").get<std::string>();
        if (!fs::exists(p) || file_sha256(p) != entry.at("sha256").get<std::string>()) {
            err << "input " << name << " (" << p.string() << ") is missing or changed\n";
            return kFailure;
        }
    }
    std::vector<std::string> args = orig.replay;
    args.push_back("--out");
    args.push_back(dir.string());
    std::ostringstream sink;
    const int code = run(args, sink, err);
    if (code != kOk && code != kPartial) return code;
    const Manifest again = Manifest::load(dir / "manifest.json");
    bool same = true;
    for (const auto& [name, entry] : orig.artifacts.items()) {
        const auto want = entry.at("sha256").get<std::string>();
        const bool ok = again.artifacts.contains(name) && again.artifacts.at(name).at("sha256") == want;
        out << (ok ? "match    " : "MISMATCH ") << name << " " << want << "\n";
        same = same && ok;
    }
    return same ? kOk : kFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"MeanFlow action-chunk generation toolkit", "mfvla"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    Globals g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Master seed");
    app.add_option("--out", g.out, "Run directory");
    app.add_option("--config", g.config, "Config file (train config or sweep spec)");

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "Generate a demonstration dataset");
    gen->fallthrough();
    gen->add_option("--task", gd.task, "gmm, pickplace, stacking or sorting");
    gen->add_option("--episodes", gd.episodes, "Episodes (samples for gmm)");
    gen->add_option("--modes", gd.modes, "gmm: mixture modes");
    gen->add_option("--modes-per-class", gd.modes_per_class, "gmm: modes per condition");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train a MeanFlow policy");
    tr->fallthrough();
    tr->add_option("--data", ta.data, "Dataset directory");
    tr->add_option("--flow-ratio", ta.flow_ratio);
    tr->add_option("--gamma", ta.gamma);
    tr->add_option("--learn-rate", ta.learn_rate);
    tr->add_option("--steps", ta.steps);
    tr->add_option("--batch-size", ta.batch_size);
    tr->add_option("--chunk-h", ta.chunk_h);
    tr->add_option("--time-embed-dim", ta.time_embed_dim);
    tr->add_option("--hidden-dims", ta.hidden_dims)->delimiter(',');
    tr->add_option("--lr-schedule", ta.lr_schedule, "constant or cosine");
    tr->add_option("--activation", ta.activation, "tanh or gelu");
    tr->add_option("--log-every", ta.log_every, "Print the loss every N steps");

    SampleArgs sa;
    auto* smp = app.add_subcommand("sample", "Draw samples from a checkpoint");
    smp->fallthrough();
    smp->add_option("--ckpt", sa.ckpt);
    smp->add_option("--cond", sa.cond, "Comma-separated condition vector");
    smp->add_option("--nfe", sa.nfe);
    smp->add_option("--mode", sa.mode, "meanflow or euler_fm");
    smp->add_option("--count", sa.count);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    ev->fallthrough();
    ev->add_option("--ckpt", ea.ckpt);
    ev->add_option("--task", ea.task);
    ev->add_option("--nfe", ea.nfe, "Repeatable; one report row each");
    ev->add_option("--mode", ea.mode);
    ev->add_option("--data", ea.data, "Held-out dataset directory");
    ev->add_option("--rounds", ea.rounds);
    ev->add_option("--trials", ea.trials);
    ev->add_option("--max-steps", ea.max_steps);
    ev->add_option("--heldout", ea.heldout);
    ev->add_option("--timing-reps", ea.timing_reps);
    ev->add_option("--modes", ea.modes);
    ev->add_option("--modes-per-class", ea.modes_per_class);

    auto* sw = app.add_subcommand("sweep", "Run an ablation sweep from --config");
    sw->fallthrough();

    std::string manifest;
    auto* rp = app.add_subcommand("replay", "Re-run a manifest and compare checksums");
    rp->fallthrough();
    rp->add_option("--manifest", manifest);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << "\n";
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }
    if (seed_opt->count() > 0) g.seed = seed;

    try {
        if (*gen) return cmd_gen_data(g, gd, out);
        if (*tr) return cmd_train(g, ta, out);
        if (*smp) return cmd_sample(g, sa, out);
        if (*ev) return cmd_eval(g, ea, out);
        if (*sw) return cmd_sweep(g, out);
        if (*rp) return cmd_replay(g, manifest, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kUsage;
}

}  // namespace mf::cli

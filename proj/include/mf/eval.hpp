// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mf/meanflow.hpp"
#include "mf/sampler.hpp"
#include "mf/tasks.hpp"

namespace mf {

/// V-statistic energy distance 2 E|a-b| - E|a-a'| - E|b-b'| over all pairs.
/// Exactly symmetric in its arguments; clamped at 0.
double energy_distance(const std::vector<Vec>& a, const std::vector<Vec>& b);

struct TimingResult {
    double median_s = 0.0;
    bool warmup_flagged = false;  // true when warmup == 0
};

/// Median wall time of generate_chunk over `reps` calls after `warmup`
/// discarded calls. reps >= 3.
TimingResult time_generation(const VectorField& field, const SampleConfig& cfg, std::size_t act_dim,
                             std::size_t warmup, std::size_t reps);

enum class SweepAxis { flow_ratio, gamma, nfe, chunk_size };
std::string to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(const std::string& s);

struct SweepSpec {
    SweepAxis axis = SweepAxis::nfe;
    std::vector<double> values;
    TrainConfig base;
    std::vector<std::uint64_t> seeds;
    TaskTag task = TaskTag::pickplace;

    SampleConfig sample;        // nfe/mode used when the axis does not override them
    std::size_t episodes = 100; // demonstrations per seed (manipulation tasks)
    std::size_t gmm_samples = 4000;
    std::size_t gmm_modes = 4;
    std::size_t gmm_modes_per_class = 2;
    std::size_t rounds = 10;
    std::size_t trials = 20;
    std::size_t max_steps = 200;
    std::size_t heldout = 500;  // samples for the energy distance
    std::size_t timing_reps = 20;

    void validate() const;
};

nlohmann::json to_json(const SweepSpec& s);
/// Unknown keys are a ConfigError; "base" is parsed as a train config.
SweepSpec sweep_spec_from_json(const nlohmann::json& j);

struct MetricCell {
    double axis_value = 0.0;
    std::uint64_t seed = 0;
    double success_pct = 0.0;
    double energy_distance = 0.0;
    double gen_time_s = 0.0;
    std::string error;  // empty when the cell completed
    bool ok() const { return error.empty(); }
};

struct Summary {
    double value = 0.0;
    double success_median = 0.0, success_iqr = 0.0;
    double energy_median = 0.0, energy_iqr = 0.0;
    double time_median = 0.0;
    std::size_t ok_cells = 0;
};

struct MetricReport {
    SweepAxis axis = SweepAxis::nfe;
    std::vector<MetricCell> cells;

    std::vector<Summary> summarize() const;
    std::size_t failures() const;
    /// axis_value,seed,success_pct,energy_distance,gen_time_s
    std::string csv(bool with_timing = true) const;
    nlohmann::json summary_json() const;
};

double median(std::vector<double> v);
/// Interquartile range with linear interpolation between order statistics.
double iqr(std::vector<double> v);

/// Success and sample-quality metrics of one trained net.
struct CellMetrics {
    double success_pct = 0.0;
    double energy_distance = 0.0;
};

/// GMM success: percentage of generated samples within 3 sigma of a mode of
/// their own class.
CellMetrics evaluate_gmm(const VectorField& field, const GmmSpec& spec, const TrainingSet& heldout,
                         const SampleConfig& cfg, std::uint64_t seed);
/// Manipulation: eval_success percentage and chunk energy distance against
/// held-out demonstration chunks.
CellMetrics evaluate_manipulation(const VectorField& field, TaskTag task, const TrainingSet& heldout,
                                  const SampleConfig& cfg, std::size_t rounds, std::size_t trials,
                                  std::size_t max_steps, std::uint64_t seed);

/// n evenly spaced rows (all rows when n >= size).
TrainingSet subsample_rows(const TrainingSet& s, std::size_t n);

using LogFn = std::function<void(const std::string&)>;

MetricReport run_sweep(const SweepSpec& spec, const LogFn& log = {});

}  // namespace mf

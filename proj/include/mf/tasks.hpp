// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mf/core.hpp"
#include "mf/meanflow.hpp"
#include "mf/sampler.hpp"

namespace mf {

enum class TaskTag { gmm, pickplace, stacking, sorting };

std::string to_string(TaskTag t);
TaskTag task_from_string(const std::string& s);
bool is_manipulation(TaskTag t);

// ---------------------------------------------------------------------------
// Conditional Gaussian mixture in 2D

struct GmmSpec {
    std::vector<Eigen::Vector2d> means;
    std::vector<std::size_t> class_of_mode;  // which condition each mode belongs to
    std::size_t classes = 1;
    double sigma = 0.05;

    /// `modes` means on the unit circle; mode m belongs to class m % classes,
    /// so each class owns modes_per_class evenly interleaved modes.
    static GmmSpec circle(std::size_t modes, std::size_t modes_per_class = 1);
    std::size_t modes() const { return means.size(); }
    Vec cond_for_class(std::size_t c) const;
};

/// n pairs (cond = one-hot class, x ~ N(mu_mode, sigma^2 I)), modes drawn
/// uniformly.
TrainingSet gen_gmm_dataset(Rng& rng, std::size_t n, const GmmSpec& spec);
TrainingSet gen_gmm_dataset(Rng& rng, std::size_t n, std::size_t modes);

// ---------------------------------------------------------------------------
// Point-mass pick-and-place

namespace pp {
inline constexpr double kMaxMove = 0.05;
inline constexpr double kGraspRadius = 0.03;
inline constexpr double kReleaseRadius = 0.05;
inline constexpr double kStackReleaseRadius = 0.02;
inline constexpr double kStartRegion = 0.3;  // side of the randomization square
inline constexpr std::size_t kActDim = 3;    // dx, dy, gripper
}  // namespace pp

struct PickPlaceState {
    TaskTag task = TaskTag::pickplace;
    Eigen::Vector2d agent{0.1, 0.1};
    double gripper = 0.0;  // 0 open, 1 closed
    std::vector<Eigen::Vector2d> objects;
    std::vector<Eigen::Vector2d> goals;  // goal k receives object k
    std::optional<std::size_t> held;
    std::vector<bool> grasped;  // ever grasped, for partial credit
    std::vector<bool> placed;

    double release_radius() const;
    bool done() const;
    /// pickplace/stacking: 0.5 grasp + 0.5 place; sorting: 0.25 per grasp
    /// and 0.25 per correct match.
    double score() const;
    /// agent(2), gripper, per object (x, y, held, placed), per goal (x, y).
    Vec observation() const;
    static PickPlaceState from_observation(TaskTag task, const Vec& obs);
    static std::size_t observation_dim(TaskTag task);
};

/// Randomized start: objects inside a kStartRegion-sized square.
PickPlaceState random_start(TaskTag task, Rng& rng);

/// Deterministic transition. Motion is clipped to +-kMaxMove per axis and the
/// agent clamped to the unit square; gripper command thresholded at 0.5.
PickPlaceState pickplace_step(const PickPlaceState& s, const Vec& action);

/// Proportional controller toward the current subgoal with U(+-0.005)
/// jitter on the motion.
Vec scripted_expert(const PickPlaceState& s, Rng& noise);

/// Maps raw actions (dx, dy, g) to a unit-scale space for learning and back.
struct ActionCodec {
    static Vec encode(const Vec& action);
    static Vec decode(const Vec& code);
    static Vec noop(double gripper);
};

struct EpisodeRecord {
    TaskTag task = TaskTag::pickplace;
    std::vector<Vec> observations;
    std::vector<Vec> actions;  // raw (dx, dy, g)
};

std::vector<EpisodeRecord> gen_demos(TaskTag task, Rng& rng, std::size_t episodes, std::size_t max_steps = 400);

/// Sliding-window chunk dataset: for step i, cond = obs_i and x = encoded
/// actions i .. i+H-1, padded at the episode end with the terminal no-op.
TrainingSet chunk_dataset(const std::vector<EpisodeRecord>& episodes, std::size_t chunk_h);

// ---------------------------------------------------------------------------
// Closed-loop execution

class ChunkPolicy {
public:
    virtual ~ChunkPolicy() = default;
    virtual std::size_t chunk_h() const = 0;
    /// Raw actions, chunk_h x 3.
    virtual ActionChunk act(const Vec& obs, Rng& rng) const = 0;
};

/// Samples encoded chunks from a field and decodes them.
class FieldPolicy final : public ChunkPolicy {
public:
    FieldPolicy(const VectorField& field, SampleConfig cfg);
    std::size_t chunk_h() const override { return field_.z_dim() / pp::kActDim; }
    ActionChunk act(const Vec& obs, Rng& rng) const override;

private:
    const VectorField& field_;
    SampleConfig cfg_;
};

/// The scripted expert, rolled forward in a private copy of the simulator
/// to fill a chunk.
class ExpertPolicy final : public ChunkPolicy {
public:
    ExpertPolicy(TaskTag task, std::size_t chunk_h) : task_(task), chunk_h_(chunk_h) {}
    std::size_t chunk_h() const override { return chunk_h_; }
    ActionChunk act(const Vec& obs, Rng& rng) const override;

private:
    TaskTag task_;
    std::size_t chunk_h_;
};

struct RolloutResult {
    double score = 0.0;
    std::size_t steps_used = 0;
    std::size_t replans = 0;
    std::vector<PickPlaceState> trajectory;
};

/// observe -> chunk -> execute the first exec_h actions -> repeat, until done
/// or max_steps. Start state and policy noise come from independent streams
/// derived from rng.
RolloutResult rollout_policy(const ChunkPolicy& policy, TaskTag task, std::size_t exec_h, Rng& rng,
                             std::size_t max_steps, bool keep_trajectory = false);

struct EvalResult {
    double mean_pct = 0.0;
    std::vector<double> round_pct;
};

/// rounds x trials rollouts with seeds derived from master_seed.
/// exec_h = 0 executes the whole chunk.
EvalResult eval_success(const ChunkPolicy& policy, TaskTag task, std::size_t rounds, std::size_t trials,
                        std::uint64_t master_seed, std::size_t exec_h = 0, std::size_t max_steps = 200);

// ---------------------------------------------------------------------------
// Dataset files: one JSON record per line plus a header document.

struct DatasetHeader {
    TaskTag task = TaskTag::pickplace;
    std::size_t episodes = 0;
    std::size_t steps = 0;
    std::size_t obs_dim = 0;
    std::size_t act_dim = 0;
    nlohmann::json generator;
};

struct Dataset {
    DatasetHeader header;
    std::vector<EpisodeRecord> episodes;
};

Dataset make_dataset(TaskTag task, std::vector<EpisodeRecord> episodes, nlohmann::json generator);
std::string dataset_records_text(const Dataset& d);
nlohmann::json dataset_header_json(const Dataset& d);
void write_dataset(const Dataset& d, const std::filesystem::path& records, const std::filesystem::path& header);
/// Throws ParseError naming the line on any inconsistency with the header.
Dataset read_dataset(const std::filesystem::path& records, const std::filesystem::path& header);

/// GMM samples stored as one-step episodes (obs = cond, action = x).
Dataset gmm_as_dataset(const TrainingSet& set, nlohmann::json generator);
/// Training pairs for a dataset: chunked windows for manipulation tasks,
/// (cond, x) pairs for gmm.
TrainingSet training_set(const Dataset& d, std::size_t chunk_h);

}  // namespace mf

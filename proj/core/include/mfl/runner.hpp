#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mfl/checkpoint.hpp"
#include "mfl/config.hpp"
#include "mfl/data.hpp"
#include "mfl/model.hpp"
#include "mfl/routing.hpp"

namespace mfl {

// f_i(w_j): performance on task i after training through task j. Filled for
// j >= i only (lower triangle in (i, j) indexing).
class ScoreMatrix {
public:
    ScoreMatrix() = default;
    explicit ScoreMatrix(std::int64_t n);

    std::int64_t size() const { return n_; }
    double at(std::int64_t task, std::int64_t after) const;
    void set(std::int64_t task, std::int64_t after, double score);
    bool known(std::int64_t task, std::int64_t after) const;

private:
    std::int64_t n_ = 0;
    std::vector<double> values_;
    std::vector<bool> known_;
};

// Mean final-row score (1/n) sum_i f_i(w_n).
double op_metric(const ScoreMatrix& m, std::int64_t n);

// (1/n) sum_i (f_i(w_n) - f_i(w_i)); negative means forgetting. This is the
// sign convention of the reported tables (their appendix formula carries
// the opposite sign).
double bwt_metric(const ScoreMatrix& m, std::int64_t n);

struct TrainResult {
    std::vector<double> step_losses;
    std::int64_t steps = 0;
};

// Fixed epochs of AdamW under a cosine schedule; only parameters with
// requires_grad update. Aborts with NumericError when the loss exceeds
// divergence_factor x the initial loss for divergence_patience
// consecutive steps.
TrainResult train_task(ToyLm& model, const TaskData& task, const TrainConfig& cfg);

// Mean next-token argmax accuracy over the sequences.
double eval_accuracy(const ToyLm& model, std::span<const Sequence> sequences);

// One trace record per scored position (0 .. T-2), composition from the
// ground-truth records, loss at the model's current parameters.
std::vector<TraceRecord> collect_traces(const ToyLm& model, std::span<const Sequence> sequences,
                                        std::int64_t step);

// Per-token losses over the same iteration order as collect_traces; used to
// re-score old-task tokens under later parameters with routes frozen.
std::vector<double> eval_token_losses(const ToyLm& model, std::span<const Sequence> sequences);

Checkpoint make_checkpoint(const ToyLm& model, std::int64_t step, std::int64_t task_index,
                           std::uint64_t seed);
ToyLm model_from_checkpoint(const Checkpoint& ckpt);

struct SequenceResult {
    ScoreMatrix scores;
    std::vector<Checkpoint> checkpoints;             // after each task
    std::vector<std::vector<TraceRecord>> traces;    // per task, eval split, at theta_j
    std::vector<std::vector<double>> step_losses;    // per task
    std::int64_t activated_params_per_token = 0;
};

// Sequential training over tasks in the given order; after each task j,
// every task i <= j is evaluated.
SequenceResult run_sequence(ToyLm& model, const std::vector<TaskData>& tasks,
                            const TrainConfig& cfg);

// Activated-parameter budgets within `tolerance` of each other.
bool matched_activated_budget(std::int64_t a, std::int64_t b, double tolerance = 0.05);

// ---- experiment orchestration (config -> run directory) ----

struct ExperimentRun {
    ExperimentConfig config;
    std::string arch;
    std::string order;
    SequenceResult result;
    std::vector<TaskData> tasks;    // in trained order
    CorpusStats stats;
    TaskData pretrain;              // empty when pretraining disabled
    double pretrain_eval_accuracy = 0.0;
};

// Generates data, pretrains the backbone on the all-cell task, freezes it,
// then runs the continual sequence. Pure function of (config, arch, order).
ExperimentRun run_experiment(const ExperimentConfig& cfg, const std::string& arch,
                             const std::string& order);

// Persists config echo, manifest, checkpoints, traces, score matrix and
// metrics under `dir`.
void write_run_dir(const std::string& dir, const ExperimentRun& run);

// Rebuilds model + data for an existing run directory.
struct LoadedRun {
    ExperimentConfig config;
    std::string arch;
    std::string order;
    ToyLm final_model;
    std::vector<Checkpoint> checkpoints;
    std::vector<std::vector<TraceRecord>> traces;
    CorpusStats stats;
};

LoadedRun load_run_dir(const std::string& dir);

}  // namespace mfl

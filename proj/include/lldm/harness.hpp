#pragma once

// End-to-end experiments: suite and demo preparation, lifelong runs over
// seeds and task orderings, the pretrain-then-lifelong protocol, persistence
// under runs/<digest>/ with resume, and CSV / SVG reporting.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lldm/lifelong.hpp"
#include "lldm/metrics.hpp"
#include "lldm/nn.hpp"
#include "lldm/taskgen.hpp"
#include "lldm/world.hpp"

namespace lldm {

class HarnessError : public std::runtime_error {
 public:
  enum class Code { kConfig, kIo, kTask, kInterrupted };
  HarnessError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

const char* version_string();

struct ExperimentConfig {
  // Suite: a directory written by write_suite, or a recipe built in memory.
  std::string suite_dir;
  SuiteRecipe recipe{SuiteKind::kInterference, 3, 7};
  RegimeKind regime = RegimeKind::kSeqL;
  std::vector<std::uint64_t> seeds{100, 200, 300};
  // Learning order as suite indices; empty means identity.
  std::vector<std::size_t> ordering;
  // Ordering study: explicit permutations, or this many sampled ones.
  std::vector<std::vector<std::size_t>> orderings;
  std::size_t sampled_orderings = 0;
  std::uint64_t ordering_seed = 0;

  // Pretraining suite (pretrain-study only).
  std::string pretrain_suite_dir;
  SuiteRecipe pretrain_recipe{SuiteKind::kNinety, 4, 11};
  std::size_t pretrain_epochs = 50;
  std::size_t pretrain_checkpoint_every = 5;

  std::size_t demos = 20;
  int rollouts = 20;
  double demo_noise = 0.02;
  std::uint64_t demo_seed = 0;
  bool paper_protocol = false;

  SimConfig sim;
  NetConfig net;  // obs_dim and relative_slots are filled from the suite
  bool relative_encoding = true;
  TrainConfig train;

  // Not part of the digest.
  std::string output_root = "runs";
  std::size_t workers = 0;  // 0: hardware concurrency
  // Testing: abort each seed after this many tasks, as a crash would.
  std::size_t interrupt_after = 0;

  // Fast defaults: 20 demos, 20 rollouts, lr 1e-3 -> 1e-4.
  static ExperimentConfig fast();
  // 50 demos, 20 rollouts, lr 1e-4 -> 1e-5.
  void apply_paper_protocol();

  std::string to_json() const;
  // Missing keys keep their defaults.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  // Digest of everything that affects results.
  std::string digest() const;
  std::vector<std::size_t> resolved_ordering(std::size_t task_count) const;
};

struct TaskRecord {
  std::size_t task = 0;  // suite index
  std::vector<std::size_t> epochs;
  std::vector<double> diag;
  std::vector<double> epoch_loss;
  std::size_t best_epoch = 0;
  std::string checkpoint;  // best checkpoint, relative to the run directory
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

struct SeedRecord {
  std::uint64_t seed = 0;
  std::vector<std::size_t> ordering;
  EvalMatrix matrix;
  MetricReport metrics;
  std::vector<TaskRecord> tasks;
  double seconds = 0.0;
};

struct RunRecord {
  std::string digest;
  std::string version;
  std::string dir;
  std::string suite_kind;
  std::string regime;
  int rollouts = 0;
  std::vector<SeedRecord> seeds;
  SeedAggregate aggregate;

  std::string to_json() const;
  static RunRecord from_json(const std::string& text);
  static RunRecord load(const std::string& run_dir);
};

// Observation layout and task-embedding placement shared by a run.
struct RunContext {
  Suite suite;
  ObsLayout layout;
  std::size_t embedding_offset = 0;  // task j embeds at one_hot(offset + j)
  std::optional<Eigen::VectorXd> init;  // overrides the seeded initialization

  std::vector<double> embedding(std::size_t task) const;
};

Suite load_suite(const std::string& dir, const SuiteRecipe& recipe);
RunContext make_context(const ExperimentConfig& config);
NetConfig net_config(const ExperimentConfig& config, const ObsLayout& layout);

// Loads demos from `dir` when present and matching, otherwise collects and
// stores them. `dir` may be empty to skip persistence.
DemoSet prepare_demos(const ExperimentConfig& config, const RunContext& ctx, std::size_t task,
                      const std::string& dir);

// Base seed of the evaluation of suite task `task` at checkpoint `epoch`;
// rollout r draws its initial state from mix_seed({base, r}) and its actions
// from mix_seed({base, r, 1}).
std::uint64_t eval_seed(std::uint64_t seed, std::size_t task, std::size_t epoch);

// Success rate of a parameter vector with actions sampled from the mixture.
double evaluate_params(const Network& net, const Eigen::VectorXd& theta, const World& world,
                       const ObsLayout& layout, const std::vector<double>& embedding, int rollouts,
                       std::uint64_t base_seed, std::vector<RolloutResult>* details = nullptr);

// Runs every seed; persists under output_root/<digest>/ (or `dir_override`)
// and resumes from whatever a previous invocation left there.
RunRecord run_lifelong(const ExperimentConfig& config, const RunContext& ctx,
                       const std::string& dir_override = {});
RunRecord run_lifelong(const ExperimentConfig& config);

struct OrderingStudy {
  std::vector<std::vector<std::size_t>> orderings;
  std::vector<RunRecord> runs;
  std::string dir;
};
OrderingStudy run_ordering_study(const ExperimentConfig& config);

struct PretrainStudy {
  RunRecord scratch;
  RunRecord pretrained;
  std::size_t pretrain_best_epoch = 0;
  std::vector<double> pretrain_curve;  // mean pretrain-suite success per checkpoint
  std::string dir;
};
PretrainStudy run_pretrain_study(const ExperimentConfig& config);

// Structural protocol check of a completed record: every task has one
// diagonal evaluation per epoch in {0, every, ..., epochs}, evaluations used
// `rollouts` rollouts, and every earlier task was evaluated after each task.
// Returns the violations found; empty means the record passes.
std::vector<std::string> audit_protocol(const RunRecord& record, std::size_t epochs = 50, std::size_t every = 5,
                                        int rollouts = 20);

struct TraceStep {
  WorldState state;
  Action action;
};
// Re-runs rollout `rollout` of the evaluation with base seed `base_seed`,
// recording each state and the sampled action.
RolloutResult trace_rollout(const Network& net, const Eigen::VectorXd& theta, const World& world,
                            const ObsLayout& layout, const std::vector<double>& embedding, std::uint64_t base_seed,
                            std::size_t rollout, std::vector<TraceStep>& trace);

// Writes summary.csv, per-task lifetime curves and loss-vs-success curves
// into `out_dir`. Returns the files written.
std::vector<std::string> write_report(const std::vector<RunRecord>& records, const std::string& out_dir);

std::string summary_csv(const std::vector<RunRecord>& records);

}  // namespace lldm

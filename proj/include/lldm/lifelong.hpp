#pragma once

// Training regimes over one policy: sequential fine-tuning, experience
// replay, online EWC, PackNet, and the multitask upper bound. Every regime
// emits the same checkpoint schedule so evaluation is regime-agnostic.

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lldm/nn.hpp"
#include "lldm/rng.hpp"
#include "lldm/world.hpp"

namespace lldm {

class LifelongError : public std::runtime_error {
 public:
  enum class Code { kEmptyDemos, kCapacityExhausted, kBadState };
  LifelongError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

enum class RegimeKind { kSeqL, kER, kEWC, kPackNet, kMTL };

const char* to_string(RegimeKind kind);
RegimeKind regime_from_string(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::size_t checkpoint_every = 5;
  AdamConfig adam;
  // ER
  std::size_t replay_batch = 32;
  std::size_t buffer_capacity = 1000;
  std::size_t insert_per_task = 50;
  // EWC
  double ewc_lambda = 5e4;
  double ewc_gamma = 0.9;
  // PackNet
  double keep_ratio = 0.25;
  std::size_t finetune_epochs = 50;
  double capacity_floor = 0.01;
  bool operator==(const TrainConfig&) const = default;
};

// All (window, action) pairs of a demo set, one column each.
struct Dataset {
  Eigen::MatrixXd windows;
  Eigen::MatrixXd actions;
  std::size_t size() const { return static_cast<std::size_t>(windows.cols()); }
  static Dataset from_demos(const DemoSet& demos, std::size_t frames);
};

struct TaskCheckpoints {
  std::vector<std::size_t> epochs;     // 0, every, 2*every, ..., epochs
  std::vector<Eigen::VectorXd> params;
  std::vector<double> epoch_loss;      // mean BC loss of each training epoch
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1000) : capacity_(capacity) {}

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  const std::vector<Trajectory>& items() const { return items_; }
  std::size_t count_for(std::size_t task_id) const;

  // Inserts one trajectory, first evicting a uniformly chosen trajectory of
  // the task holding the most entries when the buffer is full.
  void insert(const Trajectory& t, Rng& eviction_rng);
  // Uniform trajectory, then uniform time step within it.
  std::pair<std::size_t, std::size_t> draw(Rng& rng) const;
  void sample_into(Rng& rng, std::size_t frames, std::size_t count, Eigen::MatrixXd& windows,
                   Eigen::MatrixXd& actions, Eigen::Index first_col,
                   std::vector<std::size_t>* drawn = nullptr) const;

  std::string serialize() const;
  static ReplayBuffer deserialize(std::string_view data);

 private:
  std::size_t capacity_;
  std::vector<Trajectory> items_;
};

struct EwcState {
  Eigen::VectorXd anchor;  // empty until the first task finishes
  Eigen::VectorXd fisher;
  double gamma = 0.9;
  double lambda = 5e4;

  double penalty(const Eigen::VectorXd& theta) const;
  // Adds the penalty gradient lambda * F .* (theta - anchor) to `grad`.
  void add_penalty_grad(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const;
  // F <- gamma F + (1 - gamma) F_k; anchor <- theta.
  void consolidate(const Eigen::VectorXd& theta, const Eigen::VectorXd& task_fisher);
};

struct PackNetState {
  static constexpr int kFree = -1;
  static constexpr int kBias = -2;
  std::vector<int> owner;  // kFree, kBias, or the position of the owning task

  void init(const Network& net);
  std::size_t prunable() const;
  std::size_t free_count() const;
  std::vector<std::uint8_t> mask_of(int position) const;
  // Trainable entries while learning `position` (phase 1) or fine-tuning it.
  std::vector<std::uint8_t> trainable(int position, bool finetune) const;
  // Keeps round(keep_ratio * free) free entries of largest |theta| for
  // `position`; zeroes the others. Returns the number kept.
  std::size_t prune(Eigen::VectorXd& theta, int position, double keep_ratio);
  // Parameters as seen by task `position`: masks 0..position and biases,
  // every other prunable entry read as zero.
  Eigen::VectorXd inference_params(const Eigen::VectorXd& theta, int position) const;
};

class Regime {
 public:
  Regime(RegimeKind kind, TrainConfig config) : kind_(kind), config_(config) {}
  virtual ~Regime() = default;

  RegimeKind kind() const { return kind_; }
  const TrainConfig& config() const { return config_; }

  // Trains on the task at `position` of the sequence; `theta` ends at the
  // final training parameters and the checkpoints are returned.
  virtual TaskCheckpoints train_task(const Network& net, Eigen::VectorXd& theta, const Dataset& data,
                                     std::size_t position, std::uint64_t seed);
  // Runs after the best checkpoint has been restored into `theta`.
  virtual void finish_task(const Network& net, Eigen::VectorXd& theta, const Dataset& data,
                           const DemoSet& demos, std::size_t position, std::uint64_t seed);
  // Parameters used to evaluate the task learned at `position`.
  virtual Eigen::VectorXd inference_params(const Eigen::VectorXd& theta, std::size_t position) const;

  virtual std::string save_state() const { return {}; }
  virtual void load_state(std::string_view) {}

 protected:
  struct LoopOptions {
    std::size_t epochs = 0;
    std::uint64_t shuffle_seed = 0;
    const std::vector<std::uint8_t>* trainable = nullptr;
    bool keep_checkpoints = true;
  };
  TaskCheckpoints run_epochs(const Network& net, Eigen::VectorXd& theta, const Dataset& data,
                             const LoopOptions& options, std::size_t position, std::uint64_t seed);
  // Extra samples appended after the current batch (ER replay).
  virtual std::size_t extra_samples() const { return 0; }
  virtual void fill_extra(Rng&, std::size_t, Eigen::MatrixXd&, Eigen::MatrixXd&, Eigen::Index) {}
  virtual void add_penalty(const Eigen::VectorXd&, Eigen::VectorXd&) const {}

  RegimeKind kind_;
  TrainConfig config_;
};

class ErRegime : public Regime {
 public:
  explicit ErRegime(TrainConfig config) : Regime(RegimeKind::kER, config), buffer_(config.buffer_capacity) {}
  void finish_task(const Network& net, Eigen::VectorXd& theta, const Dataset& data, const DemoSet& demos,
                   std::size_t position, std::uint64_t seed) override;
  const ReplayBuffer& buffer() const { return buffer_; }
  std::string save_state() const override { return buffer_.serialize(); }
  void load_state(std::string_view data) override { buffer_ = ReplayBuffer::deserialize(data); }

 protected:
  std::size_t extra_samples() const override { return buffer_.empty() ? 0 : config_.replay_batch; }
  void fill_extra(Rng& rng, std::size_t frames, Eigen::MatrixXd& w, Eigen::MatrixXd& a, Eigen::Index col) override;

 private:
  ReplayBuffer buffer_;
};

class EwcRegime : public Regime {
 public:
  explicit EwcRegime(TrainConfig config);
  void finish_task(const Network& net, Eigen::VectorXd& theta, const Dataset& data, const DemoSet& demos,
                   std::size_t position, std::uint64_t seed) override;
  const EwcState& state() const { return state_; }
  std::string save_state() const override;
  void load_state(std::string_view data) override;

 protected:
  void add_penalty(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const override;

 private:
  EwcState state_;
};

class PackNetRegime : public Regime {
 public:
  explicit PackNetRegime(TrainConfig config) : Regime(RegimeKind::kPackNet, config) {}
  TaskCheckpoints train_task(const Network& net, Eigen::VectorXd& theta, const Dataset& data,
                             std::size_t position, std::uint64_t seed) override;
  void finish_task(const Network& net, Eigen::VectorXd& theta, const Dataset& data, const DemoSet& demos,
                   std::size_t position, std::uint64_t seed) override;
  Eigen::VectorXd inference_params(const Eigen::VectorXd& theta, std::size_t position) const override;
  const PackNetState& state() const { return state_; }
  std::string save_state() const override;
  void load_state(std::string_view data) override;

 private:
  PackNetState state_;
};

std::unique_ptr<Regime> make_regime(RegimeKind kind, const TrainConfig& config);

// Multitask training over all tasks at once: each step picks a task
// uniformly and takes its next batch. `task_picks`, when given, records the
// task chosen at every step.
TaskCheckpoints train_mtl(const Network& net, Eigen::VectorXd& theta, const std::vector<Dataset>& data,
                          const TrainConfig& config, std::uint64_t seed,
                          std::vector<std::size_t>* task_picks = nullptr);

}  // namespace lldm

#pragma once

// Window-MLP policy with a Gaussian-mixture action head, its exact
// reverse-mode gradient, and Adam with a cosine learning-rate schedule.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lldm/rng.hpp"

namespace lldm {

class NnError : public std::runtime_error {
 public:
  enum class Code { kDimensionMismatch, kCheckpoint };
  NnError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

struct NetConfig {
  std::size_t obs_dim = 0;
  std::size_t window = 10;
  std::size_t hidden = 256;
  std::size_t hidden_layers = 2;
  std::size_t mixtures = 5;
  std::size_t action_dim = 3;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
  // Input encoder: the first `relative_slots` object slots of each frame
  // (x, y at 3 + 4i) are rewritten as offsets from the gripper times
  // `relative_scale`. Empty slots (sin = cos = 0) stay zero.
  std::size_t relative_slots = 0;
  double relative_scale = 10.0;
  std::size_t input_dim() const { return obs_dim * window; }
  bool operator==(const NetConfig&) const = default;
};

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0, cols = 0;  // column-major; biases have cols == 1
  bool bias = false;
  std::size_t size() const { return rows * cols; }
};

struct GmmOutput {
  Eigen::VectorXd weights;   // K
  Eigen::MatrixXd means;     // K x d
  Eigen::MatrixXd log_stds;  // K x d, already clamped
};

// Raw head outputs for a batch, one column per sample.
struct GmmBatch {
  Eigen::MatrixXd logits;    // K x B
  Eigen::MatrixXd means;     // (K*d) x B, component-major
  Eigen::MatrixXd log_stds;  // (K*d) x B, clamped
  GmmOutput column(Eigen::Index b) const;
};

class Network {
 public:
  explicit Network(NetConfig config);

  const NetConfig& config() const { return config_; }
  const std::vector<ParamSlice>& layout() const { return layout_; }
  std::size_t num_params() const { return num_params_; }
  const ParamSlice& slice(const std::string& name) const;

  // Xavier-uniform weights, zero biases.
  Eigen::VectorXd init_params(std::uint64_t seed) const;
  // 1 for bias entries, 0 for weights.
  std::vector<std::uint8_t> bias_mask() const;

  // Applies the fixed input encoder to a batch of raw windows.
  Eigen::MatrixXd encode(const Eigen::MatrixXd& windows) const;

  GmmOutput forward(const Eigen::VectorXd& theta, const Eigen::VectorXd& window) const;
  GmmBatch forward_batch(const Eigen::VectorXd& theta, const Eigen::MatrixXd& windows) const;

  // Mean NLL over the columns of `windows`/`actions`; when `grad` is given it
  // receives the gradient of that mean.
  double loss_and_grad(const Eigen::VectorXd& theta, const Eigen::MatrixXd& windows,
                       const Eigen::MatrixXd& actions, Eigen::VectorXd* grad) const;
  // Empirical Fisher diagonal: mean over columns of the squared per-sample
  // gradient of log p(action | window).
  Eigen::VectorXd fisher_diagonal(const Eigen::VectorXd& theta, const Eigen::MatrixXd& windows,
                                  const Eigen::MatrixXd& actions) const;
  Eigen::VectorXd backward(const Eigen::VectorXd& theta, const Eigen::VectorXd& window,
                           const Eigen::VectorXd& action) const;

  double soft_clamp(double raw) const;

 private:
  struct Tape;
  void check(const Eigen::VectorXd& theta, Eigen::Index input_rows) const;
  void run(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x, Tape& tape) const;
  // Head gradient rows (logits, means, raw log-stds) for one sample; returns its NLL.
  double head_grad(const Tape& tape, Eigen::Index b, const Eigen::VectorXd& action,
                   Eigen::Ref<Eigen::VectorXd> g) const;
  void backprop(const Eigen::VectorXd& theta, const Tape& tape, const Eigen::MatrixXd& g_head, Eigen::Ref<Eigen::VectorXd> grad) const;

  NetConfig config_;
  std::vector<ParamSlice> layout_;
  std::size_t num_params_ = 0;
};

double nll(const GmmOutput& out, const Eigen::VectorXd& action);

// Draws a component, then a Gaussian action; clamped to [-1, 1].
Eigen::VectorXd sample_action(const GmmOutput& out, Rng& rng);
// Mean of the highest-weight component (rng-free).
Eigen::VectorXd mode_action(const GmmOutput& out);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr_max = 1e-4;
  double lr_min = 1e-5;
  bool operator==(const AdamConfig&) const = default;
};

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min);

struct AdamState {
  Eigen::VectorXd m, v;
  std::uint64_t updates = 0;
  void reset(Eigen::Index n) {
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    updates = 0;
  }
};

// One Adam update at schedule position `step` of `total_steps`. Entries with
// trainable[i] == 0 are skipped entirely (parameter and moments untouched).
void adam_step(AdamState& state, Eigen::VectorXd& theta, const Eigen::VectorXd& grad,
               std::size_t step, std::size_t total_steps, const AdamConfig& config,
               const std::vector<std::uint8_t>* trainable = nullptr);

// Versioned binary checkpoint: magic, header JSON (config + caller metadata),
// parameter count, little-endian float64 block.
void write_checkpoint(const std::string& path, const NetConfig& config, const Eigen::VectorXd& theta,
                      const std::string& metadata_json = "{}");
struct Checkpoint {
  NetConfig config;
  Eigen::VectorXd theta;
  std::string metadata_json;
};
Checkpoint read_checkpoint(const std::string& path);

}  // namespace lldm

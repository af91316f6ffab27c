#include "lldm/lifelong.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "lldm/util.hpp"

namespace lldm {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr char kBufferMagic[] = "LLDMRBUF";
constexpr char kEwcMagic[] = "LLDMEWC1";
constexpr char kPackMagic[] = "LLDMPACK";

void copy_column(const Dataset& data, std::size_t from, MatrixXd& w, MatrixXd& a, Index to) {
  w.col(to) = data.windows.col(static_cast<Index>(from));
  a.col(to) = data.actions.col(static_cast<Index>(from));
}

void append_vector(std::string& out, const VectorXd& v) {
  append_u64_le(out, static_cast<std::uint64_t>(v.size()));
  append_f64_le(out, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

VectorXd read_vector(std::string_view in, std::size_t& at) {
  const std::uint64_t n = read_u64_le(in, at);
  at += 8;
  VectorXd v(static_cast<Index>(n));
  read_f64_le(in.substr(at), std::span<double>(v.data(), n));
  at += 8 * n;
  return v;
}

void expect_magic(std::string_view in, const char* magic) {
  if (in.size() < 8 || in.substr(0, 8) != std::string_view(magic, 8)) {
    throw LifelongError(LifelongError::Code::kBadState, "regime state has the wrong format");
  }
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

}  // namespace

const char* to_string(RegimeKind kind) {
  switch (kind) {
    case RegimeKind::kSeqL: return "seql";
    case RegimeKind::kER: return "er";
    case RegimeKind::kEWC: return "ewc";
    case RegimeKind::kPackNet: return "packnet";
    case RegimeKind::kMTL: return "mtl";
  }
  return "?";
}

RegimeKind regime_from_string(const std::string& s) {
  for (RegimeKind k : {RegimeKind::kSeqL, RegimeKind::kER, RegimeKind::kEWC, RegimeKind::kPackNet, RegimeKind::kMTL}) {
    if (s == to_string(k)) return k;
  }
  throw LifelongError(LifelongError::Code::kBadState, "unknown regime '" + s + "'");
}

Dataset Dataset::from_demos(const DemoSet& demos, std::size_t frames) {
  std::size_t n = 0;
  for (const auto& t : demos.trajectories) n += t.actions.size();
  Dataset d;
  d.windows.resize(static_cast<Index>(demos.obs_dim * frames), static_cast<Index>(n));
  d.actions.resize(static_cast<Index>(kActionDim), static_cast<Index>(n));
  Index col = 0;
  for (const auto& t : demos.trajectories) {
    for (std::size_t s = 0; s < t.actions.size(); ++s, ++col) {
      fill_window(t.observations, s, frames,
                  std::span<double>(d.windows.col(col).data(), static_cast<std::size_t>(d.windows.rows())));
      d.actions.col(col) << t.actions[s].dx, t.actions[s].dy, t.actions[s].dgrip;
    }
  }
  return d;
}

// ---------------------------------------------------------------- replay

std::size_t ReplayBuffer::count_for(std::size_t task_id) const {
  return static_cast<std::size_t>(
      std::count_if(items_.begin(), items_.end(), [&](const Trajectory& t) { return t.task_id == task_id; }));
}

void ReplayBuffer::insert(const Trajectory& t, Rng& eviction_rng) {
  if (capacity_ == 0 || t.actions.empty()) return;
  if (items_.size() >= capacity_) {
    std::map<std::size_t, std::vector<std::size_t>> by_task;
    for (std::size_t i = 0; i < items_.size(); ++i) by_task[items_[i].task_id].push_back(i);
    // The incoming trajectory counts toward its own task's share.
    const std::vector<std::size_t>* largest = nullptr;
    std::size_t largest_share = 0;
    for (const auto& [task, idx] : by_task) {
      const std::size_t share = idx.size() + (task == t.task_id ? 1 : 0);
      if (largest == nullptr || share > largest_share) largest = &idx, largest_share = share;
    }
    const std::size_t victim = (*largest)[eviction_rng.uniform_index(largest->size())];
    items_.erase(items_.begin() + static_cast<std::ptrdiff_t>(victim));
  }
  items_.push_back(t);
}

std::pair<std::size_t, std::size_t> ReplayBuffer::draw(Rng& rng) const {
  const std::size_t i = rng.uniform_index(items_.size());
  return {i, rng.uniform_index(items_[i].actions.size())};
}

void ReplayBuffer::sample_into(Rng& rng, std::size_t frames, std::size_t count, MatrixXd& windows,
                               MatrixXd& actions, Index first_col, std::vector<std::size_t>* drawn) const {
  for (std::size_t k = 0; k < count; ++k) {
    const auto [i, t] = draw(rng);
    if (drawn != nullptr) drawn->push_back(i);
    const Index col = first_col + static_cast<Index>(k);
    fill_window(items_[i].observations, t, frames,
                std::span<double>(windows.col(col).data(), static_cast<std::size_t>(windows.rows())));
    const Action& a = items_[i].actions[t];
    actions.col(col) << a.dx, a.dy, a.dgrip;
  }
}

std::string ReplayBuffer::serialize() const {
  std::string out(kBufferMagic, 8);
  append_u64_le(out, capacity_);
  append_u64_le(out, items_.size());
  for (const auto& t : items_) {
    append_u64_le(out, t.task_id);
    append_u64_le(out, t.success ? 1 : 0);
    append_u64_le(out, t.observations.size());
    append_u64_le(out, t.observations.empty() ? 0 : t.observations.front().size());
    for (const auto& o : t.observations) append_f64_le(out, o);
    append_u64_le(out, t.actions.size());
    for (const auto& a : t.actions) {
      const double v[3] = {a.dx, a.dy, a.dgrip};
      append_f64_le(out, v);
    }
  }
  return out;
}

ReplayBuffer ReplayBuffer::deserialize(std::string_view in) {
  expect_magic(in, kBufferMagic);
  std::size_t at = 8;
  auto u64 = [&] {
    const std::uint64_t v = read_u64_le(in, at);
    at += 8;
    return static_cast<std::size_t>(v);
  };
  ReplayBuffer b(u64());
  const std::size_t n = u64();
  for (std::size_t i = 0; i < n; ++i) {
    Trajectory t;
    t.task_id = u64();
    t.success = u64() != 0;
    const std::size_t n_obs = u64();
    const std::size_t dim = u64();
    t.observations.assign(n_obs, std::vector<double>(dim));
    for (auto& o : t.observations) {
      read_f64_le(in.substr(at), o);
      at += 8 * dim;
    }
    t.actions.resize(u64());
    for (auto& a : t.actions) {
      double v[3];
      read_f64_le(in.substr(at), v);
      at += 24;
      a = {v[0], v[1], v[2]};
    }
    b.items_.push_back(std::move(t));
  }
  return b;
}

// ---------------------------------------------------------------- EWC

double EwcState::penalty(const VectorXd& theta) const {
  if (anchor.size() == 0) return 0.0;
  return 0.5 * lambda * (fisher.array() * (theta - anchor).array().square()).sum();
}

void EwcState::add_penalty_grad(const VectorXd& theta, VectorXd& grad) const {
  if (anchor.size() == 0 || lambda == 0.0) return;
  grad.array() += lambda * fisher.array() * (theta - anchor).array();
}

void EwcState::consolidate(const VectorXd& theta, const VectorXd& task_fisher) {
  if (fisher.size() != task_fisher.size()) fisher = VectorXd::Zero(task_fisher.size());
  fisher = gamma * fisher + (1.0 - gamma) * task_fisher;
  anchor = theta;
}

// ---------------------------------------------------------------- PackNet

void PackNetState::init(const Network& net) {
  const auto bias = net.bias_mask();
  owner.assign(bias.size(), kFree);
  for (std::size_t i = 0; i < bias.size(); ++i) {
    if (bias[i] != 0) owner[i] = kBias;
  }
}

std::size_t PackNetState::prunable() const {
  return static_cast<std::size_t>(std::count_if(owner.begin(), owner.end(), [](int o) { return o != kBias; }));
}

std::size_t PackNetState::free_count() const {
  return static_cast<std::size_t>(std::count(owner.begin(), owner.end(), kFree));
}

std::vector<std::uint8_t> PackNetState::mask_of(int position) const {
  std::vector<std::uint8_t> m(owner.size(), 0);
  for (std::size_t i = 0; i < owner.size(); ++i) m[i] = owner[i] == position ? 1 : 0;
  return m;
}

std::vector<std::uint8_t> PackNetState::trainable(int position, bool finetune) const {
  std::vector<std::uint8_t> m(owner.size(), 0);
  for (std::size_t i = 0; i < owner.size(); ++i) {
    const int o = owner[i];
    // Biases only learn with the first task.
    if (o == kBias) m[i] = position == 0 ? 1 : 0;
    else if (finetune) m[i] = o == position ? 1 : 0;
    else m[i] = o == kFree ? 1 : 0;
  }
  return m;
}

std::size_t PackNetState::prune(VectorXd& theta, int position, double keep_ratio) {
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < owner.size(); ++i) {
    if (owner[i] == kFree) free.push_back(i);
  }
  const auto keep = static_cast<std::size_t>(std::llround(keep_ratio * static_cast<double>(free.size())));
  std::stable_sort(free.begin(), free.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(theta[static_cast<Index>(a)]) > std::abs(theta[static_cast<Index>(b)]);
  });
  for (std::size_t r = 0; r < free.size(); ++r) {
    if (r < keep) owner[free[r]] = position;
    else theta[static_cast<Index>(free[r])] = 0.0;
  }
  return keep;
}

VectorXd PackNetState::inference_params(const VectorXd& theta, int position) const {
  VectorXd out = theta;
  for (std::size_t i = 0; i < owner.size(); ++i) {
    if (owner[i] == kFree || owner[i] > position) out[static_cast<Index>(i)] = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------- regimes

TaskCheckpoints Regime::run_epochs(const Network& net, VectorXd& theta, const Dataset& data,
                                   const LoopOptions& opt, std::size_t position, std::uint64_t seed) {
  if (data.size() == 0) throw LifelongError(LifelongError::Code::kEmptyDemos, "no training samples for the task");
  const std::size_t n = data.size();
  const std::size_t batch = config_.batch_size;
  const std::size_t spe = steps_per_epoch(n, batch);
  const std::size_t total = opt.epochs * spe;
  const std::size_t frames = net.config().window;
  Rng shuffle(opt.shuffle_seed);
  Rng replay(stream_seed(seed, Stream::kReplay, position));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  AdamState adam;
  adam.reset(theta.size());
  VectorXd grad;
  MatrixXd w, a;

  TaskCheckpoints out;
  if (opt.keep_checkpoints) {
    out.epochs.push_back(0);
    out.params.push_back(theta);
  }
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    shuffle.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < spe; ++s) {
      const std::size_t first = s * batch;
      const std::size_t nb = std::min(batch, n - first);
      const std::size_t extra = extra_samples();
      w.resize(data.windows.rows(), static_cast<Index>(nb + extra));
      a.resize(data.actions.rows(), static_cast<Index>(nb + extra));
      for (std::size_t k = 0; k < nb; ++k) copy_column(data, order[first + k], w, a, static_cast<Index>(k));
      if (extra > 0) fill_extra(replay, frames, w, a, static_cast<Index>(nb));
      loss_sum += net.loss_and_grad(theta, w, a, &grad);
      add_penalty(theta, grad);
      adam_step(adam, theta, grad, step++, total, config_.adam, opt.trainable);
    }
    out.epoch_loss.push_back(loss_sum / static_cast<double>(spe));
    if (opt.keep_checkpoints && epoch % config_.checkpoint_every == 0) {
      out.epochs.push_back(epoch);
      out.params.push_back(theta);
    }
  }
  return out;
}

TaskCheckpoints Regime::train_task(const Network& net, VectorXd& theta, const Dataset& data, std::size_t position,
                                   std::uint64_t seed) {
  LoopOptions opt;
  opt.epochs = config_.epochs;
  opt.shuffle_seed = stream_seed(seed, Stream::kShuffle, position, 0);
  return run_epochs(net, theta, data, opt, position, seed);
}

void Regime::finish_task(const Network&, VectorXd&, const Dataset&, const DemoSet&, std::size_t, std::uint64_t) {}

VectorXd Regime::inference_params(const VectorXd& theta, std::size_t) const { return theta; }

void ErRegime::fill_extra(Rng& rng, std::size_t frames, MatrixXd& w, MatrixXd& a, Index col) {
  buffer_.sample_into(rng, frames, config_.replay_batch, w, a, col);
}

void ErRegime::finish_task(const Network&, VectorXd&, const Dataset&, const DemoSet& demos, std::size_t position,
                           std::uint64_t seed) {
  Rng eviction(stream_seed(seed, Stream::kEviction, position));
  const std::size_t n = std::min(config_.insert_per_task, demos.trajectories.size());
  for (std::size_t i = 0; i < n; ++i) buffer_.insert(demos.trajectories[i], eviction);
}

EwcRegime::EwcRegime(TrainConfig config) : Regime(RegimeKind::kEWC, config) {
  state_.gamma = config.ewc_gamma;
  state_.lambda = config.ewc_lambda;
}

void EwcRegime::add_penalty(const VectorXd& theta, VectorXd& grad) const { state_.add_penalty_grad(theta, grad); }

void EwcRegime::finish_task(const Network& net, VectorXd& theta, const Dataset& data, const DemoSet&, std::size_t,
                            std::uint64_t) {
  state_.consolidate(theta, net.fisher_diagonal(theta, data.windows, data.actions));
}

std::string EwcRegime::save_state() const {
  std::string out(kEwcMagic, 8);
  append_vector(out, state_.anchor);
  append_vector(out, state_.fisher);
  return out;
}

void EwcRegime::load_state(std::string_view in) {
  expect_magic(in, kEwcMagic);
  std::size_t at = 8;
  state_.anchor = read_vector(in, at);
  state_.fisher = read_vector(in, at);
}

TaskCheckpoints PackNetRegime::train_task(const Network& net, VectorXd& theta, const Dataset& data,
                                          std::size_t position, std::uint64_t seed) {
  if (state_.owner.empty()) state_.init(net);
  const double floor = config_.capacity_floor * static_cast<double>(state_.prunable());
  if (static_cast<double>(state_.free_count()) < floor || state_.free_count() == 0) {
    throw LifelongError(LifelongError::Code::kCapacityExhausted,
                        "PackNet has " + std::to_string(state_.free_count()) + " free parameters left");
  }
  const auto trainable = state_.trainable(static_cast<int>(position), false);
  LoopOptions opt;
  opt.epochs = config_.epochs;
  opt.shuffle_seed = stream_seed(seed, Stream::kShuffle, position, 0);
  opt.trainable = &trainable;
  return run_epochs(net, theta, data, opt, position, seed);
}

void PackNetRegime::finish_task(const Network& net, VectorXd& theta, const Dataset& data, const DemoSet&,
                                std::size_t position, std::uint64_t seed) {
  state_.prune(theta, static_cast<int>(position), config_.keep_ratio);
  const auto trainable = state_.trainable(static_cast<int>(position), true);
  LoopOptions opt;
  opt.epochs = config_.finetune_epochs;
  opt.shuffle_seed = stream_seed(seed, Stream::kShuffle, position, 1);
  opt.trainable = &trainable;
  opt.keep_checkpoints = false;
  run_epochs(net, theta, data, opt, position, seed);
}

VectorXd PackNetRegime::inference_params(const VectorXd& theta, std::size_t position) const {
  return state_.inference_params(theta, static_cast<int>(position));
}

std::string PackNetRegime::save_state() const {
  std::string out(kPackMagic, 8);
  append_u64_le(out, state_.owner.size());
  for (int o : state_.owner) append_u64_le(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(o)));
  return out;
}

void PackNetRegime::load_state(std::string_view in) {
  expect_magic(in, kPackMagic);
  const std::size_t n = read_u64_le(in, 8);
  state_.owner.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    state_.owner[i] = static_cast<int>(static_cast<std::int64_t>(read_u64_le(in, 16 + 8 * i)));
  }
}

std::unique_ptr<Regime> make_regime(RegimeKind kind, const TrainConfig& config) {
  switch (kind) {
    case RegimeKind::kSeqL: return std::make_unique<Regime>(RegimeKind::kSeqL, config);
    case RegimeKind::kER: return std::make_unique<ErRegime>(config);
    case RegimeKind::kEWC: return std::make_unique<EwcRegime>(config);
    case RegimeKind::kPackNet: return std::make_unique<PackNetRegime>(config);
    case RegimeKind::kMTL: break;
  }
  throw LifelongError(LifelongError::Code::kBadState, "MTL trains all tasks jointly; use train_mtl");
}

TaskCheckpoints train_mtl(const Network& net, VectorXd& theta, const std::vector<Dataset>& data,
                          const TrainConfig& config, std::uint64_t seed, std::vector<std::size_t>* task_picks) {
  if (data.empty()) throw LifelongError(LifelongError::Code::kEmptyDemos, "no tasks to train");
  std::size_t spe = 0;
  std::vector<std::vector<std::size_t>> queues(data.size());
  std::vector<std::size_t> cursor(data.size(), 0);
  std::vector<Rng> shufflers;
  for (std::size_t j = 0; j < data.size(); ++j) {
    if (data[j].size() == 0) throw LifelongError(LifelongError::Code::kEmptyDemos, "task without samples");
    spe += steps_per_epoch(data[j].size(), config.batch_size);
    queues[j].resize(data[j].size());
    std::iota(queues[j].begin(), queues[j].end(), 0);
    shufflers.emplace_back(stream_seed(seed, Stream::kShuffle, j, 0));
  }
  const std::size_t total = config.epochs * spe;
  Rng pick(stream_seed(seed, Stream::kMtlTask));
  AdamState adam;
  adam.reset(theta.size());
  VectorXd grad;
  MatrixXd w, a;
  TaskCheckpoints out;
  out.epochs.push_back(0);
  out.params.push_back(theta);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t j = 0; j < data.size(); ++j) {
      shufflers[j].shuffle(queues[j]);
      cursor[j] = 0;
    }
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < spe; ++s) {
      const std::size_t j = pick.uniform_index(data.size());
      if (task_picks != nullptr) task_picks->push_back(j);
      if (cursor[j] == queues[j].size()) {
        shufflers[j].shuffle(queues[j]);
        cursor[j] = 0;
      }
      const std::size_t nb = std::min(config.batch_size, queues[j].size() - cursor[j]);
      w.resize(data[j].windows.rows(), static_cast<Index>(nb));
      a.resize(data[j].actions.rows(), static_cast<Index>(nb));
      for (std::size_t k = 0; k < nb; ++k) copy_column(data[j], queues[j][cursor[j] + k], w, a, static_cast<Index>(k));
      cursor[j] += nb;
      loss_sum += net.loss_and_grad(theta, w, a, &grad);
      adam_step(adam, theta, grad, step++, total, config.adam);
    }
    out.epoch_loss.push_back(loss_sum / static_cast<double>(spe));
    if (epoch % config.checkpoint_every == 0) {
      out.epochs.push_back(epoch);
      out.params.push_back(theta);
    }
  }
  return out;
}

}  // namespace lldm

#include "lldm/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "lldm/util.hpp"

namespace lldm {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using CMap = Eigen::Map<const MatrixXd>;
using CVMap = Eigen::Map<const VectorXd>;

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

double log_sum_exp(const VectorXd& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

constexpr char kMagic[] = "LLDMCKPT";
constexpr int kCheckpointVersion = 1;

}  // namespace

struct Network::Tape {
  MatrixXd input;                // encoded windows
  std::vector<MatrixXd> hidden;  // post-tanh activations per trunk layer
  MatrixXd logits, means, raw, log_stds;
};

GmmOutput GmmBatch::column(Index b) const {
  const Index k = logits.rows();
  const Index d = means.rows() / k;
  GmmOutput out;
  const VectorXd l = logits.col(b);
  out.weights = (l.array() - log_sum_exp(l)).exp();
  out.means.resize(k, d);
  out.log_stds.resize(k, d);
  for (Index c = 0; c < k; ++c) {
    for (Index j = 0; j < d; ++j) {
      out.means(c, j) = means(c * d + j, b);
      out.log_stds(c, j) = log_stds(c * d + j, b);
    }
  }
  return out;
}

Network::Network(NetConfig config) : config_(config) {
  if (config_.obs_dim == 0 || config_.window == 0 || config_.hidden == 0 || config_.mixtures == 0 ||
      config_.action_dim == 0 || config_.hidden_layers == 0) {
    throw NnError(NnError::Code::kDimensionMismatch, "network dimensions must be positive");
  }
  std::size_t off = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols, bool bias) {
    layout_.push_back({std::move(name), off, rows, cols, bias});
    off += rows * cols;
  };
  std::size_t in = config_.input_dim();
  for (std::size_t l = 0; l < config_.hidden_layers; ++l) {
    add("trunk" + std::to_string(l) + ".weight", config_.hidden, in, false);
    add("trunk" + std::to_string(l) + ".bias", config_.hidden, 1, true);
    in = config_.hidden;
  }
  const std::size_t kd = config_.mixtures * config_.action_dim;
  add("logits.weight", config_.mixtures, in, false);
  add("logits.bias", config_.mixtures, 1, true);
  add("means.weight", kd, in, false);
  add("means.bias", kd, 1, true);
  add("log_stds.weight", kd, in, false);
  add("log_stds.bias", kd, 1, true);
  num_params_ = off;
}

const ParamSlice& Network::slice(const std::string& name) const {
  for (const auto& s : layout_) {
    if (s.name == name) return s;
  }
  throw NnError(NnError::Code::kDimensionMismatch, "no parameter slice '" + name + "'");
}

VectorXd Network::init_params(std::uint64_t seed) const {
  Rng rng(seed);
  VectorXd theta = VectorXd::Zero(static_cast<Index>(num_params_));
  for (const auto& s : layout_) {
    if (s.bias) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
    for (std::size_t i = 0; i < s.size(); ++i) {
      theta[static_cast<Index>(s.offset + i)] = rng.uniform(-limit, limit);
    }
  }
  return theta;
}

std::vector<std::uint8_t> Network::bias_mask() const {
  std::vector<std::uint8_t> mask(num_params_, 0);
  for (const auto& s : layout_) {
    if (s.bias) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), 1);
  }
  return mask;
}

double Network::soft_clamp(double raw) const {
  const double c = raw >= 0.0 ? config_.log_std_max : -config_.log_std_min;
  return c * std::tanh(raw / c);
}

void Network::check(const VectorXd& theta, Index input_rows) const {
  if (theta.size() != static_cast<Index>(num_params_)) {
    throw NnError(NnError::Code::kDimensionMismatch,
                  "parameter vector has " + std::to_string(theta.size()) + " entries, expected " +
                      std::to_string(num_params_));
  }
  if (input_rows != static_cast<Index>(config_.input_dim())) {
    throw NnError(NnError::Code::kDimensionMismatch,
                  "window has " + std::to_string(input_rows) + " entries, expected " +
                      std::to_string(config_.input_dim()));
  }
}

void Network::run(const VectorXd& theta, const MatrixXd& x, Tape& tape) const {
  auto mat = [&](const ParamSlice& s) {
    return CMap(theta.data() + s.offset, static_cast<Index>(s.rows), static_cast<Index>(s.cols));
  };
  auto vec = [&](const ParamSlice& s) { return CVMap(theta.data() + s.offset, static_cast<Index>(s.rows)); };
  tape.input = encode(x);
  tape.hidden.clear();
  tape.hidden.reserve(config_.hidden_layers);
  const MatrixXd* a = &tape.input;
  std::size_t i = 0;
  for (std::size_t l = 0; l < config_.hidden_layers; ++l, i += 2) {
    MatrixXd pre = mat(layout_[i]) * *a;
    pre.colwise() += vec(layout_[i + 1]);
    tape.hidden.push_back(pre.array().tanh().matrix());
    a = &tape.hidden.back();
  }
  auto head = [&](std::size_t w, MatrixXd& out) {
    out.noalias() = mat(layout_[w]) * *a;
    out.colwise() += vec(layout_[w + 1]);
  };
  head(i, tape.logits);
  head(i + 2, tape.means);
  head(i + 4, tape.raw);
  tape.log_stds = tape.raw.unaryExpr([this](double r) { return soft_clamp(r); });
}

MatrixXd Network::encode(const MatrixXd& windows) const {
  MatrixXd z = windows;
  const std::size_t od = config_.obs_dim;
  if (config_.relative_slots == 0 || od == 0) return z;
  const double k = config_.relative_scale;
  for (Index c = 0; c < z.cols(); ++c) {
    for (std::size_t f = 0; f < config_.window; ++f) {
      double* o = z.col(c).data() + f * od;
      for (std::size_t i = 0; i < config_.relative_slots && 7 + 4 * i <= od; ++i) {
        double* p = o + 3 + 4 * i;
        if (p[2] == 0.0 && p[3] == 0.0) continue;
        p[0] = (p[0] - o[0]) * k;
        p[1] = (p[1] - o[1]) * k;
      }
    }
  }
  return z;
}

GmmBatch Network::forward_batch(const VectorXd& theta, const MatrixXd& windows) const {
  check(theta, windows.rows());
  Tape tape;
  run(theta, windows, tape);
  return {std::move(tape.logits), std::move(tape.means), std::move(tape.log_stds)};
}

GmmOutput Network::forward(const VectorXd& theta, const VectorXd& window) const {
  return forward_batch(theta, MatrixXd(window)).column(0);
}

double Network::head_grad(const Tape& tape, Index b, const VectorXd& action, Eigen::Ref<VectorXd> g) const {
  const Index k = static_cast<Index>(config_.mixtures);
  const Index d = static_cast<Index>(config_.action_dim);
  const VectorXd logits = tape.logits.col(b);
  const VectorXd log_w = logits.array() - log_sum_exp(logits);
  VectorXd joint(k);
  MatrixXd z(k, d);
  for (Index c = 0; c < k; ++c) {
    double log_n = 0.0;
    for (Index j = 0; j < d; ++j) {
      const double s = tape.log_stds(c * d + j, b);
      z(c, j) = (action[j] - tape.means(c * d + j, b)) * std::exp(-s);
      log_n += -0.5 * z(c, j) * z(c, j) - s - kHalfLog2Pi;
    }
    joint[c] = log_w[c] + log_n;
  }
  const double lse = log_sum_exp(joint);
  const VectorXd resp = (joint.array() - lse).exp();
  const VectorXd w = log_w.array().exp();
  g.head(k) = w - resp;
  for (Index c = 0; c < k; ++c) {
    for (Index j = 0; j < d; ++j) {
      const Index row = c * d + j;
      const double s = tape.log_stds(row, b);
      g[k + row] = -resp[c] * z(c, j) * std::exp(-s);
      const double raw = tape.raw(row, b);
      const double cl = raw >= 0.0 ? config_.log_std_max : -config_.log_std_min;
      const double t = std::tanh(raw / cl);
      g[k + k * d + row] = -resp[c] * (z(c, j) * z(c, j) - 1.0) * (1.0 - t * t);
    }
  }
  return -lse;
}

void Network::backprop(const VectorXd& theta, const Tape& tape, const MatrixXd& g_head,
                       Eigen::Ref<VectorXd> grad) const {
  auto mat = [&](const ParamSlice& s) {
    return CMap(theta.data() + s.offset, static_cast<Index>(s.rows), static_cast<Index>(s.cols));
  };
  auto gmat = [&](const ParamSlice& s) {
    return Eigen::Map<MatrixXd>(grad.data() + s.offset, static_cast<Index>(s.rows), static_cast<Index>(s.cols));
  };
  auto gvec = [&](const ParamSlice& s) {
    return Eigen::Map<VectorXd>(grad.data() + s.offset, static_cast<Index>(s.rows));
  };
  const Index k = static_cast<Index>(config_.mixtures);
  const Index kd = k * static_cast<Index>(config_.action_dim);
  const std::size_t h = 2 * config_.hidden_layers;
  const MatrixXd& top = tape.hidden.back();
  const std::array<std::pair<Index, Index>, 3> parts{{{0, k}, {k, kd}, {k + kd, kd}}};
  MatrixXd dh = MatrixXd::Zero(top.rows(), top.cols());
  for (std::size_t p = 0; p < 3; ++p) {
    const auto block = g_head.middleRows(parts[p].first, parts[p].second);
    const ParamSlice& ws = layout_[h + 2 * p];
    gmat(ws).noalias() += block * top.transpose();
    gvec(layout_[h + 2 * p + 1]) += block.rowwise().sum();
    dh.noalias() += mat(ws).transpose() * block;
  }
  for (std::size_t l = config_.hidden_layers; l-- > 0;) {
    const MatrixXd& out = tape.hidden[l];
    const MatrixXd dpre = dh.array() * (1.0 - out.array().square());
    const MatrixXd& in = l == 0 ? tape.input : tape.hidden[l - 1];
    gmat(layout_[2 * l]).noalias() += dpre * in.transpose();
    gvec(layout_[2 * l + 1]) += dpre.rowwise().sum();
    if (l > 0) dh.noalias() = mat(layout_[2 * l]).transpose() * dpre;
  }
}

double Network::loss_and_grad(const VectorXd& theta, const MatrixXd& windows, const MatrixXd& actions,
                              VectorXd* grad) const {
  check(theta, windows.rows());
  if (actions.rows() != static_cast<Index>(config_.action_dim) || actions.cols() != windows.cols()) {
    throw NnError(NnError::Code::kDimensionMismatch, "action batch shape does not match windows");
  }
  Tape tape;
  run(theta, windows, tape);
  const Index k = static_cast<Index>(config_.mixtures);
  const Index rows = k + 2 * k * static_cast<Index>(config_.action_dim);
  const Index batch = windows.cols();
  MatrixXd g_head(rows, batch);
  double loss = 0.0;
  for (Index b = 0; b < batch; ++b) {
    const VectorXd a = actions.col(b);
    loss += head_grad(tape, b, a, g_head.col(b));
  }
  const double scale = 1.0 / static_cast<double>(batch);
  if (grad != nullptr) {
    grad->setZero(static_cast<Index>(num_params_));
    g_head *= scale;
    backprop(theta, tape, g_head, *grad);
  }
  return loss * scale;
}

VectorXd Network::backward(const VectorXd& theta, const VectorXd& window, const VectorXd& action) const {
  VectorXd grad;
  loss_and_grad(theta, MatrixXd(window), MatrixXd(action), &grad);
  return grad;
}

VectorXd Network::fisher_diagonal(const VectorXd& theta, const MatrixXd& windows, const MatrixXd& actions) const {
  check(theta, windows.rows());
  Tape tape;
  run(theta, windows, tape);
  const Index k = static_cast<Index>(config_.mixtures);
  const Index rows = k + 2 * k * static_cast<Index>(config_.action_dim);
  VectorXd fisher = VectorXd::Zero(static_cast<Index>(num_params_));
  VectorXd g(static_cast<Index>(num_params_));
  MatrixXd g_head(rows, 1);
  for (Index b = 0; b < windows.cols(); ++b) {
    const VectorXd a = actions.col(b);
    head_grad(tape, b, a, g_head.col(0));
    Tape one;
    one.input = tape.input.col(b);
    one.hidden.reserve(tape.hidden.size());
    for (const auto& h : tape.hidden) one.hidden.push_back(h.col(b));
    g.setZero();
    backprop(theta, one, g_head, g);
    fisher.array() += g.array().square();
  }
  if (windows.cols() > 0) fisher /= static_cast<double>(windows.cols());
  return fisher;
}

double nll(const GmmOutput& out, const VectorXd& action) {
  const Index k = out.weights.size();
  const Index d = out.means.cols();
  VectorXd joint(k);
  for (Index c = 0; c < k; ++c) {
    double log_n = 0.0;
    for (Index j = 0; j < d; ++j) {
      const double s = out.log_stds(c, j);
      const double z = (action[j] - out.means(c, j)) * std::exp(-s);
      log_n += -0.5 * z * z - s - kHalfLog2Pi;
    }
    joint[c] = std::log(out.weights[c]) + log_n;
  }
  return -log_sum_exp(joint);
}

VectorXd sample_action(const GmmOutput& out, Rng& rng) {
  double u = rng.uniform();
  Index c = out.weights.size() - 1;
  for (Index i = 0; i < out.weights.size(); ++i) {
    if (u < out.weights[i]) {
      c = i;
      break;
    }
    u -= out.weights[i];
  }
  VectorXd a(out.means.cols());
  for (Index j = 0; j < a.size(); ++j) {
    a[j] = std::clamp(out.means(c, j) + std::exp(out.log_stds(c, j)) * rng.normal(), -1.0, 1.0);
  }
  return a;
}

VectorXd mode_action(const GmmOutput& out) {
  Index c = 0;
  out.weights.maxCoeff(&c);
  return out.means.row(c).transpose().cwiseMax(-1.0).cwiseMin(1.0);
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) return lr_max;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

void adam_step(AdamState& state, VectorXd& theta, const VectorXd& grad, std::size_t step, std::size_t total_steps,
               const AdamConfig& config, const std::vector<std::uint8_t>* trainable) {
  if (state.m.size() != theta.size()) state.reset(theta.size());
  ++state.updates;
  const double lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min);
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.updates));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.updates));
  for (Index i = 0; i < theta.size(); ++i) {
    if (trainable != nullptr && (*trainable)[static_cast<std::size_t>(i)] == 0) continue;
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grad[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    theta[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + config.eps);
  }
}

void write_checkpoint(const std::string& path, const NetConfig& config, const VectorXd& theta,
                      const std::string& metadata_json) {
  nlohmann::json header = {
      {"format", "lldm-checkpoint"},
      {"version", kCheckpointVersion},
      {"config",
       {{"obs_dim", config.obs_dim},
        {"window", config.window},
        {"hidden", config.hidden},
        {"hidden_layers", config.hidden_layers},
        {"mixtures", config.mixtures},
        {"action_dim", config.action_dim},
        {"log_std_min", config.log_std_min},
        {"log_std_max", config.log_std_max},
        {"relative_slots", config.relative_slots},
        {"relative_scale", config.relative_scale}}},
      {"metadata", nlohmann::json::parse(metadata_json)},
  };
  nlohmann::json layout = nlohmann::json::array();
  const Network net(config);
  for (const auto& s : net.layout()) {
    layout.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  }
  header["layout"] = layout;
  const std::string text = header.dump();
  std::string out(kMagic, 8);
  append_u64_le(out, text.size());
  out += text;
  append_u64_le(out, static_cast<std::uint64_t>(theta.size()));
  append_f64_le(out, std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())));
  write_file(path, out);
}

Checkpoint read_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  auto fail = [&](const std::string& why) { return NnError(NnError::Code::kCheckpoint, path + ": " + why); };
  if (data.size() < 16 || data.compare(0, 8, kMagic) != 0) throw fail("not a checkpoint");
  const std::uint64_t header_len = read_u64_le(data, 8);
  if (data.size() < 16 + header_len + 8) throw fail("truncated header");
  const auto header = nlohmann::json::parse(data.substr(16, header_len));
  if (header.at("version").get<int>() != kCheckpointVersion) throw fail("unsupported version");
  Checkpoint ck;
  const auto& c = header.at("config");
  ck.config.obs_dim = c.at("obs_dim");
  ck.config.window = c.at("window");
  ck.config.hidden = c.at("hidden");
  ck.config.hidden_layers = c.at("hidden_layers");
  ck.config.mixtures = c.at("mixtures");
  ck.config.action_dim = c.at("action_dim");
  ck.config.log_std_min = c.at("log_std_min");
  ck.config.log_std_max = c.at("log_std_max");
  ck.config.relative_slots = c.at("relative_slots");
  ck.config.relative_scale = c.at("relative_scale");
  ck.metadata_json = header.at("metadata").dump();
  const std::size_t at = 16 + header_len;
  const std::uint64_t n = read_u64_le(data, at);
  if (n != Network(ck.config).num_params()) throw fail("parameter count does not match layout");
  ck.theta.resize(static_cast<Index>(n));
  read_f64_le(std::string_view(data).substr(at + 8),
              std::span<double>(ck.theta.data(), static_cast<std::size_t>(n)));
  return ck;
}

}  // namespace lldm

#include "lldm/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "lldm/util.hpp"

#ifndef LLDM_VERSION
#define LLDM_VERSION "dev"
#endif

namespace lldm {

namespace fs = std::filesystem;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

const char* version_string() { return LLDM_VERSION; }

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Runs fn(i) for i in [0, n) over `workers` threads; results land by index.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

template <class T>
void read_opt(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

json recipe_json(const SuiteRecipe& r) {
  return {{"kind", to_string(r.kind)}, {"task_count", r.task_count}, {"seed", r.seed}};
}

SuiteRecipe recipe_from(const json& j, SuiteRecipe r) {
  if (j.contains("kind")) r.kind = suite_kind_from_string(j.at("kind").get<std::string>());
  read_opt(j, "task_count", r.task_count);
  read_opt(j, "seed", r.seed);
  return r;
}

json sim_json(const SimConfig& s) {
  return {{"horizon", s.horizon},
          {"max_step", s.max_step},
          {"grasp_radius", s.grasp_radius},
          {"open_threshold", s.open_threshold},
          {"object_radius", s.object_radius},
          {"placement_attempts", s.placement_attempts},
          {"expert_gain", s.expert_gain},
          {"arrive_tolerance", s.arrive_tolerance}};
}

void sim_from(const json& j, SimConfig& s) {
  read_opt(j, "horizon", s.horizon);
  read_opt(j, "max_step", s.max_step);
  read_opt(j, "grasp_radius", s.grasp_radius);
  read_opt(j, "open_threshold", s.open_threshold);
  read_opt(j, "object_radius", s.object_radius);
  read_opt(j, "placement_attempts", s.placement_attempts);
  read_opt(j, "expert_gain", s.expert_gain);
  read_opt(j, "arrive_tolerance", s.arrive_tolerance);
}

json net_json(const NetConfig& n, bool relative) {
  return {{"window", n.window},           {"hidden", n.hidden},
          {"hidden_layers", n.hidden_layers}, {"mixtures", n.mixtures},
          {"log_std_min", n.log_std_min}, {"log_std_max", n.log_std_max},
          {"relative_encoding", relative}, {"relative_scale", n.relative_scale}};
}

void net_from(const json& j, NetConfig& n, bool& relative) {
  read_opt(j, "window", n.window);
  read_opt(j, "hidden", n.hidden);
  read_opt(j, "hidden_layers", n.hidden_layers);
  read_opt(j, "mixtures", n.mixtures);
  read_opt(j, "log_std_min", n.log_std_min);
  read_opt(j, "log_std_max", n.log_std_max);
  read_opt(j, "relative_encoding", relative);
  read_opt(j, "relative_scale", n.relative_scale);
}

json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"checkpoint_every", t.checkpoint_every},
          {"lr_max", t.adam.lr_max},
          {"lr_min", t.adam.lr_min},
          {"beta1", t.adam.beta1},
          {"beta2", t.adam.beta2},
          {"eps", t.adam.eps},
          {"replay_batch", t.replay_batch},
          {"buffer_capacity", t.buffer_capacity},
          {"insert_per_task", t.insert_per_task},
          {"ewc_lambda", t.ewc_lambda},
          {"ewc_gamma", t.ewc_gamma},
          {"keep_ratio", t.keep_ratio},
          {"finetune_epochs", t.finetune_epochs},
          {"capacity_floor", t.capacity_floor}};
}

void train_from(const json& j, TrainConfig& t) {
  read_opt(j, "epochs", t.epochs);
  read_opt(j, "batch_size", t.batch_size);
  read_opt(j, "checkpoint_every", t.checkpoint_every);
  read_opt(j, "lr_max", t.adam.lr_max);
  read_opt(j, "lr_min", t.adam.lr_min);
  read_opt(j, "beta1", t.adam.beta1);
  read_opt(j, "beta2", t.adam.beta2);
  read_opt(j, "eps", t.adam.eps);
  read_opt(j, "replay_batch", t.replay_batch);
  read_opt(j, "buffer_capacity", t.buffer_capacity);
  read_opt(j, "insert_per_task", t.insert_per_task);
  read_opt(j, "ewc_lambda", t.ewc_lambda);
  read_opt(j, "ewc_gamma", t.ewc_gamma);
  read_opt(j, "keep_ratio", t.keep_ratio);
  read_opt(j, "finetune_epochs", t.finetune_epochs);
  read_opt(j, "capacity_floor", t.capacity_floor);
}

json config_core(const ExperimentConfig& c) {
  return {{"suite_dir", c.suite_dir},
          {"recipe", recipe_json(c.recipe)},
          {"regime", to_string(c.regime)},
          {"seeds", c.seeds},
          {"ordering", c.ordering},
          {"orderings", c.orderings},
          {"sampled_orderings", c.sampled_orderings},
          {"ordering_seed", c.ordering_seed},
          {"pretrain",
           {{"suite_dir", c.pretrain_suite_dir},
            {"recipe", recipe_json(c.pretrain_recipe)},
            {"epochs", c.pretrain_epochs},
            {"checkpoint_every", c.pretrain_checkpoint_every}}},
          {"demos", c.demos},
          {"rollouts", c.rollouts},
          {"demo_noise", c.demo_noise},
          {"demo_seed", c.demo_seed},
          {"paper_protocol", c.paper_protocol},
          {"sim", sim_json(c.sim)},
          {"net", net_json(c.net, c.relative_encoding)},
          {"train", train_json(c.train)}};
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw HarnessError(HarnessError::Code::kIo, "cannot create " + p.string() + ": " + ec.message());
}

std::string seed_tag(std::uint64_t seed) { return "seed" + std::to_string(seed); }

std::string task_tag(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%02zu", i);
  return buf;
}

json task_record_json(const TaskRecord& t) {
  return {{"task", t.task},           {"epochs", t.epochs},
          {"diag", t.diag},           {"epoch_loss", t.epoch_loss},
          {"best_epoch", t.best_epoch}, {"checkpoint", t.checkpoint},
          {"train_seconds", t.train_seconds}, {"eval_seconds", t.eval_seconds}};
}

TaskRecord task_record_from(const json& j) {
  TaskRecord t;
  t.task = j.at("task");
  t.epochs = j.at("epochs").get<std::vector<std::size_t>>();
  t.diag = j.at("diag").get<std::vector<double>>();
  t.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
  t.best_epoch = j.at("best_epoch");
  t.checkpoint = j.at("checkpoint");
  t.train_seconds = j.at("train_seconds");
  t.eval_seconds = j.at("eval_seconds");
  return t;
}

// Everything a run needs besides the config: worlds, demos, datasets.
struct Prepared {
  std::vector<World> worlds;
  std::vector<DemoSet> demos;
  std::vector<Dataset> data;
};

Prepared prepare(const ExperimentConfig& config, const RunContext& ctx, const fs::path& dir) {
  Prepared p;
  for (const auto& spec : ctx.suite.tasks) p.worlds.emplace_back(spec, config.sim);
  const std::size_t window = config.net.window;
  for (std::size_t j = 0; j < ctx.suite.tasks.size(); ++j) {
    try {
      p.demos.push_back(prepare_demos(config, ctx, j, (dir / "demos").string()));
    } catch (const std::exception& e) {
      throw HarnessError(HarnessError::Code::kTask, "task " + std::to_string(j) + ": " + e.what());
    }
    p.data.push_back(Dataset::from_demos(p.demos.back(), window));
  }
  return p;
}

class SeedRunner {
 public:
  SeedRunner(const ExperimentConfig& config, const RunContext& ctx, const Prepared& prep, const fs::path& dir,
             std::vector<std::size_t> order, std::uint64_t seed)
      : config_(config),
        ctx_(ctx),
        prep_(prep),
        dir_(dir),
        order_(std::move(order)),
        seed_(seed),
        net_(net_config(config, ctx.layout)) {}

  SeedRecord run() {
    const auto t0 = Clock::now();
    SeedRecord rec;
    rec.seed = seed_;
    rec.ordering = order_;
    rec.matrix.K = order_.size();
    rec.matrix.eval_epochs = EvalMatrix::default_epochs(config_.train.epochs, config_.train.checkpoint_every);
    ensure_dir(dir_ / "ckpts" / seed_tag(seed_));
    ensure_dir(dir_ / "state");
    double previous = 0.0;
    if (config_.regime == RegimeKind::kMTL) {
      if (!load_finished(rec, previous)) run_mtl(rec);
    } else {
      run_sequential(rec, previous);
    }
    rec.metrics = compute_metrics(rec.matrix);
    rec.seconds = previous + seconds_since(t0);
    save_state(rec, rec.matrix.K, nullptr, nullptr, rec.seconds);
    return rec;
  }

 private:
  fs::path state_json() const { return dir_ / "state" / (seed_tag(seed_) + ".json"); }
  fs::path state_theta() const { return dir_ / "state" / (seed_tag(seed_) + "_theta.ckpt"); }
  fs::path state_regime() const { return dir_ / "state" / (seed_tag(seed_) + "_regime.bin"); }

  double evaluate(const VectorXd& theta, std::size_t position, std::size_t epoch) const {
    const std::size_t j = order_[position];
    return evaluate_params(net_, theta, prep_.worlds[j], ctx_.layout, ctx_.embedding(j), config_.rollouts,
                           eval_seed(seed_, j, epoch));
  }

  VectorXd initial_theta() const {
    if (ctx_.init) {
      if (static_cast<std::size_t>(ctx_.init->size()) != net_.num_params()) {
        throw HarnessError(HarnessError::Code::kConfig, "initial parameters do not fit the network");
      }
      return *ctx_.init;
    }
    return net_.init_params(stream_seed(seed_, Stream::kInit));
  }

  std::string save_best(const VectorXd& theta, std::size_t position, std::size_t epoch) const {
    const std::string rel = "ckpts/" + seed_tag(seed_) + "/task" + task_tag(position) + "_best.ckpt";
    json meta = {{"seed", seed_}, {"position", position}, {"task", order_[position]}, {"epoch", epoch}};
    write_checkpoint((dir_ / rel).string(), net_.config(), theta, meta.dump());
    return rel;
  }

  void save_state(const SeedRecord& rec, std::size_t next, const VectorXd* theta, const Regime* regime,
                  double seconds) const {
    json tasks = json::array();
    for (const auto& t : rec.tasks) tasks.push_back(task_record_json(t));
    json j = {{"digest", config_.digest()},
              {"seed", seed_},
              {"ordering", order_},
              {"next", next},
              {"seconds", seconds},
              {"matrix", json::parse(rec.matrix.to_json())},
              {"tasks", tasks}};
    if (theta != nullptr) write_checkpoint(state_theta().string(), net_.config(), *theta);
    if (regime != nullptr) write_file(state_regime().string(), regime->save_state());
    write_file(state_json().string(), j.dump(2));
  }

  // Restores a previous invocation's progress; returns the next position.
  std::size_t load_state(SeedRecord& rec, VectorXd& theta, Regime* regime, double& seconds) const {
    if (!fs::exists(state_json())) return 0;
    const json j = json::parse(read_file(state_json().string()));
    if (j.at("digest") != config_.digest() || j.at("ordering").get<std::vector<std::size_t>>() != order_) return 0;
    const std::size_t next = j.at("next");
    rec.matrix = EvalMatrix::from_json(j.at("matrix").dump());
    rec.tasks.clear();
    for (const auto& t : j.at("tasks")) rec.tasks.push_back(task_record_from(t));
    seconds = j.at("seconds");
    if (next > 0 && next < order_.size()) {
      theta = read_checkpoint(state_theta().string()).theta;
      if (regime != nullptr && fs::exists(state_regime())) regime->load_state(read_file(state_regime().string()));
    }
    return next;
  }

  bool load_finished(SeedRecord& rec, double& seconds) const {
    VectorXd unused;
    return load_state(rec, unused, nullptr, seconds) == order_.size();
  }

  void run_sequential(SeedRecord& rec, double& previous) {
    const std::size_t K = order_.size();
    auto regime = make_regime(config_.regime, config_.train);
    VectorXd theta = initial_theta();
    const std::size_t start = load_state(rec, theta, regime.get(), previous);
    for (std::size_t pos = start; pos < K; ++pos) {
      const std::size_t j = order_[pos];
      TaskRecord task;
      task.task = j;
      auto t0 = Clock::now();
      TaskCheckpoints ck;
      try {
        ck = regime->train_task(net_, theta, prep_.data[j], pos, seed_);
      } catch (const std::exception& e) {
        throw HarnessError(HarnessError::Code::kTask, "task " + std::to_string(j) + ": " + e.what());
      }
      task.train_seconds = seconds_since(t0);
      if (ck.epochs != rec.matrix.eval_epochs) {
        throw HarnessError(HarnessError::Code::kTask, "checkpoint schedule does not match the evaluation grid");
      }
      t0 = Clock::now();
      std::vector<double> diag(ck.params.size());
      parallel_for(diag.size(), config_.workers,
                   [&](std::size_t e) { diag[e] = evaluate(ck.params[e], pos, ck.epochs[e]); });
      for (std::size_t e = 0; e < diag.size(); ++e) rec.matrix.set(pos, pos, ck.epochs[e], diag[e]);
      const BestCheckpoint best = best_checkpoint(diag);
      task.epochs = ck.epochs;
      task.diag = diag;
      task.epoch_loss = ck.epoch_loss;
      task.best_epoch = ck.epochs[best.index];
      theta = ck.params[best.index];
      task.checkpoint = save_best(theta, pos, task.best_epoch);
      const double train_before_finish = task.train_seconds;
      const auto t1 = Clock::now();
      regime->finish_task(net_, theta, prep_.data[j], prep_.demos[j], pos, seed_);
      task.train_seconds += seconds_since(t1);
      // Earlier tasks, on the rollout set of their own best evaluation.
      std::vector<double> prior(pos);
      parallel_for(pos, config_.workers, [&](std::size_t q) {
        prior[q] = evaluate(regime->inference_params(theta, q), q, rec.tasks[q].best_epoch);
      });
      for (std::size_t q = 0; q < pos; ++q) rec.matrix.set(pos, q, task.best_epoch, prior[q]);
      task.eval_seconds = seconds_since(t0) - task.train_seconds + train_before_finish;
      rec.tasks.push_back(task);
      save_state(rec, pos + 1, &theta, regime.get(), previous);
      if (config_.interrupt_after != 0 && pos + 1 == config_.interrupt_after && pos + 1 < K) {
        throw HarnessError(HarnessError::Code::kInterrupted, "interrupted after task " + std::to_string(pos));
      }
    }
  }

  void run_mtl(SeedRecord& rec) {
    const std::size_t K = order_.size();
    VectorXd theta = initial_theta();
    std::vector<Dataset> data;
    for (std::size_t pos = 0; pos < K; ++pos) data.push_back(prep_.data[order_[pos]]);
    auto t0 = Clock::now();
    TaskCheckpoints ck = train_mtl(net_, theta, data, config_.train, seed_);
    const double train_seconds = seconds_since(t0);
    if (ck.epochs != rec.matrix.eval_epochs) {
      throw HarnessError(HarnessError::Code::kTask, "checkpoint schedule does not match the evaluation grid");
    }
    t0 = Clock::now();
    const std::size_t E = ck.params.size();
    std::vector<double> s(E * K);
    parallel_for(E * K, config_.workers,
                 [&](std::size_t idx) { s[idx] = evaluate(ck.params[idx / K], idx % K, ck.epochs[idx / K]); });
    std::vector<double> mean(E, 0.0);
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t q = 0; q < K; ++q) {
        rec.matrix.set(q, q, ck.epochs[e], s[e * K + q]);
        mean[e] += s[e * K + q] / static_cast<double>(K);
      }
    }
    // One checkpoint serves every task: the best mean success.
    const std::size_t g = best_checkpoint(mean).index;
    const std::string ckpt = save_best(ck.params[g], 0, ck.epochs[g]);
    const double eval_seconds = seconds_since(t0);
    for (std::size_t t = 0; t < K; ++t) {
      std::vector<double> diag(E);
      for (std::size_t e = 0; e < E; ++e) diag[e] = s[e * K + t];
      TaskRecord task;
      task.task = order_[t];
      task.epochs = ck.epochs;
      task.diag = diag;
      task.epoch_loss = ck.epoch_loss;
      task.best_epoch = ck.epochs[best_checkpoint(diag).index];
      task.checkpoint = ckpt;
      task.train_seconds = t == 0 ? train_seconds : 0.0;
      task.eval_seconds = t == 0 ? eval_seconds : 0.0;
      for (std::size_t k = 0; k < t; ++k) rec.matrix.set(t, k, task.best_epoch, s[g * K + k]);
      rec.tasks.push_back(task);
    }
  }

  const ExperimentConfig& config_;
  const RunContext& ctx_;
  const Prepared& prep_;
  fs::path dir_;
  std::vector<std::size_t> order_;
  std::uint64_t seed_;
  Network net_;
};

json seed_record_json(const SeedRecord& s) {
  json tasks = json::array();
  for (const auto& t : s.tasks) tasks.push_back(task_record_json(t));
  return {{"seed", s.seed},
          {"ordering", s.ordering},
          {"matrix", json::parse(s.matrix.to_json())},
          {"metrics", json::parse(s.metrics.to_json())},
          {"tasks", tasks},
          {"seconds", s.seconds}};
}

SeedRecord seed_record_from(const json& j) {
  SeedRecord s;
  s.seed = j.at("seed");
  s.ordering = j.at("ordering").get<std::vector<std::size_t>>();
  s.matrix = EvalMatrix::from_json(j.at("matrix").dump());
  s.metrics = MetricReport::from_json(j.at("metrics").dump());
  for (const auto& t : j.at("tasks")) s.tasks.push_back(task_record_from(t));
  s.seconds = j.at("seconds");
  return s;
}

void write_outputs(const RunRecord& rec, const fs::path& dir) {
  json matrices = json::array();
  json metrics = json::array();
  for (const auto& s : rec.seeds) {
    matrices.push_back({{"seed", s.seed}, {"ordering", s.ordering}, {"matrix", json::parse(s.matrix.to_json())}});
    metrics.push_back({{"seed", s.seed}, {"report", json::parse(s.metrics.to_json())}});
  }
  write_file((dir / "evalmatrix.json").string(), json{{"seeds", matrices}}.dump(2) + "\n");
  write_file((dir / "metrics.json").string(),
             json{{"seeds", metrics}, {"aggregate", json::parse(rec.aggregate.to_json())}}.dump(2) + "\n");
  write_file((dir / "record.json").string(), rec.to_json() + "\n");
}

// ---------------------------------------------------------------- SVG

struct Series {
  std::string name;
  std::vector<double> x, y;
};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string svg_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                      const std::vector<Series>& series, double ymin = 0.0, double ymax = 1.0) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const double W = 560, H = 360, L = 60, R = 150, T = 40, B = 50;
  double xmin = 0, xmax = 1;
  bool first = true;
  for (const auto& s : series) {
    for (double x : s.x) {
      if (first) xmin = xmax = x, first = false;
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
    }
  }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  std::ostringstream os;
  os.precision(6);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
     << W << ' ' << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = ymin + (ymax - ymin) * t / 4.0;
    const double xv = xmin + (xmax - xmin) * t / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << yv
       << "</text>\n"
       << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\" font-size=\"10\">" << xv
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << xml_escape(xlabel) << "</text>\n"
     << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << xml_escape(ylabel) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kColors[i % 10];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.x.size() && k < s.y.size(); ++k) {
      os << (k ? " " : "") << px(s.x[k]) << ',' << py(s.y[k]);
    }
    os << "\"/>\n";
    for (std::size_t k = 0; k < s.x.size() && k < s.y.size(); ++k) {
      os << "<circle cx=\"" << px(s.x[k]) << "\" cy=\"" << py(s.y[k]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = T + 16.0 * static_cast<double>(i);
    os << "<rect x=\"" << W - R + 10 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << color
       << "\"/>\n"
       << "<text x=\"" << W - R + 26 << "\" y=\"" << ly + 9 << "\" font-size=\"11\">" << xml_escape(s.name)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string fmt17(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------- config

ExperimentConfig ExperimentConfig::fast() {
  ExperimentConfig c;
  c.train.adam.lr_max = 1e-3;
  c.train.adam.lr_min = 1e-4;
  return c;
}

void ExperimentConfig::apply_paper_protocol() {
  paper_protocol = true;
  demos = 50;
  rollouts = 20;
  train.adam.lr_max = 1e-4;
  train.adam.lr_min = 1e-5;
}

std::string ExperimentConfig::to_json() const {
  json j = config_core(*this);
  j["output_root"] = output_root;
  j["workers"] = workers;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  ExperimentConfig c = fast();
  try {
    const json j = json::parse(text);
    if (j.value("paper_protocol", false)) c.apply_paper_protocol();
    read_opt(j, "suite_dir", c.suite_dir);
    if (j.contains("recipe")) c.recipe = recipe_from(j.at("recipe"), c.recipe);
    if (j.contains("regime")) c.regime = regime_from_string(j.at("regime").get<std::string>());
    read_opt(j, "seeds", c.seeds);
    read_opt(j, "ordering", c.ordering);
    read_opt(j, "orderings", c.orderings);
    read_opt(j, "sampled_orderings", c.sampled_orderings);
    read_opt(j, "ordering_seed", c.ordering_seed);
    if (j.contains("pretrain")) {
      const json& p = j.at("pretrain");
      read_opt(p, "suite_dir", c.pretrain_suite_dir);
      if (p.contains("recipe")) c.pretrain_recipe = recipe_from(p.at("recipe"), c.pretrain_recipe);
      read_opt(p, "epochs", c.pretrain_epochs);
      read_opt(p, "checkpoint_every", c.pretrain_checkpoint_every);
    }
    read_opt(j, "demos", c.demos);
    read_opt(j, "rollouts", c.rollouts);
    read_opt(j, "demo_noise", c.demo_noise);
    read_opt(j, "demo_seed", c.demo_seed);
    if (j.contains("sim")) sim_from(j.at("sim"), c.sim);
    if (j.contains("net")) net_from(j.at("net"), c.net, c.relative_encoding);
    if (j.contains("train")) train_from(j.at("train"), c.train);
    read_opt(j, "output_root", c.output_root);
    read_opt(j, "workers", c.workers);
  } catch (const json::exception& e) {
    throw HarnessError(HarnessError::Code::kConfig, std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw HarnessError(HarnessError::Code::kConfig, std::string("config: ") + e.what());
  } catch (const LifelongError& e) {
    throw HarnessError(HarnessError::Code::kConfig, std::string("config: ") + e.what());
  } catch (const TaskgenError& e) {
    throw HarnessError(HarnessError::Code::kConfig, std::string("config: ") + e.what());
  }
  if (c.seeds.empty()) throw HarnessError(HarnessError::Code::kConfig, "config: no seeds");
  if (c.rollouts <= 0) throw HarnessError(HarnessError::Code::kConfig, "config: rollouts must be positive");
  if (c.train.checkpoint_every == 0) throw HarnessError(HarnessError::Code::kConfig, "config: checkpoint_every is 0");
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw HarnessError(HarnessError::Code::kIo, e.what());
  }
  return from_json(text);
}

std::string ExperimentConfig::digest() const { return hex64(fnv1a64(config_core(*this).dump())); }

std::vector<std::size_t> ExperimentConfig::resolved_ordering(std::size_t task_count) const {
  std::vector<std::size_t> order(task_count);
  std::iota(order.begin(), order.end(), 0);
  if (ordering.empty()) return order;
  std::vector<std::size_t> sorted = ordering;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != order) {
    throw HarnessError(HarnessError::Code::kConfig,
                       "ordering is not a permutation of the " + std::to_string(task_count) + " suite tasks");
  }
  return ordering;
}

// ---------------------------------------------------------------- records

std::string RunRecord::to_json() const {
  json seeds_json = json::array();
  for (const auto& s : seeds) seeds_json.push_back(seed_record_json(s));
  return json{{"digest", digest},
              {"version", version},
              {"suite_kind", suite_kind},
              {"regime", regime},
              {"rollouts", rollouts},
              {"seeds", seeds_json},
              {"aggregate", json::parse(aggregate.to_json())}}
      .dump(2);
}

RunRecord RunRecord::from_json(const std::string& text) {
  RunRecord r;
  const json j = json::parse(text);
  r.digest = j.at("digest");
  r.version = j.at("version");
  r.suite_kind = j.at("suite_kind");
  r.regime = j.at("regime");
  r.rollouts = j.at("rollouts");
  for (const auto& s : j.at("seeds")) r.seeds.push_back(seed_record_from(s));
  std::vector<MetricReport> reports;
  for (const auto& s : r.seeds) reports.push_back(s.metrics);
  r.aggregate = aggregate_seeds(reports);
  return r;
}

RunRecord RunRecord::load(const std::string& run_dir) {
  const fs::path p = fs::path(run_dir) / "record.json";
  if (!fs::exists(p)) throw HarnessError(HarnessError::Code::kIo, "no record.json in " + run_dir);
  RunRecord r = from_json(read_file(p.string()));
  r.dir = run_dir;
  return r;
}

// ---------------------------------------------------------------- runs

std::vector<double> RunContext::embedding(std::size_t task) const {
  return one_hot(embedding_offset + task, layout.embedding_dim);
}

Suite load_suite(const std::string& dir, const SuiteRecipe& recipe) {
  if (dir.empty()) return build_suite(recipe);
  return read_suite(dir);
}

RunContext make_context(const ExperimentConfig& config) {
  RunContext ctx;
  ctx.suite = load_suite(config.suite_dir, config.recipe);
  if (ctx.suite.tasks.empty()) throw HarnessError(HarnessError::Code::kConfig, "suite has no tasks");
  ctx.layout = layout_for(ctx.suite.tasks, ctx.suite.tasks.size());
  return ctx;
}

NetConfig net_config(const ExperimentConfig& config, const ObsLayout& layout) {
  NetConfig n = config.net;
  n.obs_dim = layout.dim();
  n.relative_slots = config.relative_encoding ? layout.max_objects : 0;
  return n;
}

DemoSet prepare_demos(const ExperimentConfig& config, const RunContext& ctx, std::size_t task,
                      const std::string& dir) {
  const World world(ctx.suite.tasks.at(task), config.sim);
  const std::size_t id = ctx.embedding_offset + task;
  const fs::path path = dir.empty() ? fs::path() : fs::path(dir) / ("task_" + task_tag(task) + ".json");
  if (!dir.empty() && fs::exists(path)) {
    DemoSet d = read_demos(path.string());
    if (d.task_id == id && d.obs_dim == ctx.layout.dim() && d.trajectories.size() == config.demos &&
        d.ordering_digest == ordering_digest(world, ctx.layout)) {
      return d;
    }
  }
  DemoSet d = collect_demos(world, ctx.layout, id, config.demos, stream_seed(config.demo_seed, Stream::kDemo, id),
                            config.demo_noise);
  if (!dir.empty()) {
    ensure_dir(dir);
    write_demos(path.string(), d);
  }
  return d;
}

std::uint64_t eval_seed(std::uint64_t seed, std::size_t task, std::size_t epoch) {
  return stream_seed(seed, Stream::kEval, task, epoch);
}

double evaluate_params(const Network& net, const VectorXd& theta, const World& world, const ObsLayout& layout,
                       const std::vector<double>& embedding, int rollouts, std::uint64_t base_seed,
                       std::vector<RolloutResult>* details) {
  std::vector<Rng> rngs;
  for (int r = 0; r < rollouts; ++r) rngs.emplace_back(mix_seed({base_seed, static_cast<std::uint64_t>(r), 1}));
  BatchPolicy policy = [&](std::span<const std::size_t> ids, std::span<const WorldState* const>,
                           const MatrixXd& windows, std::vector<Action>& actions) {
    const GmmBatch out = net.forward_batch(theta, windows);
    for (Index b = 0; b < windows.cols(); ++b) {
      const VectorXd a = sample_action(out.column(b), rngs[ids[static_cast<std::size_t>(b)]]);
      actions[static_cast<std::size_t>(b)] = Action{a[0], a[1], a[2]};
    }
  };
  return evaluate_policy(world, layout, embedding, net.config().window, policy, rollouts, base_seed, details);
}

RolloutResult trace_rollout(const Network& net, const VectorXd& theta, const World& world, const ObsLayout& layout,
                            const std::vector<double>& embedding, std::uint64_t base_seed, std::size_t rollout,
                            std::vector<TraceStep>& trace) {
  // Rollouts are independent, so the first rollout+1 of them reproduce it.
  std::vector<Rng> rngs;
  for (std::size_t r = 0; r <= rollout; ++r) rngs.emplace_back(mix_seed({base_seed, r, 1}));
  trace.clear();
  BatchPolicy policy = [&](std::span<const std::size_t> ids, std::span<const WorldState* const> states,
                           const MatrixXd& windows, std::vector<Action>& actions) {
    const GmmBatch out = net.forward_batch(theta, windows);
    for (Index b = 0; b < windows.cols(); ++b) {
      const std::size_t id = ids[static_cast<std::size_t>(b)];
      const VectorXd a = sample_action(out.column(b), rngs[id]);
      actions[static_cast<std::size_t>(b)] = Action{a[0], a[1], a[2]};
      if (id == rollout) trace.push_back({*states[static_cast<std::size_t>(b)], actions[static_cast<std::size_t>(b)]});
    }
  };
  std::vector<RolloutResult> details;
  evaluate_policy(world, layout, embedding, net.config().window, policy, static_cast<int>(rollout + 1), base_seed,
                  &details);
  return details.at(rollout);
}

std::vector<std::string> audit_protocol(const RunRecord& record, std::size_t epochs, std::size_t every,
                                        int rollouts) {
  std::vector<std::string> bad;
  const auto grid = EvalMatrix::default_epochs(epochs, every);
  if (record.rollouts != rollouts) {
    bad.push_back("evaluations used " + std::to_string(record.rollouts) + " rollouts, expected " +
                  std::to_string(rollouts));
  }
  if (record.seeds.empty()) bad.push_back("record has no seeds");
  for (const auto& s : record.seeds) {
    const std::string tag = "seed " + std::to_string(s.seed);
    const std::size_t K = s.matrix.K;
    if (s.tasks.size() != K) bad.push_back(tag + ": " + std::to_string(s.tasks.size()) + " task records for K=" + std::to_string(K));
    if (s.matrix.eval_epochs != grid) bad.push_back(tag + ": evaluation epochs differ from the protocol grid");
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t diag = 0;
      for (const auto& [key, rate] : s.matrix.entries) {
        if (std::get<0>(key) == k && std::get<1>(key) == k) ++diag;
      }
      if (diag != grid.size()) {
        bad.push_back(tag + ": task " + std::to_string(k) + " has " + std::to_string(diag) + " diagonal evaluations");
      }
      for (std::size_t e : grid) {
        if (!s.matrix.find(k, k, e)) bad.push_back(tag + ": task " + std::to_string(k) + " lacks epoch " + std::to_string(e));
      }
      if (k < s.tasks.size() && s.tasks[k].diag.size() != grid.size()) {
        bad.push_back(tag + ": task " + std::to_string(k) + " diagonal curve has the wrong length");
      }
      for (std::size_t q = 0; q < k; ++q) {
        bool found = false;
        for (const auto& [key, rate] : s.matrix.entries) found |= std::get<0>(key) == k && std::get<1>(key) == q;
        if (!found) bad.push_back(tag + ": task " + std::to_string(q) + " not evaluated after task " + std::to_string(k));
      }
    }
  }
  return bad;
}

RunRecord run_lifelong(const ExperimentConfig& config, const RunContext& ctx, const std::string& dir_override) {
  const fs::path dir = dir_override.empty() ? fs::path(config.output_root) / config.digest() : fs::path(dir_override);
  ensure_dir(dir);
  write_file((dir / "config.json").string(), config.to_json() + "\n");
  const std::vector<std::size_t> order = config.resolved_ordering(ctx.suite.tasks.size());
  const Prepared prep = prepare(config, ctx, dir);

  RunRecord rec;
  rec.digest = config.digest();
  rec.version = version_string();
  rec.dir = dir.string();
  rec.suite_kind = to_string(ctx.suite.recipe.kind);
  rec.regime = to_string(config.regime);
  rec.rollouts = config.rollouts;
  std::vector<MetricReport> reports;
  for (std::uint64_t seed : config.seeds) {
    SeedRunner runner(config, ctx, prep, dir, order, seed);
    rec.seeds.push_back(runner.run());
    reports.push_back(rec.seeds.back().metrics);
  }
  rec.aggregate = aggregate_seeds(reports);
  write_outputs(rec, dir);
  write_report({rec}, (dir / "report").string());
  return rec;
}

RunRecord run_lifelong(const ExperimentConfig& config) { return run_lifelong(config, make_context(config)); }

OrderingStudy run_ordering_study(const ExperimentConfig& config) {
  const RunContext ctx = make_context(config);
  const std::size_t K = ctx.suite.tasks.size();
  OrderingStudy study;
  study.orderings = config.orderings;
  if (study.orderings.empty() && config.sampled_orderings > 0) {
    Rng rng(stream_seed(config.ordering_seed, Stream::kOrdering));
    std::set<std::vector<std::size_t>> seen;
    std::vector<std::size_t> base(K);
    std::iota(base.begin(), base.end(), 0);
    for (int tries = 0; study.orderings.size() < config.sampled_orderings && tries < 10000; ++tries) {
      std::vector<std::size_t> p = base;
      rng.shuffle(p);
      if (seen.insert(p).second) study.orderings.push_back(p);
    }
  }
  if (study.orderings.size() < 2) {
    throw HarnessError(HarnessError::Code::kConfig, "an ordering study needs at least two task orderings");
  }
  const fs::path dir = fs::path(config.output_root) / config.digest();
  study.dir = dir.string();
  ensure_dir(dir);
  for (std::size_t n = 0; n < study.orderings.size(); ++n) {
    ExperimentConfig c = config;
    c.ordering = study.orderings[n];
    c.orderings.clear();
    c.sampled_orderings = 0;
    study.runs.push_back(run_lifelong(c, ctx, (dir / ("ordering_" + task_tag(n))).string()));
  }
  std::ostringstream csv;
  csv << "ordering,fwt_mean,fwt_se,nbt_mean,nbt_se,auc_mean,auc_se\n";
  std::array<double, 3> lo{1e9, 1e9, 1e9}, hi{-1e9, -1e9, -1e9};
  for (std::size_t n = 0; n < study.runs.size(); ++n) {
    const auto& a = study.runs[n].aggregate;
    std::string name;
    for (std::size_t t : study.orderings[n]) name += (name.empty() ? "" : "-") + std::to_string(t);
    csv << name << ',' << fmt17(a.fwt.mean) << ',' << fmt17(a.fwt.se) << ',' << fmt17(a.nbt.mean) << ','
        << fmt17(a.nbt.se) << ',' << fmt17(a.auc.mean) << ',' << fmt17(a.auc.se) << '\n';
    const std::array<double, 3> v{a.fwt.mean, a.nbt.mean, a.auc.mean};
    for (int m = 0; m < 3; ++m) {
      lo[m] = std::min(lo[m], v[m]);
      hi[m] = std::max(hi[m], v[m]);
    }
  }
  csv << "spread," << fmt17(hi[0] - lo[0]) << ",," << fmt17(hi[1] - lo[1]) << ",," << fmt17(hi[2] - lo[2]) << ",\n";
  ensure_dir(dir / "report");
  write_file((dir / "report" / "orderings.csv").string(), csv.str());
  write_report(study.runs, (dir / "report").string());
  return study;
}

PretrainStudy run_pretrain_study(const ExperimentConfig& config) {
  const Suite pre = load_suite(config.pretrain_suite_dir, config.pretrain_recipe);
  const Suite life = load_suite(config.suite_dir, config.recipe);
  if (pre.tasks.empty() || life.tasks.empty()) {
    throw HarnessError(HarnessError::Code::kConfig, "pretrain and lifelong suites must both have tasks");
  }
  std::set<std::string> seen;
  for (const auto& t : life.tasks) seen.insert(serialize_problem(t));
  for (const auto& t : pre.tasks) {
    if (seen.count(serialize_problem(t)) != 0) {
      throw HarnessError(HarnessError::Code::kConfig, "pretrain suite shares a task with the lifelong suite");
    }
  }
  std::vector<ProblemSpec> all = pre.tasks;
  all.insert(all.end(), life.tasks.begin(), life.tasks.end());
  const ObsLayout layout = layout_for(all, all.size());

  RunContext pctx{pre, layout, 0, std::nullopt};
  RunContext lctx{life, layout, pre.tasks.size(), std::nullopt};
  const fs::path dir = fs::path(config.output_root) / config.digest();
  PretrainStudy study;
  study.dir = dir.string();
  ensure_dir(dir / "pretrain");

  const Prepared prep = prepare(config, pctx, dir / "pretrain");
  const Network net(net_config(config, layout));
  const std::uint64_t seed = config.seeds.front();
  VectorXd theta = net.init_params(stream_seed(seed, Stream::kInit, 1));
  TrainConfig tc = config.train;
  tc.epochs = config.pretrain_epochs;
  tc.checkpoint_every = config.pretrain_checkpoint_every;
  const TaskCheckpoints ck = train_mtl(net, theta, prep.data, tc, stream_seed(seed, Stream::kMtlTask, 1));
  const std::size_t P = pre.tasks.size();
  std::vector<double> s(ck.params.size() * P);
  parallel_for(s.size(), config.workers, [&](std::size_t idx) {
    const std::size_t e = idx / P, j = idx % P;
    s[idx] = evaluate_params(net, ck.params[e], prep.worlds[j], layout, pctx.embedding(j), config.rollouts,
                             eval_seed(seed, j, ck.epochs[e]));
  });
  for (std::size_t e = 0; e < ck.params.size(); ++e) {
    double m = 0.0;
    for (std::size_t j = 0; j < P; ++j) m += s[e * P + j];
    study.pretrain_curve.push_back(m / static_cast<double>(P));
  }
  const std::size_t best = best_checkpoint(study.pretrain_curve).index;
  study.pretrain_best_epoch = ck.epochs[best];
  write_checkpoint((dir / "pretrain" / "best.ckpt").string(), net.config(), ck.params[best],
                   json{{"epoch", study.pretrain_best_epoch}}.dump());

  study.scratch = run_lifelong(config, lctx, (dir / "scratch").string());
  lctx.init = ck.params[best];
  study.pretrained = run_lifelong(config, lctx, (dir / "pretrained").string());

  std::ostringstream csv;
  csv << "regime,suite,scratch_auc,pretrained_auc,delta_auc,scratch_fwt,pretrained_fwt,scratch_nbt,pretrained_nbt\n";
  const auto& a = study.scratch.aggregate;
  const auto& b = study.pretrained.aggregate;
  csv << study.scratch.regime << ',' << study.scratch.suite_kind << ',' << fmt17(a.auc.mean) << ','
      << fmt17(b.auc.mean) << ',' << fmt17(b.auc.mean - a.auc.mean) << ',' << fmt17(a.fwt.mean) << ','
      << fmt17(b.fwt.mean) << ',' << fmt17(a.nbt.mean) << ',' << fmt17(b.nbt.mean) << '\n';
  ensure_dir(dir / "report");
  write_file((dir / "report" / "pretrain.csv").string(), csv.str());
  std::vector<double> xs;
  for (std::size_t e : ck.epochs) xs.push_back(static_cast<double>(e));
  write_file((dir / "report" / "pretrain_curve.svg").string(),
             svg_chart("pretraining", "epoch", "mean success", {{"pretrain suite", xs, study.pretrain_curve}}));
  write_report({study.scratch, study.pretrained}, (dir / "report").string());
  return study;
}

// ---------------------------------------------------------------- report

std::string summary_csv(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  os << "regime,suite,fwt_mean,fwt_se,nbt_mean,nbt_se,auc_mean,auc_se\n";
  for (const auto& r : records) {
    const auto& a = r.aggregate;
    os << r.regime << ',' << r.suite_kind << ',' << fmt17(a.fwt.mean) << ',' << fmt17(a.fwt.se) << ','
       << fmt17(a.nbt.mean) << ',' << fmt17(a.nbt.se) << ',' << fmt17(a.auc.mean) << ',' << fmt17(a.auc.se) << '\n';
  }
  return os.str();
}

std::vector<std::string> write_report(const std::vector<RunRecord>& records, const std::string& out_dir) {
  ensure_dir(out_dir);
  std::vector<std::string> files;
  auto emit = [&](const std::string& name, const std::string& body) {
    const std::string path = (fs::path(out_dir) / name).string();
    write_file(path, body);
    files.push_back(path);
  };
  emit("summary.csv", summary_csv(records));
  for (std::size_t r = 0; r < records.size(); ++r) {
    const RunRecord& rec = records[r];
    if (rec.seeds.empty()) continue;
    const std::string prefix = (records.size() > 1 ? "r" + std::to_string(r) + "_" : "") + rec.regime;
    const std::size_t K = rec.seeds.front().matrix.K;
    const double n = static_cast<double>(rec.seeds.size());

    // Success on the task learned at position k while the later tasks arrive.
    std::vector<Series> life;
    for (std::size_t k = 0; k < K; ++k) {
      Series s;
      s.name = "position " + std::to_string(k);
      for (std::size_t t = k; t < K; ++t) {
        double v = 0.0;
        for (const auto& sd : rec.seeds) {
          const MetricReport& m = sd.metrics;
          v += t == k ? m.best_rate[k] : sd.matrix.at(t, k, m.best_epoch[t]);
        }
        s.x.push_back(static_cast<double>(t));
        s.y.push_back(v / n);
      }
      life.push_back(s);
    }
    emit(prefix + "_lifetime.svg",
         svg_chart(rec.regime + ": success over the task sequence", "tasks learned", "success rate", life));

    for (std::size_t k = 0; k < K; ++k) {
      const auto& first = rec.seeds.front().tasks;
      if (k >= first.size()) break;
      Series succ{"success", {}, {}}, loss{"loss (scaled)", {}, {}};
      const auto& epochs = first[k].epochs;
      std::vector<double> l(epochs.size(), 0.0), sr(epochs.size(), 0.0);
      for (const auto& sd : rec.seeds) {
        const TaskRecord& t = sd.tasks[k];
        for (std::size_t e = 0; e < epochs.size(); ++e) {
          sr[e] += t.diag[e] / n;
          // Loss of the epoch that produced the checkpoint; none for epoch 0.
          const std::size_t ep = epochs[e];
          l[e] += (ep == 0 ? t.epoch_loss.front() : t.epoch_loss[ep - 1]) / n;
        }
      }
      const auto [mn, mx] = std::minmax_element(l.begin(), l.end());
      const double span = *mx - *mn > 0 ? *mx - *mn : 1.0;
      for (std::size_t e = 0; e < epochs.size(); ++e) {
        succ.x.push_back(static_cast<double>(epochs[e]));
        succ.y.push_back(sr[e]);
        loss.x.push_back(static_cast<double>(epochs[e]));
        loss.y.push_back((l[e] - *mn) / span);
      }
      emit(prefix + "_loss_success_pos" + task_tag(k) + ".svg",
           svg_chart(rec.regime + ": position " + std::to_string(k) + " training", "epoch", "value",
                     {succ, loss}));
    }
  }
  return files;
}

}  // namespace lldm

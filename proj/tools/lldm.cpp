#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "lldm/harness.hpp"
#include "lldm/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lldm;

namespace {

struct Overrides {
  std::string config;
  bool paper = false;
  std::string regime;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t workers = 0;
};

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_flag("--paper-protocol", o.paper, "50 demos, 20 rollouts, lr 1e-4 -> 1e-5");
  app->add_option("--regime", o.regime, "seql | er | ewc | packnet | mtl");
  app->add_option("--seeds", o.seeds, "training seeds");
  app->add_option("-o,--out", o.out, "output root (default runs)");
  app->add_option("-j,--workers", o.workers, "evaluation threads (0: all cores)");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig::fast() : ExperimentConfig::load(o.config);
  if (o.paper) c.apply_paper_protocol();
  if (!o.regime.empty()) c.regime = regime_from_string(o.regime);
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (!o.out.empty()) c.output_root = o.out;
  if (o.workers != 0) c.workers = o.workers;
  return c;
}

void print_summary(const RunRecord& r) {
  const auto& a = r.aggregate;
  std::printf("%-8s %-12s FWT %.3f ± %.3f  NBT %.3f ± %.3f  AUC %.3f ± %.3f  (%zu seeds)\n", r.regime.c_str(),
              r.suite_kind.c_str(), a.fwt.mean, a.fwt.se, a.nbt.mean, a.nbt.se, a.auc.mean, a.auc.se, a.seeds);
}

json state_json(const WorldState& s) {
  json objects = json::array();
  for (const auto& p : s.objects) objects.push_back({p.x, p.y, p.yaw});
  return {{"gripper", {s.gripper_x, s.gripper_y}},
          {"aperture", s.aperture},
          {"held_object", s.held_object ? json(*s.held_object) : json(nullptr)},
          {"held_handle", s.held_handle ? json(*s.held_handle) : json(nullptr)},
          {"objects", objects},
          {"open_fraction", s.open_fraction},
          {"switches", s.switches}};
}

int replay_checkpoint(const std::string& run_dir, std::uint64_t seed, std::size_t position,
                      std::optional<std::size_t> epoch, std::size_t rollout, const std::string& trace_path) {
  const RunRecord rec = RunRecord::load(run_dir);
  const ExperimentConfig config = ExperimentConfig::load((fs::path(run_dir) / "config.json").string());
  const SeedRecord* sr = nullptr;
  for (const auto& s : rec.seeds) {
    if (s.seed == seed) sr = &s;
  }
  if (sr == nullptr) throw HarnessError(HarnessError::Code::kConfig, "seed not in the record");
  if (position >= sr->tasks.size()) throw HarnessError(HarnessError::Code::kConfig, "no such task position");
  const TaskRecord& task = sr->tasks[position];
  if (epoch && *epoch != task.best_epoch) {
    throw HarnessError(HarnessError::Code::kConfig,
                       "only the best checkpoint (epoch " + std::to_string(task.best_epoch) + ") is stored");
  }

  const RunContext ctx = make_context(config);
  const Checkpoint ck = read_checkpoint((fs::path(run_dir) / task.checkpoint).string());
  const Network net(ck.config);
  const World world(ctx.suite.tasks.at(task.task), config.sim);
  const std::uint64_t base = eval_seed(seed, task.task, task.best_epoch);
  const double rate = evaluate_params(net, ck.theta, world, ctx.layout, ctx.embedding(task.task), rec.rollouts, base);
  const auto it = std::find(task.epochs.begin(), task.epochs.end(), task.best_epoch);
  const double recorded = task.diag[static_cast<std::size_t>(it - task.epochs.begin())];
  std::printf("task %zu (position %zu) epoch %zu: success %.4f, recorded %.4f%s\n", task.task, position,
              task.best_epoch, rate, recorded, rate == recorded ? "" : "  MISMATCH");

  if (!trace_path.empty()) {
    std::vector<TraceStep> trace;
    const RolloutResult r =
        trace_rollout(net, ck.theta, world, ctx.layout, ctx.embedding(task.task), base, rollout, trace);
    std::ofstream out(trace_path);
    for (std::size_t t = 0; t < trace.size(); ++t) {
      const Action& a = trace[t].action;
      out << json{{"t", t}, {"state", state_json(trace[t].state)}, {"action", {a.dx, a.dy, a.dgrip}}}.dump() << '\n';
    }
    out << json{{"success", r.success}, {"steps", r.steps}}.dump() << '\n';
    if (!out) throw HarnessError(HarnessError::Code::kIo, "cannot write " + trace_path);
    std::printf("rollout %zu: %s after %zu steps, trace in %s\n", rollout, r.success ? "success" : "failure",
                static_cast<std::size_t>(r.steps), trace_path.c_str());
  }
  return rate == recorded ? 0 : 3;
}

int replay_demo(const std::string& path, std::size_t index) {
  const DemoSet d = read_demos(path);
  if (index >= d.trajectories.size()) throw HarnessError(HarnessError::Code::kConfig, "no such trajectory");
  const Trajectory& t = d.trajectories[index];
  std::printf("task %zu trajectory %zu: %zu steps, %s\n", d.task_id, index, t.actions.size(),
              t.success ? "success" : "failure");
  for (std::size_t s = 0; s < t.actions.size(); ++s) {
    const auto& o = t.observations[s];
    std::printf("%4zu  gripper (%.4f, %.4f, %.3f)  action (%+.4f, %+.4f, %+.3f)\n", s, o[0], o[1], o[2],
                t.actions[s].dx, t.actions[s].dy, t.actions[s].dgrip);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong learning of decision-making tasks on a 2-D tabletop"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);

  std::string kind = "interference", suite_out;
  std::size_t task_count = 3;
  std::uint64_t suite_seed = 7;
  auto* gen = app.add_subcommand("gen-suite", "generate a task suite");
  gen->add_option("--kind", kind, "spatial | object | goal | long | ninety | interference");
  gen->add_option("-n,--tasks", task_count, "number of tasks");
  gen->add_option("--seed", suite_seed, "generation seed");
  gen->add_option("-o,--out", suite_out, "output directory")->required();

  Overrides demo_o;
  std::string demo_out;
  auto* demos = app.add_subcommand("collect-demos", "collect scripted demonstrations for a suite");
  add_overrides(demos, demo_o);
  demos->add_option("--demo-dir", demo_out, "where to write demos (default <run dir>/demos)");

  Overrides run_o, ord_o, pre_o;
  auto* run = app.add_subcommand("run", "lifelong run over all seeds");
  add_overrides(run, run_o);
  auto* ord = app.add_subcommand("ordering-study", "repeat a run under several task orderings");
  add_overrides(ord, ord_o);
  auto* pre = app.add_subcommand("pretrain-study", "pretrained versus scratch initialization");
  add_overrides(pre, pre_o);

  std::vector<std::string> report_runs;
  std::string report_out = "report";
  auto* rep = app.add_subcommand("report", "tables and curves from finished runs");
  rep->add_option("runs", report_runs, "run directories")->required()->check(CLI::ExistingDirectory);
  rep->add_option("-o,--out", report_out, "output directory");

  std::string replay_run, replay_demos, trace_path;
  std::uint64_t replay_seed = 100;
  std::size_t replay_pos = 0, replay_rollout = 0, replay_index = 0;
  std::optional<std::size_t> replay_epoch;
  auto* rp = app.add_subcommand("replay", "re-evaluate a stored checkpoint, or print a demo trajectory");
  rp->add_option("--run", replay_run, "run directory")->check(CLI::ExistingDirectory);
  rp->add_option("--seed", replay_seed, "training seed");
  rp->add_option("--position", replay_pos, "task position in the learning order");
  rp->add_option("--epoch", replay_epoch, "checkpoint epoch (the stored best)");
  rp->add_option("--rollout", replay_rollout, "rollout to trace");
  rp->add_option("--trace", trace_path, "write a JSON-lines trace of one rollout");
  rp->add_option("--demos", replay_demos, "demo file to print instead")->check(CLI::ExistingFile);
  rp->add_option("--index", replay_index, "trajectory index in the demo file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const Suite s = build_suite({suite_kind_from_string(kind), task_count, suite_seed});
      write_suite(suite_out, s);
      for (std::size_t i = 0; i < s.tasks.size(); ++i) {
        std::printf("task %zu: %s\n", i, s.tasks[i].language.c_str());
      }
    } else if (*demos) {
      const ExperimentConfig c = resolve(demo_o);
      const RunContext ctx = make_context(c);
      const std::string dir =
          demo_out.empty() ? (fs::path(c.output_root) / c.digest() / "demos").string() : demo_out;
      for (std::size_t j = 0; j < ctx.suite.tasks.size(); ++j) {
        const DemoSet d = prepare_demos(c, ctx, j, dir);
        std::size_t steps = 0;
        for (const auto& t : d.trajectories) steps += t.actions.size();
        std::printf("task %zu: %zu demos, %zu steps\n", j, d.trajectories.size(), steps);
      }
      std::printf("demos in %s\n", dir.c_str());
    } else if (*run) {
      const RunRecord r = run_lifelong(resolve(run_o));
      print_summary(r);
      std::printf("results in %s\n", r.dir.c_str());
    } else if (*ord) {
      const OrderingStudy s = run_ordering_study(resolve(ord_o));
      for (const auto& r : s.runs) print_summary(r);
      std::printf("results in %s\n", s.dir.c_str());
    } else if (*pre) {
      const PretrainStudy s = run_pretrain_study(resolve(pre_o));
      std::printf("pretrain best epoch %zu\n", s.pretrain_best_epoch);
      print_summary(s.scratch);
      print_summary(s.pretrained);
      std::printf("delta AUC %+.4f\nresults in %s\n", s.pretrained.aggregate.auc.mean - s.scratch.aggregate.auc.mean,
                  s.dir.c_str());
    } else if (*rep) {
      std::vector<RunRecord> records;
      for (const auto& d : report_runs) records.push_back(RunRecord::load(d));
      for (const auto& f : write_report(records, report_out)) std::printf("%s\n", f.c_str());
    } else if (*rp) {
      if (!replay_demos.empty()) return replay_demo(replay_demos, replay_index);
      if (replay_run.empty()) throw HarnessError(HarnessError::Code::kConfig, "replay needs --run or --demos");
      return replay_checkpoint(replay_run, replay_seed, replay_pos, replay_epoch, replay_rollout, trace_path);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lldm: %s\n", e.what());
    return 2;
  }
  return 0;
}

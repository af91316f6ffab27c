#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "lldm/taskgen.hpp"
#include "lldm/util.hpp"
#include "lldm/world.hpp"

using namespace lldm;

namespace {

const char* kBowlOnPlate = R"((define (problem bowl_on_plate)
  (:domain robosuite)
  (:language put the bowl on the plate)
  (:regions
    (bowl_init_region (:target kitchen_table) (:ranges ((-0.025 -0.025 0.025 0.025))) (:yaw_rotation ((0.0 0.0))))
    (plate_init_region (:target kitchen_table) (:ranges ((-0.025 0.175 0.025 0.225))) (:yaw_rotation ((0.0 0.0)))))
  (:fixtures kitchen_table - kitchen_table)
  (:objects akita_black_bowl_1 - akita_black_bowl plate_1 - plate)
  (:obj_of_interest akita_black_bowl_1)
  (:init (On akita_black_bowl_1 kitchen_table_bowl_init_region) (On plate_1 kitchen_table_plate_init_region))
  (:goal (And (On akita_black_bowl_1 plate_1)))))";

const char* kDrawer = R"((define (problem open_and_insert)
  (:domain robosuite)
  (:language open the top drawer of the cabinet and put the bowl in it)
  (:regions
    (wooden_cabinet_init_region (:target kitchen_table) (:ranges ((-0.31 -0.01 -0.29 0.01))) (:yaw_rotation ((3.141592653589793 3.141592653589793))))
    (akita_black_bowl_init_region (:target kitchen_table) (:ranges ((-0.025 -0.025 0.025 0.025))) (:yaw_rotation ((0.0 0.0))))
    (stove_init_region (:target kitchen_table) (:ranges ((0.2 0.2 0.2 0.2))))
    (top_side (:target wooden_cabinet_1))
    (top_region (:target wooden_cabinet_1)))
  (:fixtures kitchen_table - kitchen_table wooden_cabinet_1 - wooden_cabinet flat_stove_1 - flat_stove)
  (:objects akita_black_bowl_1 - akita_black_bowl)
  (:obj_of_interest wooden_cabinet_1 akita_black_bowl_1)
  (:init (On akita_black_bowl_1 kitchen_table_akita_black_bowl_init_region)
         (On wooden_cabinet_1 kitchen_table_wooden_cabinet_init_region)
         (On flat_stove_1 kitchen_table_stove_init_region))
  (:goal (And (Open wooden_cabinet_1_top_region) (In akita_black_bowl_1 wooden_cabinet_1_top_region)))))";

World make_world(const char* text, SimConfig cfg = {}) { return World(parse_problem(text), cfg); }

ObsLayout layout_of(const World& w, std::size_t emb = 1) {
  const std::vector<ProblemSpec> specs{w.spec()};
  return layout_for(specs, emb);
}

BatchPolicy expert_policy(const World& w) {
  auto expert = std::make_shared<ScriptedExpert>(w);
  return [expert](std::span<const std::size_t>, std::span<const WorldState* const> states, const Eigen::MatrixXd&,
                  std::vector<Action>& actions) {
    for (std::size_t b = 0; b < states.size(); ++b) actions[b] = expert->act(*states[b]);
  };
}

bool in_ranges(const WorldState& s, const World& w, const Action&) {
  if (s.gripper_x < 0 || s.gripper_x > 1 || s.gripper_y < 0 || s.gripper_y > 1) return false;
  if (s.aperture < 0 || s.aperture > 1) return false;
  for (double f : s.open_fraction) {
    if (f < 0 || f > 1) return false;
  }
  for (const auto& o : s.objects) {
    if (o.x < 0 || o.x > 1 || o.y < 0 || o.y > 1) return false;
  }
  return s.objects.size() == w.objects().size();
}

}  // namespace

TEST(Sample, WithinInitRectangle) {
  const World w = make_world(kBowlOnPlate);
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const WorldState s = w.sample_initial_state(rng);
    ASSERT_GE(s.objects[0].x, 0.475);
    ASSERT_LE(s.objects[0].x, 0.525);
    ASSERT_GE(s.objects[0].y, 0.475);
    ASSERT_LE(s.objects[0].y, 0.525);
    ASSERT_EQ(s.objects[0].yaw, 0.0);
  }
}

TEST(Sample, DegenerateRectangleIsExact) {
  const World w = make_world(kDrawer);
  Rng rng(2);
  const WorldState s = w.sample_initial_state(rng);
  EXPECT_EQ(s.fixtures[2].x, 0.7);
  EXPECT_EQ(s.fixtures[2].y, 0.7);
  EXPECT_EQ(s.open_fraction, std::vector<double>{0.0});
  EXPECT_DOUBLE_EQ(s.fixtures[1].yaw, 3.141592653589793);
}

TEST(Sample, UniformKolmogorovSmirnov) {
  const World w = make_world(kBowlOnPlate);
  Rng rng(3);
  std::vector<double> xs;
  for (int i = 0; i < 10000; ++i) xs.push_back((w.sample_initial_state(rng).objects[0].x - 0.475) / 0.05);
  std::sort(xs.begin(), xs.end());
  double d = 0;
  const double n = static_cast<double>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    d = std::max({d, (i + 1) / n - xs[i], xs[i] - i / n});
  }
  EXPECT_LT(d, 1.628 / std::sqrt(n));
}

TEST(Sample, OverlapRejectionGivesUp) {
  std::string text = kBowlOnPlate;
  const std::string from = "(-0.025 0.175 0.025 0.225)";
  text.replace(text.find(from), from.size(), "(0.0 0.0 0.0 0.0)");
  const std::string from2 = "(-0.025 -0.025 0.025 0.025)";
  text.replace(text.find(from2), from2.size(), "(0.0 0.0 0.0 0.0)");
  const World w(parse_problem(text));
  Rng rng(4);
  try {
    w.sample_initial_state(rng);
    FAIL();
  } catch (const WorldError& e) {
    EXPECT_EQ(e.code(), WorldError::Code::kPlacementInfeasible);
  }
}

TEST(Step, ZeroActionIsIdentity) {
  const World w = make_world(kDrawer);
  Rng rng(5);
  const WorldState s = w.sample_initial_state(rng);
  EXPECT_EQ(w.step(s, Action{}), s);
}

TEST(Step, CloseAtObjectGrasps) {
  const World w = make_world(kBowlOnPlate);
  Rng rng(6);
  WorldState s = w.sample_initial_state(rng);
  s.gripper_x = s.objects[0].x;
  s.gripper_y = s.objects[0].y;
  s = w.step(s, {0, 0, -1});
  ASSERT_TRUE(s.held_object.has_value());
  EXPECT_EQ(*s.held_object, 0u);
  for (int t = 0; t < 20; ++t) {
    s = w.step(s, {0.7, -0.3, 0});
    ASSERT_EQ(s.objects[0].x, s.gripper_x);
    ASSERT_EQ(s.objects[0].y, s.gripper_y);
  }
  s = w.step(s, {0, 0, 1});
  EXPECT_FALSE(s.held_object.has_value());
}

TEST(Step, DrawerOpensMonotonically) {
  const World w = make_world(kDrawer);
  Rng rng(7);
  WorldState s = w.sample_initial_state(rng);
  s.gripper_x = w.handle_x(s, 0);
  s.gripper_y = w.handle_y(s, 0);
  s = w.step(s, {0, 0, -1});
  ASSERT_TRUE(s.held_handle.has_value());
  double last = s.open_fraction[0];
  for (int t = 0; t < 20; ++t) {
    s = w.step(s, {1, 0, 0});
    ASSERT_GE(s.open_fraction[0], last);
    last = s.open_fraction[0];
  }
  EXPECT_EQ(last, 1.0);
}

TEST(Step, SwitchToggles) {
  const World w = make_world(kDrawer);
  Rng rng(8);
  WorldState s = w.sample_initial_state(rng);
  s.gripper_x = w.switch_x(s, 0);
  s.gripper_y = w.switch_y(s, 0);
  s = w.step(s, {0, 0, -1});
  EXPECT_EQ(s.switches[0], 1);
  s = w.step(w.step(s, {0, 0, 1}), {0, 0, -1});
  EXPECT_EQ(s.switches[0], 0);
}

TEST(Step, FuzzStaysInRange) {
  const World w = make_world(kDrawer);
  Rng rng(9);
  for (int ep = 0; ep < 50; ++ep) {
    WorldState s = w.sample_initial_state(rng);
    for (int t = 0; t < 200; ++t) {
      const Action a{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
      s = w.step(s, a);
      ASSERT_TRUE(in_ranges(s, w, a));
      if (s.held_object) {
        ASSERT_EQ(s.objects[*s.held_object].x, s.gripper_x);
        ASSERT_EQ(s.objects[*s.held_object].y, s.gripper_y);
      }
    }
  }
}

TEST(Step, DeterministicTrajectories) {
  const World w = make_world(kDrawer);
  Rng a(10), b(10);
  WorldState sa = w.sample_initial_state(a), sb = w.sample_initial_state(b);
  for (int t = 0; t < 100; ++t) {
    const Action act{a.uniform(-1, 1), a.uniform(-1, 1), a.uniform(-1, 1)};
    b.uniform(), b.uniform(), b.uniform();
    sa = w.step(sa, act);
    sb = w.step(sb, act);
    ASSERT_EQ(sa, sb);
  }
}

TEST(Predicates, OpenCloseThresholds) {
  const World w = make_world(kDrawer);
  Rng rng(11);
  WorldState s = w.sample_initial_state(rng);
  const Predicate open{"Open", {"wooden_cabinet_1_top_region"}}, close{"Close", {"wooden_cabinet_1_top_region"}};
  s.open_fraction[0] = 1.0;
  EXPECT_TRUE(w.predicates(s).count(open));
  s.open_fraction[0] = 0.95;
  EXPECT_TRUE(w.predicates(s).count(open));
  EXPECT_FALSE(w.predicates(s).count(close));
  s.open_fraction[0] = 0.0;
  EXPECT_TRUE(w.predicates(s).count(close));
  EXPECT_TRUE(w.predicates(s).count(Predicate{"TurnOff", {"flat_stove_1"}}));
}

TEST(Predicates, GridAgainstPointInRectangle) {
  const World w = make_world(kBowlOnPlate);
  Rng rng(12);
  WorldState s = w.sample_initial_state(rng);
  const Rect r1{0.475, 0.475, 0.525, 0.525}, r2{0.475, 0.675, 0.525, 0.725};
  const std::string n1 = "kitchen_table_bowl_init_region", n2 = "kitchen_table_plate_init_region";
  const std::string objs[2] = {"akita_black_bowl_1", "plate_1"};
  int checked = 0;
  for (double x = 0.45; x <= 0.55; x += 0.0125) {
    for (double y = 0.45; y <= 0.75; y += 0.0125) {
      for (int o = 0; o < 2; ++o) {
        WorldState t = s;
        t.objects[o] = {x, y, 0};
        t.objects[1 - o] = {0.9, 0.1, 0};
        const auto p = w.predicates(t);
        ASSERT_EQ(p.count(Predicate{"On", {objs[o], n1}}) == 1, r1.contains(x, y)) << x << "," << y;
        ASSERT_EQ(p.count(Predicate{"On", {objs[o], n2}}) == 1, r2.contains(x, y)) << x << "," << y;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(Observe, LayoutArithmetic) {
  const ObsLayout layout{2, 1, 1, 10};
  EXPECT_EQ(layout.dim(), 26u);
  const World w = make_world(kDrawer);
  const ObsLayout l2{2, 1, 1, 10};
  Rng rng(13);
  const auto obs = w.observe(w.sample_initial_state(rng), l2, one_hot(3, 10));
  EXPECT_EQ(obs.size(), 26u);
  // No held object: the "none" slot of the one-hot is set.
  EXPECT_EQ(obs[3 + 8 + 1 + 1 + 2], 1.0);
  EXPECT_EQ(obs[26 - 10 + 3], 1.0);
}

TEST(Observe, EqualStatesEqualBytes) {
  const World w = make_world(kDrawer);
  Rng a(14), b(14);
  const auto layout = layout_of(w, 4);
  const auto oa = w.observe(w.sample_initial_state(a), layout, one_hot(1, 4));
  const auto ob = w.observe(w.sample_initial_state(b), layout, one_hot(1, 4));
  EXPECT_EQ(0, std::memcmp(oa.data(), ob.data(), oa.size() * sizeof(double)));
}

TEST(Observe, ObjectOrderChangesLayoutDigest) {
  const ProblemSpec spec = parse_problem(kBowlOnPlate);
  ProblemSpec swapped = spec;
  std::swap(swapped.objects[0], swapped.objects[1]);
  const World a(spec), b(swapped);
  const auto layout = layout_of(a);
  EXPECT_NE(ordering_digest(a, layout), ordering_digest(b, layout));
  EXPECT_EQ(ordering_digest(a, layout), ordering_digest(World(spec), layout));
}

TEST(Observe, LayoutTooSmallIsAnError) {
  const World w = make_world(kDrawer);
  EXPECT_THROW(w.observe(WorldState{}, ObsLayout{0, 0, 0, 1}, one_hot(0, 1)), WorldError);
}

TEST(Expert, BowlOnPlateAlwaysSucceeds) {
  const World w = make_world(kBowlOnPlate);
  const auto layout = layout_of(w);
  Rng rng(15);
  for (int i = 0; i < 100; ++i) {
    const WorldState init = w.sample_initial_state(rng);
    const Trajectory t = rollout_expert(w, layout, one_hot(0, 1), 0, init, 0.0, rng);
    ASSERT_TRUE(t.success) << "draw " << i;
    EXPECT_LE(t.actions.size(), 150u);
    EXPECT_EQ(t.observations.size(), t.actions.size() + 1);
  }
}

TEST(Expert, SatisfiedGoalEndsAtStepZero) {
  std::string text = kBowlOnPlate;
  const std::string from = "(On akita_black_bowl_1 plate_1)";
  text.replace(text.find(from), from.size(), "(On akita_black_bowl_1 kitchen_table_bowl_init_region)");
  const World w(parse_problem(text));
  Rng rng(16);
  const WorldState init = w.sample_initial_state(rng);
  const ScriptedExpert expert(w);
  EXPECT_EQ(expert.act(init), Action{});
  const Trajectory t = rollout_expert(w, layout_of(w), one_hot(0, 1), 0, init, 0.0, rng);
  EXPECT_TRUE(t.success);
  EXPECT_TRUE(t.actions.empty());
  EXPECT_EQ(t.observations.size(), 1u);
}

TEST(Expert, OpenPrecedesIn) {
  const World w = make_world(kDrawer);
  const ScriptedExpert expert(w);
  Rng rng(17);
  for (int ep = 0; ep < 10; ++ep) {
    WorldState s = w.sample_initial_state(rng);
    int first_open = -1, first_in = -1;
    for (int t = 0; t < 150 && !w.goal_reached(s); ++t) {
      s = w.step(s, expert.act(s));
      const auto p = w.predicates(s);
      if (first_open < 0 && p.count(Predicate{"Open", {"wooden_cabinet_1_top_region"}})) first_open = t;
      if (first_in < 0 && p.count(Predicate{"In", {"akita_black_bowl_1", "wooden_cabinet_1_top_region"}})) first_in = t;
    }
    ASSERT_TRUE(w.goal_reached(s));
    ASSERT_GE(first_open, 0);
    ASSERT_GE(first_in, 0);
    EXPECT_LT(first_open, first_in);
  }
}

TEST(Expert, UnsupportedGoalHasNoPlan) {
  std::string text = kBowlOnPlate;
  const std::string from = "(On akita_black_bowl_1 plate_1)";
  text.replace(text.find(from), from.size(), "(Open plate_1)");
  const World w(parse_problem(text));
  try {
    ScriptedExpert e(w);
    FAIL();
  } catch (const WorldError& e) {
    EXPECT_EQ(e.code(), WorldError::Code::kNoPlan);
  }
}

TEST(Demos, FiftyNoisySuccesses) {
  const World w = make_world(kDrawer);
  const auto layout = layout_of(w, 3);
  const DemoSet d = collect_demos(w, layout, 2, 50, 123, 0.02);
  ASSERT_EQ(d.trajectories.size(), 50u);
  for (const auto& t : d.trajectories) {
    EXPECT_TRUE(t.success);
    EXPECT_EQ(t.task_id, 2u);
    EXPECT_EQ(t.observations.front().size(), layout.dim());
  }
  EXPECT_EQ(d.obs_dim, layout.dim());
}

TEST(Demos, ZeroIsEmpty) {
  const World w = make_world(kDrawer);
  EXPECT_TRUE(collect_demos(w, layout_of(w), 0, 0, 1, 0.02).trajectories.empty());
}

TEST(Demos, SeededBytesAndFileRoundTrip) {
  const World w = make_world(kBowlOnPlate);
  const auto layout = layout_of(w);
  const auto dir = std::filesystem::temp_directory_path();
  const std::string a = (dir / "lldm_demo_a.json").string(), b = (dir / "lldm_demo_b.json").string();
  write_demos(a, collect_demos(w, layout, 0, 5, 9, 0.02));
  write_demos(b, collect_demos(w, layout, 0, 5, 9, 0.02));
  EXPECT_EQ(read_file(a), read_file(b));
  const DemoSet back = read_demos(a);
  EXPECT_EQ(back, collect_demos(w, layout, 0, 5, 9, 0.02));
  EXPECT_EQ(back.ordering_digest, ordering_digest(w, layout));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Demos, HopelessNoiseIsUnreliable) {
  SimConfig cfg;
  cfg.horizon = 5;
  const World w = make_world(kDrawer, cfg);
  try {
    collect_demos(w, layout_of(w), 0, 3, 1, 0.5);
    FAIL();
  } catch (const WorldError& e) {
    EXPECT_EQ(e.code(), WorldError::Code::kExpertUnreliable);
  }
}

TEST(Window, ZeroPaddedHead) {
  const std::vector<std::vector<double>> obs{{1, 2}, {3, 4}, {5, 6}};
  std::vector<double> out(6, -1);
  fill_window(obs, 1, 3, out);
  EXPECT_EQ(out, (std::vector<double>{0, 0, 1, 2, 3, 4}));
  fill_window(obs, 2, 3, out);
  EXPECT_EQ(out, (std::vector<double>{1, 2, 3, 4, 5, 6}));
}

TEST(Evaluate, ExpertScoresOne) {
  for (const char* text : {kBowlOnPlate, kDrawer}) {
    const World w = make_world(text);
    const auto layout = layout_of(w);
    EXPECT_EQ(evaluate_policy(w, layout, one_hot(0, 1), 10, expert_policy(w), 20, 77), 1.0);
  }
}

TEST(Evaluate, ZeroPolicyScoresZero) {
  const World w = make_world(kDrawer);
  BatchPolicy idle = [](auto, auto, const Eigen::MatrixXd&, std::vector<Action>& a) {
    std::fill(a.begin(), a.end(), Action{});
  };
  std::vector<RolloutResult> details;
  EXPECT_EQ(evaluate_policy(w, layout_of(w), one_hot(0, 1), 10, idle, 20, 3, &details), 0.0);
  ASSERT_EQ(details.size(), 20u);
  for (const auto& r : details) EXPECT_EQ(r.steps, 150);
}

TEST(Evaluate, RatesAreQuantized) {
  const World w = make_world(kBowlOnPlate);
  auto expert = std::make_shared<ScriptedExpert>(w);
  // Acts only on even rollouts.
  BatchPolicy half = [expert](std::span<const std::size_t> ids, std::span<const WorldState* const> states,
                              const Eigen::MatrixXd&, std::vector<Action>& a) {
    for (std::size_t b = 0; b < ids.size(); ++b) a[b] = ids[b] % 2 == 0 ? expert->act(*states[b]) : Action{};
  };
  const double r = evaluate_policy(w, layout_of(w), one_hot(0, 1), 10, half, 20, 5);
  EXPECT_EQ(r, 0.5);
  EXPECT_EQ(std::round(r * 20), r * 20);
}

TEST(Evaluate, GeneratedSuitesAreExpertSolvable) {
  const Suite s = build_suite({SuiteKind::kInterference, 3, 7});
  const std::vector<ProblemSpec>& specs = s.tasks;
  const ObsLayout layout = layout_for(specs, 3);
  for (std::size_t j = 0; j < specs.size(); ++j) {
    const World w(specs[j]);
    EXPECT_EQ(evaluate_policy(w, layout, one_hot(j, 3), 10, expert_policy(w), 20, 11), 1.0) << j;
  }
}

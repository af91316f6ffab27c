#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "lldm/taskgen.hpp"

using namespace lldm;

namespace {

TaskgenError::Code taskgen_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const TaskgenError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no TaskgenError";
  return TaskgenError::Code::kBadTemplate;
}

const std::vector<SuiteKind> kAllKinds{SuiteKind::kSpatial, SuiteKind::kObject, SuiteKind::kGoal,
                                       SuiteKind::kLong,    SuiteKind::kNinety, SuiteKind::kInterference};

}  // namespace

TEST(Instantiate, OpenTheDrawerOfTheCabinet) {
  const auto r = instantiate(find_template("open_drawer"), {{"articulation", "drawer"}, {"fixture", "cabinet"}});
  EXPECT_EQ(r.instruction, "open the drawer of the cabinet");
  ASSERT_EQ(r.goal.conjuncts.size(), 1u);
  EXPECT_EQ(r.goal.conjuncts[0], (Predicate{"Open", {"cabinet_1_drawer_region"}}));
}

TEST(Instantiate, MissingSlot) {
  EXPECT_EQ(taskgen_code([] { instantiate(find_template("open_drawer"), {{"articulation", "drawer"}}); }),
            TaskgenError::Code::kMissingSlot);
}

TEST(Instantiate, TypeMismatchAgainstScene) {
  const SceneDef& kitchen = default_catalog().get("kitchen_scene");
  EXPECT_EQ(taskgen_code([&] {
              instantiate(find_template("open_drawer"),
                          {{"articulation", SlotValue("plate", SlotType::kArticulation)},
                           {"fixture", SlotValue("wooden_cabinet", SlotType::kFixture)}},
                          &kitchen);
            }),
            TaskgenError::Code::kTypeMismatch);
}

TEST(Instantiate, OpenThenInsertMatchesListingGoalShape) {
  const SceneDef& kitchen = default_catalog().get("kitchen_scene");
  const auto r = instantiate(find_template("open_and_put_in"),
                             {{"articulation", SlotValue("top_region", SlotType::kArticulation)},
                              {"fixture", SlotValue("wooden_cabinet", SlotType::kFixture)},
                              {"object", SlotValue("akita_black_bowl", SlotType::kObject)}},
                             &kitchen);
  ASSERT_EQ(r.goal.conjuncts.size(), 2u);
  EXPECT_EQ(r.goal.conjuncts[0], (Predicate{"Open", {"wooden_cabinet_1_top_region"}}));
  EXPECT_EQ(r.goal.conjuncts[1], (Predicate{"In", {"akita_black_bowl_1", "wooden_cabinet_1_top_region"}}));
}

TEST(Templates, AllWellFormedAndSatisfiable) {
  const auto& templates = default_templates();
  EXPECT_GE(templates.size(), 12u);
  for (const auto& t : templates) {
    EXPECT_NO_THROW(check_template(t)) << t.id;
    for (const auto& [slot, type] : template_slots(t)) {
      bool some_scene = false;
      for (const auto& scene : default_catalog().scenes) {
        std::vector<std::string> objects;
        for (const auto& o : scene.object_types) objects.push_back(o + "_1");
        some_scene |= !slot_candidates(scene, type, objects).empty();
      }
      EXPECT_TRUE(some_scene) << t.id << " slot " << slot;
    }
  }
}

TEST(Templates, GoalSlotMissingFromPatternIsRejected) {
  BehaviorTemplate t{"bad", "open the {fixture}", {{"Open", {"{fixture}_{articulation}"}}}, {}};
  EXPECT_EQ(taskgen_code([&] { check_template(t); }), TaskgenError::Code::kBadTemplate);
}

TEST(GenerateTask, KitchenBowlInDrawerValidates) {
  Rng rng(5);
  const ProblemSpec s = generate_task(default_catalog().get("kitchen_scene"), find_template("open_and_put_in"), rng);
  EXPECT_TRUE(validate(s).empty());
  EXPECT_EQ(parse_problem(serialize_problem(s)), s);
  std::size_t on_atoms = 0;
  for (const auto& p : s.init) on_atoms += p.name == "On";
  EXPECT_GE(on_atoms, s.objects.size());
}

TEST(GenerateTask, DefaultJitterGivesTwentieth) {
  Rng rng(9);
  const ProblemSpec s = generate_task(default_catalog().get("kitchen_scene"), find_template("put_on"), rng);
  std::size_t checked = 0;
  for (const auto& r : s.regions) {
    for (const auto& o : s.objects) {
      if (r.name != o.type + "_init_region" && r.name != o.name + "_init_region") continue;
      ASSERT_EQ(r.ranges.size(), 1u);
      EXPECT_NEAR(r.ranges[0].xmax - r.ranges[0].xmin, 0.05, 1e-12);
      EXPECT_NEAR(r.ranges[0].ymax - r.ranges[0].ymin, 0.05, 1e-12);
      ++checked;
    }
  }
  EXPECT_EQ(checked, s.objects.size());
}

TEST(GenerateTask, SameSeedSameBytes) {
  const auto& scene = default_catalog().get("kitchen_scene");
  Rng a(42), b(42);
  EXPECT_EQ(serialize_problem(generate_task(scene, find_template("open_and_put_in"), a)),
            serialize_problem(generate_task(scene, find_template("open_and_put_in"), b)));
}

TEST(BuildSuite, EverySpecValidatesAndInstructionsDiffer) {
  for (SuiteKind kind : kAllKinds) {
    const std::size_t n = kind == SuiteKind::kInterference ? 3 : 10;
    const Suite s = build_suite({kind, n, 3});
    ASSERT_EQ(s.tasks.size(), n) << to_string(kind);
    std::set<std::string> instructions;
    for (const auto& t : s.tasks) {
      EXPECT_TRUE(validate(t).empty()) << to_string(kind) << "\n" << serialize_problem(t);
      instructions.insert(t.language);
    }
    EXPECT_EQ(instructions.size(), n) << to_string(kind);
  }
}

TEST(BuildSuite, SpatialSharesObjectsAndGoalShape) {
  const Suite s = build_suite({SuiteKind::kSpatial, 10, 1});
  std::set<std::string> rects;
  for (const auto& t : s.tasks) {
    EXPECT_EQ(t.objects, s.tasks[0].objects);
    ASSERT_EQ(t.goal.conjuncts.size(), s.tasks[0].goal.conjuncts.size());
    for (std::size_t c = 0; c < t.goal.conjuncts.size(); ++c) {
      EXPECT_EQ(t.goal.conjuncts[c].name, s.tasks[0].goal.conjuncts[c].name);
      EXPECT_EQ(t.goal.conjuncts[c].args[0], s.tasks[0].goal.conjuncts[c].args[0]);
    }
    rects.insert(section_text(t, ":regions"));
  }
  EXPECT_EQ(rects.size(), 10u);
  // Two identical bowls.
  std::size_t bowls = 0;
  for (const auto& o : s.tasks[0].objects) bowls += o.type == "akita_black_bowl";
  EXPECT_EQ(bowls, 2u);
}

TEST(BuildSuite, GoalSuiteSharesInitDiffersInGoal) {
  const Suite s = build_suite({SuiteKind::kGoal, 10, 2});
  std::set<std::string> goals;
  for (const auto& t : s.tasks) {
    EXPECT_EQ(section_text(t, ":init"), section_text(s.tasks[0], ":init"));
    EXPECT_EQ(section_text(t, ":regions"), section_text(s.tasks[0], ":regions"));
    goals.insert(section_text(t, ":goal"));
  }
  EXPECT_EQ(goals.size(), 10u);
}

TEST(BuildSuite, ObjectSuiteDiffersOnlyInObject) {
  const Suite s = build_suite({SuiteKind::kObject, 10, 4});
  std::set<std::string> targets;
  for (const auto& t : s.tasks) {
    EXPECT_EQ(t.objects, s.tasks[0].objects);
    ASSERT_FALSE(t.goal.conjuncts.empty());
    targets.insert(t.goal.conjuncts[0].args[0]);
  }
  EXPECT_EQ(targets.size(), 10u);
}

TEST(BuildSuite, LongGoalsHaveTwoConjuncts) {
  for (const auto& t : build_suite({SuiteKind::kLong, 10, 5}).tasks) EXPECT_GE(t.goal.conjuncts.size(), 2u);
}

TEST(BuildSuite, Deterministic) {
  for (SuiteKind kind : kAllKinds) {
    const Suite a = build_suite({kind, 3, 77});
    const Suite b = build_suite({kind, 3, 77});
    for (std::size_t i = 0; i < a.tasks.size(); ++i) {
      EXPECT_EQ(serialize_problem(a.tasks[i]), serialize_problem(b.tasks[i]));
    }
  }
}

TEST(BuildSuite, ImpossibleCountIsUnsatisfiable) {
  EXPECT_EQ(taskgen_code([] { build_suite({SuiteKind::kInterference, 500, 1}); }),
            TaskgenError::Code::kUnsatisfiableRecipe);
  EXPECT_EQ(taskgen_code([] { build_suite({SuiteKind::kGoal, 0, 1}); }), TaskgenError::Code::kUnsatisfiableRecipe);
}

TEST(SuiteFiles, WriteReadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "lldm_suite_rt";
  std::filesystem::remove_all(dir);
  const Suite s = build_suite({SuiteKind::kLong, 4, 8});
  write_suite(dir.string(), s);
  EXPECT_TRUE(std::filesystem::exists(dir / "suite.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "task_00.bddl"));
  const Suite r = read_suite(dir.string());
  EXPECT_EQ(r.recipe.kind, s.recipe.kind);
  EXPECT_EQ(r.recipe.seed, s.recipe.seed);
  EXPECT_EQ(r.tasks, s.tasks);
  std::filesystem::remove_all(dir);
}

TEST(SuiteKindNames, CaseInsensitive) {
  EXPECT_EQ(suite_kind_from_string("interference"), SuiteKind::kInterference);
  EXPECT_EQ(suite_kind_from_string("NINETY"), SuiteKind::kNinety);
  EXPECT_THROW(suite_kind_from_string("bogus"), TaskgenError);
}

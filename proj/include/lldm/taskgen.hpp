#pragma once

// Procedural task generation: behavioral templates are instantiated against a
// scene catalog into instructions and goal formulas, and wrapped in a
// ProblemSpec whose regions define the initial-state distribution.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lldm/rng.hpp"
#include "lldm/task_dsl.hpp"

namespace lldm {

enum class SlotType { kObject, kFixture, kContainer, kArticulation, kRegion };

struct PredicateSchema {
  std::string name;
  std::vector<std::string> args;  // may embed slots, e.g. "{fixture}_{articulation}"
};

struct BehaviorTemplate {
  std::string id;
  std::string pattern;  // e.g. "open the {articulation} of the {fixture}"
  std::vector<PredicateSchema> goal_schema;
  std::vector<PredicateSchema> init_schema;  // atoms the initial state must satisfy
};

// Slot name -> type: the name with trailing digits removed ("object2" -> object).
std::map<std::string, SlotType> template_slots(const BehaviorTemplate& t);

class TaskgenError : public std::runtime_error {
 public:
  enum class Code { kMissingSlot, kTypeMismatch, kBadTemplate, kUnsatisfiableTemplate, kUnsatisfiableRecipe, kUnknownScene };
  TaskgenError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

// Throws kBadTemplate when the goal schema uses a slot missing from the
// pattern or a slot has an unknown type.
void check_template(const BehaviorTemplate& t);

struct SlotValue {
  std::string ground;  // instance or region name used in atoms
  std::string phrase;  // words substituted into the instruction
  SlotValue() = default;
  SlotValue(std::string ground_name, std::string words)
      : ground(std::move(ground_name)), phrase(std::move(words)) {}
  // Derives both forms from a single name ("cabinet" -> cabinet_1 / "cabinet").
  SlotValue(const char* name);         // NOLINT(google-explicit-constructor)
  SlotValue(const std::string& name);  // NOLINT(google-explicit-constructor)
  SlotValue(std::string_view name, SlotType type);
};

using Bindings = std::map<std::string, SlotValue>;

struct FixtureDef {
  std::string name;
  std::string type;
  double x = 0.0, y = 0.0;  // table frame
  bool wall_facing = false;
  std::vector<std::string> articulations;  // drawer region names
  std::vector<std::string> surfaces;       // fixture-anchored surface region names
  bool has_switch = false;
};

struct SceneDef {
  std::string id;
  std::string table;  // table instance and type name
  std::vector<FixtureDef> fixtures;
  std::vector<std::string> object_types;
  std::vector<Rect> placement_area;  // table frame, candidate object centers
};

struct SceneCatalog {
  std::vector<SceneDef> scenes;
  const SceneDef& get(const std::string& id) const;
};

const SceneCatalog& default_catalog();
const std::vector<BehaviorTemplate>& default_templates();
const BehaviorTemplate& find_template(const std::string& id);

// Names usable for a slot type in a scene, given the objects present.
std::vector<std::string> slot_candidates(const SceneDef& scene, SlotType type,
                                         const std::vector<std::string>& object_names);

struct Instantiation {
  std::string instruction;
  GoalFormula goal;
  std::vector<Predicate> init_atoms;
};

// When `scene` is given, bound names are type-checked against it with the
// objects `<type>_1` for every type in the scene vocabulary.
Instantiation instantiate(const BehaviorTemplate& t, const Bindings& bindings,
                          const SceneDef* scene = nullptr);

struct GenerateOptions {
  double jitter = 0.05;          // side length of object init rectangles
  double fixture_jitter = 0.02;  // side length of fixture init rectangles
  double min_separation = 0.12;  // between object init-region centers
  std::size_t distractors = 1;
};

ProblemSpec generate_task(const SceneDef& scene, const BehaviorTemplate& t, Rng& rng,
                          const GenerateOptions& options = {});

enum class SuiteKind { kSpatial, kObject, kGoal, kLong, kNinety, kInterference };

const char* to_string(SuiteKind kind);
SuiteKind suite_kind_from_string(const std::string& s);

struct SuiteRecipe {
  SuiteKind kind = SuiteKind::kGoal;
  std::size_t task_count = 10;
  std::uint64_t seed = 0;
};

struct Suite {
  SuiteRecipe recipe;
  std::vector<ProblemSpec> tasks;
};

inline constexpr int kMaxSuiteAttempts = 1000;

Suite build_suite(const SuiteRecipe& recipe, const GenerateOptions& options = {});

// Writes task_XX.bddl files and suite.json into `dir` (created if needed).
void write_suite(const std::string& dir, const Suite& suite);
Suite read_suite(const std::string& dir);

// The canonical text of one section, used to check suite disentanglement.
std::string section_text(const ProblemSpec& spec, const std::string& key);

}  // namespace lldm

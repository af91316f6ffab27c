#include "lldm/taskgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include <json.hpp>

#include "lldm/util.hpp"
#include "lldm/world.hpp"

namespace lldm {

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool ends_with_number(std::string_view s) {
  const auto pos = s.rfind('_');
  if (pos == std::string_view::npos || pos + 1 == s.size()) return false;
  return std::all_of(s.begin() + static_cast<std::ptrdiff_t>(pos) + 1, s.end(),
                     [](unsigned char c) { return std::isdigit(c); });
}

std::optional<SlotType> slot_type_of(std::string_view slot) {
  while (!slot.empty() && std::isdigit(static_cast<unsigned char>(slot.back()))) slot.remove_suffix(1);
  if (slot == "object") return SlotType::kObject;
  if (slot == "fixture") return SlotType::kFixture;
  if (slot == "container") return SlotType::kContainer;
  if (slot == "articulation") return SlotType::kArticulation;
  if (slot == "region") return SlotType::kRegion;
  return std::nullopt;
}

std::string ground_for(std::string_view raw, SlotType type) {
  std::string s(raw);
  switch (type) {
    case SlotType::kObject:
    case SlotType::kFixture:
    case SlotType::kContainer:
      return ends_with_number(s) ? s : s + "_1";
    case SlotType::kArticulation:
    case SlotType::kRegion:
      if (ends_with(s, "_region") || ends_with(s, "_side") || ends_with_number(s)) return s;
      return s + "_region";
  }
  return s;
}

std::string phrase_for(std::string_view raw) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : raw) {
    if (c == '_') {
      words.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  words.push_back(cur);
  std::erase_if(words, [](const std::string& w) {
    return w.empty() || std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::isdigit(c); });
  });
  if (words.size() > 1 && words.back() == "region") words.pop_back();
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// Substitutes "{slot}" references; `value` maps a slot name to its text.
template <typename F>
std::string substitute(const std::string& pattern, F&& value) {
  std::string out;
  std::size_t i = 0;
  while (i < pattern.size()) {
    if (pattern[i] == '{') {
      const auto close = pattern.find('}', i);
      if (close == std::string::npos) {
        throw TaskgenError(TaskgenError::Code::kBadTemplate, "unclosed slot in '" + pattern + "'");
      }
      out += value(pattern.substr(i + 1, close - i - 1));
      i = close + 1;
    } else {
      out.push_back(pattern[i++]);
    }
  }
  return out;
}

std::vector<std::string> slots_in(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while ((i = s.find('{', i)) != std::string::npos) {
    const auto close = s.find('}', i);
    if (close == std::string::npos) break;
    out.push_back(s.substr(i + 1, close - i - 1));
    i = close + 1;
  }
  return out;
}

bool is_container_type(std::string_view t) { return t.find("basket") != std::string_view::npos; }
bool is_surface_type(std::string_view t) { return t.find("plate") != std::string_view::npos; }

std::string type_of_instance(const std::string& name) {
  return ends_with_number(name) ? name.substr(0, name.rfind('_')) : name;
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

struct PlacedObject {
  std::string name;
  std::string type;
  double cx, cy;             // table frame
  std::string region_name;   // unqualified
};

double rect_area(const Rect& r) { return (r.xmax - r.xmin) * (r.ymax - r.ymin); }

// Samples `count` centers inside the placement area with pairwise separation.
std::vector<std::pair<double, double>> sample_centers(const SceneDef& scene, std::size_t count, Rng& rng,
                                                      const GenerateOptions& opt,
                                                      std::vector<std::pair<double, double>> taken = {}) {
  double total = 0.0;
  for (const auto& r : scene.placement_area) total += rect_area(r);
  std::vector<std::pair<double, double>> out;
  for (std::size_t k = 0; k < count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxSuiteAttempts && !placed; ++attempt) {
      double pick = rng.uniform() * total;
      const Rect* area = &scene.placement_area.back();
      for (const auto& r : scene.placement_area) {
        if (pick < rect_area(r)) {
          area = &r;
          break;
        }
        pick -= rect_area(r);
      }
      const double x = round4(rng.uniform(area->xmin, area->xmax));
      const double y = round4(rng.uniform(area->ymin, area->ymax));
      const bool clear = std::all_of(taken.begin(), taken.end(), [&](const auto& p) {
        return std::hypot(p.first - x, p.second - y) >= opt.min_separation - 1e-9;
      });
      if (clear) {
        taken.emplace_back(x, y);
        out.emplace_back(x, y);
        placed = true;
      }
    }
    if (!placed) throw TaskgenError(TaskgenError::Code::kUnsatisfiableTemplate, "placement area is full");
  }
  return out;
}

Rect centered(double cx, double cy, double side) {
  const double h = side / 2.0;
  return {round4(cx - h), round4(cy - h), round4(cx + h), round4(cy + h)};
}

ProblemSpec assemble(const SceneDef& scene, const std::string& name, const std::string& instruction,
                     const std::vector<PlacedObject>& objects, const GoalFormula& goal,
                     const std::vector<Predicate>& extra_init, const std::vector<std::string>& interest,
                     const GenerateOptions& opt) {
  ProblemSpec spec;
  spec.name = name;
  spec.domain = "tabletop";
  spec.language = instruction;
  spec.fixtures.push_back({scene.table, scene.table});
  for (const auto& f : scene.fixtures) {
    spec.fixtures.push_back({f.name, f.type});
    const double yaw = f.wall_facing ? std::numbers::pi : 0.0;
    spec.regions.push_back({f.type + "_init_region", scene.table, {centered(f.x, f.y, opt.fixture_jitter)}, {{yaw, yaw}}});
  }
  for (const auto& o : objects) {
    spec.objects.push_back({o.name, o.type});
    spec.regions.push_back({o.region_name, scene.table, {centered(o.cx, o.cy, opt.jitter)}, {{0.0, 0.0}}});
  }
  for (const auto& f : scene.fixtures) {
    for (const auto& r : f.surfaces) spec.regions.push_back({r, f.name, {}, {}});
    for (const auto& r : f.articulations) spec.regions.push_back({r, f.name, {}, {}});
  }
  spec.objects_of_interest = interest;
  for (const auto& o : objects) spec.init.push_back({"On", {o.name, scene.table + "_" + o.region_name}});
  for (const auto& f : scene.fixtures) spec.init.push_back({"On", {f.name, scene.table + "_" + f.type + "_init_region"}});
  for (const auto& p : extra_init) spec.init.push_back(p);
  spec.goal = goal;
  return spec;
}

std::string object_region_name(const std::string& instance, const std::vector<std::string>& all) {
  const std::string type = type_of_instance(instance);
  const auto same = std::count_if(all.begin(), all.end(), [&](const auto& n) { return type_of_instance(n) == type; });
  return (same == 1 ? type : instance) + "_init_region";
}

std::vector<PlacedObject> place(const std::vector<std::string>& names,
                                const std::vector<std::pair<double, double>>& centers) {
  std::vector<PlacedObject> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    out.push_back({names[i], type_of_instance(names[i]), centers[i].first, centers[i].second,
                   object_region_name(names[i], names)});
  }
  return out;
}

// A spec is usable when it validates, compiles, has a scripted plan, and its
// goal is not already satisfied at a sampled initial state.
bool usable(const ProblemSpec& spec) {
  if (!validate(spec).empty()) return false;
  try {
    World world(spec);
    ScriptedExpert expert(world);
    Rng rng(1);
    return !world.goal_reached(world.sample_initial_state(rng));
  } catch (const WorldError&) {
    return false;
  }
}

std::vector<std::string> scene_objects(const SceneDef& scene) {
  std::vector<std::string> names;
  for (const auto& t : scene.object_types) names.push_back(t + "_1");
  return names;
}

std::vector<Bindings> enumerate_bindings(const SceneDef& scene, const BehaviorTemplate& t,
                                         const std::vector<std::string>& objects) {
  const auto slots = template_slots(t);
  std::vector<Bindings> out{{}};
  for (const auto& [slot, type] : slots) {
    std::vector<Bindings> next;
    for (const auto& partial : out) {
      for (const auto& name : slot_candidates(scene, type, objects)) {
        bool clash = false;
        for (const auto& [other, v] : partial) {
          if (v.ground == name) clash = true;
        }
        if (clash) continue;
        Bindings b = partial;
        b[slot] = SlotValue(name, type);
        next.push_back(std::move(b));
      }
    }
    out = std::move(next);
  }
  return out;
}

std::vector<std::string> referenced_objects(const Instantiation& inst, const std::vector<std::string>& objects) {
  std::vector<std::string> out;
  auto add = [&](const Predicate& p) {
    for (const auto& a : p.args) {
      if (std::find(objects.begin(), objects.end(), a) != objects.end() &&
          std::find(out.begin(), out.end(), a) == out.end()) {
        out.push_back(a);
      }
    }
  };
  for (const auto& p : inst.goal.conjuncts) add(p);
  for (const auto& p : inst.init_atoms) add(p);
  return out;
}

std::vector<std::string> referenced_fixtures(const Instantiation& inst, const SceneDef& scene) {
  std::vector<std::string> out;
  for (const auto& f : scene.fixtures) {
    for (const auto& p : inst.goal.conjuncts) {
      for (const auto& a : p.args) {
        if ((a == f.name || a.rfind(f.name + "_", 0) == 0) &&
            std::find(out.begin(), out.end(), f.name) == out.end()) {
          out.push_back(f.name);
        }
      }
    }
  }
  return out;
}

}  // namespace

std::map<std::string, SlotType> template_slots(const BehaviorTemplate& t) {
  std::map<std::string, SlotType> out;
  for (const auto& s : slots_in(t.pattern)) {
    const auto type = slot_type_of(s);
    if (!type) throw TaskgenError(TaskgenError::Code::kBadTemplate, "unknown slot type '" + s + "' in " + t.id);
    out[s] = *type;
  }
  return out;
}

void check_template(const BehaviorTemplate& t) {
  const auto slots = template_slots(t);
  for (const auto* schema : {&t.goal_schema, &t.init_schema}) {
    for (const auto& p : *schema) {
      for (const auto& a : p.args) {
        for (const auto& s : slots_in(a)) {
          if (!slots.contains(s)) {
            throw TaskgenError(TaskgenError::Code::kBadTemplate,
                               "slot '" + s + "' of " + t.id + " is not in the pattern");
          }
        }
      }
    }
  }
  if (t.goal_schema.empty()) throw TaskgenError(TaskgenError::Code::kBadTemplate, t.id + " has no goal");
}

SlotValue::SlotValue(const char* name) : SlotValue(std::string(name)) {}

SlotValue::SlotValue(const std::string& name) : ground(name), phrase(phrase_for(name)) {}

SlotValue::SlotValue(std::string_view name, SlotType type)
    : ground(ground_for(name, type)), phrase(phrase_for(name)) {
  // "top_region" reads as "top drawer"; fixture surfaces keep their noun.
  if (type == SlotType::kArticulation && ends_with(name, "_region") && phrase.find("drawer") == std::string::npos) {
    phrase += " drawer";
  } else if (type == SlotType::kRegion && ends_with(name, "_region")) {
    phrase += " region";
  }
}

const SceneDef& SceneCatalog::get(const std::string& id) const {
  for (const auto& s : scenes) {
    if (s.id == id) return s;
  }
  throw TaskgenError(TaskgenError::Code::kUnknownScene, "unknown scene '" + id + "'");
}

const SceneCatalog& default_catalog() {
  static const SceneCatalog catalog = [] {
    SceneCatalog c;
    SceneDef kitchen;
    kitchen.id = "kitchen_scene";
    kitchen.table = "kitchen_table";
    kitchen.fixtures.push_back({"wooden_cabinet_1", "wooden_cabinet", -0.3, 0.1, true,
                                {"top_region", "middle_region", "bottom_region"}, {"top_side"}, false});
    kitchen.fixtures.push_back({"flat_stove_1", "flat_stove", 0.25, 0.25, false, {}, {"cook_region"}, true});
    kitchen.object_types = {"akita_black_bowl", "plate", "porcelain_mug", "cream_cheese", "moka_pot", "butter"};
    kitchen.placement_area = {{-0.1, -0.38, 0.38, 0.08}, {-0.38, -0.38, -0.1, -0.2}};
    c.scenes.push_back(kitchen);

    SceneDef living;
    living.id = "living_room_scene";
    living.table = "living_room_table";
    living.object_types = {"alphabet_soup", "tomato_sauce", "cream_cheese", "ketchup",
                           "butter", "milk", "orange_juice", "bbq_sauce",
                           "chocolate_pudding", "salad_dressing", "basket", "plate"};
    living.placement_area = {{-0.4, -0.4, 0.4, 0.4}};
    c.scenes.push_back(living);

    SceneDef study;
    study.id = "study_scene";
    study.table = "study_table";
    study.fixtures.push_back({"white_cabinet_1", "white_cabinet", -0.32, 0.0, true,
                              {"top_region", "bottom_region"}, {"top_side"}, false});
    study.object_types = {"black_book", "porcelain_mug", "akita_black_bowl", "plate"};
    study.placement_area = {{-0.08, -0.38, 0.38, 0.38}};
    c.scenes.push_back(study);
    return c;
  }();
  return catalog;
}

const std::vector<BehaviorTemplate>& default_templates() {
  static const std::vector<BehaviorTemplate> templates = [] {
    const std::string drawer = "{fixture}_{articulation}";
    std::vector<BehaviorTemplate> t = {
        {"open_drawer", "open the {articulation} of the {fixture}", {{"Open", {drawer}}}, {}},
        {"close_drawer", "close the {articulation} of the {fixture}", {{"Close", {drawer}}}, {{"Open", {drawer}}}},
        {"turn_on", "turn on the {fixture}", {{"TurnOn", {"{fixture}"}}}, {}},
        {"turn_off", "turn off the {fixture}", {{"TurnOff", {"{fixture}"}}}, {{"TurnOn", {"{fixture}"}}}},
        {"put_on", "put the {object} on the {region}", {{"On", {"{object}", "{region}"}}}, {}},
        {"put_in", "put the {object} in the {container}", {{"In", {"{object}", "{container}"}}}, {}},
        {"stack", "stack the {object} on the {object2}", {{"On", {"{object}", "{object2}"}}}, {}},
        {"put_in_drawer", "put the {object} in the {articulation} of the {fixture}", {{"In", {"{object}", drawer}}}, {}},
        {"open_and_put_in", "open the {articulation} of the {fixture} and put the {object} in it",
         {{"Open", {drawer}}, {"In", {"{object}", drawer}}}, {}},
        {"put_in_drawer_and_close", "put the {object} in the {articulation} of the {fixture} and close it",
         {{"In", {"{object}", drawer}}, {"Close", {drawer}}}, {}},
        {"put_on_and_turn_on", "put the {object} on the {fixture} and turn it on",
         {{"On", {"{object}", "{fixture}"}}, {"TurnOn", {"{fixture}"}}}, {}},
        {"put_both_in", "put both the {object} and the {object2} in the {container}",
         {{"In", {"{object}", "{container}"}}, {"In", {"{object2}", "{container}"}}}, {}},
        {"put_both_on", "put both the {object} and the {object2} on the {region}",
         {{"On", {"{object}", "{region}"}}, {"On", {"{object2}", "{region}"}}}, {}},
        {"open_drawer_and_turn_on", "open the {articulation} of the {fixture} and turn on the {fixture2}",
         {{"Open", {"{fixture}_{articulation}"}}, {"TurnOn", {"{fixture2}"}}}, {}},
        {"turn_on_and_put_on", "turn on the {fixture} and put the {object} on the {region}",
         {{"TurnOn", {"{fixture}"}}, {"On", {"{object}", "{region}"}}}, {}},
    };
    for (const auto& x : t) check_template(x);
    return t;
  }();
  return templates;
}

const BehaviorTemplate& find_template(const std::string& id) {
  for (const auto& t : default_templates()) {
    if (t.id == id) return t;
  }
  throw TaskgenError(TaskgenError::Code::kBadTemplate, "unknown template '" + id + "'");
}

std::vector<std::string> slot_candidates(const SceneDef& scene, SlotType type,
                                         const std::vector<std::string>& objects) {
  std::vector<std::string> out;
  switch (type) {
    case SlotType::kObject:
      return objects;
    case SlotType::kContainer:
      for (const auto& o : objects) {
        if (is_container_type(type_of_instance(o))) out.push_back(o);
      }
      return out;
    case SlotType::kFixture:
      for (const auto& f : scene.fixtures) out.push_back(f.name);
      return out;
    case SlotType::kArticulation: {
      std::set<std::string> names;
      for (const auto& f : scene.fixtures) names.insert(f.articulations.begin(), f.articulations.end());
      return {names.begin(), names.end()};
    }
    case SlotType::kRegion:
      for (const auto& o : objects) {
        if (is_surface_type(type_of_instance(o))) out.push_back(o);
      }
      for (const auto& f : scene.fixtures) {
        for (const auto& s : f.surfaces) out.push_back(f.name + "_" + s);
      }
      return out;
  }
  return out;
}

Instantiation instantiate(const BehaviorTemplate& t, const Bindings& bindings, const SceneDef* scene) {
  const auto slots = template_slots(t);
  std::map<std::string, SlotValue> resolved;
  for (const auto& [slot, type] : slots) {
    const auto it = bindings.find(slot);
    if (it == bindings.end()) {
      throw TaskgenError(TaskgenError::Code::kMissingSlot, "template " + t.id + " needs slot '" + slot + "'");
    }
    SlotValue v = it->second;
    // Values built from a bare name are grounded by slot type.
    if (v.phrase == phrase_for(v.ground)) v.ground = ground_for(v.ground, type);
    if (scene != nullptr) {
      const auto names = slot_candidates(*scene, type, scene_objects(*scene));
      if (std::find(names.begin(), names.end(), v.ground) == names.end()) {
        throw TaskgenError(TaskgenError::Code::kTypeMismatch,
                           "'" + v.ground + "' cannot fill slot '" + slot + "' in scene " + scene->id);
      }
    }
    resolved[slot] = v;
  }
  Instantiation out;
  out.instruction = substitute(t.pattern, [&](const std::string& s) { return resolved.at(s).phrase; });
  auto ground = [&](const std::vector<PredicateSchema>& schema) {
    std::vector<Predicate> atoms;
    for (const auto& p : schema) {
      Predicate atom{p.name, {}};
      for (const auto& a : p.args) {
        atom.args.push_back(substitute(a, [&](const std::string& s) {
          const auto it = resolved.find(s);
          if (it == resolved.end()) {
            throw TaskgenError(TaskgenError::Code::kMissingSlot, "template " + t.id + " needs slot '" + s + "'");
          }
          return it->second.ground;
        }));
      }
      atoms.push_back(std::move(atom));
    }
    return atoms;
  };
  out.goal.conjuncts = ground(t.goal_schema);
  out.init_atoms = ground(t.init_schema);
  return out;
}

ProblemSpec generate_task(const SceneDef& scene, const BehaviorTemplate& t, Rng& rng, const GenerateOptions& opt) {
  const std::vector<std::string> objects = scene_objects(scene);
  std::vector<Bindings> combos = enumerate_bindings(scene, t, objects);
  rng.shuffle(combos);
  int tried = 0;
  for (const auto& b : combos) {
    if (++tried > kMaxSuiteAttempts) break;
    const Instantiation inst = instantiate(t, b, &scene);
    std::vector<std::string> present = referenced_objects(inst, objects);
    std::vector<std::string> pool;
    for (const auto& o : objects) {
      if (std::find(present.begin(), present.end(), o) == present.end()) pool.push_back(o);
    }
    rng.shuffle(pool);
    for (std::size_t d = 0; d < opt.distractors && d < pool.size(); ++d) present.push_back(pool[d]);
    std::vector<std::pair<double, double>> centers;
    try {
      centers = sample_centers(scene, present.size(), rng, opt);
    } catch (const TaskgenError&) {
      continue;
    }
    std::vector<std::string> interest = referenced_objects(inst, objects);
    for (const auto& f : referenced_fixtures(inst, scene)) interest.push_back(f);
    ProblemSpec spec = assemble(scene, scene.id + "_" + t.id, inst.instruction, place(present, centers), inst.goal,
                                inst.init_atoms, interest, opt);
    if (usable(spec)) return spec;
  }
  throw TaskgenError(TaskgenError::Code::kUnsatisfiableTemplate,
                     "template " + t.id + " cannot be realized in scene " + scene.id);
}

const char* to_string(SuiteKind kind) {
  switch (kind) {
    case SuiteKind::kSpatial: return "SPATIAL";
    case SuiteKind::kObject: return "OBJECT";
    case SuiteKind::kGoal: return "GOAL";
    case SuiteKind::kLong: return "LONG";
    case SuiteKind::kNinety: return "NINETY";
    case SuiteKind::kInterference: return "INTERFERENCE";
  }
  return "?";
}

SuiteKind suite_kind_from_string(const std::string& s) {
  std::string upper = s;
  for (char& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (SuiteKind k : {SuiteKind::kSpatial, SuiteKind::kObject, SuiteKind::kGoal, SuiteKind::kLong,
                      SuiteKind::kNinety, SuiteKind::kInterference}) {
    if (upper == to_string(k)) return k;
  }
  throw TaskgenError(TaskgenError::Code::kUnsatisfiableRecipe, "unknown suite kind '" + s + "'");
}

namespace {

Suite build_spatial(const SuiteRecipe& recipe, Rng& rng, const GenerateOptions& opt) {
  const SceneDef& scene = default_catalog().get("kitchen_scene");
  const Rect& area = scene.placement_area.front();
  constexpr int kCols = 4, kRows = 3;
  const char* col_names[kCols] = {"far left", "left", "right", "far right"};
  const char* row_names[kRows] = {"front", "middle", "back"};
  auto cell_center = [&](int c, int r) {
    const double w = (area.xmax - area.xmin) / kCols;
    const double h = (area.ymax - area.ymin) / kRows;
    return std::pair{round4(area.xmin + w * (c + 0.5)), round4(area.ymin + h * (r + 0.5))};
  };
  const std::vector<std::string> names = {"akita_black_bowl_1", "akita_black_bowl_2", "plate_1"};
  Suite suite{recipe, {}};
  std::set<std::string> seen;
  for (int attempt = 0; suite.tasks.size() < recipe.task_count; ++attempt) {
    if (attempt >= kMaxSuiteAttempts) throw TaskgenError(TaskgenError::Code::kUnsatisfiableRecipe, "SPATIAL: too few distinct layouts");
    std::vector<int> cells(kCols * kRows);
    for (int i = 0; i < kCols * kRows; ++i) cells[static_cast<std::size_t>(i)] = i;
    rng.shuffle(cells);
    std::vector<std::pair<double, double>> centers;
    for (int cell : cells) {
      const auto p = cell_center(cell % kCols, cell / kCols);
      const bool clear = std::all_of(centers.begin(), centers.end(), [&](const auto& q) {
        return std::hypot(p.first - q.first, p.second - q.second) >= opt.min_separation - 1e-9;
      });
      if (clear) centers.push_back(p);
      if (centers.size() == names.size()) break;
    }
    if (centers.size() != names.size()) continue;
    const int target_cell = [&] {
      for (int cell : cells) {
        if (cell_center(cell % kCols, cell / kCols) == centers[0]) return cell;
      }
      return 0;
    }();
    const std::string where = std::string(row_names[target_cell / kCols]) + " " + col_names[target_cell % kCols];
    const std::string instruction = "pick up the black bowl at the " + where + " and place it on the plate";
    if (seen.contains(instruction)) continue;
    GoalFormula goal{{{"On", {"akita_black_bowl_1", "plate_1"}}}};
    ProblemSpec spec = assemble(scene, "SPATIAL_task_" + std::to_string(suite.tasks.size()), instruction,
                                place(names, centers), goal, {}, {"akita_black_bowl_1", "plate_1"}, opt);
    if (!usable(spec)) continue;
    seen.insert(instruction);
    suite.tasks.push_back(std::move(spec));
  }
  return suite;
}

// Tasks on one fixed layout; `pick` chooses which (template, bindings)
// candidates are eligible.
Suite build_fixed_layout(const SuiteRecipe& recipe, Rng& rng, const GenerateOptions& opt, const SceneDef& scene,
                         const std::vector<std::string>& names,
                         const std::vector<std::pair<const BehaviorTemplate*, Bindings>>& pool, bool shuffle_pool) {
  const auto centers = sample_centers(scene, names.size(), rng, opt);
  const auto placed = place(names, centers);
  auto candidates = pool;
  if (shuffle_pool) rng.shuffle(candidates);
  Suite suite{recipe, {}};
  std::set<std::string> seen;
  int attempts = 0;
  for (const auto& [tmpl, bindings] : candidates) {
    if (suite.tasks.size() == recipe.task_count) break;
    if (++attempts > kMaxSuiteAttempts) break;
    const Instantiation inst = instantiate(*tmpl, bindings);
    if (seen.contains(inst.instruction) || !inst.init_atoms.empty()) continue;
    std::vector<std::string> interest = referenced_objects(inst, names);
    for (const auto& f : referenced_fixtures(inst, scene)) interest.push_back(f);
    ProblemSpec spec = assemble(scene, std::string(to_string(recipe.kind)) + "_task_" + std::to_string(suite.tasks.size()),
                                inst.instruction, placed, inst.goal, {}, interest, opt);
    if (!usable(spec)) continue;
    seen.insert(inst.instruction);
    suite.tasks.push_back(std::move(spec));
  }
  if (suite.tasks.size() != recipe.task_count) {
    throw TaskgenError(TaskgenError::Code::kUnsatisfiableRecipe,
                       std::string(to_string(recipe.kind)) + ": only " + std::to_string(suite.tasks.size()) +
                           " distinct tasks available");
  }
  return suite;
}

Suite build_sampled(const SuiteRecipe& recipe, Rng& rng, const GenerateOptions& opt, bool long_only) {
  const auto& catalog = default_catalog();
  std::vector<const BehaviorTemplate*> templates;
  for (const auto& t : default_templates()) {
    if (!long_only || t.goal_schema.size() >= 2) templates.push_back(&t);
  }
  Suite suite{recipe, {}};
  std::set<std::string> seen;
  for (int attempt = 0; suite.tasks.size() < recipe.task_count; ++attempt) {
    if (attempt >= kMaxSuiteAttempts) {
      throw TaskgenError(TaskgenError::Code::kUnsatisfiableRecipe,
                         std::string(to_string(recipe.kind)) + ": too few distinct tasks");
    }
    const SceneDef& scene = catalog.scenes[rng.uniform_index(catalog.scenes.size())];
    const BehaviorTemplate& t = *templates[rng.uniform_index(templates.size())];
    ProblemSpec spec;
    try {
      spec = generate_task(scene, t, rng, opt);
    } catch (const TaskgenError&) {
      continue;
    }
    if (seen.contains(spec.language)) continue;
    seen.insert(spec.language);
    spec.name = std::string(to_string(recipe.kind)) + "_task_" + std::to_string(suite.tasks.size());
    suite.tasks.push_back(std::move(spec));
  }
  return suite;
}

}  // namespace

Suite build_suite(const SuiteRecipe& recipe, const GenerateOptions& opt) {
  if (recipe.task_count < 1) throw TaskgenError(TaskgenError::Code::kUnsatisfiableRecipe, "task count must be positive");
  Rng rng(stream_seed(recipe.seed, Stream::kTaskgen, static_cast<std::uint64_t>(recipe.kind)));
  const auto& catalog = default_catalog();
  switch (recipe.kind) {
    case SuiteKind::kSpatial:
      return build_spatial(recipe, rng, opt);
    case SuiteKind::kObject: {
      const SceneDef& scene = catalog.get("living_room_scene");
      std::vector<std::string> goods;
      for (const auto& t : scene.object_types) {
        if (!is_container_type(t) && !is_surface_type(t)) goods.push_back(t + "_1");
      }
      if (recipe.task_count > goods.size()) {
        throw TaskgenError(TaskgenError::Code::kUnsatisfiableRecipe, "OBJECT: not enough unique objects");
      }
      rng.shuffle(goods);
      goods.resize(recipe.task_count);
      std::vector<std::string> names = goods;
      names.push_back("basket_1");
      std::vector<std::pair<const BehaviorTemplate*, Bindings>> pool;
      for (const auto& g : goods) {
        pool.push_back({&find_template("put_in"), {{"object", SlotValue(g, SlotType::kObject)},
                                                   {"container", SlotValue("basket_1", SlotType::kContainer)}}});
      }
      return build_fixed_layout(recipe, rng, opt, scene, names, pool, false);
    }
    case SuiteKind::kGoal: {
      const SceneDef& scene = catalog.get("kitchen_scene");
      const std::vector<std::string> names = {"akita_black_bowl_1", "plate_1", "porcelain_mug_1", "cream_cheese_1"};
      std::vector<std::pair<const BehaviorTemplate*, Bindings>> pool;
      for (const auto& t : default_templates()) {
        if (!t.init_schema.empty()) continue;
        for (auto& b : enumerate_bindings(scene, t, names)) pool.push_back({&t, std::move(b)});
      }
      return build_fixed_layout(recipe, rng, opt, scene, names, pool, true);
    }
    case SuiteKind::kInterference: {
      const SceneDef& scene = catalog.get("kitchen_scene");
      const std::vector<std::string> names = {"akita_black_bowl_1", "plate_1"};
      const std::vector<std::string> destinations = {"plate_1", "wooden_cabinet_1_top_side", "flat_stove_1_cook_region"};
      if (recipe.task_count > destinations.size()) {
        throw TaskgenError(TaskgenError::Code::kUnsatisfiableRecipe, "INTERFERENCE: at most 3 tasks");
      }
      std::vector<std::pair<const BehaviorTemplate*, Bindings>> pool;
      for (const auto& d : destinations) {
        pool.push_back({&find_template("put_on"), {{"object", SlotValue("akita_black_bowl_1", SlotType::kObject)},
                                                   {"region", SlotValue(d, SlotType::kRegion)}}});
      }
      return build_fixed_layout(recipe, rng, opt, scene, names, pool, false);
    }
    case SuiteKind::kLong:
      return build_sampled(recipe, rng, opt, true);
    case SuiteKind::kNinety:
      return build_sampled(recipe, rng, opt, false);
  }
  throw TaskgenError(TaskgenError::Code::kUnsatisfiableRecipe, "unknown suite kind");
}

void write_suite(const std::string& dir, const Suite& suite) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "lldm-suite";
  manifest["version"] = 1;
  manifest["kind"] = to_string(suite.recipe.kind);
  manifest["seed"] = suite.recipe.seed;
  manifest["task_count"] = suite.tasks.size();
  manifest["tasks"] = nlohmann::json::array();
  for (std::size_t i = 0; i < suite.tasks.size(); ++i) {
    char file[32];
    std::snprintf(file, sizeof(file), "task_%02zu.bddl", i);
    const ProblemSpec& spec = suite.tasks[i];
    write_file((fs::path(dir) / file).string(), serialize_problem(spec));
    std::vector<std::string> objects;
    for (const auto& o : spec.objects) objects.push_back(o.name);
    manifest["tasks"].push_back({{"index", i}, {"file", file}, {"name", spec.name},
                                 {"instruction", spec.language}, {"objects", objects}});
  }
  write_file((fs::path(dir) / "suite.json").string(), manifest.dump(2) + "\n");
}

Suite read_suite(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto manifest = nlohmann::json::parse(read_file((fs::path(dir) / "suite.json").string()));
  Suite suite;
  suite.recipe.kind = suite_kind_from_string(manifest.at("kind").get<std::string>());
  suite.recipe.seed = manifest.at("seed").get<std::uint64_t>();
  suite.recipe.task_count = manifest.at("task_count").get<std::size_t>();
  for (const auto& entry : manifest.at("tasks")) {
    ProblemSpec spec = parse_problem(read_file((fs::path(dir) / entry.at("file").get<std::string>()).string()));
    std::vector<std::string> objects;
    for (const auto& o : spec.objects) objects.push_back(o.name);
    if (objects != entry.at("objects").get<std::vector<std::string>>()) {
      throw std::runtime_error("object order of " + spec.name + " differs from suite.json");
    }
    suite.tasks.push_back(std::move(spec));
  }
  return suite;
}

std::string section_text(const ProblemSpec& spec, const std::string& key) {
  const std::string text = serialize_problem(spec);
  const std::string open = "  (" + key;
  const auto start = text.find(open);
  if (start == std::string::npos) return {};
  const auto end = text.find("\n  (:", start + 1);
  return text.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

}  // namespace lldm

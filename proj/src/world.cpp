#include "lldm/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "lldm/util.hpp"

namespace lldm {

namespace {

bool has(std::string_view s, std::string_view part) { return s.find(part) != std::string_view::npos; }

double clamp1(double v) {
  if (std::isnan(v)) return 0.0;
  return std::clamp(v, -1.0, 1.0);
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Catalog geometry. Sizes are half extents in workspace units.
double object_half_extent(std::string_view type) {
  if (has(type, "plate")) return 0.05;
  if (has(type, "basket")) return 0.06;
  if (has(type, "bowl")) return 0.03;
  return 0.025;
}

bool object_is_container(std::string_view type) { return has(type, "basket"); }

std::optional<double> drawer_lateral(std::string_view region) {
  if (region == "top_region") return 0.08;
  if (region == "middle_region") return 0.0;
  if (region == "bottom_region") return -0.08;
  return std::nullopt;
}

constexpr double kHandleOffset = 0.07;
constexpr double kInteriorNear = 0.09;
constexpr double kInteriorFar = 0.17;
constexpr double kInteriorHalfWidth = 0.03;
constexpr double kSwitchOffset = -0.08;

}  // namespace

Action Action::clamped() const { return {clamp1(dx), clamp1(dy), clamp1(dgrip)}; }

World::World(ProblemSpec spec, SimConfig config) : spec_(std::move(spec)), config_(config) {
  for (const auto& o : spec_.objects) {
    objects_.push_back({o.name, o.type, object_half_extent(o.type), object_is_container(o.type)});
  }
  for (const auto& f : spec_.fixtures) {
    FixtureInfo info{f.name, f.type, has(f.type, "table"), 0.05, 0.05};
    if (info.table) {
      info.half_x = info.half_y = 0.5;
    } else if (has(f.type, "cabinet")) {
      info.half_x = 0.05;
      info.half_y = 0.13;
    } else if (has(f.type, "stove")) {
      info.half_x = info.half_y = 0.06;
      switches_.push_back({f.name, fixtures_.size()});
    }
    fixtures_.push_back(info);
  }
  auto fixture_index = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < fixtures_.size(); ++i) {
      if (fixtures_[i].name == name) return i;
    }
    return std::nullopt;
  };
  auto object_index = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < objects_.size(); ++i) {
      if (objects_[i].name == name) return i;
    }
    return std::nullopt;
  };

  for (std::size_t r = 0; r < spec_.regions.size(); ++r) {
    const RegionSpec& region = spec_.regions[r];
    const auto fx = fixture_index(region.target);
    if (!fx) {
      throw WorldError(WorldError::Code::kInvalidSpec,
                       "region '" + region.name + "' must target a fixture");
    }
    const std::string qualified = region.qualified_name();
    if (!region.ranges.empty()) {
      targets_.push_back({qualified, Target::Kind::kRanges, r, *fx});
      continue;
    }
    const auto lateral = drawer_lateral(region.name);
    if (lateral && has(fixtures_[*fx].type, "cabinet")) {
      articulations_.push_back({qualified, *fx, *lateral});
      targets_.push_back({qualified, Target::Kind::kDrawer, articulations_.size() - 1, *fx});
      containers_.push_back(targets_.size() - 1);
    } else {
      targets_.push_back({qualified, Target::Kind::kFixtureSurface, *fx, *fx});
    }
  }
  for (std::size_t i = 0; i < objects_.size(); ++i) {
    targets_.push_back({objects_[i].name, Target::Kind::kObject, i, 0});
    if (objects_[i].container) containers_.push_back(targets_.size() - 1);
  }
  for (std::size_t i = 0; i < fixtures_.size(); ++i) {
    if (!fixtures_[i].table) targets_.push_back({fixtures_[i].name, Target::Kind::kFixtureSurface, i, i});
  }

  std::vector<bool> placed_obj(objects_.size(), false), placed_fix(fixtures_.size(), false);
  for (const Predicate& p : spec_.init) {
    if (p.name == "On" && p.args.size() == 2) {
      const RegionSpec* region = spec_.find_region(p.args[1]);
      if (region == nullptr || region->ranges.empty()) continue;
      const auto region_index = static_cast<std::size_t>(region - spec_.regions.data());
      if (auto oi = object_index(p.args[0])) {
        placements_.push_back({EntityKind::kObject, *oi, region_index});
        placed_obj[*oi] = true;
      } else if (auto fi = fixture_index(p.args[0])) {
        placements_.push_back({EntityKind::kFixture, *fi, region_index});
        placed_fix[*fi] = true;
      }
    } else if ((p.name == "Open" || p.name == "Close") && p.args.size() == 1) {
      for (std::size_t a = 0; a < articulations_.size(); ++a) {
        if (articulations_[a].name == p.args[0]) initial_open_.push_back({a, p.name == "Open"});
      }
    } else if ((p.name == "TurnOn" || p.name == "TurnOff") && p.args.size() == 1) {
      for (std::size_t s = 0; s < switches_.size(); ++s) {
        if (switches_[s].name == p.args[0]) initial_switch_.push_back({s, p.name == "TurnOn"});
      }
    }
  }
  // Fixtures must be placed before anything that sits in their frame.
  std::stable_partition(placements_.begin(), placements_.end(),
                        [](const Placement& p) { return p.kind == EntityKind::kFixture; });
  for (std::size_t i = 0; i < objects_.size(); ++i) {
    if (!placed_obj[i]) {
      throw WorldError(WorldError::Code::kInvalidSpec,
                       "object '" + objects_[i].name + "' has no initial placement");
    }
  }
  for (std::size_t i = 0; i < fixtures_.size(); ++i) {
    if (!placed_fix[i] && !fixtures_[i].table) {
      throw WorldError(WorldError::Code::kInvalidSpec,
                       "fixture '" + fixtures_[i].name + "' has no initial placement");
    }
  }
}

const World::Target* World::find_target(std::string_view name) const {
  for (const auto& t : targets_) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::pair<double, double> World::frame_origin(const WorldState& s, std::size_t fixture) const {
  if (fixtures_[fixture].table) return {0.5, 0.5};
  return {s.fixtures[fixture].x, s.fixtures[fixture].y};
}

double World::handle_x(const WorldState& s, std::size_t a) const {
  const auto& art = articulations_[a];
  return s.fixtures[art.fixture].x + kHandleOffset + s.open_fraction[a] * kDrawerTravel;
}

double World::handle_y(const WorldState& s, std::size_t a) const {
  const auto& art = articulations_[a];
  return s.fixtures[art.fixture].y + art.lateral;
}

Rect World::drawer_interior(const WorldState& s, std::size_t a) const {
  const auto& art = articulations_[a];
  const Pose& f = s.fixtures[art.fixture];
  const double y = f.y + art.lateral;
  return {f.x + kInteriorNear, y - kInteriorHalfWidth, f.x + kInteriorFar, y + kInteriorHalfWidth};
}

double World::switch_x(const WorldState& s, std::size_t sw) const {
  return s.fixtures[switches_[sw].fixture].x;
}

double World::switch_y(const WorldState& s, std::size_t sw) const {
  return s.fixtures[switches_[sw].fixture].y + kSwitchOffset;
}

std::vector<Rect> World::target_rects(const WorldState& s, const Target& t) const {
  switch (t.kind) {
    case Target::Kind::kRanges: {
      const auto [ox, oy] = frame_origin(s, t.frame_fixture);
      std::vector<Rect> out;
      for (const Rect& r : spec_.regions[t.index].ranges) {
        out.push_back({ox + r.xmin, oy + r.ymin, ox + r.xmax, oy + r.ymax});
      }
      return out;
    }
    case Target::Kind::kObject: {
      const Pose& p = s.objects[t.index];
      const double h = objects_[t.index].half_extent;
      return {{p.x - h, p.y - h, p.x + h, p.y + h}};
    }
    case Target::Kind::kFixtureSurface: {
      const Pose& p = s.fixtures[t.index];
      const auto& f = fixtures_[t.index];
      return {{p.x - f.half_x, p.y - f.half_y, p.x + f.half_x, p.y + f.half_y}};
    }
    case Target::Kind::kDrawer:
      return {drawer_interior(s, t.index)};
  }
  return {};
}

std::pair<double, double> World::target_point(const WorldState& s, const Target& t) const {
  const std::vector<Rect> rects = target_rects(s, t);
  const Rect& r = rects.front();
  return {0.5 * (r.xmin + r.xmax), 0.5 * (r.ymin + r.ymax)};
}

WorldState World::sample_initial_state(Rng& rng) const {
  WorldState s;
  s.objects.assign(objects_.size(), Pose{});
  s.fixtures.assign(fixtures_.size(), Pose{0.5, 0.5, 0.0});
  s.open_fraction.assign(articulations_.size(), 0.0);
  s.switches.assign(switches_.size(), 0);
  s.inside.assign(objects_.size(), -1);
  for (const auto& [a, open] : initial_open_) s.open_fraction[a] = open ? 1.0 : 0.0;
  for (const auto& [sw, on] : initial_switch_) s.switches[sw] = on ? 1 : 0;

  auto draw = [&](const Placement& p) {
    const RegionSpec& region = spec_.regions[p.region];
    const Rect& r = region.ranges[rng.uniform_index(region.ranges.size())];
    const double x = rng.uniform(r.xmin, r.xmax);
    const double y = rng.uniform(r.ymin, r.ymax);
    double yaw = 0.0;
    if (!region.yaw.empty()) {
      const YawInterval& yi = region.yaw[rng.uniform_index(region.yaw.size())];
      yaw = rng.uniform(yi.lo, yi.hi);
    }
    const Target* frame = find_target(region.qualified_name());
    const auto [ox, oy] = frame_origin(s, frame->frame_fixture);
    return Pose{clamp01(ox + x), clamp01(oy + y), yaw};
  };

  for (int attempt = 0; attempt < config_.placement_attempts; ++attempt) {
    for (const Placement& p : placements_) {
      const Pose pose = draw(p);
      if (p.kind == EntityKind::kFixture) {
        s.fixtures[p.entity] = pose;
      } else {
        s.objects[p.entity] = pose;
      }
    }
    bool overlap = false;
    const double min_dist = 2.0 * config_.object_radius;
    for (std::size_t i = 0; i < s.objects.size() && !overlap; ++i) {
      for (std::size_t j = i + 1; j < s.objects.size(); ++j) {
        if (std::hypot(s.objects[i].x - s.objects[j].x, s.objects[i].y - s.objects[j].y) < min_dist) {
          overlap = true;
          break;
        }
      }
    }
    if (!overlap) {
      for (const Predicate& p : spec_.init) {
        if (p.name != "In" || p.args.size() != 2) continue;
        const Target* c = find_target(p.args[1]);
        for (std::size_t i = 0; i < objects_.size(); ++i) {
          if (objects_[i].name != p.args[0] || c == nullptr) continue;
          for (std::size_t k = 0; k < containers_.size(); ++k) {
            if (&targets_[containers_[k]] != c) continue;
            const auto [px, py] = target_point(s, *c);
            s.objects[i].x = px;
            s.objects[i].y = py;
            s.inside[i] = static_cast<int>(k);
          }
        }
      }
      return s;
    }
  }
  throw WorldError(WorldError::Code::kPlacementInfeasible,
                   "no overlap-free placement after " + std::to_string(config_.placement_attempts) +
                       " attempts");
}

std::optional<std::size_t> World::containment(const WorldState& s, std::size_t object) const {
  const Pose& p = s.objects[object];
  for (std::size_t k = 0; k < containers_.size(); ++k) {
    const Target& t = targets_[containers_[k]];
    if (t.kind == Target::Kind::kObject && t.index == object) continue;
    if (t.kind == Target::Kind::kDrawer && s.open_fraction[t.index] < config_.open_threshold) continue;
    for (const Rect& r : target_rects(s, t)) {
      if (r.contains(p.x, p.y)) return k;
    }
  }
  return std::nullopt;
}

WorldState World::step(const WorldState& state, const Action& raw) const {
  const Action a = raw.clamped();
  WorldState s = state;
  if (s.held_handle) {
    const std::size_t h = *s.held_handle;
    s.open_fraction[h] = clamp01(s.open_fraction[h] + a.dx * config_.max_step / kDrawerTravel);
    s.gripper_x = handle_x(s, h);
    s.gripper_y = handle_y(s, h);
  } else {
    s.gripper_x = clamp01(s.gripper_x + a.dx * config_.max_step);
    s.gripper_y = clamp01(s.gripper_y + a.dy * config_.max_step);
  }
  const double before = s.aperture;
  s.aperture = clamp01(s.aperture + a.dgrip);
  const bool close_event = before >= 0.5 && s.aperture < 0.5;
  const bool open_event = before < 0.5 && s.aperture >= 0.5;

  if (open_event) {
    if (s.held_object) {
      const std::size_t o = *s.held_object;
      const auto c = containment(s, o);
      s.inside[o] = c ? static_cast<int>(*c) : -1;
      s.held_object.reset();
    }
    s.held_handle.reset();
  } else if (close_event && !s.held_object && !s.held_handle) {
    enum class Kind { kNone, kObject, kHandle, kSwitch };
    Kind best = Kind::kNone;
    std::size_t best_index = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    auto consider = [&](Kind kind, std::size_t index, double x, double y) {
      const double d = std::hypot(x - s.gripper_x, y - s.gripper_y);
      if (d <= config_.grasp_radius && d < best_dist) {
        best = kind;
        best_index = index;
        best_dist = d;
      }
    };
    for (std::size_t i = 0; i < objects_.size(); ++i) {
      if (s.inside[i] >= 0) {
        const Target& t = targets_[containers_[static_cast<std::size_t>(s.inside[i])]];
        if (t.kind == Target::Kind::kDrawer && s.open_fraction[t.index] < config_.open_threshold) continue;
      }
      consider(Kind::kObject, i, s.objects[i].x, s.objects[i].y);
    }
    for (std::size_t h = 0; h < articulations_.size(); ++h) consider(Kind::kHandle, h, handle_x(s, h), handle_y(s, h));
    for (std::size_t w = 0; w < switches_.size(); ++w) consider(Kind::kSwitch, w, switch_x(s, w), switch_y(s, w));
    switch (best) {
      case Kind::kObject:
        s.held_object = best_index;
        s.inside[best_index] = -1;
        break;
      case Kind::kHandle:
        s.held_handle = best_index;
        s.gripper_x = handle_x(s, best_index);
        s.gripper_y = handle_y(s, best_index);
        break;
      case Kind::kSwitch:
        s.switches[best_index] = s.switches[best_index] ? 0 : 1;
        break;
      case Kind::kNone:
        break;
    }
  }
  if (s.held_object) {
    s.objects[*s.held_object].x = s.gripper_x;
    s.objects[*s.held_object].y = s.gripper_y;
  }
  return s;
}

PredicateState World::predicates(const WorldState& s) const {
  PredicateState out;
  for (const Target& t : targets_) {
    if (t.kind == Target::Kind::kDrawer) continue;
    const std::vector<Rect> rects = target_rects(s, t);
    auto on = [&](const std::string& name, double x, double y) {
      for (const Rect& r : rects) {
        if (r.contains(x, y)) {
          out.insert({"On", {name, t.name}});
          return;
        }
      }
    };
    for (std::size_t i = 0; i < objects_.size(); ++i) {
      if (s.held_object == i) continue;
      if (t.kind == Target::Kind::kObject && t.index == i) continue;
      on(objects_[i].name, s.objects[i].x, s.objects[i].y);
    }
    for (std::size_t i = 0; i < fixtures_.size(); ++i) {
      if (fixtures_[i].table) continue;
      if (t.kind == Target::Kind::kFixtureSurface && t.index == i) continue;
      on(fixtures_[i].name, s.fixtures[i].x, s.fixtures[i].y);
    }
  }
  for (std::size_t i = 0; i < objects_.size(); ++i) {
    if (s.inside[i] >= 0) {
      out.insert({"In", {objects_[i].name, targets_[containers_[static_cast<std::size_t>(s.inside[i])]].name}});
    }
  }
  for (std::size_t a = 0; a < articulations_.size(); ++a) {
    if (s.open_fraction[a] >= config_.open_threshold) out.insert({"Open", {articulations_[a].name}});
    if (s.open_fraction[a] <= 1.0 - config_.open_threshold) out.insert({"Close", {articulations_[a].name}});
  }
  for (std::size_t w = 0; w < switches_.size(); ++w) {
    out.insert({s.switches[w] ? "TurnOn" : "TurnOff", {switches_[w].name}});
  }
  return out;
}

bool World::goal_reached(const WorldState& s) const { return eval_goal(spec_.goal, predicates(s)); }

void World::observe(const WorldState& s, const ObsLayout& layout, std::span<const double> embedding,
                    std::span<double> out) const {
  if (objects_.size() > layout.max_objects || articulations_.size() > layout.max_articulations ||
      switches_.size() > layout.max_switches || embedding.size() != layout.embedding_dim ||
      out.size() != layout.dim()) {
    throw WorldError(WorldError::Code::kLayout, "observation layout does not fit this task");
  }
  std::fill(out.begin(), out.end(), 0.0);
  std::size_t k = 0;
  out[k++] = s.gripper_x;
  out[k++] = s.gripper_y;
  out[k++] = s.aperture;
  for (std::size_t i = 0; i < layout.max_objects; ++i, k += 4) {
    if (i >= objects_.size()) continue;
    out[k] = s.objects[i].x;
    out[k + 1] = s.objects[i].y;
    out[k + 2] = std::sin(s.objects[i].yaw);
    out[k + 3] = std::cos(s.objects[i].yaw);
  }
  for (std::size_t a = 0; a < layout.max_articulations; ++a, ++k) {
    if (a < articulations_.size()) out[k] = s.open_fraction[a];
  }
  for (std::size_t w = 0; w < layout.max_switches; ++w, ++k) {
    if (w < switches_.size()) out[k] = s.switches[w] ? 1.0 : 0.0;
  }
  out[k + (s.held_object ? *s.held_object : layout.max_objects)] = 1.0;
  k += layout.max_objects + 1;
  std::copy(embedding.begin(), embedding.end(), out.begin() + static_cast<std::ptrdiff_t>(k));
}

std::vector<double> World::observe(const WorldState& s, const ObsLayout& layout,
                                   std::span<const double> embedding) const {
  std::vector<double> out(layout.dim());
  observe(s, layout, embedding, out);
  return out;
}

ObsLayout layout_for(std::span<const ProblemSpec> specs, std::size_t embedding_dim) {
  ObsLayout layout;
  layout.embedding_dim = embedding_dim;
  for (const auto& spec : specs) {
    World w(spec);
    layout.max_objects = std::max(layout.max_objects, w.objects().size());
    layout.max_articulations = std::max(layout.max_articulations, w.articulations().size());
    layout.max_switches = std::max(layout.max_switches, w.switches().size());
  }
  return layout;
}

std::vector<double> one_hot(std::size_t index, std::size_t dim) {
  std::vector<double> v(dim, 0.0);
  if (index < dim) v[index] = 1.0;
  return v;
}

// ---------------------------------------------------------------------------
// Scripted expert

ScriptedExpert::ScriptedExpert(const World& world) : world_(&world) {
  auto is_object = [&](const std::string& n) {
    return std::any_of(world.objects().begin(), world.objects().end(),
                       [&](const auto& o) { return o.name == n; });
  };
  for (const Predicate& p : world.spec().goal.conjuncts) {
    bool ok = false;
    if ((p.name == "On" || p.name == "In") && p.args.size() == 2 && is_object(p.args[0])) {
      const World::Target* t = world.find_target(p.args[1]);
      if (t != nullptr) {
        const bool container = t->kind == World::Target::Kind::kDrawer ||
                               (t->kind == World::Target::Kind::kObject && world.objects()[t->index].container);
        ok = p.name == "On" ? t->kind != World::Target::Kind::kDrawer : container;
        if (t->kind == World::Target::Kind::kObject && world.objects()[t->index].name == p.args[0]) ok = false;
      }
    } else if ((p.name == "Open" || p.name == "Close") && p.args.size() == 1) {
      ok = std::any_of(world.articulations().begin(), world.articulations().end(),
                       [&](const auto& a) { return a.name == p.args[0]; });
    } else if ((p.name == "TurnOn" || p.name == "TurnOff") && p.args.size() == 1) {
      ok = std::any_of(world.switches().begin(), world.switches().end(),
                       [&](const auto& s) { return s.name == p.args[0]; });
    }
    if (!ok) throw WorldError(WorldError::Code::kNoPlan, "no scripted plan for " + p.str());
  }
}

Action ScriptedExpert::act(const WorldState& s, double noise_sigma, Rng& rng) const {
  Action a = act(s);
  if (noise_sigma > 0.0) {
    a.dx += noise_sigma * rng.normal();
    a.dy += noise_sigma * rng.normal();
    a.dgrip += noise_sigma * rng.normal();
  }
  return a.clamped();
}

Action ScriptedExpert::act(const WorldState& s) const {
  const World& w = *world_;
  const PredicateState preds = w.predicates(s);
  if (eval_goal(w.spec().goal, preds)) return {};

  const double gain = w.config().expert_gain;
  const double tolerance = w.config().arrive_tolerance;
  const bool closed = s.aperture < 0.5;
  const Action release{0.0, 0.0, 1.0};
  auto move_to = [&](double x, double y, double grip) {
    return Action{clamp1(gain * (x - s.gripper_x)), clamp1(gain * (y - s.gripper_y)), grip};
  };
  auto arrived = [&](double x, double y) {
    return std::hypot(x - s.gripper_x, y - s.gripper_y) < tolerance;
  };
  auto articulation_index = [&](const std::string& name) {
    for (std::size_t a = 0; a < w.articulations().size(); ++a) {
      if (w.articulations()[a].name == name) return a;
    }
    return std::size_t{0};
  };
  // Grab something at (x, y) with an empty hand.
  auto reach_and_grasp = [&](double x, double y) {
    if (s.held_object || s.held_handle) return release;
    if (closed) return move_to(x, y, 1.0);
    if (arrived(x, y)) return Action{0.0, 0.0, -1.0};
    return move_to(x, y, 1.0);
  };
  auto operate_drawer = [&](std::size_t a, bool open) {
    if (s.held_handle == a) return Action{open ? 1.0 : -1.0, 0.0, -1.0};
    return reach_and_grasp(w.handle_x(s, a), w.handle_y(s, a));
  };

  for (const Predicate& p : w.spec().goal.conjuncts) {
    if (preds.contains(p)) continue;
    if (p.name == "Open" || p.name == "Close") {
      return operate_drawer(articulation_index(p.args[0]), p.name == "Open");
    }
    if (p.name == "TurnOn" || p.name == "TurnOff") {
      std::size_t sw = 0;
      for (std::size_t k = 0; k < w.switches().size(); ++k) {
        if (w.switches()[k].name == p.args[0]) sw = k;
      }
      return reach_and_grasp(w.switch_x(s, sw), w.switch_y(s, sw));
    }
    // On / In
    std::size_t obj = 0;
    for (std::size_t k = 0; k < w.objects().size(); ++k) {
      if (w.objects()[k].name == p.args[0]) obj = k;
    }
    const World::Target& target = *w.find_target(p.args[1]);
    if (target.kind == World::Target::Kind::kDrawer && s.held_object != obj &&
        s.open_fraction[target.index] < w.config().open_threshold) {
      return operate_drawer(target.index, true);
    }
    if (s.held_object == obj) {
      const auto [tx, ty] = w.target_point(s, target);
      if (arrived(tx, ty)) return release;
      return move_to(tx, ty, -1.0);
    }
    return reach_and_grasp(s.objects[obj].x, s.objects[obj].y);
  }
  return {};
}

// ---------------------------------------------------------------------------
// Demonstrations

bool operator==(const Trajectory& a, const Trajectory& b) {
  return a.observations == b.observations && a.actions == b.actions && a.success == b.success &&
         a.task_id == b.task_id;
}

bool DemoSet::operator==(const DemoSet& o) const {
  return task_id == o.task_id && obs_dim == o.obs_dim && ordering_digest == o.ordering_digest &&
         trajectories == o.trajectories;
}

Trajectory rollout_expert(const World& world, const ObsLayout& layout, std::span<const double> embedding,
                          std::size_t task_id, const WorldState& init, double noise_sigma, Rng& rng) {
  const ScriptedExpert expert(world);
  Trajectory traj;
  traj.task_id = task_id;
  WorldState s = init;
  traj.observations.push_back(world.observe(s, layout, embedding));
  for (int t = 0; t < world.config().horizon; ++t) {
    if (world.goal_reached(s)) break;
    const Action a = expert.act(s, noise_sigma, rng);
    s = world.step(s, a);
    traj.actions.push_back(a);
    traj.observations.push_back(world.observe(s, layout, embedding));
  }
  traj.success = world.goal_reached(s);
  return traj;
}

DemoSet collect_demos(const World& world, const ObsLayout& layout, std::size_t task_id, std::size_t n,
                      std::uint64_t seed, double noise_sigma) {
  DemoSet set;
  set.task_id = task_id;
  set.obs_dim = layout.dim();
  set.ordering_digest = ordering_digest(world, layout);
  const std::vector<double> embedding = one_hot(task_id, layout.embedding_dim);
  const std::size_t cap = 10 * n;
  for (std::size_t attempt = 0; set.trajectories.size() < n; ++attempt) {
    if (attempt >= cap) {
      throw WorldError(WorldError::Code::kExpertUnreliable,
                       "expert failed too often on task " + std::to_string(task_id));
    }
    Rng init_rng(mix_seed({seed, attempt, 0}));
    Rng noise_rng(mix_seed({seed, attempt, 1}));
    const WorldState init = world.sample_initial_state(init_rng);
    Trajectory traj = rollout_expert(world, layout, embedding, task_id, init, noise_sigma, noise_rng);
    if (traj.success) set.trajectories.push_back(std::move(traj));
  }
  return set;
}

std::string ordering_digest(const World& world, const ObsLayout& layout) {
  std::string key = std::to_string(layout.max_objects) + "/" + std::to_string(layout.max_articulations) + "/" +
                    std::to_string(layout.max_switches) + "/" + std::to_string(layout.embedding_dim);
  for (const auto& o : world.objects()) key += "|o:" + o.name + ":" + o.type;
  for (const auto& a : world.articulations()) key += "|a:" + a.name;
  for (const auto& s : world.switches()) key += "|s:" + s.name;
  return hex64(fnv1a64(key));
}

void write_demos(const std::string& path, const DemoSet& demos) {
  using nlohmann::json;
  std::string out;
  json header = {{"format", "lldm-demos"},
                 {"version", 1},
                 {"task_id", demos.task_id},
                 {"obs_dim", demos.obs_dim},
                 {"action_dim", kActionDim},
                 {"ordering_digest", demos.ordering_digest},
                 {"count", demos.trajectories.size()}};
  out += header.dump() + "\n";
  for (const auto& t : demos.trajectories) {
    json actions = json::array();
    for (const auto& a : t.actions) actions.push_back({a.dx, a.dy, a.dgrip});
    json line = {{"observations", t.observations}, {"actions", actions}, {"success", t.success}};
    out += line.dump() + "\n";
  }
  write_file(path, out);
}

DemoSet read_demos(const std::string& path) {
  using nlohmann::json;
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty demo file '" + path + "'");
  const json header = json::parse(line);
  if (header.value("format", "") != "lldm-demos" || header.value("version", 0) != 1) {
    throw std::runtime_error("unsupported demo file header in '" + path + "'");
  }
  DemoSet set;
  set.task_id = header.at("task_id").get<std::size_t>();
  set.obs_dim = header.at("obs_dim").get<std::size_t>();
  set.ordering_digest = header.at("ordering_digest").get<std::string>();
  const auto count = header.at("count").get<std::size_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    Trajectory t;
    t.task_id = set.task_id;
    t.observations = j.at("observations").get<std::vector<std::vector<double>>>();
    for (const auto& a : j.at("actions")) t.actions.push_back({a.at(0), a.at(1), a.at(2)});
    t.success = j.at("success").get<bool>();
    for (const auto& o : t.observations) {
      if (o.size() != set.obs_dim) throw std::runtime_error("observation width mismatch in '" + path + "'");
    }
    set.trajectories.push_back(std::move(t));
  }
  if (set.trajectories.size() != count) throw std::runtime_error("truncated demo file '" + path + "'");
  return set;
}

void fill_window(const std::vector<std::vector<double>>& observations, std::size_t t, std::size_t frames,
                 std::span<double> out) {
  const std::size_t dim = observations.empty() ? 0 : observations.front().size();
  for (std::size_t f = 0; f < frames; ++f) {
    // Frame f holds time t - (frames - 1 - f).
    const std::size_t back = frames - 1 - f;
    auto dst = out.subspan(f * dim, dim);
    if (back > t) {
      std::fill(dst.begin(), dst.end(), 0.0);
    } else {
      const auto& src = observations[t - back];
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
}

double evaluate_policy(const World& world, const ObsLayout& layout, std::span<const double> embedding,
                       std::size_t window_frames, const BatchPolicy& policy, int rollouts,
                       std::uint64_t eval_seed, std::vector<RolloutResult>* details) {
  if (rollouts <= 0) return 0.0;
  const auto n = static_cast<std::size_t>(rollouts);
  std::vector<WorldState> states;
  std::vector<std::vector<std::vector<double>>> history(n);
  std::vector<RolloutResult> results(n);
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng(mix_seed({eval_seed, r}));
    states.push_back(world.sample_initial_state(rng));
    history[r].push_back(world.observe(states[r], layout, embedding));
    if (world.goal_reached(states[r])) {
      results[r].success = true;
    } else {
      active.push_back(r);
    }
  }
  const std::size_t dim = layout.dim();
  Eigen::MatrixXd windows;
  std::vector<Action> actions;
  std::vector<const WorldState*> ptrs;
  for (int t = 0; t < world.config().horizon && !active.empty(); ++t) {
    windows.resize(static_cast<Eigen::Index>(dim * window_frames), static_cast<Eigen::Index>(active.size()));
    ptrs.clear();
    for (std::size_t c = 0; c < active.size(); ++c) {
      const std::size_t r = active[c];
      fill_window(history[r], history[r].size() - 1, window_frames,
                  std::span<double>(windows.col(static_cast<Eigen::Index>(c)).data(), dim * window_frames));
      ptrs.push_back(&states[r]);
    }
    actions.assign(active.size(), Action{});
    policy(active, ptrs, windows, actions);
    std::vector<std::size_t> still;
    for (std::size_t c = 0; c < active.size(); ++c) {
      const std::size_t r = active[c];
      states[r] = world.step(states[r], actions[c]);
      history[r].push_back(world.observe(states[r], layout, embedding));
      results[r].steps = t + 1;
      if (world.goal_reached(states[r])) {
        results[r].success = true;
      } else {
        still.push_back(r);
      }
    }
    active.swap(still);
  }
  std::size_t wins = 0;
  for (const auto& r : results) wins += r.success ? 1 : 0;
  if (details != nullptr) *details = results;
  return static_cast<double>(wins) / static_cast<double>(n);
}

}  // namespace lldm

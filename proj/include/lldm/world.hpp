#pragma once

// Deterministic top-down kinematic tabletop world. Realizes a ProblemSpec:
// samples initial states from its regions, integrates gripper actions,
// tracks drawers, switches and container membership, and reports the
// predicates that hold.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lldm/rng.hpp"
#include "lldm/task_dsl.hpp"

namespace lldm {

inline constexpr std::size_t kActionDim = 3;

struct SimConfig {
  int horizon = 150;
  double max_step = 0.02;
  double grasp_radius = 0.03;
  double open_threshold = 0.9;
  int eval_rollouts = 20;
  double object_radius = 0.02;
  int placement_attempts = 100;
  double expert_gain = 12.5;     // proportional gain, action units per workspace unit
  double arrive_tolerance = 0.01;
};

struct Pose {
  double x = 0.0, y = 0.0, yaw = 0.0;
  bool operator==(const Pose&) const = default;
};

struct WorldState {
  double gripper_x = 0.5, gripper_y = 0.5;
  double aperture = 1.0;  // 1 open, 0 closed
  std::optional<std::size_t> held_object;
  std::optional<std::size_t> held_handle;  // articulation index
  std::vector<Pose> objects;               // spec object order
  std::vector<Pose> fixtures;              // spec fixture order
  std::vector<double> open_fraction;       // per articulation
  std::vector<std::uint8_t> switches;      // per switch
  std::vector<int> inside;                 // per object: container index or -1
  bool operator==(const WorldState&) const = default;
};

struct Action {
  double dx = 0.0, dy = 0.0, dgrip = 0.0;
  bool operator==(const Action&) const = default;
  Action clamped() const;
};

// Observation dimensions shared by every task of an experiment.
struct ObsLayout {
  std::size_t max_objects = 0;
  std::size_t max_articulations = 0;
  std::size_t max_switches = 0;
  std::size_t embedding_dim = 0;
  std::size_t dim() const {
    return 3 + 4 * max_objects + max_articulations + max_switches + (max_objects + 1) +
           embedding_dim;
  }
  bool operator==(const ObsLayout&) const = default;
};

class WorldError : public std::runtime_error {
 public:
  enum class Code { kInvalidSpec, kPlacementInfeasible, kNoPlan, kExpertUnreliable, kLayout };
  WorldError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

enum class EntityKind { kObject, kFixture };

// Compiled geometry for one ProblemSpec.
class World {
 public:
  struct ObjectInfo {
    std::string name, type;
    double half_extent;
    bool container;
  };
  struct FixtureInfo {
    std::string name, type;
    bool table;
    double half_x, half_y;
  };
  struct Articulation {
    std::string name;  // qualified region name
    std::size_t fixture;
    double lateral;    // y offset of the drawer from the fixture center
  };
  struct SwitchInfo {
    std::string name;  // fixture name
    std::size_t fixture;
  };
  // A place an entity can be On/In.
  struct Target {
    enum class Kind { kRanges, kObject, kFixtureSurface, kDrawer };
    std::string name;
    Kind kind;
    std::size_t index;          // region, object, fixture, or articulation index
    std::size_t frame_fixture;  // kRanges: fixture whose frame holds the rectangles
  };
  struct Placement {
    EntityKind kind;
    std::size_t entity;
    std::size_t region;  // index into spec.regions
  };

  World(ProblemSpec spec, SimConfig config = {});

  const ProblemSpec& spec() const { return spec_; }
  const SimConfig& config() const { return config_; }
  const std::vector<ObjectInfo>& objects() const { return objects_; }
  const std::vector<FixtureInfo>& fixtures() const { return fixtures_; }
  const std::vector<Articulation>& articulations() const { return articulations_; }
  const std::vector<SwitchInfo>& switches() const { return switches_; }
  const std::vector<Target>& targets() const { return targets_; }
  const Target* find_target(std::string_view name) const;

  WorldState sample_initial_state(Rng& rng) const;
  WorldState step(const WorldState& state, const Action& action) const;
  PredicateState predicates(const WorldState& state) const;
  bool goal_reached(const WorldState& state) const;
  // Writes the observation into `out` (size layout.dim()).
  void observe(const WorldState& state, const ObsLayout& layout,
               std::span<const double> embedding, std::span<double> out) const;
  std::vector<double> observe(const WorldState& state, const ObsLayout& layout,
                              std::span<const double> embedding) const;

  // Geometry queries.
  double handle_x(const WorldState& s, std::size_t articulation) const;
  double handle_y(const WorldState& s, std::size_t articulation) const;
  Rect drawer_interior(const WorldState& s, std::size_t articulation) const;
  double switch_x(const WorldState& s, std::size_t sw) const;
  double switch_y(const WorldState& s, std::size_t sw) const;
  // Rectangles in world coordinates covered by a target.
  std::vector<Rect> target_rects(const WorldState& s, const Target& t) const;
  // Point the expert moves to when delivering to a target.
  std::pair<double, double> target_point(const WorldState& s, const Target& t) const;
  // Frame origin for region rectangles anchored on a fixture.
  std::pair<double, double> frame_origin(const WorldState& s, std::size_t fixture) const;

  static constexpr double kDrawerTravel = 0.12;

 private:
  std::optional<std::size_t> containment(const WorldState& s, std::size_t object) const;

  ProblemSpec spec_;
  SimConfig config_;
  std::vector<ObjectInfo> objects_;
  std::vector<FixtureInfo> fixtures_;
  std::vector<Articulation> articulations_;
  std::vector<SwitchInfo> switches_;
  std::vector<Target> targets_;
  std::vector<Placement> placements_;
  std::vector<std::size_t> containers_;  // target indices that accept In
  std::vector<std::pair<std::size_t, bool>> initial_open_;   // articulation, open
  std::vector<std::pair<std::size_t, bool>> initial_switch_;
};

ObsLayout layout_for(std::span<const ProblemSpec> specs, std::size_t embedding_dim);

std::vector<double> one_hot(std::size_t index, std::size_t dim);

// Reactive scripted demonstrator: acts on the first unsatisfied goal conjunct.
class ScriptedExpert {
 public:
  explicit ScriptedExpert(const World& world);  // throws kNoPlan
  Action act(const WorldState& state) const;
  Action act(const WorldState& state, double noise_sigma, Rng& rng) const;

 private:
  const World* world_;
};

struct Trajectory {
  std::vector<std::vector<double>> observations;
  std::vector<Action> actions;
  bool success = false;
  std::size_t task_id = 0;
};

struct DemoSet {
  std::size_t task_id = 0;
  std::size_t obs_dim = 0;
  std::string ordering_digest;
  std::vector<Trajectory> trajectories;
  bool operator==(const DemoSet&) const;
};

bool operator==(const Trajectory& a, const Trajectory& b);

// Runs the expert from one initial state until success or the horizon.
Trajectory rollout_expert(const World& world, const ObsLayout& layout,
                          std::span<const double> embedding, std::size_t task_id,
                          const WorldState& init, double noise_sigma, Rng& rng);

DemoSet collect_demos(const World& world, const ObsLayout& layout, std::size_t task_id,
                      std::size_t n, std::uint64_t seed, double noise_sigma);

// Stable digest of the object/articulation/switch ordering a layout encodes.
std::string ordering_digest(const World& world, const ObsLayout& layout);

void write_demos(const std::string& path, const DemoSet& demos);
DemoSet read_demos(const std::string& path);

// Builds the time-ordered window of the last `frames` observations ending at
// `t`, zero-padded before the episode start.
void fill_window(const std::vector<std::vector<double>>& observations, std::size_t t,
                 std::size_t frames, std::span<double> out);

// Batched controller: one column of `windows` per active rollout; `rollouts`
// names the rollout index behind each column.
using BatchPolicy = std::function<void(std::span<const std::size_t> rollouts,
                                       std::span<const WorldState* const> states,
                                       const Eigen::MatrixXd& windows,
                                       std::vector<Action>& actions)>;

struct RolloutResult {
  bool success = false;
  int steps = 0;
};

// Success rate over `rollouts` episodes whose initial states come from
// Rng(mix_seed({eval_seed, r})) for rollout r.
double evaluate_policy(const World& world, const ObsLayout& layout,
                       std::span<const double> embedding, std::size_t window_frames,
                       const BatchPolicy& policy, int rollouts, std::uint64_t eval_seed,
                       std::vector<RolloutResult>* details = nullptr);

}  // namespace lldm

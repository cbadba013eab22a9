#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "nslam/geometry.hpp"
#include "nslam/rng.hpp"

namespace nslam {

struct AgentPose {
    int x = 0;
    int y = 0;
    Heading heading = Heading::North;

    bool operator==(const AgentPose&) const = default;
};

struct Cell {
    int x = 0;
    int y = 0;

    bool operator==(const Cell&) const = default;
};

// Immutable after generation; shareable across threads. Out-of-bounds is wall.
struct World {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> walls;       // 1 = wall, row-major [y*width + x]
    std::vector<uint8_t> observable;  // union of visible cells over all reachable poses
    int observable_count = 0;
    std::optional<AgentPose> start_pose;

    bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
    bool wall_at(int x, int y) const {
        return !in_bounds(x, y) || walls[static_cast<size_t>(y) * width + x] != 0;
    }
    bool free_at(int x, int y) const { return in_bounds(x, y) && !wall_at(x, y); }
    int cell_index(int x, int y) const { return y * width + x; }
};

struct VisibleCell {
    Cell cell;
    bool occupied = false;
};

struct Observation {
    std::array<double, kSensorLen> sensor{};  // 0 free, 1 wall, 0.5 occluded/unknown/OOB
    int last_action = kStandStill;
};

struct EpisodeState {
    const World* world = nullptr;
    AgentPose pose;
    std::vector<uint8_t> observed;  // per-cell
    int observed_count = 0;
    int steps = 0;
    bool done = false;
    bool solved = false;
};

struct StepResult {
    double reward = 0.0;
    Observation obs;
    bool collided = false;
    int new_cells = 0;
};

constexpr int kMaxEpisodeSteps = 750;
constexpr double kStepCost = -0.04;
constexpr double kCollisionPenalty = -0.96;
constexpr double kCompletionBonus = 10.0;
constexpr double kCellReward = 1.0 / kSensorLen;
constexpr double kDefaultObstacleDensity = 0.2;

// Exact center-to-center line of sight; blocked by any wall cell whose square
// the segment crosses (supercover: corner grazes count) strictly between the
// endpoints. Exposed for the renderer and tests.
bool line_of_sight(const World& world, Cell from, Cell to);

// Cells of the 3x5 window in front of `pose` that are in bounds and visible.
std::vector<VisibleCell> visible_cells(const World& world, AgentPose pose);

// Recomputes the observable set: union of visible cells over every
// (free cell, heading) pose. Called by the generator and the file loader.
void compute_observable(World& world);

World generate_world(int size, uint64_t seed, double density = kDefaultObstacleDensity,
                     int max_attempts = 10000);

// Builds the sensor reading for the current pose (0.5 for cells out of bounds
// or occluded), tagging the action that produced this state.
Observation make_observation(const EpisodeState& state, int last_action);

// Random placement over free cells and headings. No exploration reward at reset.
std::pair<EpisodeState, Observation> reset_episode(const World& world, Rng& rng);
// Fixed placement (suite evaluation, replays).
std::pair<EpisodeState, Observation> reset_episode_at(const World& world, AgentPose pose);

StepResult step_episode(EpisodeState& state, int action, int max_steps = kMaxEpisodeSteps);

// Text format: "W H" header, H rows of {'#','.'}, optional "S x y h" trailer.
std::string world_to_string(const World& world);
World world_from_string(const std::string& text);
void save_world(const World& world, const std::string& path);
World load_world(const std::string& path);

}  // namespace nslam

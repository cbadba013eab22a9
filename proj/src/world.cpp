#include "nslam/world.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nslam {

namespace {

// Segment-vs-cell test in doubled integer coordinates: cell centers sit at odd
// coordinates, cell boundaries at even ones, so every case is exact. A cell
// blocks when the closed clip interval of the segment against its square is
// nonempty; a degenerate (single-point) intersection can only be a corner
// graze, which counts as blocked on both pinched cells.
bool segment_meets_cell(int64_t px, int64_t py, int64_t dx, int64_t dy, int cx, int cy) {
    // t in [0,1] as fractions over the common denominator |dx| resp. |dy|.
    // Track t_enter = max(lo), t_exit = min(hi) with exact cross-multiplied
    // fraction comparisons: each bound is num/den with den > 0.
    int64_t lo_num = 0, lo_den = 1;   // t_enter
    int64_t hi_num = 1, hi_den = 1;   // t_exit

    auto raise_lo = [&](int64_t num, int64_t den) {
        if (num * lo_den > lo_num * den) {
            lo_num = num;
            lo_den = den;
        }
    };
    auto lower_hi = [&](int64_t num, int64_t den) {
        if (num * hi_den < hi_num * den) {
            hi_num = num;
            hi_den = den;
        }
    };

    // Clip against one slab: lo <= p + t*d <= hi, denominators kept positive.
    auto clip_slab = [&](int64_t p, int64_t d, int64_t lo, int64_t hi) {
        if (d == 0) return p >= lo && p <= hi;
        if (d > 0) {
            raise_lo(lo - p, d);
            lower_hi(hi - p, d);
        } else {
            raise_lo(p - hi, -d);
            lower_hi(p - lo, -d);
        }
        return true;
    };

    if (!clip_slab(px, dx, 2 * cx, 2 * cx + 2)) return false;
    if (!clip_slab(py, dy, 2 * cy, 2 * cy + 2)) return false;
    // Nonempty iff t_enter <= t_exit.
    return lo_num * hi_den <= hi_num * lo_den;
}

std::vector<Cell> free_cells(const World& w) {
    std::vector<Cell> cells;
    for (int y = 0; y < w.height; ++y)
        for (int x = 0; x < w.width; ++x)
            if (!w.wall_at(x, y)) cells.push_back({x, y});
    return cells;
}

bool free_space_connected(const World& w) {
    std::vector<Cell> frees = free_cells(w);
    if (frees.empty()) return false;
    std::vector<uint8_t> seen(static_cast<size_t>(w.width) * w.height, 0);
    std::vector<Cell> stack{frees[0]};
    seen[static_cast<size_t>(w.cell_index(frees[0].x, frees[0].y))] = 1;
    size_t reached = 0;
    while (!stack.empty()) {
        Cell c = stack.back();
        stack.pop_back();
        ++reached;
        const int dx[] = {1, -1, 0, 0};
        const int dy[] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
            int nx = c.x + dx[k], ny = c.y + dy[k];
            if (!w.free_at(nx, ny)) continue;
            uint8_t& s = seen[static_cast<size_t>(w.cell_index(nx, ny))];
            if (!s) {
                s = 1;
                stack.push_back({nx, ny});
            }
        }
    }
    return reached == frees.size();
}

void mark_visible(const World& world, AgentPose pose, std::vector<uint8_t>& flags, int* count) {
    for (const VisibleCell& vc : visible_cells(world, pose)) {
        uint8_t& f = flags[static_cast<size_t>(world.cell_index(vc.cell.x, vc.cell.y))];
        if (!f) {
            f = 1;
            if (count) ++(*count);
        }
    }
}

}  // namespace

bool line_of_sight(const World& world, Cell from, Cell to) {
    if (from == to) return true;
    int64_t px = 2 * from.x + 1, py = 2 * from.y + 1;
    int64_t dx = 2 * (to.x - from.x), dy = 2 * (to.y - from.y);
    int lox = std::min(from.x, to.x), hix = std::max(from.x, to.x);
    int loy = std::min(from.y, to.y), hiy = std::max(from.y, to.y);
    for (int cy = loy; cy <= hiy; ++cy) {
        for (int cx = lox; cx <= hix; ++cx) {
            if ((cx == from.x && cy == from.y) || (cx == to.x && cy == to.y)) continue;
            if (!world.wall_at(cx, cy)) continue;
            if (segment_meets_cell(px, py, dx, dy, cx, cy)) return false;
        }
    }
    return true;
}

std::vector<VisibleCell> visible_cells(const World& world, AgentPose pose) {
    std::vector<VisibleCell> out;
    out.reserve(kSensorLen);
    for (const Delta& d : window_offsets(pose.heading)) {
        int cx = pose.x + d.dx, cy = pose.y + d.dy;
        if (!world.in_bounds(cx, cy)) continue;
        if (line_of_sight(world, {pose.x, pose.y}, {cx, cy}))
            out.push_back({{cx, cy}, world.wall_at(cx, cy)});
    }
    return out;
}

void compute_observable(World& world) {
    world.observable.assign(static_cast<size_t>(world.width) * world.height, 0);
    world.observable_count = 0;
    for (int y = 0; y < world.height; ++y) {
        for (int x = 0; x < world.width; ++x) {
            if (world.wall_at(x, y)) continue;
            for (int h = 0; h < 4; ++h) {
                mark_visible(world, {x, y, static_cast<Heading>(h)}, world.observable,
                             &world.observable_count);
            }
        }
    }
}

World generate_world(int size, uint64_t seed, double density, int max_attempts) {
    if (size < 8 || size > 16)
        throw std::invalid_argument("generate_world: size must be in [8,16], got " +
                                    std::to_string(size));
    if (density < 0.0 || density >= 1.0)
        throw std::invalid_argument("generate_world: density must be in [0,1)");
    Rng rng(seed);
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        World w;
        w.width = size;
        w.height = size;
        w.walls.assign(static_cast<size_t>(size) * size, 0);
        for (auto& cell : w.walls) cell = rng.uniform() < density ? 1 : 0;
        if (!free_space_connected(w)) continue;
        compute_observable(w);
        if (w.observable_count * 2 < size * size) continue;
        return w;
    }
    throw std::runtime_error("generate_world: retry limit exceeded (size=" +
                             std::to_string(size) + ", seed=" + std::to_string(seed) + ")");
}

Observation make_observation(const EpisodeState& state, int last_action) {
    Observation obs;
    obs.last_action = last_action;
    const World& w = *state.world;
    auto offsets = window_offsets(state.pose.heading);
    for (int i = 0; i < kSensorLen; ++i) {
        int cx = state.pose.x + offsets[static_cast<size_t>(i)].dx;
        int cy = state.pose.y + offsets[static_cast<size_t>(i)].dy;
        if (!w.in_bounds(cx, cy)) {
            obs.sensor[static_cast<size_t>(i)] = 0.5;
        } else if (line_of_sight(w, {state.pose.x, state.pose.y}, {cx, cy})) {
            obs.sensor[static_cast<size_t>(i)] = w.wall_at(cx, cy) ? 1.0 : 0.0;
        } else {
            obs.sensor[static_cast<size_t>(i)] = 0.5;
        }
    }
    return obs;
}

std::pair<EpisodeState, Observation> reset_episode_at(const World& world, AgentPose pose) {
    if (!world.free_at(pose.x, pose.y))
        throw std::invalid_argument("reset_episode_at: start pose not on a free cell");
    EpisodeState st;
    st.world = &world;
    st.pose = pose;
    st.observed.assign(static_cast<size_t>(world.width) * world.height, 0);
    mark_visible(world, pose, st.observed, &st.observed_count);
    st.solved = st.observed_count == world.observable_count;
    st.done = st.solved;
    Observation obs = make_observation(st, kStandStill);
    return {std::move(st), obs};
}

std::pair<EpisodeState, Observation> reset_episode(const World& world, Rng& rng) {
    std::vector<Cell> frees = free_cells(world);
    if (frees.empty()) throw std::runtime_error("reset_episode: world has no free cells");
    Cell c = frees[static_cast<size_t>(rng.uniform_int(static_cast<int>(frees.size())))];
    Heading h = static_cast<Heading>(rng.uniform_int(4));
    return reset_episode_at(world, {c.x, c.y, h});
}

StepResult step_episode(EpisodeState& state, int action, int max_steps) {
    if (state.done) throw std::logic_error("step_episode: episode already finished");
    if (action < 0 || action >= kNumActions)
        throw std::invalid_argument("step_episode: bad action id " + std::to_string(action));

    StepResult res;
    ++state.steps;

    switch (action) {
        case kStandStill:
            break;
        case kTurnLeft:
            state.pose.heading = turn_left(state.pose.heading);
            break;
        case kTurnRight:
            state.pose.heading = turn_right(state.pose.heading);
            break;
        case kGoStraight: {
            Delta f = heading_forward(state.pose.heading);
            int nx = state.pose.x + f.dx, ny = state.pose.y + f.dy;
            if (state.world->wall_at(nx, ny)) {
                res.collided = true;
            } else {
                state.pose.x = nx;
                state.pose.y = ny;
            }
            break;
        }
    }

    int before = state.observed_count;
    mark_visible(*state.world, state.pose, state.observed, &state.observed_count);
    res.new_cells = state.observed_count - before;

    bool solved_now = !state.solved && state.observed_count == state.world->observable_count;
    if (solved_now) state.solved = true;
    state.done = state.solved || state.steps >= max_steps;

    res.reward = kStepCost + (res.collided ? kCollisionPenalty : 0.0) +
                 res.new_cells * kCellReward + (solved_now ? kCompletionBonus : 0.0);
    res.obs = make_observation(state, action);
    return res;
}

std::string world_to_string(const World& world) {
    std::ostringstream os;
    os << world.width << ' ' << world.height << '\n';
    for (int y = 0; y < world.height; ++y) {
        for (int x = 0; x < world.width; ++x) os << (world.wall_at(x, y) ? '#' : '.');
        os << '\n';
    }
    if (world.start_pose) {
        os << "S " << world.start_pose->x << ' ' << world.start_pose->y << ' '
           << heading_char(world.start_pose->heading) << '\n';
    }
    return os.str();
}

World world_from_string(const std::string& text) {
    std::istringstream is(text);
    World w;
    if (!(is >> w.width >> w.height) || w.width <= 0 || w.height <= 0)
        throw std::invalid_argument("world_from_string: bad header, expected \"W H\"");
    w.walls.assign(static_cast<size_t>(w.width) * w.height, 0);
    std::string row;
    std::getline(is, row);  // consume end of header line
    for (int y = 0; y < w.height; ++y) {
        if (!std::getline(is, row) || static_cast<int>(row.size()) < w.width)
            throw std::invalid_argument("world_from_string: short row " + std::to_string(y));
        for (int x = 0; x < w.width; ++x) {
            char c = row[static_cast<size_t>(x)];
            if (c == '#')
                w.walls[static_cast<size_t>(w.cell_index(x, y))] = 1;
            else if (c != '.')
                throw std::invalid_argument(std::string("world_from_string: bad cell '") + c +
                                            "'");
        }
    }
    std::string tag;
    if (is >> tag) {
        if (tag != "S") throw std::invalid_argument("world_from_string: unexpected trailer");
        int x, y;
        char h;
        if (!(is >> x >> y >> h))
            throw std::invalid_argument("world_from_string: bad start pose line");
        AgentPose pose{x, y, heading_from_char(h)};
        if (!w.free_at(pose.x, pose.y))
            throw std::invalid_argument("world_from_string: start pose not on a free cell");
        w.start_pose = pose;
    }
    compute_observable(w);
    return w;
}

void save_world(const World& world, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_world: cannot open " + path);
    out << world_to_string(world);
    if (!out) throw std::runtime_error("save_world: write failed for " + path);
}

World load_world(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_world: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return world_from_string(buf.str());
}

}  // namespace nslam

#pragma once

#include <array>
#include <stdexcept>
#include <utility>

namespace nslam {

// Grid coordinates: x grows east (columns), y grows south (rows).
enum class Heading : int { North = 0, East = 1, South = 2, West = 3 };

constexpr int kNumActions = 4;
enum Action : int { kStandStill = 0, kTurnLeft = 1, kTurnRight = 2, kGoStraight = 3 };

// Sensing window: 3 cells wide, 5 cells deep, anchored at the agent's own row
// (depth 0 contains the agent cell).
constexpr int kWindowWidth = 3;
constexpr int kWindowDepth = 5;
constexpr int kSensorLen = kWindowWidth * kWindowDepth;

struct Delta {
    int dx = 0, dy = 0;
};

inline Delta heading_forward(Heading h) {
    switch (h) {
        case Heading::North: return {0, -1};
        case Heading::East: return {1, 0};
        case Heading::South: return {0, 1};
        case Heading::West: return {-1, 0};
    }
    throw std::logic_error("heading_forward: bad heading");
}

// 90 degrees clockwise from forward (the agent's right-hand side).
inline Delta heading_right(Heading h) {
    Delta f = heading_forward(h);
    return {-f.dy, f.dx};
}

inline Heading turn_left(Heading h) {
    return static_cast<Heading>((static_cast<int>(h) + 3) % 4);
}

inline Heading turn_right(Heading h) {
    return static_cast<Heading>((static_cast<int>(h) + 1) % 4);
}

// Window cell offsets in sensor layout order: index = depth * 3 + (lateral+1),
// lateral in {-1,0,+1} running left-to-right in the agent frame.
inline std::array<Delta, kSensorLen> window_offsets(Heading h) {
    Delta f = heading_forward(h);
    Delta r = heading_right(h);
    std::array<Delta, kSensorLen> out{};
    for (int d = 0; d < kWindowDepth; ++d) {
        for (int l = -1; l <= 1; ++l) {
            out[static_cast<size_t>(d * kWindowWidth + l + 1)] =
                Delta{d * f.dx + l * r.dx, d * f.dy + l * r.dy};
        }
    }
    return out;
}

inline char heading_char(Heading h) {
    switch (h) {
        case Heading::North: return 'N';
        case Heading::East: return 'E';
        case Heading::South: return 'S';
        case Heading::West: return 'W';
    }
    return '?';
}

inline Heading heading_from_char(char c) {
    switch (c) {
        case 'N': return Heading::North;
        case 'E': return Heading::East;
        case 'S': return Heading::South;
        case 'W': return Heading::West;
        default: throw std::invalid_argument("heading_from_char: expected one of NESW");
    }
}

}  // namespace nslam

#pragma once

// Deterministic 2D driving world: tracks, bicycle kinematics at constant
// speed, a pure-pursuit expert, three observation encodings, perturbation
// and closed-loop evaluation.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedimit::env {

inline constexpr double kSpeed = 6.0;          // m/s
inline constexpr double kWheelbase = 2.5;      // m
inline constexpr double kDt = 0.05;            // s
inline constexpr double kMaxSteer = 0.69;      // rad
inline constexpr double kRayCap = 30.0;        // m
inline constexpr std::size_t kRayCount = 16;
inline constexpr std::size_t kGridSide = 8;    // cells per side
inline constexpr double kGridExtent = 16.0;    // m per side
inline constexpr double kGridBehind = 0.0;     // m of the window behind the car
inline constexpr std::size_t kGridSubsamples = 3;  // per cell per axis
inline constexpr std::size_t kSemDim = 6;
inline constexpr double kObstacleClearance = 1.2;  // m kept between the expert's path and an obstacle

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
    friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
double norm(Vec2 a);

/// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

struct Obstacle {
    Vec2 center;
    double radius = 1.0;

    friend bool operator==(const Obstacle&, const Obstacle&) = default;
};

/// Where a point sits relative to the centerline.
struct Projection {
    std::size_t segment = 0;
    double t = 0.0;        // position within the segment, [0, 1]
    double arc = 0.0;      // arc length from waypoint 0
    double lateral = 0.0;  // signed distance, positive to the left
    Vec2 point;
};

/// Closed-loop centerline with a drivable band of +-half_width.
class Track {
public:
    /// Validates the invariants and precomputes arc lengths, curvature and
    /// boundaries. Throws RangeError on a malformed track.
    Track(std::vector<Vec2> waypoints, double half_width, std::vector<Obstacle> obstacles = {});

    const std::vector<Vec2>& waypoints() const { return waypoints_; }
    double half_width() const { return half_width_; }
    const std::vector<Obstacle>& obstacles() const { return obstacles_; }
    /// Signed curvature per waypoint (1/m), positive for left turns.
    const std::vector<double>& curvature() const { return curvature_; }
    double length() const { return length_; }
    std::size_t size() const { return waypoints_.size(); }

    Vec2 point_at(double arc) const;
    /// Unit tangent of the segment containing `arc`.
    Vec2 tangent_at(double arc) const;
    /// Curvature linearly interpolated between waypoints.
    double curvature_at(double arc) const;
    Projection project(Vec2 p) const;
    /// Arc difference b - a wrapped into (-L/2, L/2].
    double arc_delta(double a, double b) const;

    /// Projection of each obstacle center, computed once.
    const std::vector<Projection>& obstacle_projections() const { return obstacle_proj_; }
    const std::vector<Vec2>& left_boundary() const { return left_; }
    const std::vector<Vec2>& right_boundary() const { return right_; }

    /// Inside the band and outside every obstacle.
    bool drivable(Vec2 p) const;

    friend bool operator==(const Track& a, const Track& b) {
        return a.waypoints_ == b.waypoints_ && a.half_width_ == b.half_width_ && a.obstacles_ == b.obstacles_;
    }

private:
    std::vector<Vec2> waypoints_;
    double half_width_;
    std::vector<Obstacle> obstacles_;
    std::vector<double> curvature_;
    std::vector<double> arc_;  // arc_[i] = arc length at waypoint i
    double length_ = 0.0;
    std::vector<Vec2> left_, right_;
    std::vector<Projection> obstacle_proj_;

    std::size_t segment_at(double arc, double& t) const;
};

struct TrackParams {
    std::size_t n_waypoints = 240;
    double base_radius = 45.0;
    double roughness = 0.3;
    std::size_t n_obstacles = 3;
    double half_width = 3.5;
};

/// Seeded closed loop r(phi) = R (1 + roughness * sum of low-order sinusoids),
/// resampled to equal arc spacing, with obstacles offset from the centerline.
Track generate_track(std::uint64_t seed, const TrackParams& params);
Track generate_track(std::uint64_t seed, std::size_t n_waypoints, double base_radius, double roughness,
                     std::size_t n_obstacles);

struct CarState {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0;  // (-pi, pi]

    Vec2 position() const { return {x, y}; }
    friend bool operator==(const CarState&, const CarState&) = default;
};

/// Car on waypoint 0, aligned with the first segment.
CarState start_state(const Track& track);

/// Lateral offset of the expert's target at `arc`: shifts to the free side
/// of nearby obstacles.
double avoidance_offset(const Track& track, double arc);

/// Pure pursuit toward the (obstacle-shifted) centerline point `lookahead`
/// metres ahead, clamped to +-kMaxSteer.
double expert_steer(const Track& track, const CarState& state, double lookahead);

/// Unclamped pure-pursuit law for a target at `distance` and bearing `alpha`.
double pure_pursuit_angle(double alpha, double distance);

/// One kinematic bicycle step at kSpeed. Throws RangeError if |steering| > kMaxSteer.
CarState step(const CarState& state, double steering, double dt = kDt);

enum class ModalityId { ray = 0, grid = 1, sem = 2 };
inline constexpr std::array<ModalityId, 3> kAllModalities{ModalityId::ray, ModalityId::grid, ModalityId::sem};

std::string_view to_string(ModalityId m);
ModalityId modality_from_string(std::string_view s);
std::size_t modality_dim(ModalityId m);

struct Observation {
    ModalityId modality = ModalityId::sem;
    std::vector<double> values;

    friend bool operator==(const Observation&, const Observation&) = default;
};

/// ray: 16 distances over [-90, 90] degrees, d/30 capped at 1.
/// grid: 8x8 occupancy fractions of a 16 m square ahead of the car,
///       row-major with row 0 nearest the car, column 0 on the right.
/// sem: cross-track/half_width, heading error/(pi/2), 10*curvature at 5, 10
///      and 20 m ahead, signed proximity of the nearest obstacle not yet passed.
Observation observe(const Track& track, const CarState& state, ModalityId modality);

/// Gaussian noise (sigma 0.05 s) on every value, then dropout with
/// probability 0.05 s on ray/grid entries, then clamp to [-1, 1].
Observation perturb(const Observation& obs, int severity, std::uint64_t seed);

enum class Termination { none, off_track, collision };
std::string_view to_string(Termination t);

struct RolloutStep {
    CarState state;
    double expert = 0.0;
    double policy = 0.0;
    double cross_track = 0.0;
    double curvature = 0.0;
    bool turn = false;

    friend bool operator==(const RolloutStep&, const RolloutStep&) = default;
};

struct RolloutLog {
    std::vector<RolloutStep> steps;
    Termination termination = Termination::none;
    double half_width = 0.0;

    friend bool operator==(const RolloutLog&, const RolloutLog&) = default;
};

struct EvalThresholds {
    double turn_curvature = 0.02;   // 1/m
    double miss_threshold = 0.2;    // rad
    double lookahead = 6.0;         // expert lookahead, m
};

using Policy = std::function<double(const Observation&)>;

/// Closed loop: observe, perturb, policy, clamp, step. Records the expert's
/// steer at each visited state. Stops on leaving the band or hitting an obstacle.
RolloutLog rollout(const Policy& policy, const Track& track, ModalityId modality, std::size_t n_steps,
                   int perturb_severity, std::uint64_t seed, const EvalThresholds& thresholds = {});

struct Metrics {
    double off_track_rate = 0.0;
    double miss_turn_rate = 0.0;
    double straight_mae = 0.0;
    std::size_t turn_steps = 0;
    std::size_t straight_steps = 0;

    friend bool operator==(const Metrics&, const Metrics&) = default;
};

Metrics evaluate(const RolloutLog& log, const EvalThresholds& thresholds = {});

/// Mean of per-rollout metrics; step counts are summed.
Metrics average(std::span<const Metrics> runs);

std::string track_to_json(const Track& track);
Track track_from_json(std::string_view text);
std::string rollout_to_json(const RolloutLog& log);
RolloutLog rollout_from_json(std::string_view text);
std::string metrics_csv_header();
std::string metrics_csv_row(const Metrics& m);

}  // namespace fedimit::env

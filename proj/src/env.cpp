#include "fedimit/env.hpp"

#include "fedimit/codec.hpp"
#include "fedimit/error.hpp"
#include "fedimit/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <cstdlib>

namespace fedimit::env {

using json = nlohmann::json;
using std::numbers::pi;

double norm(Vec2 a) { return std::hypot(a.x, a.y); }

double wrap_angle(double a) {
    a = std::remainder(a, 2.0 * pi);  // [-pi, pi]
    if (a <= -pi) a += 2.0 * pi;
    return a;
}

namespace {

Vec2 left_normal(Vec2 t) { return {-t.y, t.x}; }

Vec2 unit(Vec2 a) {
    const double n = norm(a);
    return {a.x / n, a.y / n};
}

// Signed Menger curvature through three points.
double menger(Vec2 a, Vec2 b, Vec2 c) {
    const double denom = norm(b - a) * norm(c - b) * norm(c - a);
    if (denom == 0.0) return 0.0;
    return 2.0 * cross(b - a, c - b) / denom;
}

struct SegmentHit {
    double dist2;
    double t;
    Vec2 point;
};

SegmentHit closest_on_segment(Vec2 p, Vec2 a, Vec2 b) {
    const Vec2 ab = b - a;
    const double len2 = dot(ab, ab);
    double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 q = a + t * ab;
    const Vec2 d = p - q;
    return {dot(d, d), t, q};
}

}  // namespace

Track::Track(std::vector<Vec2> waypoints, double half_width, std::vector<Obstacle> obstacles)
    : waypoints_(std::move(waypoints)), half_width_(half_width), obstacles_(std::move(obstacles)) {
    const std::size_t n = waypoints_.size();
    if (n < 32) throw RangeError("track needs at least 32 waypoints");
    if (!(half_width_ > 1.0) || !std::isfinite(half_width_)) throw RangeError("track half width must exceed 1 m");
    arc_.resize(n + 1);
    arc_[0] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 a = waypoints_[i];
        const Vec2 b = waypoints_[(i + 1) % n];
        if (!std::isfinite(a.x) || !std::isfinite(a.y)) throw RangeError("non-finite waypoint");
        const double d = norm(b - a);
        if (d < 0.5 || d > 3.0)
            throw RangeError("waypoint spacing " + std::to_string(d) + " m at index " + std::to_string(i) +
                             " is outside [0.5, 3.0]");
        arc_[i + 1] = arc_[i] + d;
    }
    length_ = arc_[n];

    curvature_.resize(n);
    left_.resize(n);
    right_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 prev = waypoints_[(i + n - 1) % n];
        const Vec2 cur = waypoints_[i];
        const Vec2 next = waypoints_[(i + 1) % n];
        curvature_[i] = menger(prev, cur, next);
        const Vec2 nrm = unit(left_normal(unit(cur - prev)) + left_normal(unit(next - cur)));
        left_[i] = cur + half_width_ * nrm;
        right_[i] = cur - half_width_ * nrm;
    }

    for (const auto& o : obstacles_) {
        if (!(o.radius > 0.0)) throw RangeError("obstacle radius must be positive");
        const Projection p = project(o.center);
        const double lat = std::abs(p.lateral);
        const double far_gap = half_width_ + lat - o.radius;
        const double near_gap = half_width_ - lat - o.radius;
        if (far_gap < 1.0 && near_gap < 1.0) throw RangeError("obstacle blocks the drivable band");
        obstacle_proj_.push_back(p);
    }
}

std::size_t Track::segment_at(double arc, double& t) const {
    double a = std::fmod(arc, length_);
    if (a < 0.0) a += length_;
    auto it = std::upper_bound(arc_.begin(), arc_.end(), a);
    std::size_t i = static_cast<std::size_t>(std::distance(arc_.begin(), it));
    i = std::clamp<std::size_t>(i, 1, waypoints_.size()) - 1;
    t = (a - arc_[i]) / (arc_[i + 1] - arc_[i]);
    return i;
}

Vec2 Track::point_at(double arc) const {
    double t = 0.0;
    const std::size_t i = segment_at(arc, t);
    const Vec2 a = waypoints_[i];
    const Vec2 b = waypoints_[(i + 1) % waypoints_.size()];
    return a + t * (b - a);
}

Vec2 Track::tangent_at(double arc) const {
    double t = 0.0;
    const std::size_t i = segment_at(arc, t);
    return unit(waypoints_[(i + 1) % waypoints_.size()] - waypoints_[i]);
}

double Track::curvature_at(double arc) const {
    double t = 0.0;
    const std::size_t i = segment_at(arc, t);
    return (1.0 - t) * curvature_[i] + t * curvature_[(i + 1) % waypoints_.size()];
}

Projection Track::project(Vec2 p) const {
    const std::size_t n = waypoints_.size();
    Projection best;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 a = waypoints_[i];
        const Vec2 b = waypoints_[(i + 1) % n];
        const auto hit = closest_on_segment(p, a, b);
        if (hit.dist2 < best_d2) {
            best_d2 = hit.dist2;
            best.segment = i;
            best.t = hit.t;
            best.point = hit.point;
        }
    }
    const Vec2 a = waypoints_[best.segment];
    const Vec2 b = waypoints_[(best.segment + 1) % n];
    best.arc = arc_[best.segment] + best.t * (arc_[best.segment + 1] - arc_[best.segment]);
    const double side = cross(b - a, p - best.point) >= 0.0 ? 1.0 : -1.0;
    best.lateral = side * std::sqrt(best_d2);
    return best;
}

double Track::arc_delta(double a, double b) const {
    double d = std::fmod(b - a, length_);
    if (d > 0.5 * length_) d -= length_;
    if (d <= -0.5 * length_) d += length_;
    return d;
}

bool Track::drivable(Vec2 p) const {
    for (const auto& o : obstacles_)
        if (norm(p - o.center) < o.radius) return false;
    return std::abs(project(p).lateral) <= half_width_;
}

Track generate_track(std::uint64_t seed, const TrackParams& params) {
    if (params.n_waypoints < 32) throw RangeError("generate_track: need at least 32 waypoints");
    if (!(params.base_radius > 0.0)) throw RangeError("generate_track: base radius must be positive");
    if (!(params.roughness >= 0.0 && params.roughness <= 0.4))
        throw RangeError("generate_track: roughness must lie in [0, 0.4]");
    if (!(params.half_width > 1.0)) throw RangeError("generate_track: half width must exceed 1 m");

    Rng rng(derive_seed(seed, "track"));
    static constexpr int kHarmonics[] = {2, 3, 4};
    static constexpr double kWeights[] = {0.5, 0.3, 0.2};
    double phases[3];
    for (double& p : phases) p = rng.uniform(0.0, 2.0 * pi);

    // Dense polar polyline, then equal-arc resampling.
    constexpr std::size_t kDense = 4096;
    std::vector<Vec2> dense(kDense + 1);
    for (std::size_t k = 0; k <= kDense; ++k) {
        const double phi = 2.0 * pi * static_cast<double>(k % kDense) / kDense;
        double wiggle = 0.0;
        for (int h = 0; h < 3; ++h) wiggle += kWeights[h] * std::sin(kHarmonics[h] * phi + phases[h]);
        const double r = params.base_radius * (1.0 + params.roughness * wiggle);
        dense[k] = {r * std::cos(phi), r * std::sin(phi)};
    }
    std::vector<double> cum(kDense + 1, 0.0);
    for (std::size_t k = 1; k <= kDense; ++k) cum[k] = cum[k - 1] + norm(dense[k] - dense[k - 1]);
    const double total = cum[kDense];

    std::vector<Vec2> waypoints(params.n_waypoints);
    std::size_t j = 0;
    for (std::size_t i = 0; i < params.n_waypoints; ++i) {
        const double s = total * static_cast<double>(i) / static_cast<double>(params.n_waypoints);
        while (cum[j + 1] < s) ++j;
        const double t = (s - cum[j]) / (cum[j + 1] - cum[j]);
        waypoints[i] = dense[j] + t * (dense[j + 1] - dense[j]);
    }

    std::vector<Obstacle> obstacles;
    if (params.n_obstacles > 0) {
        // Probe track (no obstacles) to place them by arc length.
        const Track bare(waypoints, params.half_width);
        const double keep_clear = 20.0;  // metres after the start line left free
        const double usable = bare.length() - keep_clear;
        const double slot = usable / static_cast<double>(params.n_obstacles);
        for (std::size_t k = 0; k < params.n_obstacles; ++k) {
            const double arc = keep_clear + slot * (static_cast<double>(k) + rng.uniform(0.3, 0.7));
            const double side = rng.uniform01() < 0.5 ? -1.0 : 1.0;
            const double lateral = side * rng.uniform(1.4, 2.0);
            const double radius = rng.uniform(0.6, 0.9);
            const Vec2 c = bare.point_at(arc) + lateral * left_normal(bare.tangent_at(arc));
            obstacles.push_back({c, radius});
        }
    }
    return Track(std::move(waypoints), params.half_width, std::move(obstacles));
}

Track generate_track(std::uint64_t seed, std::size_t n_waypoints, double base_radius, double roughness,
                     std::size_t n_obstacles) {
    TrackParams p;
    p.n_waypoints = n_waypoints;
    p.base_radius = base_radius;
    p.roughness = roughness;
    p.n_obstacles = n_obstacles;
    return generate_track(seed, p);
}

CarState start_state(const Track& track) {
    const Vec2 p = track.waypoints()[0];
    const Vec2 t = track.tangent_at(0.0);
    return {p.x, p.y, std::atan2(t.y, t.x)};
}

double avoidance_offset(const Track& track, double arc) {
    // Weight by target arc relative to the obstacle: ramp in over [-8, -2] m,
    // hold through +8 m so the car (lookahead behind) has passed, ramp out by +14 m.
    constexpr double kInStart = 8.0;
    constexpr double kInFull = 2.0;
    constexpr double kOutFull = 8.0;
    constexpr double kOutEnd = 14.0;
    double best_w = 0.0;
    double best_offset = 0.0;
    const auto& obs = track.obstacles();
    const auto& proj = track.obstacle_projections();
    for (std::size_t k = 0; k < obs.size(); ++k) {
        const double d = track.arc_delta(proj[k].arc, arc);
        double w = 0.0;
        if (d >= -kInFull && d <= kOutFull) w = 1.0;
        else if (d < -kInFull && d > -kInStart) w = (d + kInStart) / (kInStart - kInFull);
        else if (d > kOutFull && d < kOutEnd) w = (kOutEnd - d) / (kOutEnd - kOutFull);
        if (w > best_w) {
            const double lat = proj[k].lateral;
            const double side = lat >= 0.0 ? 1.0 : -1.0;
            double pass = lat - side * (obs[k].radius + kObstacleClearance);
            const double limit = track.half_width() - 1.0;
            pass = std::clamp(pass, -limit, limit);
            best_w = w;
            best_offset = pass;
        }
    }
    return best_w * best_offset;
}

double pure_pursuit_angle(double alpha, double distance) {
    return std::atan(2.0 * kWheelbase * std::sin(alpha) / distance);
}

double expert_steer(const Track& track, const CarState& state, double lookahead) {
    const Projection p = track.project(state.position());
    const double arc = p.arc + lookahead;
    const Vec2 target = track.point_at(arc) + avoidance_offset(track, arc) * left_normal(track.tangent_at(arc));
    const Vec2 d = target - state.position();
    const double c = std::cos(state.heading);
    const double s = std::sin(state.heading);
    const double fx = c * d.x + s * d.y;
    const double fy = -s * d.x + c * d.y;
    const double alpha = std::atan2(fy, fx);
    const double delta = pure_pursuit_angle(alpha, std::hypot(fx, fy));
    return std::clamp(delta, -kMaxSteer, kMaxSteer);
}

CarState step(const CarState& state, double steering, double dt) {
    if (!(std::abs(steering) <= kMaxSteer)) throw RangeError("steering out of range");
    CarState next;
    next.x = state.x + kSpeed * std::cos(state.heading) * dt;
    next.y = state.y + kSpeed * std::sin(state.heading) * dt;
    next.heading = wrap_angle(state.heading + (kSpeed / kWheelbase) * std::tan(steering) * dt);
    return next;
}

std::string_view to_string(ModalityId m) {
    switch (m) {
        case ModalityId::ray: return "ray";
        case ModalityId::grid: return "grid";
        case ModalityId::sem: return "sem";
    }
    return "?";
}

ModalityId modality_from_string(std::string_view s) {
    for (auto m : kAllModalities)
        if (to_string(m) == s) return m;
    throw RangeError("unknown modality '" + std::string(s) + "'");
}

std::size_t modality_dim(ModalityId m) {
    switch (m) {
        case ModalityId::ray: return kRayCount;
        case ModalityId::grid: return kGridSide * kGridSide;
        case ModalityId::sem: return kSemDim;
    }
    return 0;
}

namespace {

// Segments of a closed polyline with an endpoint within `radius` of `c`.
template <typename F>
void for_nearby_segments(const std::vector<Vec2>& poly, Vec2 c, double radius, F&& f) {
    const std::size_t n = poly.size();
    const double r2 = radius * radius;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 a = poly[i];
        const Vec2 b = poly[(i + 1) % n];
        const Vec2 da = a - c;
        const Vec2 db = b - c;
        if (dot(da, da) <= r2 || dot(db, db) <= r2) f(a, b);
    }
}

double ray_segment(Vec2 o, Vec2 d, Vec2 a, Vec2 b) {
    const Vec2 e = b - a;
    const double denom = cross(d, e);
    if (denom == 0.0) return std::numeric_limits<double>::infinity();
    const Vec2 ao = a - o;
    const double t = cross(ao, e) / denom;
    const double u = cross(ao, d) / denom;
    if (t < 0.0 || u < 0.0 || u > 1.0) return std::numeric_limits<double>::infinity();
    return t;
}

double ray_circle(Vec2 o, Vec2 d, const Obstacle& ob) {
    const Vec2 m = o - ob.center;
    const double b = dot(m, d);
    const double c = dot(m, m) - ob.radius * ob.radius;
    if (c <= 0.0) return 0.0;
    const double disc = b * b - c;
    if (disc < 0.0 || b > 0.0) return std::numeric_limits<double>::infinity();
    return -b - std::sqrt(disc);
}

Observation observe_ray(const Track& track, const CarState& st) {
    Observation obs{ModalityId::ray, std::vector<double>(kRayCount, 1.0)};
    const Vec2 o = st.position();
    const double reach = kRayCap + 3.0;
    std::vector<std::pair<Vec2, Vec2>> segs;
    for_nearby_segments(track.left_boundary(), o, reach, [&](Vec2 a, Vec2 b) { segs.emplace_back(a, b); });
    for_nearby_segments(track.right_boundary(), o, reach, [&](Vec2 a, Vec2 b) { segs.emplace_back(a, b); });
    for (std::size_t k = 0; k < kRayCount; ++k) {
        const double ang = st.heading - pi / 2 + pi * static_cast<double>(k) / static_cast<double>(kRayCount - 1);
        const Vec2 d{std::cos(ang), std::sin(ang)};
        double best = kRayCap;
        for (const auto& [a, b] : segs) best = std::min(best, ray_segment(o, d, a, b));
        for (const auto& ob : track.obstacles()) best = std::min(best, ray_circle(o, d, ob));
        obs.values[k] = best / kRayCap;
    }
    return obs;
}

Observation observe_grid(const Track& track, const CarState& st) {
    Observation obs{ModalityId::grid, std::vector<double>(kGridSide * kGridSide, 0.0)};
    const Vec2 o = st.position();
    const double c = std::cos(st.heading);
    const double s = std::sin(st.heading);
    const double cell = kGridExtent / static_cast<double>(kGridSide);
    const double far = std::hypot(kGridExtent - kGridBehind, kGridExtent / 2);
    std::vector<std::pair<Vec2, Vec2>> segs;
    for_nearby_segments(track.waypoints(), o, far + track.half_width() + 3.0,
                        [&](Vec2 a, Vec2 b) { segs.emplace_back(a, b); });
    const double hw2 = track.half_width() * track.half_width();
    const double per_cell = static_cast<double>(kGridSubsamples * kGridSubsamples);
    for (std::size_t r = 0; r < kGridSide; ++r) {
        for (std::size_t col = 0; col < kGridSide; ++col) {
            int occupied = 0;
            for (std::size_t i = 0; i < kGridSubsamples; ++i) {
                for (std::size_t j = 0; j < kGridSubsamples; ++j) {
                    const double fx = -kGridBehind + cell * (static_cast<double>(r) + (i + 0.5) / kGridSubsamples);
                    const double fy = -kGridExtent / 2 + cell * (static_cast<double>(col) + (j + 0.5) / kGridSubsamples);
                    const Vec2 p{o.x + c * fx - s * fy, o.y + s * fx + c * fy};
                    bool free = false;
                    for (const auto& [a, b] : segs) {
                        if (closest_on_segment(p, a, b).dist2 <= hw2) {
                            free = true;
                            break;
                        }
                    }
                    if (free) {
                        for (const auto& ob : track.obstacles()) {
                            if (norm(p - ob.center) < ob.radius) {
                                free = false;
                                break;
                            }
                        }
                    }
                    if (!free) ++occupied;
                }
            }
            obs.values[r * kGridSide + col] = occupied / per_cell;
        }
    }
    return obs;
}

Observation observe_sem(const Track& track, const CarState& st) {
    Observation obs{ModalityId::sem, std::vector<double>(kSemDim, 0.0)};
    const Projection p = track.project(st.position());
    const Vec2 t = track.tangent_at(p.arc);
    const double heading_err = wrap_angle(st.heading - std::atan2(t.y, t.x));
    obs.values[0] = p.lateral / track.half_width();
    obs.values[1] = heading_err / (pi / 2);
    obs.values[2] = 10.0 * track.curvature_at(p.arc + 5.0);
    obs.values[3] = 10.0 * track.curvature_at(p.arc + 10.0);
    obs.values[4] = 10.0 * track.curvature_at(p.arc + 20.0);
    double best = kRayCap;
    double side = 0.0;
    const auto& obsts = track.obstacles();
    const auto& proj = track.obstacle_projections();
    for (std::size_t k = 0; k < obsts.size(); ++k) {
        if (track.arc_delta(p.arc, proj[k].arc) < -obsts[k].radius) continue;  // already passed
        const double d = std::max(0.0, norm(st.position() - obsts[k].center) - obsts[k].radius);
        if (d < best) {
            best = d;
            side = proj[k].lateral >= 0.0 ? 1.0 : -1.0;
        }
    }
    obs.values[5] = side * (1.0 - best / kRayCap);
    for (double& v : obs.values) v = std::clamp(v, -1.0, 1.0);
    return obs;
}

}  // namespace

Observation observe(const Track& track, const CarState& state, ModalityId modality) {
    switch (modality) {
        case ModalityId::ray: return observe_ray(track, state);
        case ModalityId::grid: return observe_grid(track, state);
        case ModalityId::sem: return observe_sem(track, state);
    }
    throw RangeError("unknown modality");
}

Observation perturb(const Observation& obs, int severity, std::uint64_t seed) {
    if (severity < 0 || severity > 4) throw RangeError("perturbation severity must lie in 0..4");
    if (severity == 0) return obs;
    Observation out = obs;
    Rng rng(seed);
    const double sigma = 0.05 * severity;
    const double drop = 0.05 * severity;
    const bool dropout = obs.modality != ModalityId::sem;
    for (double& v : out.values) {
        v += sigma * rng.normal();
        if (dropout && rng.uniform01() < drop) v = 0.0;
        v = std::clamp(v, -1.0, 1.0);
    }
    return out;
}

std::string_view to_string(Termination t) {
    switch (t) {
        case Termination::none: return "none";
        case Termination::off_track: return "off_track";
        case Termination::collision: return "collision";
    }
    return "?";
}

RolloutLog rollout(const Policy& policy, const Track& track, ModalityId modality, std::size_t n_steps,
                   int perturb_severity, std::uint64_t seed, const EvalThresholds& thresholds) {
    if (n_steps == 0) throw RangeError("rollout needs at least one step");
    RolloutLog log;
    log.half_width = track.half_width();
    log.steps.reserve(n_steps);
    CarState state = start_state(track);
    for (std::size_t k = 0; k < n_steps; ++k) {
        const Projection p = track.project(state.position());
        if (std::abs(p.lateral) > track.half_width()) {
            log.termination = Termination::off_track;
            break;
        }
        const bool hit = std::any_of(track.obstacles().begin(), track.obstacles().end(),
                                     [&](const Obstacle& o) { return norm(state.position() - o.center) < o.radius; });
        if (hit) {
            log.termination = Termination::collision;
            break;
        }
        Observation obs = observe(track, state, modality);
        if (perturb_severity > 0) obs = perturb(obs, perturb_severity, derive_seed(seed, "perturb", {k}));
        double action = policy(obs);
        if (!std::isfinite(action)) action = 0.0;
        action = std::clamp(action, -kMaxSteer, kMaxSteer);

        RolloutStep rec;
        rec.state = state;
        rec.expert = expert_steer(track, state, thresholds.lookahead);
        rec.policy = action;
        rec.cross_track = p.lateral;
        rec.curvature = track.curvature_at(p.arc);
        rec.turn = std::abs(rec.curvature) > thresholds.turn_curvature;
        log.steps.push_back(rec);
        state = step(state, action);
    }
    return log;
}

Metrics evaluate(const RolloutLog& log, const EvalThresholds& thresholds) {
    Metrics m;
    if (log.steps.empty()) {
        m.off_track_rate = log.termination == Termination::none ? 0.0 : 1.0;
        return m;
    }
    std::size_t beyond = 0, missed = 0;
    double straight_err = 0.0;
    for (const auto& s : log.steps) {
        if (std::abs(s.cross_track) > log.half_width) ++beyond;
        const double err = std::abs(s.policy - s.expert);
        if (s.turn) {
            ++m.turn_steps;
            if (err > thresholds.miss_threshold) ++missed;
        } else {
            ++m.straight_steps;
            straight_err += err;
        }
    }
    m.off_track_rate = log.termination != Termination::none
                           ? 1.0
                           : static_cast<double>(beyond) / static_cast<double>(log.steps.size());
    m.miss_turn_rate = m.turn_steps ? static_cast<double>(missed) / static_cast<double>(m.turn_steps) : 0.0;
    m.straight_mae = m.straight_steps ? straight_err / static_cast<double>(m.straight_steps) : 0.0;
    return m;
}

Metrics average(std::span<const Metrics> runs) {
    Metrics m;
    if (runs.empty()) return m;
    for (const auto& r : runs) {
        m.off_track_rate += r.off_track_rate;
        m.miss_turn_rate += r.miss_turn_rate;
        m.straight_mae += r.straight_mae;
        m.turn_steps += r.turn_steps;
        m.straight_steps += r.straight_steps;
    }
    const double n = static_cast<double>(runs.size());
    m.off_track_rate /= n;
    m.miss_turn_rate /= n;
    m.straight_mae /= n;
    return m;
}

std::string track_to_json(const Track& track) {
    json wp = json::array();
    for (const auto& p : track.waypoints()) wp.push_back({p.x, p.y});
    json ob = json::array();
    for (const auto& o : track.obstacles()) ob.push_back({{"x", o.center.x}, {"y", o.center.y}, {"r", o.radius}});
    json j = {{"schema", "fedimit.track"},
              {"version", 1},
              {"half_width", track.half_width()},
              {"waypoints", wp},
              {"obstacles", ob},
              {"curvature", track.curvature()}};
    return j.dump();
}

Track track_from_json(std::string_view text) {
    try {
        const json j = json::parse(text);
        if (j.at("schema") != "fedimit.track" || j.at("version") != 1) throw DecodeError("track: unknown schema");
        std::vector<Vec2> wp;
        for (const auto& p : j.at("waypoints")) wp.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        std::vector<Obstacle> ob;
        for (const auto& o : j.at("obstacles"))
            ob.push_back({{o.at("x").get<double>(), o.at("y").get<double>()}, o.at("r").get<double>()});
        return Track(std::move(wp), j.at("half_width").get<double>(), std::move(ob));
    } catch (const json::exception& e) {
        throw DecodeError(std::string("track: ") + e.what());
    }
}

std::string rollout_to_json(const RolloutLog& log) {
    json steps = json::array();
    for (const auto& s : log.steps)
        steps.push_back({{"x", s.state.x},
                         {"y", s.state.y},
                         {"heading", s.state.heading},
                         {"expert", s.expert},
                         {"policy", s.policy},
                         {"cross_track", s.cross_track},
                         {"curvature", s.curvature},
                         {"class", s.turn ? "turn" : "straight"}});
    json j = {{"schema", "fedimit.rollout"},
              {"version", 1},
              {"half_width", log.half_width},
              {"termination", to_string(log.termination)},
              {"steps", steps}};
    return j.dump();
}

RolloutLog rollout_from_json(std::string_view text) {
    try {
        const json j = json::parse(text);
        if (j.at("schema") != "fedimit.rollout" || j.at("version") != 1) throw DecodeError("rollout: unknown schema");
        RolloutLog log;
        log.half_width = j.at("half_width").get<double>();
        const auto term = j.at("termination").get<std::string>();
        log.termination = term == "off_track"   ? Termination::off_track
                          : term == "collision" ? Termination::collision
                                                : Termination::none;
        for (const auto& s : j.at("steps")) {
            RolloutStep r;
            r.state = {s.at("x").get<double>(), s.at("y").get<double>(), s.at("heading").get<double>()};
            r.expert = s.at("expert").get<double>();
            r.policy = s.at("policy").get<double>();
            r.cross_track = s.at("cross_track").get<double>();
            r.curvature = s.at("curvature").get<double>();
            r.turn = s.at("class").get<std::string>() == "turn";
            log.steps.push_back(r);
        }
        return log;
    } catch (const json::exception& e) {
        throw DecodeError(std::string("rollout: ") + e.what());
    }
}

std::string metrics_csv_header() { return "off_track_rate,miss_turn_rate,straight_mae,turn_steps,straight_steps"; }

std::string metrics_csv_row(const Metrics& m) {
    return codec::format_double(m.off_track_rate) + ',' + codec::format_double(m.miss_turn_rate) + ',' +
           codec::format_double(m.straight_mae) + ',' + std::to_string(m.turn_steps) + ',' +
           std::to_string(m.straight_steps);
}

}  // namespace fedimit::env

#include "doctest.h"

#include "fedimit/env.hpp"
#include "fedimit/error.hpp"

#include <cmath>
#include <numbers>

using namespace fedimit;
using namespace fedimit::env;

namespace {

// Counter-clockwise circle, waypoint spacing about 1 m.
Track circle(double radius, double half_width = 3.5, std::vector<Obstacle> obstacles = {}) {
    const auto n = static_cast<std::size_t>(std::round(2 * std::numbers::pi * radius));
    std::vector<Vec2> wp;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = 2 * std::numbers::pi * double(i) / double(n);
        wp.push_back({radius * std::cos(a), radius * std::sin(a)});
    }
    return Track(std::move(wp), half_width, std::move(obstacles));
}

RolloutStep rec(double expert, double policy, bool turn, double cte = 0.0) {
    RolloutStep s;
    s.expert = expert;
    s.policy = policy;
    s.turn = turn;
    s.cross_track = cte;
    return s;
}

}  // namespace

TEST_CASE("track: invariants are enforced") {
    std::vector<Vec2> few(10, Vec2{0, 0});
    CHECK_THROWS_AS(Track(few, 3.5), RangeError);
    std::vector<Vec2> sparse;
    for (int i = 0; i < 40; ++i) sparse.push_back({10.0 * std::cos(i * 0.157), 10.0 * std::sin(i * 0.157)});
    sparse.push_back({500, 500});
    CHECK_THROWS_AS(Track(sparse, 3.5), RangeError);
    CHECK_THROWS_AS(circle(40, 0.5), RangeError);
}

TEST_CASE("track: circle geometry") {
    const Track t = circle(40);
    CHECK(t.length() == doctest::Approx(2 * std::numbers::pi * 40).epsilon(1e-3));
    for (double k : t.curvature()) CHECK(k == doctest::Approx(1.0 / 40).epsilon(1e-3));
    const auto p = t.project({41.0, 0.0});
    CHECK(p.lateral == doctest::Approx(-1.0).epsilon(1e-3));
    CHECK(t.arc_delta(t.length() - 1.0, 1.0) == doctest::Approx(2.0));
    CHECK(t.drivable({41, 0}));
    CHECK_FALSE(t.drivable({45, 0}));
}

TEST_CASE("generate_track: deterministic, valid, obstacles placed") {
    const TrackParams params;
    const Track a = generate_track(7, params), b = generate_track(7, params), c = generate_track(8, params);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    CHECK(a.size() == params.n_waypoints);
    CHECK(a.obstacles().size() == params.n_obstacles);
    for (const auto& pr : a.obstacle_projections()) CHECK(std::abs(pr.lateral) < params.half_width);
}

TEST_CASE("pure pursuit on a circle steers atan(L / R)") {
    for (double radius : {30.0, 60.0, 120.0}) {
        const Track t = circle(radius);
        const CarState s{radius, 0.0, std::numbers::pi / 2};  // on the centerline, along the tangent
        CHECK(expert_steer(t, s, 6.0) == doctest::Approx(std::atan(kWheelbase / radius)).epsilon(2e-3));
    }
    CHECK(pure_pursuit_angle(0.0, 5.0) == 0.0);
    // Chord of a circle of radius R: d = 2 R sin(alpha), so delta = atan(L / R).
    CHECK(pure_pursuit_angle(0.3, 2 * 50 * std::sin(0.3)) == doctest::Approx(std::atan(kWheelbase / 50)));
}

TEST_CASE("expert is clamped to the steering range") {
    const Track t = circle(30);
    CarState s = start_state(t);
    s.heading += 2.5;
    CHECK(std::abs(expert_steer(t, s, 6.0)) <= kMaxSteer);
}

TEST_CASE("bicycle step: yaw rate and range check") {
    const CarState s0{1.0, 2.0, 0.3};
    const CarState s1 = step(s0, 0.2);
    CHECK(norm(s1.position() - s0.position()) == doctest::Approx(kSpeed * kDt));
    CHECK(s1.heading - s0.heading == doctest::Approx(kSpeed / kWheelbase * std::tan(0.2) * kDt));
    CHECK_THROWS_AS(step(s0, 0.7), RangeError);

    // Constant steering closes a circle of radius L / tan(delta).
    const double delta = 0.3;
    const double radius = kWheelbase / std::tan(delta);
    const auto n = static_cast<int>(std::round(2 * std::numbers::pi * radius / (kSpeed * kDt)));
    CarState s{0, 0, 0};
    for (int i = 0; i < n; ++i) s = step(s, delta);
    CHECK(norm(s.position()) < 0.05 * radius);
}

TEST_CASE("observations: dimensions and ranges") {
    const Track t = generate_track(3, TrackParams{});
    const CarState s = start_state(t);
    for (auto m : kAllModalities) {
        const auto o = observe(t, s, m);
        CHECK(o.modality == m);
        CHECK(o.values.size() == modality_dim(m));
        for (double v : o.values) CHECK((v >= -1.0 && v <= 1.0));
    }
    CHECK(modality_dim(ModalityId::ray) == 16);
    CHECK(modality_dim(ModalityId::grid) == 64);
    CHECK(modality_dim(ModalityId::sem) == 6);
    CHECK(modality_from_string("grid") == ModalityId::grid);
    CHECK_THROWS_AS(modality_from_string("rgb"), RangeError);
}

TEST_CASE("observations: circle oracle") {
    const double radius = 80;
    const Track t = circle(radius);
    const CarState s{radius, 0.0, std::numbers::pi / 2};
    const auto ray = observe(t, s, ModalityId::ray).values;
    // The outermost rays point straight left and right, to the band edges 3.5 m away.
    CHECK(ray.front() == doctest::Approx(3.5 / kRayCap).epsilon(1e-2));
    CHECK(ray.back() == doctest::Approx(3.5 / kRayCap).epsilon(1e-2));
    const auto sem = observe(t, s, ModalityId::sem).values;
    CHECK(std::abs(sem[0]) < 1e-6);
    // Heading error is taken against the chord, off the tangent by half a segment angle.
    CHECK(std::abs(sem[1]) <= (std::numbers::pi / double(t.size())) / (std::numbers::pi / 2) + 1e-6);
    for (int i = 2; i <= 4; ++i) CHECK(sem[i] == doctest::Approx(10.0 / radius).epsilon(1e-2));
    CHECK(sem[5] == 0.0);
}

TEST_CASE("perturb: severity 0 is identity, noise is seeded and clamped") {
    const Track t = generate_track(4, TrackParams{});
    const auto o = observe(t, start_state(t), ModalityId::ray);
    CHECK(perturb(o, 0, 1) == o);
    CHECK(perturb(o, 3, 1) == perturb(o, 3, 1));
    CHECK_FALSE(perturb(o, 3, 1) == perturb(o, 3, 2));
    for (double v : perturb(o, 4, 9).values) CHECK((v >= -1.0 && v <= 1.0));
    CHECK_THROWS_AS(perturb(o, 5, 1), RangeError);
}

TEST_CASE("rollout: a circle-tracking constant policy completes") {
    const double radius = 40;
    const Track t = circle(radius);
    const double steer = std::atan(kWheelbase / radius);
    const auto log = rollout([&](const Observation&) { return steer; }, t, ModalityId::sem, 400, 0, 1);
    CHECK(log.termination == Termination::none);
    CHECK(log.steps.size() == 400);
    const auto m = evaluate(log);
    CHECK(m.off_track_rate == 0.0);
    CHECK(m.miss_turn_rate == 0.0);
    CHECK(m.turn_steps == 400);  // curvature 0.025 is above the 0.02 split
}

TEST_CASE("rollout: ends early off the band and on an obstacle") {
    const Track t = circle(40);
    const auto off = rollout([](const Observation&) { return -kMaxSteer; }, t, ModalityId::ray, 400, 0, 1);
    CHECK(off.termination == Termination::off_track);
    CHECK(off.steps.size() < 400);
    CHECK(evaluate(off).off_track_rate == 1.0);

    const Vec2 ahead{40.0 * std::cos(0.3), 40.0 * std::sin(0.3)};
    const Track blocked = circle(40, 3.5, {Obstacle{ahead, 1.0}});
    const double steer = std::atan(kWheelbase / 40);
    const auto hit = rollout([&](const Observation&) { return steer; }, blocked, ModalityId::grid, 400, 0, 1);
    CHECK(hit.termination == Termination::collision);
}

TEST_CASE("rollout: non-finite policy output is treated as zero") {
    const Track t = circle(40);
    const auto log = rollout([](const Observation&) { return std::nan(""); }, t, ModalityId::sem, 5, 0, 1);
    for (const auto& s : log.steps) CHECK(s.policy == 0.0);
}

TEST_CASE("metrics: hand-built log") {
    RolloutLog log;
    log.half_width = 3.5;
    log.steps = {rec(0.1, 0.1, true), rec(0.1, 0.4, true), rec(0.0, 0.05, false), rec(0.0, -0.15, false, 4.0)};
    const auto m = evaluate(log);
    CHECK(m.turn_steps == 2);
    CHECK(m.straight_steps == 2);
    CHECK(m.miss_turn_rate == doctest::Approx(0.5));
    CHECK(m.straight_mae == doctest::Approx(0.1));
    CHECK(m.off_track_rate == doctest::Approx(0.25));
    log.termination = Termination::collision;
    CHECK(evaluate(log).off_track_rate == 1.0);

    const Metrics runs[] = {{0.0, 0.2, 0.1, 10, 5}, {1.0, 0.4, 0.3, 6, 7}};
    const auto avg = average(runs);
    CHECK(avg.off_track_rate == doctest::Approx(0.5));
    CHECK(avg.miss_turn_rate == doctest::Approx(0.3));
    CHECK(avg.turn_steps == 16);
}

TEST_CASE("export: track and rollout JSON round trip, CSV rows") {
    const Track t = generate_track(12, TrackParams{});
    CHECK(track_from_json(track_to_json(t)) == t);
    const auto log = rollout([](const Observation& o) { return 0.5 * o.values[0]; }, t, ModalityId::sem, 50, 2, 3);
    CHECK(rollout_from_json(rollout_to_json(log)) == log);
    CHECK(metrics_csv_header() == "off_track_rate,miss_turn_rate,straight_mae,turn_steps,straight_steps");
    CHECK(metrics_csv_row(Metrics{0.5, 0.25, 0.125, 3, 4}) == "0.5,0.25,0.125,3,4");
    CHECK_THROWS_AS(track_from_json("{\"schema\":\"fedimit.track\",\"version\":9}"), DecodeError);
}

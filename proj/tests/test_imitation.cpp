#include "doctest.h"

#include "fedimit/error.hpp"
#include "fedimit/imitation.hpp"
#include "fedimit/rng.hpp"

#include <cmath>
#include <numeric>
#include <set>

using namespace fedimit;
using namespace fedimit::imitation;

namespace {

DemoDataset small_demos(env::ModalityId m, std::size_t steps = 150) {
    const std::uint64_t seeds[] = {21, 22};
    return collect_demonstrations(seeds, m, steps, 6.0, env::TrackParams{}, Exploration{0.1, 0.95});
}

}  // namespace

TEST_CASE("expert_trajectory: labels are the clean expert action") {
    const auto track = env::generate_track(5, env::TrackParams{});
    const auto clean = expert_trajectory(track, 200, 6.0);
    REQUIRE(clean.size() == 200);
    CHECK(clean.front().state == env::start_state(track));
    for (std::size_t i = 0; i + 1 < clean.size(); ++i) {
        CHECK(clean[i].action == env::expert_steer(track, clean[i].state, 6.0));
        CHECK(clean[i + 1].state == env::step(clean[i].state, clean[i].action));
    }
    const auto noisy = expert_trajectory(track, 200, 6.0, Exploration{0.1, 0.95}, 3);
    for (const auto& s : noisy) CHECK(s.action == env::expert_steer(track, s.state, 6.0));
    CHECK_FALSE(noisy.back().state == clean.back().state);
    CHECK(expert_trajectory(track, 50, 6.0, {0.1, 0.95}, 3).back().state == noisy[49].state);
    CHECK_THROWS_AS(expert_trajectory(track, 10, 6.0, {-0.1, 0.5}), RangeError);
    CHECK_THROWS_AS(expert_trajectory(track, 10, 6.0, {0.1, 1.0}), RangeError);
}

TEST_CASE("collect_demonstrations: shape, provenance, determinism") {
    for (auto m : env::kAllModalities) {
        const auto ds = small_demos(m, 40);
        CHECK(ds.size() == 80);
        CHECK(ds.modality == m);
        CHECK(ds.source_tracks == std::vector<std::uint64_t>{21, 22});
        for (const auto& d : ds.demos) CHECK(d.observation.values.size() == env::modality_dim(m));
        CHECK_NOTHROW(ds.validate());
        CHECK(ds == small_demos(m, 40));
    }
    // The observation at step k is the observation of the k-th expert state.
    const auto track = env::generate_track(21, env::TrackParams{});
    const auto traj = expert_trajectory(track, 40, 6.0, {0.1, 0.95}, derive_seed(21, "explore"));
    const auto ds = small_demos(env::ModalityId::sem, 40);
    for (std::size_t k = 0; k < 40; ++k) {
        CHECK(ds.demos[k].observation == env::observe(track, traj[k].state, env::ModalityId::sem));
        CHECK(ds.demos[k].steering == traj[k].action);
    }
}

TEST_CASE("dataset validation rejects mixed inputs") {
    auto ds = small_demos(env::ModalityId::sem, 10);
    ds.demos[3].observation.values.pop_back();
    CHECK_THROWS_AS(ds.validate(), DimensionError);
    ds = small_demos(env::ModalityId::sem, 10);
    ds.demos[2].steering = 2.0;
    CHECK_THROWS_AS(ds.validate(), RangeError);
    ds = small_demos(env::ModalityId::sem, 10);
    ds.demos[1].observation.modality = env::ModalityId::ray;
    CHECK_THROWS(ds.validate());
}

TEST_CASE("split_indices: 90/10 partition") {
    for (std::size_t n : {2u, 7u, 10u, 101u, 1800u}) {
        const auto s = split_indices(n, 4);
        CHECK(s.train.size() + s.validation.size() == n);
        CHECK_FALSE(s.validation.empty());
        CHECK(s.validation.size() == std::max<std::size_t>(1, n / 10));
        std::set<std::size_t> all(s.train.begin(), s.train.end());
        all.insert(s.validation.begin(), s.validation.end());
        CHECK(all.size() == n);
        CHECK(*all.rbegin() == n - 1);
    }
    CHECK(split_indices(500, 1).validation == split_indices(500, 1).validation);
    CHECK_FALSE(split_indices(500, 1).validation == split_indices(500, 2).validation);
}

TEST_CASE("train_bc: risk falls, curve has one entry per epoch") {
    const auto ds = small_demos(env::ModalityId::sem);
    const auto spec = nn::default_spec(6);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.seed = 3;
    const auto r = train_bc(spec, ds, cfg);
    CHECK(r.loss_curve.size() == 30);
    CHECK(r.final_risk < 0.5 * r.loss_curve.front());
    CHECK(r.params.all_finite());
    // curve[0] is the validation risk of the initial parameters.
    const auto split = split_indices(ds.size(), cfg.seed);
    DemoDataset val{ds.modality, {}, {}};
    for (auto i : split.validation) val.demos.push_back(ds.demos[i]);
    CHECK(r.loss_curve.front() == doctest::Approx(empirical_risk(spec, nn::init_params(spec, init_seed(cfg)), val)));
    CHECK(r.final_risk == doctest::Approx(empirical_risk(spec, r.params, val)));

    const auto again = train_bc(spec, ds, cfg);
    CHECK(nn::bit_identical(again.params, r.params));
    CHECK(again.loss_curve == r.loss_curve);
}

TEST_CASE("train_bc: training in pieces equals one run") {
    const auto ds = small_demos(env::ModalityId::ray, 80);
    const auto spec = nn::default_spec(16);
    TrainConfig full;
    full.epochs = 10;
    full.seed = 8;
    const auto whole = train_bc(spec, ds, full);

    TrainConfig first = full;
    first.epochs = 4;
    const auto a = train_bc(spec, ds, first);
    TrainConfig second = full;
    second.epochs = 6;
    second.start_epoch = 4;
    const auto b = train_bc(spec, ds, second, a.params);
    CHECK(nn::bit_identical(b.params, whole.params));
}

TEST_CASE("train_bc: frozen prefix untouched, bad config rejected") {
    const auto ds = small_demos(env::ModalityId::grid, 60);
    const auto spec = nn::default_spec(64);
    const auto init = nn::init_params(spec, 5);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.frozen_prefix = 2;
    const auto r = train_bc(spec, ds, cfg, init);
    CHECK(nn::bit_identical(r.params.layers[0], init.layers[0]));
    CHECK(nn::bit_identical(r.params.layers[1], init.layers[1]));
    CHECK_FALSE(nn::bit_identical(r.params.layers[3], init.layers[3]));

    TrainConfig bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS(train_bc(spec, ds, bad));
    CHECK_THROWS_AS(train_bc(nn::default_spec(6), ds, cfg), DimensionError);
}

TEST_CASE("demos JSONL round trip") {
    const auto ds = small_demos(env::ModalityId::grid, 20);
    const auto text = demos_to_jsonl(ds, "abc123");
    CHECK(text.find("abc123") != std::string::npos);
    CHECK(demos_from_jsonl(text) == ds);
    CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(ds.size() + 1));
    CHECK_THROWS_AS(demos_from_jsonl("{\"schema\":\"nope\"}\n"), DecodeError);
}

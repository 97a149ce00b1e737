#include "doctest.h"

#include "fedimit/error.hpp"
#include "fedimit/rng.hpp"
#include "fedimit/transfer.hpp"

#include <cmath>

using namespace fedimit;
using namespace fedimit::transfer;
using env::ModalityId;

namespace {

imitation::DemoDataset demos(ModalityId m) {
    const std::uint64_t seeds[] = {901, 902};
    return imitation::collect_demonstrations(seeds, m, 120, 6.0, env::TrackParams{}, {0.1, 0.95});
}

imitation::TrainConfig cfg(std::size_t epochs = 8) {
    imitation::TrainConfig c;
    c.epochs = epochs;
    c.seed = 17;
    c.frozen_prefix = 2;
    return c;
}

// A guide is any trained network; here one fitted to different tracks.
nn::ParameterSet guide_for(ModalityId m) {
    const std::uint64_t seeds[] = {950};
    const auto ds = imitation::collect_demonstrations(seeds, m, 200, 6.0, env::TrackParams{}, {0.1, 0.95});
    imitation::TrainConfig c;
    c.epochs = 15;
    c.seed = 3;
    return imitation::train_bc(nn::default_spec(env::modality_dim(m)), ds, c).params;
}

}  // namespace

TEST_CASE("fine_tune: frozen layers are bit-identical to the guide") {
    const auto spec = nn::default_spec(6);
    const auto guide = guide_for(ModalityId::sem);
    const auto r = fine_tune(guide, spec, demos(ModalityId::sem), cfg());
    CHECK(nn::bit_identical(r.params.layers[0], guide.layers[0]));
    CHECK(nn::bit_identical(r.params.layers[1], guide.layers[1]));
    CHECK_FALSE(nn::bit_identical(r.params.layers[3], guide.layers[3]));
    CHECK(r.loss_curve.size() == 8);
}

TEST_CASE("fine_tune: curve starts at the guide's validation risk") {
    const auto spec = nn::default_spec(16);
    const auto guide = guide_for(ModalityId::ray);
    const auto ds = demos(ModalityId::ray);
    const auto r = fine_tune(guide, spec, ds, cfg());
    const auto split = imitation::split_indices(ds.size(), cfg().seed);
    imitation::DemoDataset val{ds.modality, {}, {}};
    for (auto i : split.validation) val.demos.push_back(ds.demos[i]);
    CHECK(r.loss_curve.front() == doctest::Approx(imitation::empirical_risk(spec, guide, val)).epsilon(1e-12));
}

TEST_CASE("fine_tune: learning-rate multiplier") {
    const auto spec = nn::default_spec(6);
    const auto guide = guide_for(ModalityId::sem);
    const auto ds = demos(ModalityId::sem);
    CHECK_THROWS_AS(fine_tune(guide, spec, ds, cfg(), 0.0), RangeError);
    auto doubled = cfg();
    doubled.lr *= 2;
    CHECK(nn::bit_identical(fine_tune(guide, spec, ds, cfg(), 2.0).params,
                            imitation::train_bc(spec, ds, doubled, guide).params));
}

TEST_CASE("fine_tune: rejects mismatched guides and prefixes") {
    const auto spec = nn::default_spec(6);
    const auto ds = demos(ModalityId::sem);
    const auto other = nn::init_params(nn::NetworkSpec::dense(6, std::vector<std::size_t>{8, 8, 4}, 2), 1);
    CHECK_THROWS_AS(fine_tune(other, spec, ds, cfg()), SpecError);
    auto loose = cfg();
    loose.frozen_prefix = 1;
    CHECK_THROWS_AS(fine_tune(nn::init_params(spec, 1), spec, ds, loose), SpecError);
}

TEST_CASE("evaluate_params averages per-track rollouts") {
    const auto spec = nn::default_spec(6);
    const auto p = guide_for(ModalityId::sem);
    const std::vector<env::Track> tracks{env::generate_track(31, {}), env::generate_track(32, {})};
    const EvalSetup setup{tracks, 150, 2, 99, {}};
    std::vector<env::Metrics> runs;
    for (std::size_t k = 0; k < tracks.size(); ++k) {
        const auto log = env::rollout([&](const env::Observation& o) { return nn::forward(spec, p, o.values); },
                                      tracks[k], ModalityId::sem, 150, 2, derive_seed(99, "rollout", {k}));
        runs.push_back(env::evaluate(log));
    }
    CHECK(evaluate_params(spec, p, ModalityId::sem, setup) == env::average(runs));
}

TEST_CASE("compare_transfer: legs are reproducible and independent of threads") {
    const auto spec = nn::default_spec(64);
    const auto guide = guide_for(ModalityId::grid);
    const auto ds = demos(ModalityId::grid);
    const std::vector<env::Track> tracks{env::generate_track(41, {})};
    const EvalSetup setup{tracks, 100, 0, 5, {}};
    const auto a = compare_transfer(guide, spec, ds, setup, cfg(4), 1.0, 1);
    const auto b = compare_transfer(guide, spec, ds, setup, cfg(4), 1.0, 2);
    CHECK(nn::bit_identical(a.transferred_params, b.transferred_params));
    CHECK(nn::bit_identical(a.scratch_params, b.scratch_params));
    CHECK(a.metrics_scratch == b.metrics_scratch);

    const auto scratch = imitation::train_bc(spec, ds, scratch_config(cfg(4)));
    CHECK(nn::bit_identical(a.scratch_params, scratch.params));
    CHECK(a.scratch_curve == scratch.loss_curve);
    CHECK(scratch_config(cfg(4)).frozen_prefix == 0);
    CHECK(a.modality == ModalityId::grid);

    const auto back = report_from_json(report_to_json(a, "hh"));
    CHECK(back.transferred_curve == a.transferred_curve);
    CHECK(back.scratch_final == a.scratch_final);
    CHECK(nn::bit_identical(back.transferred_params, a.transferred_params));
    CHECK(back.metrics_transferred == a.metrics_transferred);

    const auto csv = curves_to_csv(a, "hh");
    CHECK(csv.rfind("# config_hash=hh\nepoch,transferred,scratch\n", 0) == 0);
    CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == 2 + 4 + 1);
}

#include "doctest.h"

#include "fedimit/error.hpp"
#include "fedimit/fusion.hpp"
#include "fedimit/rng.hpp"

#include <algorithm>
#include <cmath>

using namespace fedimit;
using namespace fedimit::fusion;
using env::ModalityId;

namespace {

const CloudDataset& tiny_dataset() {
    static const CloudDataset ds = [] {
        const std::uint64_t seeds[] = {500, 501};
        return build_cloud_dataset(seeds, 25, 6.0, env::TrackParams{}, imitation::Exploration{0.1, 0.95});
    }();
    return ds;
}

std::map<ModalityId, GuideTraining> tiny_training(std::size_t epochs = 3) {
    std::map<ModalityId, GuideTraining> out;
    for (auto m : env::kAllModalities) {
        imitation::TrainConfig c;
        c.epochs = epochs;
        c.seed = 40 + static_cast<std::uint64_t>(m);
        out.emplace(m, GuideTraining{nn::default_spec(env::modality_dim(m)), c});
    }
    return out;
}

// Network whose output is the constant `c` whatever the input.
nn::ParameterSet constant_net(ModalityId m, double c) {
    auto p = nn::zero_params(nn::default_spec(env::modality_dim(m)));
    p.layers.back().bias(0) = c;
    return p;
}

RegistryEntry entry(ModalityId m, const nn::ParameterSet& p) {
    return {nn::default_spec(env::modality_dim(m)), p, 1, "a", nn::serialize_params(p)};
}

double brute_median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[(n - 1) / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

std::vector<Agent> tiny_agents(std::size_t epochs) {
    std::vector<Agent> agents;
    std::uint64_t k = 0;
    for (auto m : env::kAllModalities) {
        const std::uint64_t seeds[] = {600 + k};
        Agent a;
        a.id = "agent-" + std::string(env::to_string(m));
        a.spec = nn::default_spec(env::modality_dim(m));
        a.dataset = imitation::collect_demonstrations(seeds, m, 30, 6.0);
        a.config.epochs = epochs;
        a.config.seed = 70 + k++;
        agents.push_back(std::move(a));
    }
    return agents;
}

}  // namespace

TEST_CASE("fuse_median: small cases and the worked example") {
    const double ex[] = {-0.1, -0.3, 0.4, 0.4, 0.5};
    CHECK(fuse_median(ex) == 0.4);
    const double one[] = {0.25};
    CHECK(fuse_median(one) == 0.25);
    const double two[] = {0.5, -0.1};
    CHECK(fuse_median(two) == doctest::Approx(0.2));
    const double three[] = {0.3, -0.6, 0.1};
    CHECK(fuse_median(three) == 0.1);
    CHECK_THROWS_AS(fuse_median(std::span<const double>{}), RangeError);
    const double bad[] = {0.1, std::nan("")};
    CHECK_THROWS_AS(fuse_median(bad), RangeError);
}

TEST_CASE("fuse_median: agrees with a sort-based oracle") {
    Rng rng(91);
    for (int i = 0; i < 2000; ++i) {
        std::vector<double> v(1 + rng.below(9));
        for (double& x : v) x = rng.below(4) == 0 ? 0.1 * static_cast<double>(rng.below(5)) : rng.uniform(-0.69, 0.69);
        CHECK(fuse_median(v) == brute_median(v));
    }
}

TEST_CASE("cloud dataset: scenes render every modality of one state") {
    const auto& ds = tiny_dataset();
    CHECK(ds.size() == 50);
    CHECK(ds.source_tracks == std::vector<std::uint64_t>{500, 501});
    const auto track = env::generate_track(500, env::TrackParams{});
    const auto traj = imitation::expert_trajectory(track, 25, 6.0, {0.1, 0.95}, derive_seed(500, "explore"));
    for (std::size_t i = 0; i < 25; ++i) {
        CHECK(ds.scenes[i].scene_id() == i);
        for (auto m : env::kAllModalities) CHECK(ds.scenes[i].observation(m) == env::observe(track, traj[i].state, m));
    }
    CHECK_NOTHROW(ds.validate());

    std::array<env::Observation, 3> obs{ds.scenes[0].observation(ModalityId::ray), ds.scenes[0].observation(ModalityId::grid),
                                        ds.scenes[0].observation(ModalityId::sem)};
    CHECK_THROWS(CloudScene(0, obs, 5.0));
    std::swap(obs[0], obs[1]);
    CHECK_THROWS(CloudScene(0, obs, 0.1));
}

TEST_CASE("suggest_labels and fuse: constant networks") {
    const auto& ds = tiny_dataset();
    PrivateModelRegistry reg;
    reg.emplace(ModalityId::ray, entry(ModalityId::ray, constant_net(ModalityId::ray, 0.3)));
    reg.emplace(ModalityId::grid, entry(ModalityId::grid, constant_net(ModalityId::grid, -0.2)));
    reg.emplace(ModalityId::sem, entry(ModalityId::sem, constant_net(ModalityId::sem, 5.0)));
    const auto s = suggest_labels(reg, ds);
    REQUIRE(s.size() == ds.size());
    for (const auto& sc : s) {
        CHECK(sc.values.at(ModalityId::ray) == 0.3);
        CHECK(sc.values.at(ModalityId::sem) == env::kMaxSteer);  // clamped
    }
    const auto fused = fuse_median(s);
    for (const auto& [id, e] : fused) CHECK(e.fused == 0.3);

    CHECK_THROWS_AS(suggest_labels({}, ds), SpecError);
    PrivateModelRegistry wrong;
    wrong.emplace(ModalityId::ray, entry(ModalityId::sem, constant_net(ModalityId::sem, 0.0)));
    CHECK_THROWS_AS(suggest_labels(wrong, ds), SpecError);
}

TEST_CASE("audit MSE helpers match a direct computation") {
    const auto& ds = tiny_dataset();
    PrivateModelRegistry reg;
    reg.emplace(ModalityId::ray, entry(ModalityId::ray, constant_net(ModalityId::ray, 0.1)));
    reg.emplace(ModalityId::grid, entry(ModalityId::grid, constant_net(ModalityId::grid, 0.0)));
    const auto fused = fuse_median(suggest_labels(reg, ds));
    double fused_sq = 0, ray_sq = 0;
    for (const auto& sc : ds.scenes) {
        const double y = sc.expert_label_eval_only();
        fused_sq += (0.05 - y) * (0.05 - y);
        ray_sq += (0.1 - y) * (0.1 - y);
    }
    CHECK(fused_label_mse(ds, fused) == doctest::Approx(fused_sq / double(ds.size())));
    CHECK(suggestion_mse(ds, fused, ModalityId::ray) == doctest::Approx(ray_sq / double(ds.size())));
}

TEST_CASE("label audit: reads under a seal are violations") {
    LabelAudit::reset();
    const auto& sc = tiny_dataset().scenes[0];
    (void)sc.expert_label_eval_only();
    CHECK(LabelAudit::reads() == 1);
    CHECK(LabelAudit::violations() == 0);
    {
        SealGuard seal;
        CHECK(LabelAudit::sealed());
        (void)sc.expert_label_eval_only();
    }
    CHECK_FALSE(LabelAudit::sealed());
    CHECK(LabelAudit::violations() == 1);
    CHECK(LabelAudit::sealed_sections() == 1);
    LabelAudit::reset();
}

TEST_CASE("cloud: registry versions, readiness, spec checks") {
    Cloud cloud(tiny_dataset(), tiny_training());
    CHECK_THROWS_AS(cloud.run_fusion_round(), NotReady);
    CHECK_THROWS_AS(cloud.handle_service_request(ModalityId::ray), NotReady);

    const auto ray = nn::init_params(nn::default_spec(16), 1);
    CHECK(cloud.upload("a", ModalityId::ray, nn::serialize_params(ray)) == 1);
    CHECK(cloud.upload("a", ModalityId::ray, nn::serialize_params(ray)) == 2);
    CHECK_THROWS_AS(cloud.upload("b", ModalityId::grid, nn::serialize_params(ray)), SpecError);
    CHECK_THROWS_AS(cloud.upload("b", ModalityId::grid, "{}"), DecodeError);
    CHECK_FALSE(cloud.fresh_upload_set());

    LabelAudit::reset();
    const auto round = cloud.run_fusion_round();
    CHECK(LabelAudit::violations() == 0);
    CHECK(LabelAudit::reads() == 0);
    CHECK(LabelAudit::sealed_sections() == 1);
    CHECK(round.version == 1);
    CHECK(round.registry_versions.at(ModalityId::ray) == 2);
    const auto reply = cloud.handle_service_request(ModalityId::ray);
    CHECK(reply.version == 1);
    CHECK(nn::bit_identical(nn::deserialize_params(reply.bytes, nn::default_spec(16)),
                            cloud.guides()->models.at(ModalityId::ray).params));
    // Only the uploaded modality gets a guide.
    CHECK_THROWS_AS(cloud.handle_service_request(ModalityId::sem), NotReady);

    Cloud ray_only(tiny_dataset(), {{ModalityId::ray, tiny_training().at(ModalityId::ray)}});
    CHECK_THROWS_AS(ray_only.handle_service_request(ModalityId::grid), SpecError);
}

TEST_CASE("guides: trained on fused labels, thread count irrelevant") {
    const auto& ds = tiny_dataset();
    PrivateModelRegistry reg;
    for (auto m : env::kAllModalities) reg.emplace(m, entry(m, nn::init_params(nn::default_spec(env::modality_dim(m)), 9)));
    const auto fused = fuse_median(suggest_labels(reg, ds));
    const auto a = train_guide_models(ds, fused, tiny_training(), 1);
    const auto b = train_guide_models(ds, fused, tiny_training(), 3);
    for (auto m : env::kAllModalities) {
        CHECK(nn::bit_identical(a.models.at(m).params, b.models.at(m).params));
        CHECK(a.models.at(m).loss_curve.size() == 3);
    }
    FusedLabelSet partial = fused;
    partial.erase(partial.begin());
    CHECK_THROWS_AS(train_guide_models(ds, partial, tiny_training()), RangeError);
}

TEST_CASE("epochs_after_tick spreads training over T ticks") {
    CHECK(epochs_after_tick(200, 1, 0) == 200);
    CHECK(epochs_after_tick(10, 4, 0) == 2);
    CHECK(epochs_after_tick(10, 4, 1) == 5);
    CHECK(epochs_after_tick(10, 4, 3) == 10);
    CHECK(epochs_after_tick(10, 4, 9) == 10);
}

TEST_CASE("federation loop: fusion events at t % q == 0") {
    struct Case {
        std::size_t T, q, expect;
    };
    for (const Case c : {Case{10, 3, 4}, Case{7, 1, 7}, Case{5, 5, 1}, Case{4, 2, 2}}) {
        Cloud cloud(tiny_dataset(), tiny_training(1));
        auto agents = tiny_agents(c.T);
        const auto rec = run_federation_loop(agents, cloud, {c.q, c.T});
        CHECK(rec.fusion_count() == c.expect);
        std::size_t fusions = 0, uploads = 0, services = 0;
        for (const auto& e : rec.events) {
            fusions += e.kind == "fusion";
            uploads += e.kind == "upload";
            services += e.kind == "service";
            if (e.kind == "fusion") CHECK(e.tick % c.q == 0);
        }
        CHECK(fusions == c.expect);
        CHECK(uploads == 3 * c.expect);
        CHECK(services == 3 * c.expect);
        for (const auto& a : agents) CHECK(a.epochs_done == c.T);
        CHECK(cloud.guide_version() == c.expect);
        for (std::size_t r = 1; r < rec.rounds.size(); ++r) CHECK(rec.rounds[r].version == rec.rounds[r - 1].version + 1);
    }
}

TEST_CASE("federation loop: online training matches one-shot training") {
    Cloud cloud(tiny_dataset(), tiny_training(1));
    auto agents = tiny_agents(6);
    run_federation_loop(agents, cloud, {2, 4});
    for (const auto& a : agents) {
        const auto direct = imitation::train_bc(a.spec, a.dataset, a.config);
        CHECK(nn::bit_identical(*a.params, direct.params));
        CHECK(a.loss_curve == direct.loss_curve);
    }
}

TEST_CASE("federation loop: finished agents skip training") {
    Cloud cloud(tiny_dataset(), tiny_training(1));
    auto agents = tiny_agents(3);
    for (auto& a : agents) {
        a.params = imitation::train_bc(a.spec, a.dataset, a.config).params;
        a.epochs_done = a.config.epochs;
    }
    const auto before = *agents[0].params;
    const auto rec = run_federation_loop(agents, cloud, {1, 1});
    CHECK(std::none_of(rec.events.begin(), rec.events.end(), [](const LoopEvent& e) { return e.kind == "train"; }));
    CHECK(nn::bit_identical(*agents[0].params, before));
    CHECK_THROWS_AS(run_federation_loop(agents, cloud, {0, 1}), RangeError);
}

TEST_CASE("exports carry the config hash") {
    Cloud cloud(tiny_dataset(), tiny_training(1));
    auto agents = tiny_agents(2);
    const auto rec = run_federation_loop(agents, cloud, {1, 2});
    const auto csv = fused_labels_to_csv(cloud.dataset(), *cloud.fused(), "h123");
    CHECK(csv.rfind("# config_hash=h123\n", 0) == 0);
    CHECK(csv.find("scene_id,ray,grid,sem,fused,expert_eval_only\n") != std::string::npos);
    CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == cloud.dataset().size() + 2);
    CHECK(rounds_to_csv(rec, "h123").rfind("# config_hash=h123\n", 0) == 0);
    CHECK(record_to_json(rec, "h123").find("\"config_hash\": \"h123\"") != std::string::npos);
}

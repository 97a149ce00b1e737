#include "fedimit/transfer.hpp"

#include "fedimit/codec.hpp"
#include "fedimit/error.hpp"
#include "fedimit/parallel.hpp"
#include "fedimit/rng.hpp"

#include "json.hpp"

#include <sstream>

namespace fedimit::transfer {

using json = nlohmann::json;

FineTuneResult fine_tune(const nn::ParameterSet& guide, const nn::NetworkSpec& spec,
                         const imitation::DemoDataset& local_dataset, const imitation::TrainConfig& config,
                         double lr_multiplier) {
    spec.validate();
    if (guide.spec_hash != spec.hash()) throw SpecError("guide parameters were built for a different network");
    guide.check_shapes(spec);
    if (config.frozen_prefix != spec.feature_prefix_len)
        throw SpecError("fine_tune: frozen_prefix must equal the spec's feature prefix length");
    if (!(lr_multiplier > 0.0)) throw RangeError("fine_tune: lr multiplier must be positive");
    imitation::TrainConfig cfg = config;
    cfg.lr = config.lr * lr_multiplier;
    auto r = imitation::train_bc(spec, local_dataset, cfg, guide);
    return {std::move(r.params), std::move(r.loss_curve), r.final_risk};
}

imitation::TrainConfig scratch_config(const imitation::TrainConfig& config) {
    imitation::TrainConfig cfg = config;
    cfg.frozen_prefix = 0;
    return cfg;
}

env::Metrics evaluate_params(const nn::NetworkSpec& spec, const nn::ParameterSet& params, env::ModalityId modality,
                             const EvalSetup& eval) {
    if (eval.tracks.empty()) throw RangeError("evaluation needs at least one track");
    const env::Policy policy = [&](const env::Observation& o) { return nn::forward(spec, params, o.values); };
    std::vector<env::Metrics> runs;
    runs.reserve(eval.tracks.size());
    for (std::size_t k = 0; k < eval.tracks.size(); ++k) {
        const auto log = env::rollout(policy, eval.tracks[k], modality, eval.steps, eval.severity,
                                      derive_seed(eval.seed, "rollout", {k}), eval.thresholds);
        runs.push_back(env::evaluate(log, eval.thresholds));
    }
    return env::average(runs);
}

TransferReport compare_transfer(const nn::ParameterSet& guide, const nn::NetworkSpec& spec,
                                const imitation::DemoDataset& local_dataset, const EvalSetup& eval,
                                const imitation::TrainConfig& config, double lr_multiplier, std::size_t threads) {
    TransferReport rep;
    rep.modality = local_dataset.modality;
    parallel_for(2, threads, [&](std::size_t leg) {
        if (leg == 0) {
            auto t = fine_tune(guide, spec, local_dataset, config, lr_multiplier);
            rep.transferred_curve = std::move(t.loss_curve);
            rep.transferred_final = t.final_risk;
            rep.transferred_params = std::move(t.params);
            rep.metrics_transferred = evaluate_params(spec, rep.transferred_params, rep.modality, eval);
        } else {
            auto s = imitation::train_bc(spec, local_dataset, scratch_config(config));
            rep.scratch_curve = std::move(s.loss_curve);
            rep.scratch_final = s.final_risk;
            rep.scratch_params = std::move(s.params);
            rep.metrics_scratch = evaluate_params(spec, rep.scratch_params, rep.modality, eval);
        }
    });
    return rep;
}

namespace {

json metrics_json(const env::Metrics& m) {
    return {{"off_track_rate", m.off_track_rate},
            {"miss_turn_rate", m.miss_turn_rate},
            {"straight_mae", m.straight_mae},
            {"turn_steps", m.turn_steps},
            {"straight_steps", m.straight_steps}};
}

env::Metrics metrics_from(const json& j) {
    env::Metrics m;
    m.off_track_rate = j.at("off_track_rate").get<double>();
    m.miss_turn_rate = j.at("miss_turn_rate").get<double>();
    m.straight_mae = j.at("straight_mae").get<double>();
    m.turn_steps = j.at("turn_steps").get<std::size_t>();
    m.straight_steps = j.at("straight_steps").get<std::size_t>();
    return m;
}

}  // namespace

std::string report_to_json(const TransferReport& report, const std::string& config_hash) {
    json j = {{"schema", "fedimit.transfer"},
              {"version", 1},
              {"modality", env::to_string(report.modality)},
              {"transferred_curve", report.transferred_curve},
              {"scratch_curve", report.scratch_curve},
              {"transferred_final", report.transferred_final},
              {"scratch_final", report.scratch_final},
              {"transferred_params", json::parse(nn::serialize_params(report.transferred_params))},
              {"scratch_params", json::parse(nn::serialize_params(report.scratch_params))},
              {"metrics_transferred", metrics_json(report.metrics_transferred)},
              {"metrics_scratch", metrics_json(report.metrics_scratch)}};
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    return j.dump(2) + "\n";
}

TransferReport report_from_json(std::string_view text) {
    try {
        const json j = json::parse(text);
        if (j.at("schema") != "fedimit.transfer") throw DecodeError("transfer report: unknown schema");
        if (j.at("version") != 1) throw VersionMismatch("transfer report: unsupported version");
        TransferReport r;
        r.modality = env::modality_from_string(j.at("modality").get<std::string>());
        r.transferred_curve = j.at("transferred_curve").get<std::vector<double>>();
        r.scratch_curve = j.at("scratch_curve").get<std::vector<double>>();
        r.transferred_final = j.at("transferred_final").get<double>();
        r.scratch_final = j.at("scratch_final").get<double>();
        r.transferred_params = nn::deserialize_params(j.at("transferred_params").dump()).params;
        r.scratch_params = nn::deserialize_params(j.at("scratch_params").dump()).params;
        r.metrics_transferred = metrics_from(j.at("metrics_transferred"));
        r.metrics_scratch = metrics_from(j.at("metrics_scratch"));
        return r;
    } catch (const json::exception& e) {
        throw DecodeError(std::string("transfer report: ") + e.what());
    }
}

std::string curves_to_csv(const TransferReport& report, const std::string& config_hash) {
    std::ostringstream os;
    if (!config_hash.empty()) os << "# config_hash=" << config_hash << '\n';
    os << "epoch,transferred,scratch\n";
    const std::size_t n = std::max(report.transferred_curve.size(), report.scratch_curve.size());
    for (std::size_t e = 0; e < n; ++e) {
        os << e << ',';
        if (e < report.transferred_curve.size()) os << codec::format_double(report.transferred_curve[e]);
        os << ',';
        if (e < report.scratch_curve.size()) os << codec::format_double(report.scratch_curve[e]);
        os << '\n';
    }
    os << "final," << codec::format_double(report.transferred_final) << ','
       << codec::format_double(report.scratch_final) << '\n';
    return os.str();
}

}  // namespace fedimit::transfer

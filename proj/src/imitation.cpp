#include "fedimit/imitation.hpp"

#include "fedimit/error.hpp"
#include "fedimit/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fedimit::imitation {

using json = nlohmann::json;

void DemoDataset::validate() const {
    if (demos.empty()) throw DimensionError("demonstration dataset is empty");
    const std::size_t dim = env::modality_dim(modality);
    for (const auto& d : demos) {
        if (d.observation.modality != modality) throw DimensionError("demonstration modality mismatch");
        if (d.observation.values.size() != dim) throw DimensionError("demonstration dimension mismatch");
        if (!(std::abs(d.steering) <= env::kMaxSteer)) throw RangeError("demonstration steering out of range");
    }
}

nn::Batch DemoDataset::to_batch() const {
    const auto dim = static_cast<Eigen::Index>(env::modality_dim(modality));
    nn::Matrix x(static_cast<Eigen::Index>(demos.size()), dim);
    nn::Vector y(static_cast<Eigen::Index>(demos.size()));
    for (std::size_t i = 0; i < demos.size(); ++i) {
        const auto& v = demos[i].observation.values;
        if (static_cast<Eigen::Index>(v.size()) != dim) throw DimensionError("demonstration dimension mismatch");
        x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(v.data(), dim);
        y(static_cast<Eigen::Index>(i)) = demos[i].steering;
    }
    return nn::Batch(std::move(x), std::move(y));
}

std::vector<ExpertSample> expert_trajectory(const env::Track& track, std::size_t steps, double lookahead,
                                            const Exploration& exploration, std::uint64_t noise_seed) {
    if (!(exploration.sigma >= 0.0) || !(exploration.rho >= 0.0 && exploration.rho < 1.0))
        throw RangeError("exploration needs sigma >= 0 and rho in [0, 1)");
    std::vector<ExpertSample> out;
    out.reserve(steps);
    env::CarState state = env::start_state(track);
    Rng rng(noise_seed);
    const double innovation = std::sqrt(1.0 - exploration.rho * exploration.rho) * exploration.sigma;
    double noise = 0.0;
    for (std::size_t k = 0; k < steps; ++k) {
        const double action = env::expert_steer(track, state, lookahead);
        out.push_back({state, action});
        if (exploration.sigma > 0.0) noise = exploration.rho * noise + innovation * rng.normal();
        state = env::step(state, std::clamp(action + noise, -env::kMaxSteer, env::kMaxSteer));
    }
    return out;
}

namespace {

void append_demos(DemoDataset& ds, const env::Track& track, std::size_t steps, double lookahead,
                  const Exploration& exploration, std::uint64_t noise_seed) {
    for (const auto& s : expert_trajectory(track, steps, lookahead, exploration, noise_seed))
        ds.demos.push_back({env::observe(track, s.state, ds.modality), s.action});
}

}  // namespace

DemoDataset collect_demonstrations(std::span<const env::Track> tracks, env::ModalityId modality,
                                   std::size_t steps_per_track, double lookahead, const Exploration& exploration) {
    DemoDataset ds;
    ds.modality = modality;
    ds.demos.reserve(tracks.size() * steps_per_track);
    for (std::size_t k = 0; k < tracks.size(); ++k)
        append_demos(ds, tracks[k], steps_per_track, lookahead, exploration, derive_seed(k, "explore"));
    return ds;
}

DemoDataset collect_demonstrations(std::span<const std::uint64_t> track_seeds, env::ModalityId modality,
                                   std::size_t steps_per_track, double lookahead,
                                   const env::TrackParams& track_params, const Exploration& exploration) {
    if (track_seeds.empty()) throw RangeError("collect_demonstrations needs at least one track seed");
    DemoDataset ds;
    ds.modality = modality;
    ds.demos.reserve(track_seeds.size() * steps_per_track);
    for (auto seed : track_seeds)
        append_demos(ds, env::generate_track(seed, track_params), steps_per_track, lookahead, exploration,
                     derive_seed(seed, "explore"));
    ds.source_tracks.assign(track_seeds.begin(), track_seeds.end());
    return ds;
}

double empirical_risk(const nn::NetworkSpec& spec, const nn::ParameterSet& params, const DemoDataset& dataset) {
    if (env::modality_dim(dataset.modality) != spec.input_dim())
        throw DimensionError("dataset modality does not match the network input");
    return nn::loss(spec, params, dataset.to_batch(), 0.0);
}

Split split_indices(std::size_t n, std::uint64_t seed) {
    Split s;
    if (n == 0) return s;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(std::span<std::size_t>(order));
    if (n == 1) {
        s.train = order;
        s.validation = order;
        return s;
    }
    const std::size_t n_val = std::max<std::size_t>(1, n / 10);
    s.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    return s;
}

std::uint64_t init_seed(const TrainConfig& config) { return derive_seed(config.seed, "init"); }

namespace {

nn::Batch gather(const nn::Batch& all, std::span<const std::size_t> rows) {
    nn::Matrix x(static_cast<Eigen::Index>(rows.size()), all.inputs.cols());
    nn::Vector y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        x.row(static_cast<Eigen::Index>(i)) = all.inputs.row(static_cast<Eigen::Index>(rows[i]));
        y(static_cast<Eigen::Index>(i)) = all.targets(static_cast<Eigen::Index>(rows[i]));
    }
    return nn::Batch(std::move(x), std::move(y));
}

}  // namespace

TrainResult train_bc(const nn::NetworkSpec& spec, const DemoDataset& dataset, const TrainConfig& config,
                     const std::optional<nn::ParameterSet>& init) {
    spec.validate();
    dataset.validate();
    if (env::modality_dim(dataset.modality) != spec.input_dim())
        throw DimensionError("dataset modality does not match the network input");
    if (config.frozen_prefix >= spec.layers.size())
        throw DimensionError("frozen prefix must leave at least one trainable layer");
    if (config.batch_size == 0) throw RangeError("batch size must be positive");
    if (!(config.lr >= 0.0) || !(config.lambda >= 0.0)) throw RangeError("lr and lambda must be non-negative");

    TrainResult result;
    if (init) {
        init->check_shapes(spec);
        result.params = *init;
    } else {
        result.params = nn::init_params(spec, init_seed(config));
    }

    const nn::Batch all = dataset.to_batch();
    const Split split = split_indices(all.size(), config.seed);
    const nn::Batch validation = gather(all, split.validation);

    std::vector<std::size_t> order;
    nn::Gradients g;
    result.loss_curve.reserve(config.epochs);
    for (std::size_t e = 0; e < config.epochs; ++e) {
        result.loss_curve.push_back(nn::loss(spec, result.params, validation, 0.0));
        // Each epoch permutes the split afresh, so training resumed at start_epoch replays exactly.
        order = split.train;
        Rng rng(derive_seed(config.seed, "epoch", {config.start_epoch + e}));
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            const nn::Batch batch = gather(all, std::span<const std::size_t>(order).subspan(begin, end - begin));
            nn::loss_and_grad(spec, result.params, batch, config.lambda, g);
            nn::sgd_step_inplace(result.params, g, config.lr, config.frozen_prefix);
        }
    }
    result.final_risk = nn::loss(spec, result.params, validation, 0.0);
    return result;
}

std::string demos_to_jsonl(const DemoDataset& dataset, const std::string& config_hash) {
    std::ostringstream os;
    json header = {{"schema", "fedimit.demos"},
                   {"version", 1},
                   {"modality", env::to_string(dataset.modality)},
                   {"dim", env::modality_dim(dataset.modality)},
                   {"count", dataset.demos.size()},
                   {"source_tracks", dataset.source_tracks}};
    if (!config_hash.empty()) header["config_hash"] = config_hash;
    os << header.dump() << '\n';
    for (const auto& d : dataset.demos) os << json{{"x", d.observation.values}, {"y", d.steering}}.dump() << '\n';
    return os.str();
}

DemoDataset demos_from_jsonl(std::string_view text) {
    DemoDataset ds;
    std::size_t pos = 0;
    bool have_header = false;
    std::size_t expected = 0, dim = 0;
    try {
        while (pos < text.size()) {
            std::size_t nl = text.find('\n', pos);
            if (nl == std::string_view::npos) nl = text.size();
            const auto line = text.substr(pos, nl - pos);
            pos = nl + 1;
            if (line.empty()) continue;
            const json j = json::parse(line);
            if (!have_header) {
                if (j.at("schema") != "fedimit.demos" || j.at("version") != 1)
                    throw DecodeError("demos: unknown schema or version");
                ds.modality = env::modality_from_string(j.at("modality").get<std::string>());
                dim = j.at("dim").get<std::size_t>();
                if (dim != env::modality_dim(ds.modality)) throw DecodeError("demos: header dim mismatch");
                expected = j.at("count").get<std::size_t>();
                ds.source_tracks = j.at("source_tracks").get<std::vector<std::uint64_t>>();
                have_header = true;
                continue;
            }
            Demonstration d;
            d.observation.modality = ds.modality;
            d.observation.values = j.at("x").get<std::vector<double>>();
            d.steering = j.at("y").get<double>();
            if (d.observation.values.size() != dim) throw DecodeError("demos: record dim mismatch");
            ds.demos.push_back(std::move(d));
        }
    } catch (const json::exception& e) {
        throw DecodeError(std::string("demos: ") + e.what());
    }
    if (!have_header) throw DecodeError("demos: missing header record");
    if (ds.demos.size() != expected) throw DecodeError("demos: record count does not match header");
    return ds;
}

}  // namespace fedimit::imitation

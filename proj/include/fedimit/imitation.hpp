#pragma once

// Behavioral cloning: expert state-action pairs per modality and mini-batch
// SGD on the regularized squared loss.

#include "fedimit/env.hpp"
#include "fedimit/nn.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedimit::imitation {

struct Demonstration {
    env::Observation observation;
    double steering = 0.0;

    friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

struct DemoDataset {
    env::ModalityId modality = env::ModalityId::sem;
    std::vector<Demonstration> demos;
    std::vector<std::uint64_t> source_tracks;

    std::size_t size() const { return demos.size(); }
    /// Throws DimensionError on mixed modalities or dims, RangeError on bad labels.
    void validate() const;
    nn::Batch to_batch() const;

    friend bool operator==(const DemoDataset&, const DemoDataset&) = default;
};

struct TrainConfig {
    double lr = 0.01;
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double lambda = 1e-4;
    std::uint64_t seed = 0;
    /// Leading layers left untouched (0 trains everything).
    std::size_t frozen_prefix = 0;
    /// Epoch index this call starts from, so training can continue across
    /// calls with distinct shuffles and the same split.
    std::size_t start_epoch = 0;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainResult {
    nn::ParameterSet params;
    /// Validation risk at the start of each epoch; curve[0] is the risk of the
    /// initial parameters.
    std::vector<double> loss_curve;
    /// Validation risk after the last epoch.
    double final_risk = 0.0;
};

/// Driving noise added to the executed action while collecting (labels stay
/// the clean expert action). AR(1) with stationary std `sigma`.
struct Exploration {
    double sigma = 0.0;
    double rho = 0.95;

    friend bool operator==(const Exploration&, const Exploration&) = default;
};

struct ExpertSample {
    env::CarState state;
    double action = 0.0;  // expert_steer at `state`
};

/// Expert closed loop from the start line. The noise stream is seeded by
/// `noise_seed`; with sigma == 0 the seed is irrelevant.
std::vector<ExpertSample> expert_trajectory(const env::Track& track, std::size_t steps, double lookahead,
                                            const Exploration& exploration = {}, std::uint64_t noise_seed = 0);

/// Records (observe(state), expert_steer(state)) at every step of the expert
/// trajectory on each track. Track k uses noise seed derive_seed(k, "explore").
DemoDataset collect_demonstrations(std::span<const env::Track> tracks, env::ModalityId modality,
                                   std::size_t steps_per_track, double lookahead,
                                   const Exploration& exploration = {});
/// Generates each track from its seed; the noise seed is derived from the track seed.
DemoDataset collect_demonstrations(std::span<const std::uint64_t> track_seeds, env::ModalityId modality,
                                   std::size_t steps_per_track, double lookahead,
                                   const env::TrackParams& track_params = {}, const Exploration& exploration = {});

/// (1/N) sum (f(x) - y)^2.
double empirical_risk(const nn::NetworkSpec& spec, const nn::ParameterSet& params, const DemoDataset& dataset);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

/// Seeded 90/10 split; the validation part is never empty.
Split split_indices(std::size_t n, std::uint64_t seed);

/// Mini-batch SGD from `init` (or a fresh Xavier init seeded by config.seed).
TrainResult train_bc(const nn::NetworkSpec& spec, const DemoDataset& dataset, const TrainConfig& config,
                     const std::optional<nn::ParameterSet>& init = std::nullopt);

/// Seed used for a fresh initialization in train_bc.
std::uint64_t init_seed(const TrainConfig& config);

/// JSON lines: a header record then one {"x": [...], "y": ...} per demo.
std::string demos_to_jsonl(const DemoDataset& dataset, const std::string& config_hash = {});
DemoDataset demos_from_jsonl(std::string_view text);

}  // namespace fedimit::imitation

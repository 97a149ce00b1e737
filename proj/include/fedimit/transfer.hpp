#pragma once

// Layer transfer: start local training from a guide model with its feature
// layers frozen, and compare against training the same network from scratch.

#include "fedimit/env.hpp"
#include "fedimit/imitation.hpp"
#include "fedimit/nn.hpp"

#include <span>
#include <string>
#include <vector>

namespace fedimit::transfer {

struct FineTuneResult {
    nn::ParameterSet params;
    std::vector<double> loss_curve;
    double final_risk = 0.0;
};

/// train_bc from `guide` with config.frozen_prefix leading layers frozen and
/// the learning rate scaled by `lr_multiplier`. Throws SpecError when the
/// guide was not built for `spec` or the prefix differs from
/// spec.feature_prefix_len.
FineTuneResult fine_tune(const nn::ParameterSet& guide, const nn::NetworkSpec& spec,
                         const imitation::DemoDataset& local_dataset, const imitation::TrainConfig& config,
                         double lr_multiplier = 1.0);

struct EvalSetup {
    std::span<const env::Track> tracks;
    std::size_t steps = 600;
    int severity = 0;
    std::uint64_t seed = 0;
    env::EvalThresholds thresholds;
};

struct TransferReport {
    env::ModalityId modality = env::ModalityId::sem;
    std::vector<double> transferred_curve;
    std::vector<double> scratch_curve;
    double transferred_final = 0.0;
    double scratch_final = 0.0;
    nn::ParameterSet transferred_params;
    nn::ParameterSet scratch_params;
    env::Metrics metrics_transferred;
    env::Metrics metrics_scratch;
};

/// Closed-loop metrics of `params` averaged over the eval tracks.
env::Metrics evaluate_params(const nn::NetworkSpec& spec, const nn::ParameterSet& params, env::ModalityId modality,
                             const EvalSetup& eval);

/// Transferred leg (fine_tune from guide) and scratch leg (fresh init,
/// nothing frozen) with the same data, config and seed, both evaluated on the
/// eval tracks. `threads` > 1 runs the legs concurrently.
TransferReport compare_transfer(const nn::ParameterSet& guide, const nn::NetworkSpec& spec,
                                const imitation::DemoDataset& local_dataset, const EvalSetup& eval,
                                const imitation::TrainConfig& config, double lr_multiplier = 1.0,
                                std::size_t threads = 1);

/// Scratch config used by compare_transfer: same as `config` with nothing frozen.
imitation::TrainConfig scratch_config(const imitation::TrainConfig& config);

std::string report_to_json(const TransferReport& report, const std::string& config_hash = {});
TransferReport report_from_json(std::string_view text);
/// epoch, transferred, scratch.
std::string curves_to_csv(const TransferReport& report, const std::string& config_hash = {});

}  // namespace fedimit::transfer

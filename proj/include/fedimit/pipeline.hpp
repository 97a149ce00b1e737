#pragma once

// Experiment orchestration: the config file, one function per stage, stage
// stamps, and run-all.

#include "fedimit/env.hpp"
#include "fedimit/imitation.hpp"
#include "fedimit/nn.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace fedimit::fusion {
class Cloud;
}

namespace fedimit::pipeline {

struct AgentConfig {
    std::string id;
    env::ModalityId modality = env::ModalityId::sem;
    std::vector<std::uint64_t> track_seeds;
    std::size_t demo_steps = 600;
    imitation::TrainConfig train;
};

struct CloudConfig {
    std::vector<std::uint64_t> track_seeds;
    std::size_t steps = 600;
    /// Guide for the k-th modality (ray, grid, sem order) uses train.seed + k.
    imitation::TrainConfig train;
};

struct LoopSettings {
    std::size_t q = 1;
    std::size_t T = 1;
    /// false: one fusion round on the finished local models (T = q = 1).
    /// true: the tick loop with local training spread over T ticks.
    bool online = false;
};

struct TransferSettings {
    /// Seed for the k-th modality is train.seed + k; frozen_prefix is taken
    /// from the network's feature prefix.
    imitation::TrainConfig train;
    double lr_multiplier = 1.0;
};

struct EvalConfig {
    std::vector<std::uint64_t> track_seeds;
    std::size_t rollout_steps = 600;
    std::vector<int> severities{0, 1, 2, 3, 4};
    std::uint64_t seed = 0;
    env::EvalThresholds thresholds;
};

struct ExperimentConfig {
    std::uint64_t global_seed = 0;
    env::TrackParams track;
    double lookahead = 6.0;
    imitation::Exploration exploration{0.1, 0.95};
    std::vector<std::size_t> hidden{32, 32, 16};
    std::size_t feature_prefix_len = 2;
    std::vector<AgentConfig> agents;
    CloudConfig cloud;
    LoopSettings loop;
    TransferSettings transfer;
    EvalConfig eval;
    std::string output_dir = "fedimit-out";
    std::size_t threads = 1;

    /// Throws ConfigError.
    void validate() const;
    /// SHA-256 of the canonical JSON without output_dir and threads.
    std::string hash() const;
    nn::NetworkSpec spec_for(env::ModalityId m) const;
    const AgentConfig& agent_for(env::ModalityId m) const;
};

/// Three agents (one per modality), 3 tracks x 600 steps each, cloud 6 x 600,
/// 3 eval tracks, 200 epochs; every seed derived from `global_seed`.
ExperimentConfig default_config(std::uint64_t global_seed = 0);

std::string config_to_json(const ExperimentConfig& config);
/// Throws ConfigError on schema violations.
ExperimentConfig config_from_json(std::string_view text);
/// Throws MissingArtifact when the file is absent, ConfigError when invalid.
ExperimentConfig load_config(const std::string& path);

/// The cloud described by `config`: its corpus and guide training setup.
std::unique_ptr<fusion::Cloud> make_cloud(const ExperimentConfig& config, std::size_t threads = 1);

enum class Stage { collect, train_local, fuse, transfer, evaluate, plot };
inline constexpr std::array<Stage, 6> kAllStages{Stage::collect,  Stage::train_local, Stage::fuse,
                                                 Stage::transfer, Stage::evaluate,    Stage::plot};
std::string_view to_string(Stage s);

struct StageOptions {
    bool force = false;
    /// 0 uses config.threads.
    std::size_t threads = 0;
    std::ostream* log = nullptr;
};

struct StageResult {
    bool ran = false;  // false when the stamp matched and nothing was redone
    std::vector<std::string> outputs;  // relative to the output directory
};

/// Throws MissingArtifact naming every absent input.
StageResult run_stage(Stage stage, const ExperimentConfig& config, const StageOptions& options = {});
std::vector<StageResult> run_all(const ExperimentConfig& config, const StageOptions& options = {});

/// Artifact paths relative to the output directory.
namespace paths {
std::string demos(const AgentConfig& a);
std::string local_model(const AgentConfig& a);
std::string local_curve(const AgentConfig& a);
std::string guide_model(env::ModalityId m);
std::string guide_curve(env::ModalityId m);
inline constexpr const char* kFusedLabels = "cloud/fused_labels.csv";
inline constexpr const char* kRecord = "cloud/record.json";
inline constexpr const char* kRounds = "cloud/rounds.csv";
inline constexpr const char* kAudit = "cloud/audit.json";
std::string transfer_report(env::ModalityId m);
std::string transfer_curves(env::ModalityId m);
inline constexpr const char* kSummary = "eval/summary.csv";
inline constexpr const char* kConfigCopy = "config.resolved.json";
}  // namespace paths

struct StoredModel {
    std::string role;  // local | guide
    env::ModalityId modality = env::ModalityId::sem;
    std::string agent_id;
    std::uint64_t guide_version = 0;
    nn::ParameterSet params;
};

std::string model_to_json(const StoredModel& m, const nn::NetworkSpec& spec, const std::string& config_hash);
/// Checks the params against `spec`. Throws DecodeError / SpecError.
StoredModel model_from_json(std::string_view text, const nn::NetworkSpec& spec);

/// The four controllers of the summary table.
inline constexpr std::array<const char*, 4> kControllers{"local", "guide", "transferred", "scratch"};

struct SummaryRow {
    env::ModalityId modality = env::ModalityId::sem;
    std::string controller;
    int severity = 0;
    env::Metrics metrics;
};

/// Parses eval/summary.csv (the comment line is skipped).
std::vector<SummaryRow> read_summary(std::string_view csv);

}  // namespace fedimit::pipeline

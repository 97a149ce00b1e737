#pragma once

// The cloud: a multimodal scene corpus pseudo-labelled with the median of the
// private models' suggestions, per-modality guide models distilled from those
// labels, and the tick loop that drives uploads and fusion rounds.

#include "fedimit/env.hpp"
#include "fedimit/imitation.hpp"
#include "fedimit/nn.hpp"

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedimit::fusion {

/// Counts reads of eval-only expert labels and flags the ones made while a
/// SealGuard is alive anywhere in the process.
class LabelAudit {
public:
    static std::uint64_t reads();
    static std::uint64_t violations();
    static std::uint64_t sealed_sections();
    static bool sealed();
    static void reset();

private:
    friend class SealGuard;
    friend class CloudScene;
    static void record_read();
    static std::atomic<std::uint64_t> reads_;
    static std::atomic<std::uint64_t> violations_;
    static std::atomic<std::uint64_t> sections_;
    static std::atomic<int> depth_;
};

/// While alive, any read of an eval-only label counts as a violation.
class SealGuard {
public:
    SealGuard();
    ~SealGuard();
    SealGuard(const SealGuard&) = delete;
    SealGuard& operator=(const SealGuard&) = delete;
};

/// One world state rendered into every modality.
class CloudScene {
public:
    CloudScene(std::uint64_t scene_id, std::array<env::Observation, 3> observations, double expert_label);

    std::uint64_t scene_id() const { return id_; }
    const env::Observation& observation(env::ModalityId m) const {
        return observations_[static_cast<std::size_t>(m)];
    }
    /// For evaluation and audit exports only. Every call is recorded by LabelAudit.
    double expert_label_eval_only() const;

private:
    std::uint64_t id_;
    std::array<env::Observation, 3> observations_;
    double expert_label_;
};

struct CloudDataset {
    std::vector<CloudScene> scenes;
    std::vector<std::uint64_t> source_tracks;

    std::size_t size() const { return scenes.size(); }
    /// Throws RangeError when empty or scene ids repeat.
    void validate() const;
};

/// Expert rollouts on the cloud's own tracks. Scene ids run from 0 in
/// collection order.
CloudDataset build_cloud_dataset(std::span<const std::uint64_t> track_seeds, std::size_t steps_per_track,
                                 double lookahead, const env::TrackParams& track_params = {},
                                 const imitation::Exploration& exploration = {});

struct RegistryEntry {
    nn::NetworkSpec spec;
    nn::ParameterSet params;
    std::uint64_t version = 0;
    std::string agent_id;
    std::string bytes;  // the parameter envelope exactly as uploaded
};

using PrivateModelRegistry = std::map<env::ModalityId, RegistryEntry>;

struct SceneSuggestions {
    std::uint64_t scene_id = 0;
    std::map<env::ModalityId, double> values;
};

/// forward(theta_m, scene[m]) for every scene and registered modality,
/// clamped to the steering range. Throws SpecError when the registry is empty
/// or a model's input does not match its modality.
std::vector<SceneSuggestions> suggest_labels(const PrivateModelRegistry& registry, const CloudDataset& dataset);

/// Odd count: middle order statistic. Even count: mean of the two central
/// ones. Throws RangeError on an empty or non-finite input.
double fuse_median(std::span<const double> values);

struct FusedEntry {
    std::map<env::ModalityId, double> suggestions;
    double fused = 0.0;
};

using FusedLabelSet = std::map<std::uint64_t, FusedEntry>;

FusedLabelSet fuse_median(std::span<const SceneSuggestions> suggestions);

struct GuideModel {
    nn::NetworkSpec spec;
    nn::ParameterSet params;
    std::vector<double> loss_curve;
    double final_risk = 0.0;
};

struct GuideModelSet {
    std::map<env::ModalityId, GuideModel> models;
    std::uint64_t trained_on_version = 0;
};

struct GuideTraining {
    nn::NetworkSpec spec;
    imitation::TrainConfig config;
};

/// Fresh network per modality fitted to (scene[m], fused label). Throws
/// RangeError when a scene has no fused label. `threads` > 1 trains the
/// modalities concurrently; the result does not depend on it.
GuideModelSet train_guide_models(const CloudDataset& dataset, const FusedLabelSet& fused,
                                 const std::map<env::ModalityId, GuideTraining>& training,
                                 std::size_t threads = 1);

struct ServiceResponse {
    std::string bytes;  // parameter envelope
    std::uint64_t version = 0;
};

struct FusionRound {
    std::uint64_t version = 0;
    std::map<env::ModalityId, std::uint64_t> registry_versions;
    FusedLabelSet fused;
};

/// Cloud state behind one mutex. Fusion rounds are serialized and swap in the
/// new guide set atomically, so a reader sees the whole old or the whole new set.
class Cloud {
public:
    Cloud(CloudDataset dataset, std::map<env::ModalityId, GuideTraining> training, std::size_t threads = 1);

    /// Validates the envelope against the modality's spec and stores it.
    /// Returns the modality's new registry version (1, 2, ...).
    std::uint64_t upload(const std::string& agent_id, env::ModalityId modality, const std::string& bytes);

    /// Suggest, fuse and retrain guides from the current registry. Throws
    /// NotReady while the registry is empty.
    FusionRound run_fusion_round();

    /// Latest guide for `modality`. Throws NotReady before the first round and
    /// SpecError for a modality the cloud does not train.
    ServiceResponse handle_service_request(env::ModalityId modality) const;

    /// True when every trainable modality has an upload newer than the last round.
    bool fresh_upload_set() const;

    PrivateModelRegistry registry() const;
    std::shared_ptr<const GuideModelSet> guides() const;
    std::shared_ptr<const FusedLabelSet> fused() const;
    std::uint64_t guide_version() const;
    const CloudDataset& dataset() const { return dataset_; }
    const std::map<env::ModalityId, GuideTraining>& training() const { return training_; }

private:
    CloudDataset dataset_;
    std::map<env::ModalityId, GuideTraining> training_;
    std::size_t threads_;

    mutable std::mutex state_mutex_;
    std::mutex round_mutex_;
    PrivateModelRegistry registry_;
    std::map<env::ModalityId, std::uint64_t> fused_versions_;
    std::shared_ptr<const GuideModelSet> guides_;
    std::shared_ptr<const FusedLabelSet> fused_;
    std::map<env::ModalityId, std::string> guide_bytes_;
};

/// How agents reach the cloud. DirectLink calls the object; netproto adds
/// transports that go through the wire format.
class CloudLink {
public:
    virtual ~CloudLink() = default;
    virtual std::uint64_t upload(const std::string& agent_id, env::ModalityId modality, const std::string& bytes) = 0;
    /// nullopt when the cloud has no guide yet.
    virtual std::optional<ServiceResponse> request_guide(env::ModalityId modality) = 0;
};

class DirectLink : public CloudLink {
public:
    explicit DirectLink(Cloud& cloud) : cloud_(cloud) {}
    std::uint64_t upload(const std::string& agent_id, env::ModalityId modality, const std::string& bytes) override;
    std::optional<ServiceResponse> request_guide(env::ModalityId modality) override;

private:
    Cloud& cloud_;
};

struct Agent {
    std::string id;
    nn::NetworkSpec spec;
    imitation::DemoDataset dataset;
    imitation::TrainConfig config;  // config.epochs is the total over the whole loop
    std::optional<nn::ParameterSet> params;
    std::size_t epochs_done = 0;
    std::vector<double> loss_curve;
    double final_risk = 0.0;
};

struct LoopConfig {
    std::size_t q = 1;
    std::size_t T = 1;
};

struct LoopEvent {
    std::size_t tick = 0;
    std::string kind;  // train | upload | fusion | service | not_ready
    std::string agent_id;
    std::string modality;
    std::uint64_t version = 0;
    double value = 0.0;  // validation risk for train, guide version for service

    friend bool operator==(const LoopEvent&, const LoopEvent&) = default;
};

struct RoundSummary {
    std::size_t tick = 0;
    std::uint64_t version = 0;
    /// Audit numbers, computed after the round from eval-only labels.
    double fused_mse = 0.0;
    std::map<env::ModalityId, double> suggestion_mse;
    std::map<env::ModalityId, double> guide_risk;
};

struct ExperimentRecord {
    std::size_t q = 1;
    std::size_t T = 1;
    std::vector<LoopEvent> events;
    std::vector<RoundSummary> rounds;

    std::size_t fusion_count() const { return rounds.size(); }
};

/// Epochs an agent should have completed after tick t: floor(E (t + 1) / T).
std::size_t epochs_after_tick(std::size_t total_epochs, std::size_t T, std::size_t t);

/// The tick loop. Each tick every agent trains up to epochs_after_tick; when
/// t % q == 0 all agents upload, the cloud runs a fusion round and each agent
/// requests its guide. Agents arriving with params and epochs_done already at
/// their total skip training.
ExperimentRecord run_federation_loop(std::vector<Agent>& agents, Cloud& cloud, const LoopConfig& loop,
                                     CloudLink* link = nullptr, std::size_t threads = 1);

/// Per-scene audit numbers computed from eval-only labels.
double fused_label_mse(const CloudDataset& dataset, const FusedLabelSet& fused);
double suggestion_mse(const CloudDataset& dataset, const FusedLabelSet& fused, env::ModalityId modality);

std::string record_to_json(const ExperimentRecord& record, const std::string& config_hash = {});
std::string rounds_to_csv(const ExperimentRecord& record, const std::string& config_hash = {});
/// scene_id, one column per modality suggestion, fused, expert_eval_only.
std::string fused_labels_to_csv(const CloudDataset& dataset, const FusedLabelSet& fused,
                                const std::string& config_hash = {});

}  // namespace fedimit::fusion

#include "fedimit/fusion.hpp"

#include "fedimit/codec.hpp"
#include "fedimit/error.hpp"
#include "fedimit/parallel.hpp"
#include "fedimit/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace fedimit::fusion {

using json = nlohmann::json;

std::atomic<std::uint64_t> LabelAudit::reads_{0};
std::atomic<std::uint64_t> LabelAudit::violations_{0};
std::atomic<std::uint64_t> LabelAudit::sections_{0};
std::atomic<int> LabelAudit::depth_{0};

std::uint64_t LabelAudit::reads() { return reads_.load(); }
std::uint64_t LabelAudit::violations() { return violations_.load(); }
std::uint64_t LabelAudit::sealed_sections() { return sections_.load(); }
bool LabelAudit::sealed() { return depth_.load() > 0; }

void LabelAudit::reset() {
    reads_ = 0;
    violations_ = 0;
    sections_ = 0;
}

void LabelAudit::record_read() {
    ++reads_;
    if (depth_.load() > 0) ++violations_;
}

SealGuard::SealGuard() {
    ++LabelAudit::depth_;
    ++LabelAudit::sections_;
}

SealGuard::~SealGuard() { --LabelAudit::depth_; }

CloudScene::CloudScene(std::uint64_t scene_id, std::array<env::Observation, 3> observations, double expert_label)
    : id_(scene_id), observations_(std::move(observations)), expert_label_(expert_label) {
    for (auto m : env::kAllModalities) {
        const auto& o = observation(m);
        if (o.modality != m || o.values.size() != env::modality_dim(m))
            throw DimensionError("cloud scene observation does not match its modality");
    }
    if (!(std::abs(expert_label) <= env::kMaxSteer)) throw RangeError("cloud scene label out of range");
}

double CloudScene::expert_label_eval_only() const {
    LabelAudit::record_read();
    return expert_label_;
}

void CloudDataset::validate() const {
    if (scenes.empty()) throw RangeError("cloud dataset is empty");
    std::set<std::uint64_t> ids;
    for (const auto& s : scenes)
        if (!ids.insert(s.scene_id()).second) throw RangeError("duplicate scene id " + std::to_string(s.scene_id()));
}

CloudDataset build_cloud_dataset(std::span<const std::uint64_t> track_seeds, std::size_t steps_per_track,
                                 double lookahead, const env::TrackParams& track_params,
                                 const imitation::Exploration& exploration) {
    CloudDataset ds;
    ds.scenes.reserve(track_seeds.size() * steps_per_track);
    std::uint64_t id = 0;
    for (auto seed : track_seeds) {
        const env::Track track = env::generate_track(seed, track_params);
        for (const auto& s : imitation::expert_trajectory(track, steps_per_track, lookahead, exploration,
                                                          derive_seed(seed, "explore"))) {
            std::array<env::Observation, 3> obs;
            for (auto m : env::kAllModalities) obs[static_cast<std::size_t>(m)] = env::observe(track, s.state, m);
            ds.scenes.emplace_back(id++, std::move(obs), s.action);
        }
    }
    ds.source_tracks.assign(track_seeds.begin(), track_seeds.end());
    return ds;
}

std::vector<SceneSuggestions> suggest_labels(const PrivateModelRegistry& registry, const CloudDataset& dataset) {
    if (registry.empty()) throw SpecError("suggest_labels: registry is empty");
    for (const auto& [m, entry] : registry) {
        if (entry.spec.input_dim() != env::modality_dim(m))
            throw SpecError("registry model for " + std::string(env::to_string(m)) + " has the wrong input size");
        entry.params.check_shapes(entry.spec);
    }
    std::vector<SceneSuggestions> out(dataset.size());
    for (std::size_t n = 0; n < dataset.size(); ++n) {
        const auto& scene = dataset.scenes[n];
        out[n].scene_id = scene.scene_id();
        for (const auto& [m, entry] : registry) {
            const double v = nn::forward(entry.spec, entry.params, scene.observation(m).values);
            if (!std::isfinite(v)) throw RangeError("non-finite suggestion");
            out[n].values[m] = std::clamp(v, -env::kMaxSteer, env::kMaxSteer);
        }
    }
    return out;
}

double fuse_median(std::span<const double> values) {
    if (values.empty()) throw RangeError("fuse_median: no suggestions");
    std::vector<double> v(values.begin(), values.end());
    for (double x : v)
        if (!std::isfinite(x)) throw RangeError("fuse_median: non-finite suggestion");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

FusedLabelSet fuse_median(std::span<const SceneSuggestions> suggestions) {
    FusedLabelSet out;
    std::vector<double> buf;
    for (const auto& s : suggestions) {
        buf.clear();
        for (const auto& [m, v] : s.values) buf.push_back(v);
        FusedEntry e{s.values, fuse_median(buf)};
        if (!out.emplace(s.scene_id, std::move(e)).second)
            throw RangeError("fuse_median: duplicate scene id " + std::to_string(s.scene_id));
    }
    return out;
}

GuideModelSet train_guide_models(const CloudDataset& dataset, const FusedLabelSet& fused,
                                 const std::map<env::ModalityId, GuideTraining>& training, std::size_t threads) {
    std::vector<double> labels;
    labels.reserve(dataset.size());
    for (const auto& scene : dataset.scenes) {
        const auto it = fused.find(scene.scene_id());
        if (it == fused.end()) throw RangeError("no fused label for scene " + std::to_string(scene.scene_id()));
        labels.push_back(it->second.fused);
    }

    std::vector<env::ModalityId> modalities;
    for (const auto& [m, t] : training) modalities.push_back(m);
    std::vector<GuideModel> models(modalities.size());
    parallel_for(modalities.size(), threads, [&](std::size_t k) {
        const auto m = modalities[k];
        const auto& t = training.at(m);
        imitation::DemoDataset ds;
        ds.modality = m;
        ds.demos.reserve(dataset.size());
        for (std::size_t n = 0; n < dataset.size(); ++n)
            ds.demos.push_back({dataset.scenes[n].observation(m), labels[n]});
        ds.source_tracks = dataset.source_tracks;
        auto r = imitation::train_bc(t.spec, ds, t.config);
        models[k] = {t.spec, std::move(r.params), std::move(r.loss_curve), r.final_risk};
    });

    GuideModelSet out;
    for (std::size_t k = 0; k < modalities.size(); ++k) out.models.emplace(modalities[k], std::move(models[k]));
    return out;
}

Cloud::Cloud(CloudDataset dataset, std::map<env::ModalityId, GuideTraining> training, std::size_t threads)
    : dataset_(std::move(dataset)), training_(std::move(training)), threads_(threads) {
    dataset_.validate();
    if (training_.empty()) throw SpecError("cloud needs at least one modality");
    for (const auto& [m, t] : training_) {
        t.spec.validate();
        if (t.spec.input_dim() != env::modality_dim(m))
            throw SpecError("guide spec for " + std::string(env::to_string(m)) + " has the wrong input size");
    }
}

std::uint64_t Cloud::upload(const std::string& agent_id, env::ModalityId modality, const std::string& bytes) {
    const auto t = training_.find(modality);
    if (t == training_.end()) throw SpecError("cloud does not accept " + std::string(env::to_string(modality)));
    nn::ParameterSet params = nn::deserialize_params(bytes, t->second.spec);
    std::lock_guard lock(state_mutex_);
    auto& entry = registry_[modality];
    entry.spec = t->second.spec;
    entry.params = std::move(params);
    entry.agent_id = agent_id;
    entry.bytes = bytes;
    return ++entry.version;
}

FusionRound Cloud::run_fusion_round() {
    std::lock_guard round(round_mutex_);
    PrivateModelRegistry snapshot;
    {
        std::lock_guard lock(state_mutex_);
        snapshot = registry_;
    }
    if (snapshot.empty()) throw NotReady("no private models uploaded yet");

    std::map<env::ModalityId, GuideTraining> wanted;
    for (const auto& [m, e] : snapshot) wanted.emplace(m, training_.at(m));

    FusionRound result;
    GuideModelSet guides;
    {
        SealGuard seal;
        const auto suggestions = suggest_labels(snapshot, dataset_);
        result.fused = fuse_median(suggestions);
        guides = train_guide_models(dataset_, result.fused, wanted, threads_);
    }
    std::map<env::ModalityId, std::string> bytes;
    for (const auto& [m, g] : guides.models) bytes[m] = nn::serialize_params(g.params);

    std::lock_guard lock(state_mutex_);
    result.version = (guides_ ? guides_->trained_on_version : 0) + 1;
    guides.trained_on_version = result.version;
    for (const auto& [m, e] : snapshot) result.registry_versions[m] = e.version;
    fused_versions_ = result.registry_versions;
    guides_ = std::make_shared<const GuideModelSet>(std::move(guides));
    fused_ = std::make_shared<const FusedLabelSet>(result.fused);
    guide_bytes_ = std::move(bytes);
    return result;
}

ServiceResponse Cloud::handle_service_request(env::ModalityId modality) const {
    if (!training_.count(modality)) throw SpecError("cloud has no guide for " + std::string(env::to_string(modality)));
    std::lock_guard lock(state_mutex_);
    if (!guides_) throw NotReady("no fusion round has run yet");
    const auto it = guide_bytes_.find(modality);
    if (it == guide_bytes_.end())
        throw NotReady("no guide trained for " + std::string(env::to_string(modality)) + " yet");
    return {it->second, guides_->trained_on_version};
}

bool Cloud::fresh_upload_set() const {
    std::lock_guard lock(state_mutex_);
    for (const auto& [m, t] : training_) {
        const auto it = registry_.find(m);
        if (it == registry_.end()) return false;
        const auto f = fused_versions_.find(m);
        if (f != fused_versions_.end() && it->second.version <= f->second) return false;
    }
    return true;
}

PrivateModelRegistry Cloud::registry() const {
    std::lock_guard lock(state_mutex_);
    return registry_;
}

std::shared_ptr<const GuideModelSet> Cloud::guides() const {
    std::lock_guard lock(state_mutex_);
    return guides_;
}

std::shared_ptr<const FusedLabelSet> Cloud::fused() const {
    std::lock_guard lock(state_mutex_);
    return fused_;
}

std::uint64_t Cloud::guide_version() const {
    std::lock_guard lock(state_mutex_);
    return guides_ ? guides_->trained_on_version : 0;
}

std::uint64_t DirectLink::upload(const std::string& agent_id, env::ModalityId modality, const std::string& bytes) {
    return cloud_.upload(agent_id, modality, bytes);
}

std::optional<ServiceResponse> DirectLink::request_guide(env::ModalityId modality) {
    try {
        return cloud_.handle_service_request(modality);
    } catch (const NotReady&) {
        return std::nullopt;
    }
}

std::size_t epochs_after_tick(std::size_t total_epochs, std::size_t T, std::size_t t) {
    if (T == 0) throw RangeError("T must be positive");
    return total_epochs * std::min(t + 1, T) / T;
}

double fused_label_mse(const CloudDataset& dataset, const FusedLabelSet& fused) {
    double acc = 0.0;
    for (const auto& scene : dataset.scenes) {
        const double d = fused.at(scene.scene_id()).fused - scene.expert_label_eval_only();
        acc += d * d;
    }
    return acc / static_cast<double>(dataset.size());
}

double suggestion_mse(const CloudDataset& dataset, const FusedLabelSet& fused, env::ModalityId modality) {
    double acc = 0.0;
    for (const auto& scene : dataset.scenes) {
        const double d = fused.at(scene.scene_id()).suggestions.at(modality) - scene.expert_label_eval_only();
        acc += d * d;
    }
    return acc / static_cast<double>(dataset.size());
}

ExperimentRecord run_federation_loop(std::vector<Agent>& agents, Cloud& cloud, const LoopConfig& loop,
                                     CloudLink* link, std::size_t threads) {
    if (loop.q == 0 || loop.T == 0) throw RangeError("federation loop needs q >= 1 and T >= 1");
    DirectLink direct(cloud);
    if (!link) link = &direct;

    ExperimentRecord rec;
    rec.q = loop.q;
    rec.T = loop.T;
    for (std::size_t t = 0; t < loop.T; ++t) {
        std::vector<std::optional<LoopEvent>> trained(agents.size());
        parallel_for(agents.size(), threads, [&](std::size_t i) {
            Agent& a = agents[i];
            const std::size_t target = std::max(a.epochs_done, epochs_after_tick(a.config.epochs, loop.T, t));
            if (a.params && a.epochs_done == target) return;
            imitation::TrainConfig cfg = a.config;
            cfg.epochs = target - a.epochs_done;
            cfg.start_epoch = a.config.start_epoch + a.epochs_done;
            auto r = imitation::train_bc(a.spec, a.dataset, cfg, a.params);
            a.params = std::move(r.params);
            a.loss_curve.insert(a.loss_curve.end(), r.loss_curve.begin(), r.loss_curve.end());
            a.final_risk = r.final_risk;
            a.epochs_done = target;
            trained[i] = LoopEvent{t, "train", a.id, std::string(env::to_string(a.dataset.modality)),
                                   static_cast<std::uint64_t>(a.epochs_done), r.final_risk};
        });
        for (auto& e : trained)
            if (e) rec.events.push_back(std::move(*e));

        if (t % loop.q != 0) continue;

        for (const auto& a : agents) {
            const auto m = a.dataset.modality;
            const auto v = link->upload(a.id, m, nn::serialize_params(*a.params));
            rec.events.push_back({t, "upload", a.id, std::string(env::to_string(m)), v, 0.0});
        }
        const FusionRound round = cloud.run_fusion_round();
        rec.events.push_back({t, "fusion", "cloud", "", round.version, static_cast<double>(round.version)});

        RoundSummary summary;
        summary.tick = t;
        summary.version = round.version;
        summary.fused_mse = fused_label_mse(cloud.dataset(), round.fused);
        for (const auto& [m, v] : round.registry_versions)
            summary.suggestion_mse[m] = suggestion_mse(cloud.dataset(), round.fused, m);
        if (auto g = cloud.guides())
            for (const auto& [m, model] : g->models) summary.guide_risk[m] = model.final_risk;
        rec.rounds.push_back(std::move(summary));

        for (const auto& a : agents) {
            const auto m = a.dataset.modality;
            const auto reply = link->request_guide(m);
            if (reply)
                rec.events.push_back({t, "service", a.id, std::string(env::to_string(m)), reply->version,
                                      static_cast<double>(reply->version)});
            else
                rec.events.push_back({t, "not_ready", a.id, std::string(env::to_string(m)), 0, 0.0});
        }
    }
    return rec;
}

namespace {

std::string hash_line(const std::string& config_hash) {
    return config_hash.empty() ? std::string() : "# config_hash=" + config_hash + "\n";
}

}  // namespace

std::string record_to_json(const ExperimentRecord& record, const std::string& config_hash) {
    json events = json::array();
    for (const auto& e : record.events)
        events.push_back({{"tick", e.tick},
                          {"kind", e.kind},
                          {"agent", e.agent_id},
                          {"modality", e.modality},
                          {"version", e.version},
                          {"value", e.value}});
    json rounds = json::array();
    for (const auto& r : record.rounds) {
        json sm = json::object(), gr = json::object();
        for (const auto& [m, v] : r.suggestion_mse) sm[std::string(env::to_string(m))] = v;
        for (const auto& [m, v] : r.guide_risk) gr[std::string(env::to_string(m))] = v;
        rounds.push_back({{"tick", r.tick},
                          {"version", r.version},
                          {"fused_mse", r.fused_mse},
                          {"suggestion_mse", sm},
                          {"guide_risk", gr}});
    }
    json j = {{"schema", "fedimit.record"},
              {"version", 1},
              {"q", record.q},
              {"T", record.T},
              {"fusion_count", record.fusion_count()},
              {"events", events},
              {"rounds", rounds}};
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    return j.dump(2) + "\n";
}

std::string rounds_to_csv(const ExperimentRecord& record, const std::string& config_hash) {
    std::ostringstream os;
    os << hash_line(config_hash);
    os << "round,tick,version,fused_mse";
    for (auto m : env::kAllModalities) os << ",suggestion_mse_" << env::to_string(m);
    for (auto m : env::kAllModalities) os << ",guide_risk_" << env::to_string(m);
    os << '\n';
    for (std::size_t i = 0; i < record.rounds.size(); ++i) {
        const auto& r = record.rounds[i];
        os << i << ',' << r.tick << ',' << r.version << ',' << codec::format_double(r.fused_mse);
        for (auto m : env::kAllModalities) {
            const auto it = r.suggestion_mse.find(m);
            os << ',' << (it == r.suggestion_mse.end() ? "" : codec::format_double(it->second));
        }
        for (auto m : env::kAllModalities) {
            const auto it = r.guide_risk.find(m);
            os << ',' << (it == r.guide_risk.end() ? "" : codec::format_double(it->second));
        }
        os << '\n';
    }
    return os.str();
}

std::string fused_labels_to_csv(const CloudDataset& dataset, const FusedLabelSet& fused,
                                const std::string& config_hash) {
    std::ostringstream os;
    os << hash_line(config_hash);
    os << "scene_id";
    for (auto m : env::kAllModalities) os << ',' << env::to_string(m);
    os << ",fused,expert_eval_only\n";
    for (const auto& scene : dataset.scenes) {
        const auto& e = fused.at(scene.scene_id());
        os << scene.scene_id();
        for (auto m : env::kAllModalities) {
            const auto it = e.suggestions.find(m);
            os << ',' << (it == e.suggestions.end() ? "" : codec::format_double(it->second));
        }
        os << ',' << codec::format_double(e.fused) << ',' << codec::format_double(scene.expert_label_eval_only())
           << '\n';
    }
    return os.str();
}

}  // namespace fedimit::fusion

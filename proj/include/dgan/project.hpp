#pragma once

#include "dgan/annotation.hpp"
#include "dgan/backbone.hpp"
#include "dgan/interpreter.hpp"
#include "dgan/metrics.hpp"
#include "dgan/uncertainty.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <vector>

namespace dgan::project {

inline constexpr int kProjectVersion = 1;
// Id under which the mean-latent bootstrap sample is stored.
inline constexpr std::uint64_t kMeanSampleId = 999999;

// Parameters applied when the next round is proposed; edits never touch
// existing rounds.
struct RoundParams {
    double k_percent = 10.0;
    double band_percent = 10.0;
    std::size_t n_centers = 12;
    std::size_t confirm_target = 6;
    double filter_ratio = 0.10; // carried to synthesis runs launched from the project
};

struct ProjectConfig {
    nlohmann::json backbone{{"kind", "toy"}};
    Task task = Task::segmentation;
    std::optional<LabelSchema> label_schema; // required unless the backbone is the toy
    interpreter::TrainConfig train;
    std::uint64_t pool_seed = 0;
    std::size_t pool_size = 200;
    // Ground-truth evaluation set, used when the backbone provides truth.
    std::uint64_t eval_seed = 100000;
    std::size_t eval_count = 10;
    RoundParams next_round;
};

nlohmann::json to_json(const RoundParams& p);
RoundParams round_params_from_json(const nlohmann::json& j, const RoundParams& base = {});
nlohmann::json to_json(const ProjectConfig& c);
ProjectConfig project_config_from_json(const nlohmann::json& j);

// Project directory layout: project.json, annotations/NNNNNN.json,
// ensembles/round_NNN.dge, rounds/round_NNN.json, metrics.jsonl.
// Methods are safe to call from several threads; mutations are serialised.
class Project {
public:
    // Writes a fresh project and its bootstrap round 0 (the mean-latent sample
    // of the pool). Throws DataError if `dir` already holds a project.
    static void init(const std::filesystem::path& dir, const ProjectConfig& config);
    explicit Project(std::filesystem::path dir);
    ~Project();

    const std::filesystem::path& dir() const noexcept { return dir_; }
    ProjectConfig config() const;
    const LabelSchema& schema() const noexcept { return schema_; }
    const backbone::Backbone& backbone() const noexcept { return *backbone_; }

    std::size_t round_count() const;
    annotation::RoundState round(std::size_t index) const;

    backbone::GeneratedSample candidate(std::size_t round, std::uint64_t id) const;
    // Most recent ensemble, if any round has been trained.
    std::shared_ptr<const interpreter::InterpreterEnsemble> ensemble() const;
    std::vector<std::uint8_t> candidate_image_png(std::size_t round, std::uint64_t id) const;
    std::vector<std::uint8_t> overlay_png(std::size_t round, std::uint64_t id) const;
    // Throws DataError when no ensemble exists yet.
    uncertainty::UncertaintyReport candidate_uncertainty(std::size_t round, std::uint64_t id) const;

    void accept(std::size_t round, std::uint64_t id);
    void skip(std::size_t round, std::uint64_t id);
    // Validates, rasterises and stores the record; returns the stored record.
    annotation::AnnotationRecord submit(std::size_t round, annotation::AnnotationRecord record);
    std::optional<annotation::AnnotationRecord> annotation_of(std::uint64_t id) const;
    LabelMask annotation_mask(std::uint64_t id) const;

    std::size_t annotated_count() const;
    // Trains on every annotation so far, scores the pool with the new ensemble
    // and opens the next round. Returns its index. Throws DataError with code
    // no_annotations when there is nothing to train on.
    std::size_t retrain(std::size_t workers = 0);

    std::vector<metrics::MetricRecord> metrics_history() const;
    RoundParams next_round_params() const;
    void set_next_round_params(const RoundParams& params);

private:
    void save_round_locked(std::size_t index) const;
    void save_config_locked() const;
    backbone::GeneratedSample candidate_locked(std::size_t round, std::uint64_t id) const;

    std::filesystem::path dir_;
    ProjectConfig config_;
    LabelSchema schema_;
    std::unique_ptr<backbone::Backbone> backbone_;
    std::vector<annotation::RoundState> rounds_;
    std::shared_ptr<const interpreter::InterpreterEnsemble> ensemble_;
    mutable std::shared_mutex mutex_;
    std::mutex retrain_mutex_;
};

} // namespace dgan::project

#pragma once

#include "dgan/image.hpp"
#include "dgan/interpreter.hpp"
#include "dgan/schema.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dgan::metrics {

// Rows are ground truth, columns prediction.
struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::size_t classes = 0) : classes(classes), counts(classes * classes, 0) {}
    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
    std::uint64_t total() const;
    void add(const LabelMask& pred, const LabelMask& truth);
};

ConfusionMatrix confusion(const LabelMask& pred, const LabelMask& truth, std::size_t classes);

struct MiouResult {
    std::vector<std::optional<double>> per_label; // empty when the label is absent from both masks
    double mean = 0.0;
};

MiouResult miou_from_confusion(const ConfusionMatrix& cm, bool ignore_background = false);
// Throws DataError on resolution mismatch or labels outside the schema.
MiouResult miou(const LabelMask& pred, const LabelMask& truth, const LabelSchema& schema, bool ignore_background = false);
// Accumulated over many pairs: one confusion matrix for the whole set.
MiouResult miou(std::span<const LabelMask> preds, std::span<const LabelMask> truths, const LabelSchema& schema,
                bool ignore_background = false);

struct PckConfig {
    std::vector<double> thresholds{5, 10, 15, 25}; // percent of the longer image side
};

struct KeypointImage {
    std::vector<Keypoint> pred;
    std::vector<Keypoint> truth;
    std::size_t height = 0;
    std::size_t width = 0;
};

// Percentage of truth keypoints within (t / 100) * max(h, w) of the
// same-named prediction, per threshold.
std::vector<double> pck(std::span<const KeypointImage> images, const PckConfig& config);
std::vector<double> pck(const std::vector<Keypoint>& pred, const std::vector<Keypoint>& truth, std::size_t height,
                        std::size_t width, const PckConfig& config);

// Mean over pixels and keypoints of squared differences.
double l2_heatmap(std::span<const interpreter::Heatmap> pred, std::span<const interpreter::Heatmap> truth);

struct FoldResult {
    double mean = 0.0;
    double std = 0.0;                    // population
    std::vector<std::size_t> picks;      // checkpoint chosen per fold
    std::vector<double> fold_scores;     // held-out metric per fold
};

// `evaluate(checkpoint, image indices)` returns the metric of a checkpoint on
// an image subset. Images split into five contiguous folds; each fold picks
// the best checkpoint (ties: lowest index) and scores it on the other four.
FoldResult five_fold_select(std::size_t images, std::size_t checkpoints,
                            const std::function<double(std::size_t, std::span<const std::size_t>)>& evaluate);
// Per-image scores scores[checkpoint][image]; subset metric = mean score.
FoldResult five_fold_select(const std::vector<std::vector<double>>& scores);

struct MetricRecord {
    std::string dataset;
    std::string metric;
    double value = 0.0;
    double std = 0.0;
};

nlohmann::json to_json(const MetricRecord& r);
MetricRecord metric_record_from_json(const nlohmann::json& j);
void append_metric_records(const std::filesystem::path& path, std::span<const MetricRecord> records);
std::vector<MetricRecord> read_metric_records(const std::filesystem::path& path);

} // namespace dgan::metrics

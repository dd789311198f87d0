#pragma once

#include "dgan/interpreter.hpp"

#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <vector>

namespace dgan::uncertainty {

// Throws DataError unless entries are finite, non-negative and sum to 1
// within 1e-9.
void check_distribution(std::span<const double> d);

// -sum p log p with 0 log 0 = 0; `base` e gives nats.
double entropy(std::span<const double> d, double base = std::numbers::e);

// H(mean of p_t) - mean of H(p_t), clamped to [0, log N].
double js_divergence(std::span<const std::span<const double>> dists, double base = std::numbers::e);
double js_divergence(const std::vector<std::vector<double>>& dists, double base = std::numbers::e);
// `members` consecutive distributions of `classes` entries each.
double js_divergence_flat(std::span<const double> flat, std::size_t members, std::size_t classes,
                          double base = std::numbers::e);

struct UncertaintyReport {
    std::uint64_t id = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixel_js; // row-major
    double image_score = 0.0;
};

// Per-pixel JS of the member softmax distributions, summed over the image.
UncertaintyReport score_image(std::uint64_t id, const interpreter::SegmentationPrediction& prediction,
                              double base = std::numbers::e);
// Heat-head extension, off unless asked for: per-pixel variance of member
// heat values summed over keypoints, then over the image.
UncertaintyReport score_heat_variance(std::uint64_t id, const interpreter::KeypointPrediction& prediction);

struct ScoredId {
    std::uint64_t id = 0;
    double score = 0.0;
};

struct FilterResult {
    std::vector<std::uint64_t> kept;    // input order
    std::vector<std::uint64_t> dropped; // most uncertain first
};

// Number of samples the filter drops from n.
std::size_t drop_count(std::size_t n, double ratio);

// Drops the ceil(ratio * n) highest scores; among equal scores the higher id
// goes first. Throws ConfigError unless 0 <= ratio < 1.
FilterResult filter_by_uncertainty(std::span<const ScoredId> scores, double ratio);
FilterResult filter_by_uncertainty(std::span<const UncertaintyReport> reports, double ratio);

// One JSON object per line: {"id", "image_score", "kept"}.
void write_uncertainty_log(const std::filesystem::path& path, std::span<const ScoredId> scores,
                           const FilterResult& result);

} // namespace dgan::uncertainty

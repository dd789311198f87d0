#pragma once

#include "dgan/backbone.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace dgan::selection {

struct PoolEntry {
    std::uint64_t id = 0;
    std::vector<double> embedding; // mean-pooled pixel features
    double image_score = 0.0;
    std::optional<std::vector<double>> latent;
};

// Mean-pooled features of the sample, widened to double.
std::vector<double> embedding_of(const backbone::GeneratedSample& sample);

// Throws DataError on an empty pool, duplicate ids, ragged or non-finite
// embeddings.
void check_pool(std::span<const PoolEntry> pool);

// Greedy max-min selection under Euclidean distance starting from seed_id;
// distance ties go to the lower id.
std::vector<std::uint64_t> kcenter_greedy(std::span<const PoolEntry> pool, std::size_t n, std::uint64_t seed_id,
                                          std::size_t workers = 0);

// Largest distance from any pool entry to its nearest center.
double covering_radius(std::span<const PoolEntry> pool, std::span<const std::uint64_t> centers);

struct SelectionRound {
    std::size_t index = 0;
    double k_percent = 10.0;
    double band_percent = 10.0;
    std::size_t n_centers = 12;
    std::size_t confirm_target = 6;
    std::vector<std::uint64_t> discarded; // top k%, most uncertain first
    std::vector<std::uint64_t> band;      // next band_percent, most uncertain first
    std::uint64_t seed_id = 0;
    std::vector<std::uint64_t> chosen;    // kcenter order
    std::vector<std::uint64_t> confirmed; // human picks, subset of chosen
};

// Ranks by image_score (ties: higher id ranks as more uncertain), drops the
// top k%, runs kcenter_greedy on the following band seeded at the band's
// lowest score (ties: lower id).
SelectionRound propose_batch(std::span<const PoolEntry> pool, double k_percent = 10.0, double band_percent = 10.0,
                             std::size_t n_centers = 12, std::size_t workers = 0);

// Mean of the pool latents, carried under `id`. Throws DataError when an
// entry has no latent.
backbone::LatentCode first_round_seed(std::span<const PoolEntry> pool, std::uint64_t id);

inline constexpr int kRoundSchemaVersion = 1;

nlohmann::json to_json(const SelectionRound& round);
SelectionRound round_from_json(const nlohmann::json& j);
void save_round(const SelectionRound& round, const std::filesystem::path& path);
SelectionRound load_round(const std::filesystem::path& path);

} // namespace dgan::selection

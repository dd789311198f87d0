#pragma once

#include "dgan/backbone.hpp"
#include "dgan/interpreter.hpp"
#include "dgan/uncertainty.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dgan::factory {

inline constexpr int kManifestVersion = 1;

struct SynthesisOptions {
    std::size_t count = 1;
    double filter_ratio = 0.10;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir;
    std::size_t workers = 0;
    // Keypoint task only: score by member heat variance instead of leaving
    // every score at zero.
    bool heat_variance = false;
    // Stop after this many pairs and leave a resumable manifest.
    std::optional<std::size_t> stop_after;
};

struct PairRecord {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    std::string image;      // relative to out_dir
    std::string image_sha256;
    std::string annotation; // mask PNG or keypoint record
    std::string annotation_sha256;
    double image_score = 0.0;
    std::optional<bool> kept; // unset until the filter has run
    double wall_ms = 0.0;
};

struct DatasetManifest {
    LabelSchema schema;
    nlohmann::json backbone;
    std::string backbone_hash;
    std::string ensemble_hash;
    std::size_t requested = 0;
    double filter_ratio = 0.0;
    std::uint64_t seed = 0;
    bool heat_variance = false;
    bool complete = false;
    std::size_t next_index = 0; // resume token: first seed offset not yet written
    std::string created_at;
    std::vector<PairRecord> pairs;

    std::size_t kept_count() const;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
// Manifest JSON with timing fields removed, for byte comparisons.
nlohmann::json without_timing(nlohmann::json manifest);

std::filesystem::path manifest_path(const std::filesystem::path& out_dir);
DatasetManifest load_manifest(const std::filesystem::path& out_dir);
std::string backbone_hash(const backbone::Backbone& bb);
std::string pair_stem(std::uint64_t id); // NNNNNN

// Generates seeds seed..seed+count-1, scores each, filters with
// filter_by_uncertainty and writes every pair (dropped ones flagged).
// A write failure leaves a partial manifest and rethrows with the resume
// token in the message.
DatasetManifest synthesize(const backbone::Backbone& bb, const interpreter::InterpreterEnsemble& ensemble,
                           const SynthesisOptions& options);

// Completes a partial manifest in out_dir. Refuses a changed backbone or
// ensemble; a complete manifest is returned untouched.
DatasetManifest resume(const backbone::Backbone& bb, const interpreter::InterpreterEnsemble& ensemble,
                       const std::filesystem::path& out_dir, std::size_t workers = 0);

struct Violation {
    std::string kind; // manifest, count, missing_file, hash, palette, shape, filter, keypoints
    std::optional<std::uint64_t> id;
    std::string message;
};

// Itemised invariant check of a dataset directory. Throws DataError when the
// manifest itself cannot be read.
std::vector<Violation> validate_manifest(const std::filesystem::path& out_dir);

} // namespace dgan::factory

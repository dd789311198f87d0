#pragma once

#include "dgan/error.hpp"
#include "dgan/feature_volume.hpp"
#include "dgan/image.hpp"
#include "dgan/schema.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dgan::backbone {

struct LatentCode {
    std::uint64_t seed = 0;
    std::vector<double> z;

    friend bool operator==(const LatentCode&, const LatentCode&) = default;
};

// z_i ~ N(0, 1) drawn from mt19937_64(seed) through Box-Muller, in order.
LatentCode latent_from_seed(std::uint64_t seed, std::size_t dim);

struct GroundTruth {
    LabelMask mask;
    std::vector<Keypoint> keypoints;
    bool corrupted = false;

    friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct GeneratedSample {
    std::uint64_t id = 0;
    LatentCode latent;
    RgbImage image;
    features::FeatureVolume features;
    std::optional<GroundTruth> truth;
};

struct SizeRange {
    double lo = 0.0;
    double hi = 0.0;
};

// Procedural stand-in for a progressive generator: level l has resolution
// base * 2^l and carries, in channel order,
//   [signed distances: body, part 1..M] [4 coordinate encodings]
//   [style broadcasts] [noise] [constants].
// Style fills whatever the explicit counts leave over.
struct ToyBackboneConfig {
    std::size_t num_levels = 4;
    std::size_t base_height = 8;
    std::size_t base_width = 8;
    std::vector<std::size_t> channels{16, 16, 16, 16};
    std::size_t noise_channels = 2;
    std::size_t constant_channels = 1;
    std::size_t latent_dim = 64;
    std::size_t part_count = 4;
    // Normalised to the image side.
    SizeRange body_radius{0.18, 0.30};
    SizeRange part_radius{0.05, 0.09};
    std::uint64_t style_seed = 0x5eed;
    // Fraction of latents whose geometry channels are degraded.
    double corruption_fraction = 0.0;
    double corruption_shrink = 0.05;
    double corruption_noise = 0.6;

    std::size_t target_height() const { return base_height << (num_levels - 1); }
    std::size_t target_width() const { return base_width << (num_levels - 1); }
    std::size_t dimension() const;
    // Throws ConfigError naming the offending key.
    void validate() const;
};

nlohmann::json to_json(const ToyBackboneConfig& config);
// Unknown keys are rejected.
ToyBackboneConfig toy_config_from_json(const nlohmann::json& j);

// body + parts; keypoint names are the same list minus background.
LabelSchema toy_schema(const ToyBackboneConfig& config, Task task = Task::segmentation);

class Backbone {
public:
    virtual ~Backbone() = default;
    virtual LatentCode latent(std::uint64_t seed) const = 0;
    // Pure: same latent, same sample.
    virtual GeneratedSample generate(const LatentCode& latent) const = 0;
    virtual nlohmann::json descriptor() const = 0;

    GeneratedSample generate_seed(std::uint64_t seed) const { return generate(latent(seed)); }
};

class ToyBackbone final : public Backbone {
public:
    explicit ToyBackbone(ToyBackboneConfig config);

    const ToyBackboneConfig& config() const noexcept { return config_; }
    LatentCode latent(std::uint64_t seed) const override;
    GeneratedSample generate(const LatentCode& latent) const override;
    nlohmann::json descriptor() const override;

private:
    ToyBackboneConfig config_;
    std::vector<std::vector<double>> style_matrix_; // rows: style channel over all levels
};

GeneratedSample toy_generate(const ToyBackboneConfig& config, const LatentCode& latent);

// Applies the toy labelling rule to the finest-level distance channels of a
// pixel feature: the last part with negative distance wins, then the body.
std::uint8_t toy_decode_label(const ToyBackboneConfig& config, std::span<const float> feature);

// ---- .fvd feature dumps ----

enum class DumpErrorKind { io, bad_magic, version_mismatch, truncated, header_mismatch };

class DumpError : public DataError {
public:
    DumpError(DumpErrorKind kind, const std::string& what) : DataError(what), kind_(kind) {}
    DumpErrorKind kind() const noexcept { return kind_; }

private:
    DumpErrorKind kind_;
};

inline constexpr std::uint32_t kDumpVersion = 1;

std::vector<std::uint8_t> encode_feature_dump(const GeneratedSample& sample);
GeneratedSample decode_feature_dump(std::span<const std::uint8_t> bytes);
void write_feature_dump(const GeneratedSample& sample, const std::filesystem::path& path);
GeneratedSample load_feature_dump(const std::filesystem::path& path);

std::string dump_filename(std::uint64_t seed); // NNNNNN.fvd

// Serves externally produced dumps named by seed from one directory.
class DumpBackbone final : public Backbone {
public:
    explicit DumpBackbone(std::filesystem::path dir);

    LatentCode latent(std::uint64_t seed) const override;
    GeneratedSample generate(const LatentCode& latent) const override;
    nlohmann::json descriptor() const override;

private:
    std::filesystem::path dir_;
};

// Rebuilds a backbone from its descriptor: {"kind": "toy", "config": {...}}
// or {"kind": "dumps", "dir": "..."}. Throws ConfigError otherwise.
std::unique_ptr<Backbone> backbone_from_descriptor(const nlohmann::json& descriptor);

} // namespace dgan::backbone

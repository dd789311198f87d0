#pragma once

#include "dgan/backbone.hpp"
#include "dgan/error.hpp"
#include "dgan/feature_volume.hpp"
#include "dgan/image.hpp"
#include "dgan/rng.hpp"
#include "dgan/schema.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace dgan::interpreter {

// A generated sample plus its human annotation: a label mask for the
// segmentation task, a keypoint list for the keypoint task.
struct AnnotatedSample {
    backbone::GeneratedSample sample;
    LabelMask mask;
    std::vector<Keypoint> keypoints;
};

// Throws DataError when the annotation does not fit the sample or schema.
void validate(const AnnotatedSample& annotated, const LabelSchema& schema);

// 4-connected components of equal non-background label.
struct LabeledRegions {
    std::vector<std::vector<std::uint32_t>> pixels; // flat indices y * w + x per region
};
LabeledRegions find_regions(const LabelMask& mask);

struct PixelTarget {
    std::uint8_t label = 0;
    std::vector<double> heat; // keypoint task only, one entry per keypoint
};

struct TrainingPixel {
    features::PixelFeature feature;
    PixelTarget target;
};

// Stratified draw: one uniformly chosen pixel from every labelled region
// (segmentation: connected components; keypoints: the disc of radius 2*sigma
// around each keypoint), then the remainder uniformly with replacement over
// the whole raster.
std::vector<std::uint32_t> sample_pixel_indices(const LabeledRegions& regions, std::size_t pixel_count,
                                                std::size_t batch, Rng& rng);
std::vector<TrainingPixel> sample_pixels(const AnnotatedSample& annotated, const LabelSchema& schema,
                                         std::size_t batch, Rng& rng, double sigma_fraction = 0.02,
                                         features::Upsample mode = features::Upsample::bilinear);

enum class Head : std::uint8_t { logits = 0, heat = 1 };

// Three weight layers, rectifier on the two hidden layers. Weights are stored
// (fan_in x fan_out) so a row-major batch multiplies from the left.
struct MlpParams {
    std::array<Eigen::MatrixXd, 3> weights;
    std::array<Eigen::VectorXd, 3> biases;

    static MlpParams zeros_like(const MlpParams& other);
    std::size_t parameter_count() const;
};

struct MlpClassifier {
    Head head = Head::logits;
    MlpParams params;

    // {D, h1, h2, out}
    std::array<std::size_t, 4> widths() const;
    static MlpClassifier initialise(std::size_t input, std::size_t hidden1, std::size_t hidden2, std::size_t output,
                                    Head head, Rng& rng);
};

// Softmax distribution over labels (logits head) or raw heat per keypoint.
// Throws DataError on dimension mismatch or non-finite input.
std::vector<double> forward(const MlpClassifier& member, std::span<const float> feature);

struct Batch {
    Eigen::MatrixXd x;            // (B x D)
    std::vector<std::uint8_t> labels; // logits head
    Eigen::MatrixXd heat;         // (B x K), heat head
};

// Mean cross-entropy (logits head) or mean squared error over batch and
// keypoints (heat head); fills `grad` with the exact gradient.
double loss_and_gradient(const MlpClassifier& member, const Batch& batch, MlpParams& grad);
double loss(const MlpClassifier& member, const Batch& batch);

struct TrainConfig {
    std::size_t members = 10;
    std::size_t steps = 2000;
    std::size_t batch_pixels = 2048;
    std::array<std::size_t, 2> hidden{256, 128};
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> member_seed_offsets; // empty: 0..members-1
    double sigma_fraction = 0.02;
    features::Upsample upsample = features::Upsample::bilinear;

    std::uint64_t member_seed(std::size_t m) const;
    // Throws ConfigError naming the offending key.
    void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j); // unknown keys rejected

class DivergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

struct InterpreterEnsemble {
    std::vector<MlpClassifier> members;
    LabelSchema schema;
    TrainConfig config;
    std::vector<std::vector<double>> loss_curves; // per member, one entry per step

    std::size_t dimension() const { return members.empty() ? 0 : members.front().widths()[0]; }
    Task task() const { return schema.task; }
};

// Members train independently (own seed, own pixel draws) and may run in
// parallel; the result does not depend on the worker count.
InterpreterEnsemble train_ensemble(const std::vector<AnnotatedSample>& annotated, const LabelSchema& schema,
                                   const TrainConfig& config, std::size_t workers = 0);

// Per-pixel, per-member class distributions, pixel-major:
// probs[(pixel * members + member) * classes + class].
struct SegmentationPrediction {
    LabelMask mask;
    std::size_t members = 0;
    std::size_t classes = 0;
    std::vector<double> probs;

    std::span<const double> distribution(std::size_t pixel, std::size_t member) const {
        return {probs.data() + (pixel * members + member) * classes, classes};
    }
};

// Majority vote of member argmaxes; ties go to the lowest label index.
std::uint8_t majority_vote(std::span<const std::uint32_t> votes_per_label);

// Batched inference in 32-bit arithmetic over row blocks; softmax in 64-bit.
SegmentationPrediction predict_segmentation(const InterpreterEnsemble& ensemble, const features::FeatureVolume& volume,
                                            std::size_t workers = 0);

struct Heatmap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

// exp(-((px - x)^2 + (py - y)^2) / (2 sigma^2)) at integer pixel coordinates.
Heatmap gaussian_heatmap(double x, double y, std::size_t height, std::size_t width, double sigma);

struct KeypointPrediction {
    std::vector<Heatmap> heatmaps;
    std::vector<std::vector<Heatmap>> member_heatmaps; // [member][keypoint], clamped
    std::vector<Keypoint> locations;
};

// Mean of member heat outputs, each clamped to [0, 1]; location is the
// first maximum in row-major order.
KeypointPrediction predict_keypoints(const InterpreterEnsemble& ensemble, const features::FeatureVolume& volume,
                                     std::size_t workers = 0);
Keypoint heatmap_argmax(const Heatmap& map, const std::string& name);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const InterpreterEnsemble& ensemble);
InterpreterEnsemble decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const InterpreterEnsemble& ensemble, const std::filesystem::path& path);
InterpreterEnsemble load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_hash(const InterpreterEnsemble& ensemble);

} // namespace dgan::interpreter

#pragma once

#include "dgan/image.hpp"
#include "dgan/schema.hpp"
#include "dgan/selection.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dgan::annotation {

// Polygon coordinates live in continuous image space: pixel (x, y) covers
// [x, x+1) x [y, y+1) and is sampled at its center. Keypoints use pixel-center
// coordinates as elsewhere.
struct Point {
    double x = 0.0;
    double y = 0.0;
};

struct Polygon {
    std::string label;
    std::vector<Point> points;
};

struct AnnotationRecord {
    std::uint64_t sample_id = 0;
    std::string annotator;
    std::vector<Polygon> polygons; // painted in order, later on top
    std::vector<Keypoint> keypoints;
    std::string created_at;
    std::string mask_sha256; // filled by the service
};

// Throws DataError naming the violated rule: polygon_vertices,
// vertex_bounds, unknown_label, keypoint_bounds, unknown_keypoint.
void validate(const AnnotationRecord& record, std::size_t height, std::size_t width, const LabelSchema& schema);

nlohmann::json to_json(const AnnotationRecord& r);
AnnotationRecord record_from_json(const nlohmann::json& j);

inline constexpr std::int64_t kSubpixel = 256;

// Rounds to the nearest 1/256 pixel, ties away from zero.
std::int64_t snap(double v);

// Even-odd fill of each polygon at pixel centers after snapping, in record
// order, background 0 elsewhere.
LabelMask rasterize(const AnnotationRecord& record, std::size_t height, std::size_t width, const LabelSchema& schema);

enum class Status { proposed, accepted, annotated, skipped };
std::string to_string(Status s);
Status status_from_string(const std::string& s);

struct RoundState {
    selection::SelectionRound round;
    std::map<std::uint64_t, Status> status;
    // Candidates that do not come from a seed, such as the mean-latent sample.
    std::map<std::uint64_t, std::vector<double>> latents;
    std::string ensemble_hash; // ensemble that scored this round's pool, empty for round 0
    std::vector<std::uint64_t> trained_on;

    std::size_t count(Status s) const;
    // accepted + annotated
    std::size_t accepted_total() const;
    bool complete() const; // every accepted candidate annotated, at least one annotated
};

RoundState start_round(selection::SelectionRound round);

// Forward-only transitions. Throws TransitionError with a reason code.
class TransitionError : public DataError {
public:
    TransitionError(std::string code, const std::string& what) : DataError(what), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

void accept(RoundState& state, std::uint64_t id);   // proposed -> accepted, limited by confirm_target
void skip(RoundState& state, std::uint64_t id);     // proposed -> skipped
void annotated(RoundState& state, std::uint64_t id); // accepted -> annotated (re-annotation allowed)

nlohmann::json to_json(const RoundState& s);
RoundState round_state_from_json(const nlohmann::json& j);

} // namespace dgan::annotation

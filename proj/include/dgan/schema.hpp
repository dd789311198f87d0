#pragma once

#include "dgan/image.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace dgan {

enum class Task { segmentation, keypoints };

// Ordered label set. Index 0 is background. For the keypoint task the
// keypoint names are names[1..].
struct LabelSchema {
    std::vector<std::string> names;
    std::vector<Rgb> palette;
    Task task = Task::segmentation;

    std::size_t size() const noexcept { return names.size(); }
    std::size_t keypoint_count() const noexcept { return names.empty() ? 0 : names.size() - 1; }
    // Index of `name`, or names.size() when absent.
    std::size_t index_of(const std::string& name) const;
    // Throws ConfigError on duplicate names, empty list or palette length mismatch.
    void validate() const;

    friend bool operator==(const LabelSchema&, const LabelSchema&) = default;
};

std::string to_string(Task task);
Task task_from_string(const std::string& text);

nlohmann::json to_json(const LabelSchema& schema);
LabelSchema schema_from_json(const nlohmann::json& j);

} // namespace dgan

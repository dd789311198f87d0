#include "dgan/schema.hpp"

#include "dgan/error.hpp"

#include <set>

namespace dgan {

std::size_t LabelSchema::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return i;
    }
    return names.size();
}

void LabelSchema::validate() const {
    if (names.empty()) throw ConfigError("schema.names", "label list is empty");
    if (names.size() > 256) throw ConfigError("schema.names", "more than 256 labels");
    if (palette.size() != names.size()) throw ConfigError("schema.palette", "palette length differs from label count");
    std::set<std::string> seen;
    for (const auto& n : names) {
        if (!seen.insert(n).second) throw ConfigError("schema.names", "duplicate label '" + n + "'");
    }
}

std::string to_string(Task task) { return task == Task::segmentation ? "segmentation" : "keypoints"; }

Task task_from_string(const std::string& text) {
    if (text == "segmentation") return Task::segmentation;
    if (text == "keypoints") return Task::keypoints;
    throw ConfigError("task", "unknown task '" + text + "'");
}

nlohmann::json to_json(const LabelSchema& schema) {
    nlohmann::json palette = nlohmann::json::array();
    for (const auto& c : schema.palette) palette.push_back({c[0], c[1], c[2]});
    return {{"names", schema.names}, {"palette", palette}, {"task", to_string(schema.task)}};
}

LabelSchema schema_from_json(const nlohmann::json& j) {
    LabelSchema s;
    try {
        s.names = j.at("names").get<std::vector<std::string>>();
        for (const auto& c : j.at("palette")) {
            s.palette.push_back({c.at(0).get<std::uint8_t>(), c.at(1).get<std::uint8_t>(), c.at(2).get<std::uint8_t>()});
        }
        s.task = task_from_string(j.at("task").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("schema", e.what());
    }
    s.validate();
    return s;
}

} // namespace dgan

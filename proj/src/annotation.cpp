#include "dgan/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace dgan::annotation {

namespace {

[[noreturn]] void reject(const std::string& code, const std::string& what) { throw TransitionError(code, what); }

} // namespace

void validate(const AnnotationRecord& r, std::size_t height, std::size_t width, const LabelSchema& schema) {
    const double w = static_cast<double>(width);
    const double h = static_cast<double>(height);
    for (std::size_t i = 0; i < r.polygons.size(); ++i) {
        const auto& p = r.polygons[i];
        const std::string where = "polygon " + std::to_string(i);
        if (p.points.size() < 3) reject("polygon_vertices", where + " has fewer than 3 vertices");
        const auto label = schema.index_of(p.label);
        if (label >= schema.size()) reject("unknown_label", where + " uses label '" + p.label + "' outside the schema");
        for (const auto& pt : p.points) {
            if (!(pt.x >= 0.0 && pt.y >= 0.0 && pt.x <= w && pt.y <= h)) {
                reject("vertex_bounds", where + " has a vertex outside the " + std::to_string(width) + "x" +
                                            std::to_string(height) + " image");
            }
        }
    }
    std::set<std::string> seen;
    for (const auto& k : r.keypoints) {
        const auto idx = schema.index_of(k.name);
        if (idx == 0 || idx >= schema.size()) reject("unknown_keypoint", "keypoint '" + k.name + "' is not in the schema");
        if (!seen.insert(k.name).second) reject("unknown_keypoint", "keypoint '" + k.name + "' given twice");
        if (!(k.x >= 0.0 && k.y >= 0.0 && k.x <= w - 1.0 && k.y <= h - 1.0)) {
            reject("keypoint_bounds", "keypoint '" + k.name + "' lies outside the image");
        }
    }
}

nlohmann::json to_json(const AnnotationRecord& r) {
    nlohmann::json polys = nlohmann::json::array();
    for (const auto& p : r.polygons) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& pt : p.points) pts.push_back({pt.x, pt.y});
        polys.push_back({{"label", p.label}, {"points", pts}});
    }
    nlohmann::json kps = nlohmann::json::array();
    for (const auto& k : r.keypoints) kps.push_back({{"name", k.name}, {"x", k.x}, {"y", k.y}});
    return {{"sample_id", r.sample_id}, {"annotator", r.annotator}, {"polygons", polys},
            {"keypoints", kps},         {"created_at", r.created_at}, {"mask_sha256", r.mask_sha256}};
}

AnnotationRecord record_from_json(const nlohmann::json& j) {
    try {
        AnnotationRecord r;
        j.at("sample_id").get_to(r.sample_id);
        r.annotator = j.value("annotator", "");
        r.created_at = j.value("created_at", "");
        r.mask_sha256 = j.value("mask_sha256", "");
        for (const auto& p : j.value("polygons", nlohmann::json::array())) {
            Polygon poly;
            p.at("label").get_to(poly.label);
            for (const auto& pt : p.at("points")) {
                if (!pt.is_array() || pt.size() != 2) throw DataError("polygon point must be [x, y]");
                poly.points.push_back({pt[0].get<double>(), pt[1].get<double>()});
            }
            r.polygons.push_back(std::move(poly));
        }
        for (const auto& k : j.value("keypoints", nlohmann::json::array())) {
            r.keypoints.push_back({k.at("name").get<std::string>(), k.at("x").get<double>(), k.at("y").get<double>()});
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("annotation record: ") + e.what());
    }
}

std::int64_t snap(double v) { return static_cast<std::int64_t>(std::llround(v * kSubpixel)); }

namespace {

std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
    // b > 0
    return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

// Fills one polygon. A pixel center is inside when an odd number of edges
// cross its row strictly to the right of it; an edge covers rows whose
// center lies in [min y, max y).
void fill(const std::vector<std::pair<std::int64_t, std::int64_t>>& v, std::uint8_t label, LabelMask& mask) {
    const auto w = static_cast<std::int64_t>(mask.width);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(w) + 1);
    for (std::size_t y = 0; y < mask.height; ++y) {
        const std::int64_t py = static_cast<std::int64_t>(y) * kSubpixel + kSubpixel / 2;
        std::fill(counts.begin(), counts.end(), 0);
        bool any = false;
        for (std::size_t i = 0; i < v.size(); ++i) {
            auto [x0, y0] = v[i];
            auto [x1, y1] = v[(i + 1) % v.size()];
            if ((y0 > py) == (y1 > py)) continue;
            if (y1 < y0) {
                std::swap(x0, x1);
                std::swap(y0, y1);
            }
            // Crossing at x0 + (py - y0)(x1 - x0) / (y1 - y0) = num / den.
            const std::int64_t den = y1 - y0;
            const std::int64_t num = x0 * den + (py - y0) * (x1 - x0);
            // Pixels x with center 256x + 128 < num / den.
            const std::int64_t k = std::clamp<std::int64_t>(ceil_div(num - (kSubpixel / 2) * den, kSubpixel * den), 0, w);
            ++counts[static_cast<std::size_t>(k)];
            any = true;
        }
        if (!any) continue;
        std::int64_t parity = 0;
        for (std::int64_t x = w - 1; x >= 0; --x) {
            parity += counts[static_cast<std::size_t>(x) + 1];
            if (parity & 1) mask.at(static_cast<std::size_t>(x), y) = label;
        }
    }
}

} // namespace

LabelMask rasterize(const AnnotationRecord& record, std::size_t height, std::size_t width, const LabelSchema& schema) {
    validate(record, height, width, schema);
    LabelMask mask(height, width);
    for (const auto& p : record.polygons) {
        std::vector<std::pair<std::int64_t, std::int64_t>> v;
        for (const auto& pt : p.points) v.emplace_back(snap(pt.x), snap(pt.y));
        fill(v, static_cast<std::uint8_t>(schema.index_of(p.label)), mask);
    }
    return mask;
}

std::string to_string(Status s) {
    switch (s) {
    case Status::proposed: return "proposed";
    case Status::accepted: return "accepted";
    case Status::annotated: return "annotated";
    case Status::skipped: return "skipped";
    }
    return "proposed";
}

Status status_from_string(const std::string& s) {
    if (s == "proposed") return Status::proposed;
    if (s == "accepted") return Status::accepted;
    if (s == "annotated") return Status::annotated;
    if (s == "skipped") return Status::skipped;
    throw DataError("unknown candidate status '" + s + "'");
}

std::size_t RoundState::count(Status s) const {
    return static_cast<std::size_t>(std::count_if(status.begin(), status.end(), [&](const auto& kv) { return kv.second == s; }));
}

std::size_t RoundState::accepted_total() const { return count(Status::accepted) + count(Status::annotated); }

bool RoundState::complete() const { return count(Status::annotated) > 0 && count(Status::accepted) == 0; }

RoundState start_round(selection::SelectionRound round) {
    RoundState s;
    for (auto id : round.chosen) s.status[id] = Status::proposed;
    s.round = std::move(round);
    return s;
}

namespace {

Status& status_of(RoundState& s, std::uint64_t id) {
    const auto it = s.status.find(id);
    if (it == s.status.end()) reject("not_a_candidate", "sample " + std::to_string(id) + " is not a candidate of this round");
    return it->second;
}

} // namespace

void accept(RoundState& s, std::uint64_t id) {
    auto& st = status_of(s, id);
    if (st == Status::accepted || st == Status::annotated) return;
    if (st != Status::proposed) reject("invalid_transition", "sample " + std::to_string(id) + " was skipped");
    if (s.accepted_total() >= s.round.confirm_target) {
        reject("accept_limit", "round already has " + std::to_string(s.round.confirm_target) + " accepted candidates");
    }
    st = Status::accepted;
    s.round.confirmed.push_back(id);
}

void skip(RoundState& s, std::uint64_t id) {
    auto& st = status_of(s, id);
    if (st == Status::skipped) return;
    if (st != Status::proposed) {
        reject("invalid_transition", "sample " + std::to_string(id) + " is " + to_string(st) + " and cannot be skipped");
    }
    st = Status::skipped;
}

void annotated(RoundState& s, std::uint64_t id) {
    auto& st = status_of(s, id);
    if (st != Status::accepted && st != Status::annotated) {
        reject("not_accepted", "sample " + std::to_string(id) + " must be accepted before it is annotated");
    }
    st = Status::annotated;
}

nlohmann::json to_json(const RoundState& s) {
    nlohmann::json status = nlohmann::json::object();
    for (const auto& [id, st] : s.status) status[std::to_string(id)] = to_string(st);
    nlohmann::json latents = nlohmann::json::object();
    for (const auto& [id, z] : s.latents) latents[std::to_string(id)] = z;
    return {{"round", selection::to_json(s.round)},
            {"status", status},
            {"latents", latents},
            {"ensemble_hash", s.ensemble_hash},
            {"trained_on", s.trained_on}};
}

RoundState round_state_from_json(const nlohmann::json& j) {
    try {
        RoundState s;
        s.round = selection::round_from_json(j.at("round"));
        for (const auto& [k, v] : j.at("status").items()) s.status[std::stoull(k)] = status_from_string(v.get<std::string>());
        for (const auto& [k, v] : j.at("latents").items()) s.latents[std::stoull(k)] = v.get<std::vector<double>>();
        j.at("ensemble_hash").get_to(s.ensemble_hash);
        j.at("trained_on").get_to(s.trained_on);
        for (auto id : s.round.chosen) {
            if (!s.status.contains(id)) throw DataError("round state: candidate " + std::to_string(id) + " has no status");
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("round state: ") + e.what());
    } catch (const std::logic_error& e) {
        throw DataError(std::string("round state: bad candidate id: ") + e.what());
    }
}

} // namespace dgan::annotation

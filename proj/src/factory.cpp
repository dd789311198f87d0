#include "dgan/factory.hpp"

#include "dgan/hash.hpp"
#include "dgan/image.hpp"
#include "dgan/lock.hpp"
#include "dgan/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <map>
#include <set>
#include <sstream>

namespace dgan::factory {

using interpreter::InterpreterEnsemble;

std::size_t DatasetManifest::kept_count() const {
    return static_cast<std::size_t>(
        std::count_if(pairs.begin(), pairs.end(), [](const PairRecord& p) { return p.kept.value_or(false); }));
}

std::string pair_stem(std::uint64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06llu", static_cast<unsigned long long>(id));
    return buf;
}

std::filesystem::path manifest_path(const std::filesystem::path& out_dir) { return out_dir / "manifest.json"; }

std::string backbone_hash(const backbone::Backbone& bb) { return sha256_hex(bb.descriptor().dump()); }

nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : m.pairs) {
        pairs.push_back({{"id", p.id},
                         {"seed", p.seed},
                         {"image", p.image},
                         {"image_sha256", p.image_sha256},
                         {"annotation", p.annotation},
                         {"annotation_sha256", p.annotation_sha256},
                         {"image_score", p.image_score},
                         {"kept", p.kept ? nlohmann::json(*p.kept) : nlohmann::json(nullptr)},
                         {"wall_ms", p.wall_ms}});
    }
    return {{"schema_version", kManifestVersion},
            {"label_schema", to_json(m.schema)},
            {"backbone", m.backbone},
            {"backbone_hash", m.backbone_hash},
            {"ensemble_hash", m.ensemble_hash},
            {"requested", m.requested},
            {"filter_ratio", m.filter_ratio},
            {"seed", m.seed},
            {"heat_variance", m.heat_variance},
            {"complete", m.complete},
            {"resume_token", m.complete ? nlohmann::json(nullptr) : nlohmann::json{{"next_index", m.next_index}}},
            {"created_at", m.created_at},
            {"pairs", pairs}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema_version").get<int>() != kManifestVersion) {
            throw DataError("manifest: unsupported schema_version " + j.at("schema_version").dump());
        }
        DatasetManifest m;
        m.schema = schema_from_json(j.at("label_schema"));
        m.backbone = j.at("backbone");
        j.at("backbone_hash").get_to(m.backbone_hash);
        j.at("ensemble_hash").get_to(m.ensemble_hash);
        j.at("requested").get_to(m.requested);
        j.at("filter_ratio").get_to(m.filter_ratio);
        j.at("seed").get_to(m.seed);
        j.at("heat_variance").get_to(m.heat_variance);
        j.at("complete").get_to(m.complete);
        if (!m.complete) j.at("resume_token").at("next_index").get_to(m.next_index);
        else m.next_index = m.requested;
        j.at("created_at").get_to(m.created_at);
        for (const auto& p : j.at("pairs")) {
            PairRecord r;
            p.at("id").get_to(r.id);
            p.at("seed").get_to(r.seed);
            p.at("image").get_to(r.image);
            p.at("image_sha256").get_to(r.image_sha256);
            p.at("annotation").get_to(r.annotation);
            p.at("annotation_sha256").get_to(r.annotation_sha256);
            p.at("image_score").get_to(r.image_score);
            if (!p.at("kept").is_null()) r.kept = p.at("kept").get<bool>();
            p.at("wall_ms").get_to(r.wall_ms);
            m.pairs.push_back(std::move(r));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
}

nlohmann::json without_timing(nlohmann::json manifest) {
    manifest.erase("created_at");
    for (auto& p : manifest["pairs"]) p.erase("wall_ms");
    return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& out_dir) {
    const auto path = manifest_path(out_dir);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("manifest " + path.string() + ": " + e.what());
    }
    return manifest_from_json(j);
}

namespace {

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& out_dir) {
    write_text_file(manifest_path(out_dir), to_json(m).dump(1) + "\n");
}

std::string keypoint_record(const interpreter::KeypointPrediction& pred) {
    std::string text;
    for (std::size_t k = 0; k < pred.locations.size(); ++k) {
        const auto& loc = pred.locations[k];
        const double peak = pred.heatmaps[k].at(static_cast<std::size_t>(loc.x), static_cast<std::size_t>(loc.y));
        text += nlohmann::json{{"name", loc.name}, {"x", loc.x}, {"y", loc.y}, {"peak", peak}}.dump() + "\n";
    }
    return text;
}

PairRecord make_pair(const backbone::Backbone& bb, const InterpreterEnsemble& e, const DatasetManifest& m,
                     std::uint64_t seed, const std::filesystem::path& out_dir) {
    const auto start = std::chrono::steady_clock::now();
    const auto sample = bb.generate_seed(seed);
    if (sample.features.dimension() != e.dimension()) {
        throw DataError("backbone produces D=" + std::to_string(sample.features.dimension()) + " but the ensemble expects D=" +
                        std::to_string(e.dimension()));
    }
    PairRecord r;
    r.id = sample.id;
    r.seed = seed;
    const auto stem = pair_stem(r.id);
    r.image = "images/" + stem + ".png";
    const auto image_bytes = encode_png_rgb(sample.image);
    write_file(out_dir / r.image, image_bytes);
    r.image_sha256 = sha256_hex(image_bytes);
    if (e.task() == Task::segmentation) {
        const auto pred = interpreter::predict_segmentation(e, sample.features, 1);
        r.image_score = uncertainty::score_image(r.id, pred).image_score;
        r.annotation = "masks/" + stem + ".png";
        const auto mask_bytes = encode_png_indexed(pred.mask, m.schema.palette);
        write_file(out_dir / r.annotation, mask_bytes);
        r.annotation_sha256 = sha256_hex(mask_bytes);
    } else {
        const auto pred = interpreter::predict_keypoints(e, sample.features, 1);
        r.image_score = m.heat_variance ? uncertainty::score_heat_variance(r.id, pred).image_score : 0.0;
        r.annotation = "keypoints/" + stem + ".txt";
        const auto text = keypoint_record(pred);
        write_text_file(out_dir / r.annotation, text);
        r.annotation_sha256 = sha256_hex(text);
    }
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return r;
}

std::vector<uncertainty::ScoredId> scores_of(const DatasetManifest& m) {
    std::vector<uncertainty::ScoredId> s;
    for (const auto& p : m.pairs) s.push_back({p.id, p.image_score});
    return s;
}

// Generates pairs from m.next_index up to `stop`, then filters if finished.
void run(const backbone::Backbone& bb, const InterpreterEnsemble& e, DatasetManifest& m,
         const std::filesystem::path& out_dir, std::size_t stop, std::size_t workers) {
    for (const char* sub : {"images", "masks", "keypoints"}) std::filesystem::create_directories(out_dir / sub);
    constexpr std::size_t chunk = 256;
    while (m.next_index < stop) {
        const std::size_t begin = m.next_index;
        const std::size_t end = std::min(stop, begin + chunk);
        std::vector<std::optional<PairRecord>> records(end - begin);
        std::string failure;
        try {
            parallel_for(
                end - begin, [&](std::size_t i) { records[i] = make_pair(bb, e, m, m.seed + begin + i, out_dir); },
                workers);
        } catch (const Error& ex) {
            failure = ex.what();
        }
        for (auto& r : records) {
            if (!r) break;
            m.pairs.push_back(std::move(*r));
            ++m.next_index;
        }
        if (!failure.empty()) {
            try {
                save_manifest(m, out_dir);
            } catch (const Error&) {
            }
            throw DataError(failure + " (partial manifest written; resume token next_index=" + std::to_string(m.next_index) +
                            ")");
        }
    }
    if (m.next_index < m.requested) {
        save_manifest(m, out_dir);
        return;
    }
    const auto scores = scores_of(m);
    const auto result = uncertainty::filter_by_uncertainty(scores, m.filter_ratio);
    const std::set<std::uint64_t> kept(result.kept.begin(), result.kept.end());
    for (auto& p : m.pairs) p.kept = kept.contains(p.id);
    uncertainty::write_uncertainty_log(out_dir / "uncertainty.log", scores, result);
    m.complete = true;
    save_manifest(m, out_dir);
}

} // namespace

DatasetManifest synthesize(const backbone::Backbone& bb, const InterpreterEnsemble& e, const SynthesisOptions& o) {
    if (o.count == 0) throw ConfigError("count", "must be positive");
    uncertainty::drop_count(o.count, o.filter_ratio);
    if (o.out_dir.empty()) throw ConfigError("out", "output directory required");
    if (e.members.empty()) throw DataError("synthesize: ensemble has no members");
    DirectoryLock lock(o.out_dir);
    DatasetManifest m;
    m.schema = e.schema;
    m.backbone = bb.descriptor();
    m.backbone_hash = backbone_hash(bb);
    m.ensemble_hash = interpreter::checkpoint_hash(e);
    m.requested = o.count;
    m.filter_ratio = o.filter_ratio;
    m.seed = o.seed;
    m.heat_variance = o.heat_variance;
    m.created_at = utc_now();
    const std::size_t stop = o.stop_after ? std::min(*o.stop_after, o.count) : o.count;
    run(bb, e, m, o.out_dir, stop, o.workers);
    return m;
}

DatasetManifest resume(const backbone::Backbone& bb, const InterpreterEnsemble& e, const std::filesystem::path& out_dir,
                       std::size_t workers) {
    DirectoryLock lock(out_dir);
    auto m = load_manifest(out_dir);
    if (m.complete) return m;
    if (m.backbone_hash != backbone_hash(bb)) throw DataError("resume refused: backbone differs from the manifest");
    if (m.ensemble_hash != interpreter::checkpoint_hash(e)) {
        throw DataError("resume refused: ensemble hash differs from the manifest");
    }
    if (m.pairs.size() != m.next_index) throw DataError("resume refused: resume token disagrees with the pair list");
    run(bb, e, m, out_dir, m.requested, workers);
    return m;
}

std::vector<Violation> validate_manifest(const std::filesystem::path& out_dir) {
    const auto m = load_manifest(out_dir);
    std::vector<Violation> v;
    auto add = [&](std::string kind, std::optional<std::uint64_t> id, std::string msg) {
        v.push_back({std::move(kind), id, std::move(msg)});
    };
    if (!m.complete) add("manifest", std::nullopt, "manifest is partial (next_index " + std::to_string(m.next_index) + ")");
    if (m.complete && m.pairs.size() != m.requested) {
        add("count", std::nullopt,
            "requested " + std::to_string(m.requested) + " pairs, manifest lists " + std::to_string(m.pairs.size()));
    }
    if (m.complete) {
        const std::size_t expected = m.requested - uncertainty::drop_count(m.requested, m.filter_ratio);
        if (m.kept_count() != expected) {
            add("count", std::nullopt,
                "kept " + std::to_string(m.kept_count()) + " pairs, expected " + std::to_string(expected));
        }
        const auto result = uncertainty::filter_by_uncertainty(scores_of(m), m.filter_ratio);
        const std::set<std::uint64_t> kept(result.kept.begin(), result.kept.end());
        for (const auto& p : m.pairs) {
            if (p.kept != kept.contains(p.id)) add("filter", p.id, "kept flag disagrees with the recorded scores");
        }
        if (!std::filesystem::exists(out_dir / "uncertainty.log")) add("missing_file", std::nullopt, "uncertainty.log missing");
    }
    std::set<std::uint64_t> ids;
    for (const auto& p : m.pairs) {
        if (!ids.insert(p.id).second) add("manifest", p.id, "duplicate pair id");
        for (const auto& [rel, hash] : {std::pair{p.image, p.image_sha256}, std::pair{p.annotation, p.annotation_sha256}}) {
            const auto path = out_dir / rel;
            if (!std::filesystem::exists(path)) {
                add("missing_file", p.id, "pair " + std::to_string(p.id) + ": " + rel + " missing");
                continue;
            }
            if (sha256_file(path) != hash) add("hash", p.id, "pair " + std::to_string(p.id) + ": " + rel + " content hash differs");
        }
        const auto ann = out_dir / p.annotation;
        if (!std::filesystem::exists(ann)) continue;
        try {
            if (m.schema.task == Task::segmentation) {
                const auto mask = decode_png_indexed(read_file(ann));
                std::map<int, std::size_t> bad;
                for (auto l : mask.labels) {
                    if (l >= m.schema.size()) ++bad[l];
                }
                for (const auto& [label, count] : bad) {
                    add("palette", p.id,
                        "pair " + std::to_string(p.id) + ": palette index " + std::to_string(label) + " outside schema in " +
                            std::to_string(count) + " pixels");
                }
                const auto img = out_dir / p.image;
                if (std::filesystem::exists(img)) {
                    const auto image = decode_png_rgb(read_file(img));
                    if (image.height != mask.height || image.width != mask.width) {
                        add("shape", p.id, "pair " + std::to_string(p.id) + ": mask and image sizes differ");
                    }
                }
            } else {
                std::istringstream in(read_text_file(ann));
                std::string line;
                std::size_t n = 0;
                while (std::getline(in, line)) {
                    const auto j = nlohmann::json::parse(line);
                    const auto name = j.at("name").get<std::string>();
                    const auto idx = m.schema.index_of(name);
                    if (idx == 0 || idx >= m.schema.size()) {
                        add("keypoints", p.id, "pair " + std::to_string(p.id) + ": unknown keypoint '" + name + "'");
                    }
                    ++n;
                }
                if (n != m.schema.keypoint_count()) {
                    add("keypoints", p.id, "pair " + std::to_string(p.id) + ": expected " +
                                               std::to_string(m.schema.keypoint_count()) + " keypoints, found " + std::to_string(n));
                }
            }
        } catch (const Error& e) {
            add("shape", p.id, "pair " + std::to_string(p.id) + ": " + e.what());
        } catch (const nlohmann::json::exception& e) {
            add("keypoints", p.id, "pair " + std::to_string(p.id) + ": " + e.what());
        }
    }
    return v;
}

} // namespace dgan::factory

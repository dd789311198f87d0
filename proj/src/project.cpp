#include "dgan/project.hpp"

#include "dgan/hash.hpp"
#include "dgan/image.hpp"
#include "dgan/parallel.hpp"
#include "dgan/selection.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <set>

namespace dgan::project {

using annotation::RoundState;
using annotation::Status;
using annotation::TransitionError;

nlohmann::json to_json(const RoundParams& p) {
    return {{"k_percent", p.k_percent},
            {"band_percent", p.band_percent},
            {"n_centers", p.n_centers},
            {"confirm_target", p.confirm_target},
            {"filter_ratio", p.filter_ratio}};
}

RoundParams round_params_from_json(const nlohmann::json& j, const RoundParams& base) {
    if (!j.is_object()) throw ConfigError("next_round", "expected an object");
    RoundParams p = base;
    for (const auto& [k, v] : j.items()) {
        try {
            if (k == "k_percent") v.get_to(p.k_percent);
            else if (k == "band_percent") v.get_to(p.band_percent);
            else if (k == "n_centers") v.get_to(p.n_centers);
            else if (k == "confirm_target") v.get_to(p.confirm_target);
            else if (k == "filter_ratio") v.get_to(p.filter_ratio);
            else throw ConfigError("next_round." + k, "unknown key");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("next_round." + k, e.what());
        }
    }
    if (!(p.k_percent >= 0 && p.band_percent > 0 && p.k_percent + p.band_percent <= 100)) {
        throw ConfigError("next_round.k_percent", "need 0 <= k, band > 0 and k + band <= 100");
    }
    if (p.n_centers == 0) throw ConfigError("next_round.n_centers", "must be positive");
    if (p.confirm_target == 0 || p.confirm_target > p.n_centers) {
        throw ConfigError("next_round.confirm_target", "must lie in [1, n_centers]");
    }
    if (!(p.filter_ratio >= 0 && p.filter_ratio < 1)) throw ConfigError("next_round.filter_ratio", "must lie in [0, 1)");
    return p;
}

nlohmann::json to_json(const ProjectConfig& c) {
    nlohmann::json j{{"schema_version", kProjectVersion},
                     {"backbone", c.backbone},
                     {"task", to_string(c.task)},
                     {"train", interpreter::to_json(c.train)},
                     {"pool_seed", c.pool_seed},
                     {"pool_size", c.pool_size},
                     {"eval_seed", c.eval_seed},
                     {"eval_count", c.eval_count},
                     {"next_round", to_json(c.next_round)}};
    if (c.label_schema) j["label_schema"] = to_json(*c.label_schema);
    return j;
}

ProjectConfig project_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("project", "expected an object");
    static const std::set<std::string> known = {"schema_version", "backbone", "task", "train", "pool_seed", "pool_size",
                                                "eval_seed", "eval_count", "next_round", "label_schema"};
    for (const auto& [k, v] : j.items()) {
        if (!known.contains(k)) throw ConfigError(k, "unknown key");
    }
    if (j.value("schema_version", kProjectVersion) != kProjectVersion) throw ConfigError("schema_version", "unsupported version");
    ProjectConfig c;
    try {
        if (j.contains("backbone")) c.backbone = j.at("backbone");
        if (j.contains("task")) c.task = task_from_string(j.at("task").get<std::string>());
        if (j.contains("train")) c.train = interpreter::train_config_from_json(j.at("train"));
        if (j.contains("pool_seed")) j.at("pool_seed").get_to(c.pool_seed);
        if (j.contains("pool_size")) j.at("pool_size").get_to(c.pool_size);
        if (j.contains("eval_seed")) j.at("eval_seed").get_to(c.eval_seed);
        if (j.contains("eval_count")) j.at("eval_count").get_to(c.eval_count);
        if (j.contains("label_schema")) c.label_schema = schema_from_json(j.at("label_schema"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("project", e.what());
    }
    if (j.contains("next_round")) c.next_round = round_params_from_json(j.at("next_round"));
    if (c.pool_size == 0) throw ConfigError("pool_size", "must be positive");
    if (c.pool_seed <= kMeanSampleId && kMeanSampleId < c.pool_seed + c.pool_size) {
        throw ConfigError("pool_seed", "pool range overlaps the reserved mean-sample id " + std::to_string(kMeanSampleId));
    }
    return c;
}

namespace {

std::string round_file(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "round_%03zu", index);
    return buf;
}

std::string stem(std::uint64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06llu", static_cast<unsigned long long>(id));
    return buf;
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

LabelSchema schema_for(const ProjectConfig& c) {
    if (c.backbone.value("kind", "") == "toy") {
        return backbone::toy_schema(backbone::toy_config_from_json(c.backbone.value("config", nlohmann::json::object())),
                                    c.task);
    }
    if (!c.label_schema) throw ConfigError("label_schema", "required for non-toy backbones");
    auto s = *c.label_schema;
    s.task = c.task;
    return s;
}

[[noreturn]] void not_found(const std::string& what) { throw TransitionError("not_found", what); }

} // namespace

void Project::init(const std::filesystem::path& dir, const ProjectConfig& config) {
    if (std::filesystem::exists(dir / "project.json")) throw DataError(dir.string() + " already holds a project");
    const auto bb = backbone::backbone_from_descriptor(config.backbone);
    schema_for(config).validate();
    for (const char* sub : {"annotations", "ensembles", "rounds"}) std::filesystem::create_directories(dir / sub);

    std::vector<selection::PoolEntry> pool;
    for (std::uint64_t s = config.pool_seed; s < config.pool_seed + config.pool_size; ++s) {
        pool.push_back({s, {0.0}, 0.0, bb->latent(s).z});
    }
    const auto mean = selection::first_round_seed(pool, kMeanSampleId);
    selection::SelectionRound round;
    round.k_percent = config.next_round.k_percent;
    round.band_percent = config.next_round.band_percent;
    round.n_centers = 1;
    round.confirm_target = 1;
    round.seed_id = kMeanSampleId;
    round.chosen = {kMeanSampleId};
    auto state = annotation::start_round(round);
    state.latents[kMeanSampleId] = mean.z;
    write_text_file(dir / "project.json", to_json(config).dump(2) + "\n");
    write_text_file(dir / "rounds" / (round_file(0) + ".json"), to_json(state).dump(2) + "\n");
}

Project::Project(std::filesystem::path dir) : dir_(std::move(dir)) {
    try {
        config_ = project_config_from_json(nlohmann::json::parse(read_text_file(dir_ / "project.json")));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("project.json: " + std::string(e.what()));
    }
    schema_ = schema_for(config_);
    backbone_ = backbone::backbone_from_descriptor(config_.backbone);
    for (std::size_t i = 0;; ++i) {
        const auto path = dir_ / "rounds" / (round_file(i) + ".json");
        if (!std::filesystem::exists(path)) break;
        try {
            rounds_.push_back(annotation::round_state_from_json(nlohmann::json::parse(read_text_file(path))));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(path.string() + ": " + e.what());
        }
    }
    if (rounds_.empty()) throw DataError(dir_.string() + ": no rounds found");
    for (std::size_t i = rounds_.size(); i-- > 0;) {
        const auto path = dir_ / "ensembles" / (round_file(i) + ".dge");
        if (std::filesystem::exists(path)) {
            ensemble_ = std::make_shared<const interpreter::InterpreterEnsemble>(interpreter::load_checkpoint(path));
            break;
        }
    }
}

Project::~Project() = default;

ProjectConfig Project::config() const {
    std::shared_lock lock(mutex_);
    return config_;
}

std::size_t Project::round_count() const {
    std::shared_lock lock(mutex_);
    return rounds_.size();
}

RoundState Project::round(std::size_t index) const {
    std::shared_lock lock(mutex_);
    if (index >= rounds_.size()) not_found("round " + std::to_string(index) + " does not exist");
    return rounds_[index];
}

backbone::GeneratedSample Project::candidate_locked(std::size_t round, std::uint64_t id) const {
    if (round >= rounds_.size()) not_found("round " + std::to_string(round) + " does not exist");
    const auto& r = rounds_[round];
    if (!r.status.contains(id)) not_found("sample " + std::to_string(id) + " is not a candidate of round " + std::to_string(round));
    if (const auto it = r.latents.find(id); it != r.latents.end()) return backbone_->generate({id, it->second});
    return backbone_->generate_seed(id);
}

backbone::GeneratedSample Project::candidate(std::size_t round, std::uint64_t id) const {
    std::shared_lock lock(mutex_);
    return candidate_locked(round, id);
}

std::shared_ptr<const interpreter::InterpreterEnsemble> Project::ensemble() const {
    std::shared_lock lock(mutex_);
    return ensemble_;
}

std::vector<std::uint8_t> Project::candidate_image_png(std::size_t round, std::uint64_t id) const {
    return encode_png_rgb(candidate(round, id).image);
}

std::vector<std::uint8_t> Project::overlay_png(std::size_t round, std::uint64_t id) const {
    const auto sample = candidate(round, id);
    const auto e = ensemble();
    auto image = sample.image;
    if (e && e->task() == Task::segmentation) {
        const auto pred = interpreter::predict_segmentation(*e, sample.features);
        for (std::size_t y = 0; y < image.height; ++y) {
            for (std::size_t x = 0; x < image.width; ++x) {
                const auto label = pred.mask.at(x, y);
                if (label == 0) continue;
                auto* px = image.at(x, y);
                for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>((px[c] + schema_.palette[label][c] + 1) / 2);
            }
        }
    } else if (e) {
        const auto pred = interpreter::predict_keypoints(*e, sample.features);
        for (const auto& k : pred.locations) {
            const auto cx = static_cast<long>(k.x);
            const auto cy = static_cast<long>(k.y);
            const auto& color = schema_.palette[schema_.index_of(k.name)];
            for (long dy = -1; dy <= 1; ++dy) {
                for (long dx = -1; dx <= 1; ++dx) {
                    const long x = cx + dx;
                    const long y = cy + dy;
                    if (x < 0 || y < 0 || x >= static_cast<long>(image.width) || y >= static_cast<long>(image.height)) continue;
                    std::copy(color.begin(), color.end(), image.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)));
                }
            }
        }
    }
    return encode_png_rgb(image);
}

uncertainty::UncertaintyReport Project::candidate_uncertainty(std::size_t round, std::uint64_t id) const {
    const auto sample = candidate(round, id);
    const auto e = ensemble();
    if (!e) throw TransitionError("no_ensemble", "no ensemble has been trained yet");
    if (e->task() == Task::segmentation) return uncertainty::score_image(id, interpreter::predict_segmentation(*e, sample.features));
    return uncertainty::score_heat_variance(id, interpreter::predict_keypoints(*e, sample.features));
}

void Project::save_round_locked(std::size_t index) const {
    write_text_file(dir_ / "rounds" / (round_file(index) + ".json"), to_json(rounds_[index]).dump(2) + "\n");
}

void Project::save_config_locked() const { write_text_file(dir_ / "project.json", to_json(config_).dump(2) + "\n"); }

void Project::accept(std::size_t round, std::uint64_t id) {
    std::unique_lock lock(mutex_);
    if (round >= rounds_.size()) not_found("round " + std::to_string(round) + " does not exist");
    annotation::accept(rounds_[round], id);
    save_round_locked(round);
}

void Project::skip(std::size_t round, std::uint64_t id) {
    std::unique_lock lock(mutex_);
    if (round >= rounds_.size()) not_found("round " + std::to_string(round) + " does not exist");
    annotation::skip(rounds_[round], id);
    save_round_locked(round);
}

annotation::AnnotationRecord Project::submit(std::size_t round, annotation::AnnotationRecord record) {
    std::unique_lock lock(mutex_);
    const auto sample = candidate_locked(round, record.sample_id);
    const auto st = rounds_[round].status.at(record.sample_id);
    if (st != Status::accepted && st != Status::annotated) {
        throw TransitionError("not_accepted", "sample " + std::to_string(record.sample_id) + " must be accepted before it is annotated");
    }
    const auto h = sample.image.height;
    const auto w = sample.image.width;
    annotation::validate(record, h, w, schema_);
    if (schema_.task == Task::segmentation) {
        if (record.polygons.empty()) throw TransitionError("empty_annotation", "segmentation annotations need at least one polygon");
        const auto mask = annotation::rasterize(record, h, w, schema_);
        if (std::all_of(mask.labels.begin(), mask.labels.end(), [](auto l) { return l == 0; })) {
            throw TransitionError("empty_annotation", "polygons cover no pixel centers");
        }
        const auto png = encode_png_indexed(mask, schema_.palette);
        record.mask_sha256 = sha256_hex(png);
        write_file(dir_ / "annotations" / (stem(record.sample_id) + ".png"), png);
    } else if (record.keypoints.empty()) {
        throw TransitionError("empty_annotation", "keypoint annotations need at least one keypoint");
    }
    if (record.created_at.empty()) record.created_at = utc_now();
    auto j = to_json(record);
    j["round"] = round;
    write_text_file(dir_ / "annotations" / (stem(record.sample_id) + ".json"), j.dump(2) + "\n");
    annotation::annotated(rounds_[round], record.sample_id);
    save_round_locked(round);
    return record;
}

std::optional<annotation::AnnotationRecord> Project::annotation_of(std::uint64_t id) const {
    std::shared_lock lock(mutex_);
    const auto path = dir_ / "annotations" / (stem(id) + ".json");
    if (!std::filesystem::exists(path)) return std::nullopt;
    return annotation::record_from_json(nlohmann::json::parse(read_text_file(path)));
}

LabelMask Project::annotation_mask(std::uint64_t id) const {
    std::shared_lock lock(mutex_);
    const auto path = dir_ / "annotations" / (stem(id) + ".png");
    if (!std::filesystem::exists(path)) not_found("sample " + std::to_string(id) + " has no mask");
    return decode_png_indexed(read_file(path));
}

std::size_t Project::annotated_count() const {
    std::shared_lock lock(mutex_);
    std::size_t n = 0;
    for (const auto& r : rounds_) n += r.count(Status::annotated);
    return n;
}

std::size_t Project::retrain(std::size_t workers) {
    std::unique_lock job(retrain_mutex_, std::try_to_lock);
    if (!job.owns_lock()) throw TransitionError("retrain_in_flight", "a retrain is already running");

    std::vector<interpreter::AnnotatedSample> data;
    std::vector<std::uint64_t> ids;
    ProjectConfig config;
    {
        std::shared_lock lock(mutex_);
        config = config_;
        for (std::size_t r = 0; r < rounds_.size(); ++r) {
            for (const auto& [id, st] : rounds_[r].status) {
                if (st != Status::annotated) continue;
                const auto rec = annotation::record_from_json(
                    nlohmann::json::parse(read_text_file(dir_ / "annotations" / (stem(id) + ".json"))));
                auto sample = candidate_locked(r, id);
                interpreter::AnnotatedSample a{std::move(sample), {}, rec.keypoints};
                if (schema_.task == Task::segmentation) {
                    a.mask = annotation::rasterize(rec, a.sample.image.height, a.sample.image.width, schema_);
                }
                data.push_back(std::move(a));
                ids.push_back(id);
            }
        }
    }
    if (data.empty()) throw TransitionError("no_annotations", "retraining needs at least one annotated sample");

    auto ensemble = std::make_shared<interpreter::InterpreterEnsemble>(
        interpreter::train_ensemble(data, schema_, config.train, workers));

    const std::set<std::uint64_t> annotated(ids.begin(), ids.end());
    std::vector<std::uint64_t> pool_ids;
    for (std::uint64_t s = config.pool_seed; s < config.pool_seed + config.pool_size; ++s) {
        if (!annotated.contains(s)) pool_ids.push_back(s);
    }
    std::vector<selection::PoolEntry> pool(pool_ids.size());
    parallel_for(
        pool_ids.size(),
        [&](std::size_t i) {
            const auto sample = backbone_->generate_seed(pool_ids[i]);
            double score = 0.0;
            if (schema_.task == Task::segmentation) {
                score = uncertainty::score_image(sample.id, interpreter::predict_segmentation(*ensemble, sample.features, 1)).image_score;
            } else {
                score = uncertainty::score_heat_variance(sample.id, interpreter::predict_keypoints(*ensemble, sample.features, 1)).image_score;
            }
            pool[i] = {sample.id, selection::embedding_of(sample), score, sample.latent.z};
        },
        workers);
    const auto params = config.next_round;
    auto round = selection::propose_batch(pool, params.k_percent, params.band_percent, params.n_centers, workers);
    round.confirm_target = params.confirm_target;

    std::vector<metrics::MetricRecord> records;
    std::vector<double> per_image;
    for (std::uint64_t s = config.eval_seed; s < config.eval_seed + config.eval_count; ++s) {
        const auto sample = backbone_->generate_seed(s);
        if (!sample.truth) break;
        if (schema_.task == Task::segmentation) {
            const auto pred = interpreter::predict_segmentation(*ensemble, sample.features, workers);
            per_image.push_back(metrics::miou(pred.mask, sample.truth->mask, schema_).mean);
        } else {
            const auto pred = interpreter::predict_keypoints(*ensemble, sample.features, workers);
            per_image.push_back(metrics::pck(pred.locations, sample.truth->keypoints, sample.image.height,
                                             sample.image.width, metrics::PckConfig{{10}})[0]);
        }
    }
    double pool_mean = 0.0;
    for (const auto& p : pool) pool_mean += p.image_score;
    pool_mean /= static_cast<double>(pool.size());

    std::unique_lock lock(mutex_);
    const std::size_t index = rounds_.size();
    round.index = index;
    const std::string dataset = round_file(index);
    if (!per_image.empty()) {
        double mean = 0.0;
        for (double v : per_image) mean += v;
        mean /= static_cast<double>(per_image.size());
        double var = 0.0;
        for (double v : per_image) var += (v - mean) * (v - mean);
        records.push_back({dataset, schema_.task == Task::segmentation ? "miou" : "pck@10", mean,
                           std::sqrt(var / static_cast<double>(per_image.size()))});
    }
    records.push_back({dataset, "pool_mean_image_score", pool_mean, 0.0});
    records.push_back({dataset, "annotated", static_cast<double>(data.size()), 0.0});
    interpreter::save_checkpoint(*ensemble, dir_ / "ensembles" / (dataset + ".dge"));
    metrics::append_metric_records(dir_ / "metrics.jsonl", records);
    auto state = annotation::start_round(std::move(round));
    state.ensemble_hash = interpreter::checkpoint_hash(*ensemble);
    state.trained_on = ids;
    rounds_.push_back(std::move(state));
    save_round_locked(index);
    ensemble_ = std::move(ensemble);
    return index;
}

std::vector<metrics::MetricRecord> Project::metrics_history() const {
    std::shared_lock lock(mutex_);
    return metrics::read_metric_records(dir_ / "metrics.jsonl");
}

RoundParams Project::next_round_params() const {
    std::shared_lock lock(mutex_);
    return config_.next_round;
}

void Project::set_next_round_params(const RoundParams& params) {
    round_params_from_json(to_json(params));
    std::unique_lock lock(mutex_);
    config_.next_round = params;
    save_config_locked();
}

} // namespace dgan::project

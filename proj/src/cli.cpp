#include "dgan/cli.hpp"

#include "dgan/backbone.hpp"
#include "dgan/factory.hpp"
#include "dgan/hash.hpp"
#include "dgan/interpreter.hpp"
#include "dgan/lock.hpp"
#include "dgan/metrics.hpp"
#include "dgan/parallel.hpp"
#include "dgan/project.hpp"
#include "dgan/selection.hpp"
#include "dgan/service.hpp"
#include "dgan/uncertainty.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cmath>
#include <csignal>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <pthread.h>

namespace dgan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

OptionSpec opt(std::string key, Kind kind, json fallback, std::string help, bool required = false) {
    return {std::move(key), kind, std::move(fallback), std::move(help), required};
}

std::vector<CommandSpec> build_commands() {
    const json none;
    std::vector<CommandSpec> c = {
        {"toygen",
         "write toy feature dumps, images and ground-truth annotations",
         {opt("out", Kind::path, none, "output directory", true),
          opt("count", Kind::u64, 16, "number of samples"),
          opt("seed", Kind::u64, 0, "first seed"),
          opt("task", Kind::text, "segmentation", "segmentation or keypoints"),
          opt("backbone_config", Kind::path, none, "toy backbone config (JSON)"),
          opt("corruption", Kind::f64, none, "override the corrupted-latent fraction")}},
        {"annotate-export",
         "export a project's annotated samples as a training directory",
         {opt("project", Kind::path, none, "project directory", true),
          opt("out", Kind::path, none, "output directory", true)}},
        {"train",
         "train an interpreter ensemble on annotated samples",
         {opt("samples", Kind::path, none, "sample directory", true),
          opt("out", Kind::path, none, "output directory", true),
          opt("n", Kind::u64, 10, "ensemble members"),
          opt("seed", Kind::u64, 0, "training seed"),
          opt("steps", Kind::u64, 2000, "optimizer steps per member"),
          opt("batch_pixels", Kind::u64, 2048, "pixels per step"),
          opt("hidden", Kind::u64_list, json::array({256, 128}), "hidden widths"),
          opt("lr", Kind::f64, 1e-3, "learning rate"),
          opt("beta1", Kind::f64, 0.9, "first-moment decay"),
          opt("beta2", Kind::f64, 0.999, "second-moment decay"),
          opt("epsilon", Kind::f64, 1e-8, "optimizer epsilon"),
          opt("member_seed_offsets", Kind::u64_list, json::array(), "per-member seed offsets"),
          opt("sigma_fraction", Kind::f64, 0.02, "keypoint sigma over the longer side"),
          opt("upsample", Kind::text, "bilinear", "bilinear or nearest")}},
        {"synthesize",
         "generate, score and filter an annotated dataset",
         {opt("ensemble", Kind::path, none, "ensemble checkpoint", true),
          opt("out", Kind::path, none, "output directory", true),
          opt("count", Kind::u64, 10000, "pairs to generate"),
          opt("filter", Kind::f64, 0.10, "fraction dropped as most uncertain"),
          opt("seed", Kind::u64, 0, "first seed"),
          opt("backbone", Kind::path, none, "backbone descriptor (JSON); default toy"),
          opt("heat_variance", Kind::boolean, false, "score keypoint pairs by heat variance"),
          opt("resume", Kind::boolean, false, "complete a partial dataset in out"),
          opt("stop_after", Kind::u64, none, "stop after this many pairs")}},
        {"filter",
         "re-apply the uncertainty filter to a dataset at a new ratio",
         {opt("dataset", Kind::path, none, "dataset directory", true),
          opt("out", Kind::path, none, "output directory", true),
          opt("ratio", Kind::f64, 0.10, "fraction dropped")}},
        {"select",
         "propose an active-learning batch from a scored latent pool",
         {opt("ensemble", Kind::path, none, "ensemble checkpoint", true),
          opt("out", Kind::path, none, "output directory", true),
          opt("backbone", Kind::path, none, "backbone descriptor (JSON); default toy"),
          opt("pool_seed", Kind::u64, 0, "first pool seed"),
          opt("pool_size", Kind::u64, 200, "pool size"),
          opt("k", Kind::f64, 10.0, "percent discarded as most uncertain"),
          opt("band", Kind::f64, 10.0, "percent kept as the candidate band"),
          opt("centers", Kind::u64, 12, "candidates proposed"),
          opt("round", Kind::u64, 0, "round index recorded in the file")}},
        {"eval",
         "score ensembles against ground truth with five-fold selection",
         {opt("samples", Kind::path, none, "sample directory with truth", true),
          opt("ensembles", Kind::path_list, none, "ensemble checkpoints", true),
          opt("out", Kind::path, none, "output directory", true),
          opt("dataset", Kind::text, "eval", "dataset name in metric records"),
          opt("ignore_background", Kind::boolean, false, "leave background out of mIoU"),
          opt("thresholds", Kind::f64_list, json::array({5, 10, 15, 25}), "PCK thresholds in percent")}},
        {"serve",
         "serve a project over HTTP",
         {opt("project", Kind::path, none, "project directory"),
          opt("host", Kind::text, "127.0.0.1", "bind address"),
          opt("port", Kind::u64, 8080, "port, 0 for any"),
          opt("init", Kind::boolean, false, "create the project first"),
          opt("project_config", Kind::path, none, "project config used with --init"),
          opt("api_doc", Kind::boolean, false, "print the API document and exit")}},
        {"validate",
         "check a dataset directory against its manifest",
         {opt("dataset", Kind::path, none, "dataset directory", true)}},
    };
    for (auto& cmd : c) cmd.options.push_back(opt("workers", Kind::u64, 0, "worker threads, 0 for DGAN_WORKERS or all cores"));
    return c;
}

std::string kind_name(Kind k) {
    switch (k) {
    case Kind::text: return "a string";
    case Kind::path: return "a path";
    case Kind::u64: return "an unsigned integer";
    case Kind::f64: return "a number";
    case Kind::boolean: return "true or false";
    case Kind::u64_list: return "a list of unsigned integers";
    case Kind::f64_list: return "a list of numbers";
    case Kind::path_list: return "a list of paths";
    }
    return "";
}

std::optional<json> parse_scalar(Kind kind, const std::string& text) {
    switch (kind) {
    case Kind::text:
    case Kind::path:
        return json(text);
    case Kind::u64: {
        if (text.empty() || !std::all_of(text.begin(), text.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
            return std::nullopt;
        try {
            return json(static_cast<std::uint64_t>(std::stoull(text)));
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }
    case Kind::f64: {
        char* end = nullptr;
        const double v = std::strtod(text.c_str(), &end);
        if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v)) return std::nullopt;
        return json(v);
    }
    case Kind::boolean:
        if (text == "true" || text == "1") return json(true);
        if (text == "false" || text == "0") return json(false);
        return std::nullopt;
    default:
        return std::nullopt;
    }
}

Kind element_kind(Kind k) {
    if (k == Kind::u64_list) return Kind::u64;
    if (k == Kind::f64_list) return Kind::f64;
    return Kind::path;
}

bool is_list(Kind k) { return k == Kind::u64_list || k == Kind::f64_list || k == Kind::path_list; }

std::optional<json> parse_flag(Kind kind, const std::string& text) {
    if (!is_list(kind)) return parse_scalar(kind, text);
    json out = json::array();
    if (text.empty()) return out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto v = parse_scalar(element_kind(kind), item);
        if (!v) return std::nullopt;
        out.push_back(*v);
    }
    return out;
}

bool scalar_fits(Kind kind, const json& v) {
    switch (kind) {
    case Kind::text:
    case Kind::path: return v.is_string();
    case Kind::u64: return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    case Kind::f64: return v.is_number() && std::isfinite(v.get<double>());
    case Kind::boolean: return v.is_boolean();
    default: return false;
    }
}

bool fits(Kind kind, const json& v) {
    if (!is_list(kind)) return scalar_fits(kind, v);
    if (!v.is_array()) return false;
    return std::all_of(v.begin(), v.end(), [&](const json& e) { return scalar_fits(element_kind(kind), e); });
}

json load_config_file(const fs::path& path) {
    if (!fs::exists(path)) throw DataError("config: missing input " + path.string());
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("config", path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config", "expected an object");
    if (!j.contains("schema_version")) throw ConfigError("schema_version", "missing");
    if (j["schema_version"] != kConfigVersion)
        throw ConfigError("schema_version", "unsupported version " + j["schema_version"].dump());
    std::set<std::string> names;
    for (const auto& c : commands()) names.insert(c.name);
    for (const auto& [k, v] : j.items()) {
        if (k == "schema_version") continue;
        if (!names.contains(k)) throw ConfigError(k, "unknown key");
        if (!v.is_object()) throw ConfigError(k, "expected an object");
    }
    return j;
}

// ---- shared helpers ----

struct Run {
    const CommandSpec& command;
    json config;    // effective
    json overrides; // flags given on the command line
    std::string config_file;
    std::ostream& out;
    std::ostream& err;

    std::string str(const std::string& k) const { return config.at(k).get<std::string>(); }
    fs::path path(const std::string& k) const { return config.at(k).get<std::string>(); }
    std::uint64_t u64(const std::string& k) const { return config.at(k).get<std::uint64_t>(); }
    double f64(const std::string& k) const { return config.at(k).get<double>(); }
    bool flag(const std::string& k) const { return config.at(k).get<bool>(); }
    bool has(const std::string& k) const { return !config.at(k).is_null(); }
    std::size_t workers() const { return u64("workers"); }
};

fs::path require_file(const Run& run, const std::string& key) {
    const auto p = run.path(key);
    if (!fs::exists(p)) throw DataError(key + ": missing input " + p.string());
    return p;
}

fs::path require_dir(const Run& run, const std::string& key) {
    const auto p = run.path(key);
    if (!fs::is_directory(p)) throw DataError(key + ": missing input directory " + p.string());
    return p;
}

std::string file_hash(const fs::path& p) { return sha256_file(p); }

void write_provenance(const Run& run, const fs::path& out_dir, const json& inputs,
                      const std::vector<std::string>& outputs, json extra = json::object()) {
    json hashes = json::object();
    for (const auto& rel : outputs) hashes[rel] = file_hash(out_dir / rel);
    json p = {{"schema_version", kConfigVersion},
              {"command", run.command.name},
              {"config_file", run.config_file.empty() ? json() : json(run.config_file)},
              {"config_file_sha256", run.config_file.empty() ? json() : json(file_hash(run.config_file))},
              {"effective", run.config},
              {"overrides", run.overrides},
              {"inputs", inputs},
              {"outputs", hashes}};
    for (auto& [k, v] : extra.items()) p[k] = v;
    write_text_file(out_dir / "provenance.json", p.dump(2) + "\n");
}

std::unique_ptr<backbone::Backbone> backbone_of(const Run& run, json& inputs) {
    if (!run.has("backbone")) return std::make_unique<backbone::ToyBackbone>(backbone::ToyBackboneConfig{});
    const auto p = require_file(run, "backbone");
    inputs[p.string()] = file_hash(p);
    json d;
    try {
        d = json::parse(read_text_file(p));
    } catch (const json::exception& e) {
        throw ConfigError("backbone", e.what());
    }
    return backbone::backbone_from_descriptor(d);
}

interpreter::InterpreterEnsemble ensemble_at(const fs::path& p, json& inputs) {
    if (!fs::exists(p)) throw DataError("ensemble: missing input " + p.string());
    inputs[p.string()] = file_hash(p);
    return interpreter::load_checkpoint(p);
}

std::string mask_name(const std::string& stem) { return stem + ".mask.png"; }
std::string keypoint_name(const std::string& stem) { return stem + ".keypoints.json"; }

std::string keypoint_lines(const std::vector<Keypoint>& kps) {
    std::string text;
    for (const auto& k : kps) text += json{{"name", k.name}, {"x", k.x}, {"y", k.y}}.dump() + "\n";
    return text;
}

std::vector<Keypoint> read_keypoint_lines(const fs::path& p) {
    std::vector<Keypoint> kps;
    std::istringstream in(read_text_file(p));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = json::parse(line);
            kps.push_back({j.at("name").get<std::string>(), j.at("x").get<double>(), j.at("y").get<double>()});
        } catch (const json::exception& e) {
            throw DataError(p.string() + ": " + e.what());
        }
    }
    return kps;
}

// Sample directory: schema.json plus, per stem, NNNNNN.fvd and either
// NNNNNN.mask.png or NNNNNN.keypoints.json.
struct SampleSet {
    LabelSchema schema;
    std::vector<std::string> stems;
    std::vector<interpreter::AnnotatedSample> items;
};

void write_sample(const fs::path& dir, const std::string& stem, const backbone::GeneratedSample& sample,
                  const LabelSchema& schema, const LabelMask* mask, const std::vector<Keypoint>* kps,
                  std::vector<std::string>& outputs) {
    const auto dump = stem + ".fvd";
    backbone::write_feature_dump(sample, dir / dump);
    outputs.push_back(dump);
    if (!sample.image.empty()) {
        write_file(dir / (stem + ".png"), encode_png_rgb(sample.image));
        outputs.push_back(stem + ".png");
    }
    if (schema.task == Task::segmentation) {
        write_file(dir / mask_name(stem), encode_png_indexed(*mask, schema.palette));
        outputs.push_back(mask_name(stem));
    } else {
        write_text_file(dir / keypoint_name(stem), keypoint_lines(*kps));
        outputs.push_back(keypoint_name(stem));
    }
}

SampleSet load_samples(const fs::path& dir, json& inputs) {
    SampleSet set;
    const auto schema_file = dir / "schema.json";
    if (!fs::exists(schema_file)) throw DataError("samples: missing input " + schema_file.string());
    inputs[schema_file.string()] = file_hash(schema_file);
    try {
        set.schema = schema_from_json(json::parse(read_text_file(schema_file)));
    } catch (const json::exception& e) {
        throw DataError(schema_file.string() + ": " + e.what());
    }
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".fvd") set.stems.push_back(entry.path().stem().string());
    std::sort(set.stems.begin(), set.stems.end());
    if (set.stems.empty()) throw DataError("samples: no .fvd files in " + dir.string());
    for (const auto& stem : set.stems) {
        interpreter::AnnotatedSample a;
        const auto dump = dir / (stem + ".fvd");
        inputs[dump.string()] = file_hash(dump);
        a.sample = backbone::load_feature_dump(dump);
        const auto h = a.sample.features.target_height(), w = a.sample.features.target_width();
        if (set.schema.task == Task::segmentation) {
            const auto m = dir / mask_name(stem);
            if (!fs::exists(m)) throw DataError("samples: no annotation for " + stem + " (" + m.string() + ")");
            inputs[m.string()] = file_hash(m);
            a.mask = decode_png_indexed(read_file(m));
        } else {
            const auto k = dir / keypoint_name(stem);
            if (!fs::exists(k)) throw DataError("samples: no annotation for " + stem + " (" + k.string() + ")");
            inputs[k.string()] = file_hash(k);
            a.keypoints = read_keypoint_lines(k);
            a.mask = LabelMask(h, w);
        }
        interpreter::validate(a, set.schema);
        set.items.push_back(std::move(a));
    }
    return set;
}

// ---- subcommands ----

int cmd_toygen(const Run& run) {
    json inputs = json::object();
    backbone::ToyBackboneConfig cfg;
    if (run.has("backbone_config")) {
        const auto p = require_file(run, "backbone_config");
        inputs[p.string()] = file_hash(p);
        try {
            cfg = backbone::toy_config_from_json(json::parse(read_text_file(p)));
        } catch (const json::exception& e) {
            throw ConfigError("backbone_config", e.what());
        }
    }
    if (run.has("corruption")) cfg.corruption_fraction = run.f64("corruption");
    Task task;
    try {
        task = task_from_string(run.str("task"));
    } catch (const Error&) {
        throw ConfigError("task", "expected segmentation or keypoints, got " + run.str("task"));
    }
    const backbone::ToyBackbone bb(cfg);
    const auto schema = backbone::toy_schema(cfg, task);
    const auto out = run.path("out");
    fs::create_directories(out);
    DirectoryLock lock(out);

    std::vector<std::string> outputs = {"schema.json", "backbone.json"};
    write_text_file(out / "schema.json", to_json(schema).dump(2) + "\n");
    write_text_file(out / "backbone.json", bb.descriptor().dump(2) + "\n");
    const auto count = run.u64("count");
    const auto seed = run.u64("seed");
    std::vector<std::vector<std::string>> written(count);
    parallel_for(
        count,
        [&](std::size_t i) {
            const auto sample = bb.generate_seed(seed + i);
            write_sample(out, factory::pair_stem(seed + i), sample, schema, &sample.truth->mask,
                         &sample.truth->keypoints, written[i]);
        },
        run.workers());
    for (auto& w : written) outputs.insert(outputs.end(), w.begin(), w.end());
    write_provenance(run, out, inputs, outputs);
    run.out << "wrote " << count << " samples to " << out.string() << "\n";
    return 0;
}

int cmd_annotate_export(const Run& run) {
    const auto dir = require_dir(run, "project");
    if (DirectoryLock::is_locked(dir)) throw DataError("project " + dir.string() + " is locked by a running service");
    json inputs = json::object();
    inputs[(dir / "project.json").string()] = file_hash(dir / "project.json");
    const project::Project p(dir);
    const auto out = run.path("out");
    fs::create_directories(out);
    DirectoryLock lock(out);

    std::vector<std::string> outputs = {"schema.json", "backbone.json"};
    write_text_file(out / "schema.json", to_json(p.schema()).dump(2) + "\n");
    write_text_file(out / "backbone.json", p.config().backbone.dump(2) + "\n");
    std::size_t exported = 0;
    for (std::size_t r = 0; r < p.round_count(); ++r) {
        for (const auto& [id, status] : p.round(r).status) {
            if (status != annotation::Status::annotated) continue;
            const auto record = p.annotation_of(id);
            if (!record) throw DataError("sample " + std::to_string(id) + " is marked annotated but has no record");
            const auto sample = p.candidate(r, id);
            const auto mask = p.schema().task == Task::segmentation ? p.annotation_mask(id) : LabelMask{};
            write_sample(out, factory::pair_stem(id), sample, p.schema(), &mask, &record->keypoints, outputs);
            ++exported;
        }
    }
    write_provenance(run, out, inputs, outputs);
    run.out << "exported " << exported << " annotated samples to " << out.string() << "\n";
    return 0;
}

std::string cli_key(std::string key) {
    if (key.rfind("train.", 0) == 0) key = key.substr(6);
    if (key == "members") return "n";
    if (key == "learning_rate") return "lr";
    return key;
}

int cmd_train(const Run& run) {
    json inputs = json::object();
    const auto samples = load_samples(require_dir(run, "samples"), inputs);

    interpreter::TrainConfig tc;
    tc.members = run.u64("n");
    tc.seed = run.u64("seed");
    tc.steps = run.u64("steps");
    tc.batch_pixels = run.u64("batch_pixels");
    const auto hidden = run.config.at("hidden").get<std::vector<std::size_t>>();
    if (hidden.size() != 2) throw ConfigError("hidden", "expected two widths");
    tc.hidden = {hidden[0], hidden[1]};
    tc.learning_rate = run.f64("lr");
    tc.beta1 = run.f64("beta1");
    tc.beta2 = run.f64("beta2");
    tc.epsilon = run.f64("epsilon");
    tc.member_seed_offsets = run.config.at("member_seed_offsets").get<std::vector<std::uint64_t>>();
    tc.sigma_fraction = run.f64("sigma_fraction");
    const auto up = run.str("upsample");
    if (up != "bilinear" && up != "nearest") throw ConfigError("upsample", "expected bilinear or nearest, got " + up);
    tc.upsample = up == "bilinear" ? features::Upsample::bilinear : features::Upsample::nearest;
    try {
        tc.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(cli_key(e.key()), std::string(e.what()).substr(e.key().size() + 2));
    }

    const auto out = run.path("out");
    fs::create_directories(out);
    DirectoryLock lock(out);
    const auto ensemble = interpreter::train_ensemble(samples.items, samples.schema, tc, run.workers());
    interpreter::save_checkpoint(ensemble, out / "ensemble.dge");
    const auto hash = interpreter::checkpoint_hash(ensemble);
    json losses = json::array();
    for (const auto& curve : ensemble.loss_curves) losses.push_back(curve.empty() ? 0.0 : curve.back());
    write_provenance(run, out, inputs, {"ensemble.dge"},
                     {{"checkpoint_hash", hash}, {"train_config", interpreter::to_json(tc)}, {"final_loss", losses}});
    run.out << "trained " << tc.members << " members on " << samples.items.size() << " samples\n";
    run.out << "checkpoint " << hash << "\n";
    return 0;
}

int cmd_synthesize(const Run& run) {
    json inputs = json::object();
    const auto bb = backbone_of(run, inputs);
    const auto ensemble = ensemble_at(require_file(run, "ensemble"), inputs);
    const auto out = run.path("out");
    factory::DatasetManifest m;
    if (run.flag("resume")) {
        m = factory::resume(*bb, ensemble, out, run.workers());
    } else {
        factory::SynthesisOptions o;
        o.count = run.u64("count");
        o.filter_ratio = run.f64("filter");
        o.seed = run.u64("seed");
        o.out_dir = out;
        o.workers = run.workers();
        o.heat_variance = run.flag("heat_variance");
        if (run.has("stop_after")) o.stop_after = run.u64("stop_after");
        m = factory::synthesize(*bb, ensemble, o);
    }
    write_provenance(run, out, inputs, {"manifest.json"},
                     {{"ensemble_hash", m.ensemble_hash}, {"backbone_hash", m.backbone_hash}});
    if (!m.complete) {
        run.out << "stopped after " << m.next_index << " of " << m.requested << " pairs; resume token next_index="
                << m.next_index << "\n";
        return 0;
    }
    run.out << "kept " << m.kept_count() << " of " << m.pairs.size() << " pairs\n";
    return 0;
}

int cmd_filter(const Run& run) {
    json inputs = json::object();
    const auto dataset = require_dir(run, "dataset");
    inputs[factory::manifest_path(dataset).string()] = file_hash(factory::manifest_path(dataset));
    const auto m = factory::load_manifest(dataset);
    if (!m.complete) throw DataError("dataset " + dataset.string() + " is incomplete; resume it first");
    const double ratio = run.f64("ratio");
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("ratio", "must lie in [0, 1)");
    std::vector<uncertainty::ScoredId> scores;
    scores.reserve(m.pairs.size());
    for (const auto& p : m.pairs) scores.push_back({p.id, p.image_score});
    const auto result = uncertainty::filter_by_uncertainty(scores, ratio);

    const auto out = run.path("out");
    fs::create_directories(out);
    DirectoryLock lock(out);
    write_text_file(out / "filter.json",
                    json{{"ratio", ratio}, {"total", scores.size()}, {"kept", result.kept}, {"dropped", result.dropped}}
                            .dump(2) +
                        "\n");
    uncertainty::write_uncertainty_log(out / "uncertainty.log", scores, result);
    write_provenance(run, out, inputs, {"filter.json", "uncertainty.log"});
    run.out << "kept " << result.kept.size() << " of " << scores.size() << " pairs\n";
    return 0;
}

int cmd_select(const Run& run) {
    json inputs = json::object();
    const auto bb = backbone_of(run, inputs);
    const auto ensemble = ensemble_at(require_file(run, "ensemble"), inputs);
    const auto n = run.u64("pool_size");
    const auto first = run.u64("pool_seed");
    std::vector<selection::PoolEntry> pool(n);
    parallel_for(
        n,
        [&](std::size_t i) {
            const auto s = bb->generate_seed(first + i);
            double score = 0.0;
            if (ensemble.task() == Task::segmentation)
                score = uncertainty::score_image(s.id, interpreter::predict_segmentation(ensemble, s.features, 1)).image_score;
            else
                score = uncertainty::score_heat_variance(s.id, interpreter::predict_keypoints(ensemble, s.features, 1)).image_score;
            pool[i] = {s.id, selection::embedding_of(s), score, s.latent.z};
        },
        run.workers());
    auto round = selection::propose_batch(pool, run.f64("k"), run.f64("band"), run.u64("centers"), run.workers());
    round.index = run.u64("round");

    const auto out = run.path("out");
    fs::create_directories(out);
    DirectoryLock lock(out);
    selection::save_round(round, out / "round.json");
    write_provenance(run, out, inputs, {"round.json"}, {{"ensemble_hash", interpreter::checkpoint_hash(ensemble)}});
    run.out << "proposed " << round.chosen.size() << " candidates from a band of " << round.band.size() << "\n";
    return 0;
}

struct Scored {
    std::string metric;
    metrics::FoldResult fold;
};

int cmd_eval(const Run& run) {
    json inputs = json::object();
    const auto samples = load_samples(require_dir(run, "samples"), inputs);
    std::vector<interpreter::InterpreterEnsemble> ensembles;
    json ensemble_info = json::array();
    for (const auto& p : run.config.at("ensembles").get<std::vector<std::string>>()) {
        ensembles.push_back(ensemble_at(p, inputs));
        ensemble_info.push_back({{"path", p}, {"hash", interpreter::checkpoint_hash(ensembles.back())}});
        if (ensembles.back().schema != samples.schema)
            throw DataError("ensemble " + p + " was trained on a different label schema");
    }
    if (ensembles.empty()) throw ConfigError("ensembles", "need at least one checkpoint");
    const auto images = samples.items.size();
    const auto c = ensembles.size();
    std::vector<Scored> results;

    if (samples.schema.task == Task::segmentation) {
        const bool ignore_bg = run.flag("ignore_background");
        std::vector<std::vector<double>> scores(c, std::vector<double>(images));
        parallel_for(
            c * images,
            [&](std::size_t t) {
                const auto e = t / images, i = t % images;
                const auto& a = samples.items[i];
                const auto pred = interpreter::predict_segmentation(ensembles[e], a.sample.features, 1);
                scores[e][i] = metrics::miou(pred.mask, a.mask, samples.schema, ignore_bg).mean;
            },
            run.workers());
        results.push_back({"miou", metrics::five_fold_select(scores)});
    } else {
        metrics::PckConfig pc;
        pc.thresholds = run.config.at("thresholds").get<std::vector<double>>();
        if (pc.thresholds.empty()) throw ConfigError("thresholds", "need at least one threshold");
        const auto t_count = pc.thresholds.size();
        std::vector<std::vector<std::vector<double>>> pck(t_count, std::vector<std::vector<double>>(c, std::vector<double>(images)));
        std::vector<std::vector<double>> l2(c, std::vector<double>(images));
        parallel_for(
            c * images,
            [&](std::size_t t) {
                const auto e = t / images, i = t % images;
                const auto& a = samples.items[i];
                const auto h = a.sample.features.target_height(), w = a.sample.features.target_width();
                const auto pred = interpreter::predict_keypoints(ensembles[e], a.sample.features, 1);
                const auto per = metrics::pck(pred.locations, a.keypoints, h, w, pc);
                for (std::size_t k = 0; k < t_count; ++k) pck[k][e][i] = per[k];
                const double sigma = ensembles[e].config.sigma_fraction * static_cast<double>(std::max(h, w));
                std::vector<interpreter::Heatmap> truth;
                for (std::size_t k = 1; k < samples.schema.size(); ++k) {
                    const auto& name = samples.schema.names[k];
                    const auto it = std::find_if(a.keypoints.begin(), a.keypoints.end(),
                                                 [&](const Keypoint& kp) { return kp.name == name; });
                    truth.push_back(it == a.keypoints.end() ? interpreter::Heatmap{h, w, std::vector<double>(h * w, 0.0)}
                                                            : interpreter::gaussian_heatmap(it->x, it->y, h, w, sigma));
                }
                l2[e][i] = -metrics::l2_heatmap(pred.heatmaps, truth);
            },
            run.workers());
        for (std::size_t k = 0; k < t_count; ++k) {
            std::ostringstream name;
            name << "pck@" << pc.thresholds[k];
            results.push_back({name.str(), metrics::five_fold_select(pck[k])});
        }
        auto fold = metrics::five_fold_select(l2);
        fold.mean = -fold.mean;
        for (auto& s : fold.fold_scores) s = -s;
        results.push_back({"l2_heatmap", fold});
    }

    const auto out = run.path("out");
    fs::create_directories(out);
    DirectoryLock lock(out);
    std::vector<metrics::MetricRecord> records;
    json folds = json::object();
    for (const auto& r : results) {
        records.push_back({run.str("dataset"), r.metric, r.fold.mean, r.fold.std});
        folds[r.metric] = {{"picks", r.fold.picks}, {"fold_scores", r.fold.fold_scores}};
        run.out << r.metric << " " << r.fold.mean << " +- " << r.fold.std << "\n";
    }
    metrics::append_metric_records(out / "metrics.jsonl", records);
    json records_json = json::array();
    for (const auto& r : records) records_json.push_back(metrics::to_json(r));
    write_text_file(out / "eval.json",
                    json{{"images", images}, {"ensembles", ensemble_info}, {"records", records_json}, {"folds", folds}}
                            .dump(2) +
                        "\n");
    write_provenance(run, out, inputs, {"metrics.jsonl", "eval.json"});
    return 0;
}

int cmd_serve(const Run& run) {
    if (run.flag("api_doc")) {
        run.out << service::api_document().dump(2) << "\n";
        return 0;
    }
    if (!run.has("project")) throw UsageError("--project is required");
    const auto dir = run.path("project");
    if (run.flag("init")) {
        project::ProjectConfig pc;
        if (run.has("project_config")) {
            const auto p = require_file(run, "project_config");
            try {
                pc = project::project_config_from_json(json::parse(read_text_file(p)));
            } catch (const json::exception& e) {
                throw ConfigError("project_config", e.what());
            }
        }
        project::Project::init(dir, pc);
    } else if (!fs::exists(dir / "project.json")) {
        throw DataError("project: missing input " + (dir / "project.json").string() + " (use --init)");
    }
    const auto port = run.u64("port");
    if (port > 65535) throw ConfigError("port", "must be at most 65535");

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    service::Service svc(dir, {run.str("host"), static_cast<int>(port), run.workers()});
    const int bound = svc.start();
    run.out << "serving " << dir.string() << " on http://" << run.str("host") << ":" << bound << "/api/v1" << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    svc.stop();
    svc.join_retrain();
    return 0;
}

int cmd_validate(const Run& run) {
    const auto dataset = require_dir(run, "dataset");
    const auto violations = factory::validate_manifest(dataset);
    for (const auto& v : violations) {
        run.out << v.kind;
        if (v.id) run.out << " " << factory::pair_stem(*v.id);
        run.out << ": " << v.message << "\n";
    }
    if (!violations.empty()) throw DataError(std::to_string(violations.size()) + " violation(s) in " + dataset.string());
    const auto m = factory::load_manifest(dataset);
    run.out << "ok: " << m.pairs.size() << " pairs, " << m.kept_count() << " kept\n";
    return 0;
}

int dispatch(const Run& run) {
    static const std::map<std::string, std::function<int(const Run&)>> table = {
        {"toygen", cmd_toygen},     {"annotate-export", cmd_annotate_export},
        {"train", cmd_train},       {"synthesize", cmd_synthesize},
        {"filter", cmd_filter},     {"select", cmd_select},
        {"eval", cmd_eval},         {"serve", cmd_serve},
        {"validate", cmd_validate},
    };
    return table.at(run.command.name)(run);
}

} // namespace

const std::vector<CommandSpec>& commands() {
    static const std::vector<CommandSpec> c = build_commands();
    return c;
}

std::string flag_name(const std::string& key) {
    std::string f = "--" + key;
    std::replace(f.begin(), f.end(), '_', '-');
    return f;
}

json resolve(const CommandSpec& command, const json& file,
             const std::vector<std::pair<std::string, std::string>>& flags) {
    const json section = file.is_object() && file.contains(command.name) ? file.at(command.name) : json::object();
    std::set<std::string> known;
    for (const auto& o : command.options) known.insert(o.key);
    for (const auto& [k, v] : section.items())
        if (!known.contains(k)) throw ConfigError(command.name + "." + k, "unknown key");

    json effective = json::object();
    for (const auto& o : command.options) {
        const auto given = std::find_if(flags.begin(), flags.end(), [&](const auto& f) { return f.first == o.key; });
        if (given != flags.end()) {
            auto v = parse_flag(o.kind, given->second);
            if (!v) throw UsageError(flag_name(o.key) + ": expected " + kind_name(o.kind) + ", got '" + given->second + "'");
            effective[o.key] = *v;
        } else if (section.contains(o.key) && !section.at(o.key).is_null()) {
            const auto& v = section.at(o.key);
            if (!fits(o.kind, v)) throw ConfigError(command.name + "." + o.key, "expected " + kind_name(o.kind));
            effective[o.key] = v;
        } else {
            effective[o.key] = o.fallback;
        }
    }
    return effective;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"DatasetGAN engine: interpreters, uncertainty filtering, active learning", "dgan"};
    app.require_subcommand(1);
    std::map<std::string, std::map<std::string, std::string>> text;
    std::map<std::string, std::map<std::string, bool>> bools;
    std::map<std::string, std::string> config_file;
    std::map<std::string, bool> print_config;
    std::map<std::string, CLI::App*> subs;

    for (const auto& c : commands()) {
        auto* sub = app.add_subcommand(c.name, c.help);
        subs[c.name] = sub;
        sub->add_option("--config", config_file[c.name], "config file (JSON)");
        sub->add_flag("--print-config", print_config[c.name], "print the effective config and exit");
        for (const auto& o : c.options) {
            if (o.kind == Kind::boolean)
                sub->add_flag(flag_name(o.key), bools[c.name][o.key], o.help);
            else
                sub->add_option(flag_name(o.key), text[c.name][o.key], o.help);
        }
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorFamily::usage);
    }

    try {
        const CommandSpec* command = nullptr;
        for (const auto& c : commands())
            if (subs[c.name]->parsed()) command = &c;
        if (command == nullptr) throw UsageError("a subcommand is required");
        const auto& name = command->name;
        auto* sub = subs[name];

        std::vector<std::pair<std::string, std::string>> flags;
        for (const auto& o : command->options) {
            if (sub->get_option(flag_name(o.key))->count() == 0) continue;
            flags.emplace_back(o.key, o.kind == Kind::boolean ? (bools[name][o.key] ? "true" : "false") : text[name][o.key]);
        }
        json file = json::object();
        if (!config_file[name].empty()) file = load_config_file(config_file[name]);
        const auto effective = resolve(*command, file, flags);
        json overrides = json::object();
        for (const auto& [k, v] : flags) overrides[k] = effective.at(k);

        if (print_config[name]) {
            out << effective.dump(2) << "\n";
            return 0;
        }
        for (const auto& o : command->options)
            if (o.required && effective.at(o.key).is_null()) throw UsageError(flag_name(o.key) + " is required");

        const Run r{*command, effective, overrides, config_file[name], out, err};
        return dispatch(r);
    } catch (const ConfigError& e) {
        err << "error: config key " << e.what() << "\n";
        return static_cast<int>(e.family());
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(e.family());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorFamily::data);
    } catch (const std::exception& e) {
        err << "error: internal: " << e.what() << "\n";
        return 1;
    }
}

} // namespace dgan::cli

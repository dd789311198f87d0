#include "dgan/backbone.hpp"

#include "dgan/rng.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <set>

namespace dgan::backbone {

using features::FeatureMap;
using features::FeatureVolume;

namespace {

constexpr std::size_t kCoordChannels = 4;
constexpr double kDistanceScale = 8.0;

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double lerp(const SizeRange& r, double t) { return r.lo + (r.hi - r.lo) * t; }

std::uint64_t latent_hash(const LatentCode& latent) {
    std::uint64_t h = 0x1234567;
    for (double v : latent.z) h = hash_combine(h, std::bit_cast<std::uint64_t>(v));
    return h;
}

std::uint64_t key(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0, std::uint64_t d = 0, std::uint64_t e = 0) {
    return hash_combine(hash_combine(hash_combine(hash_combine(a, b), c), d), e);
}

struct Part {
    double cu = 0.0;
    double cv = 0.0;
    double radius = 0.0;
};

// Object layout in normalised image coordinates (u right, v down, [0, 1]).
struct Geometry {
    double cu = 0.5;
    double cv = 0.5;
    double rx = 0.2;
    double ry = 0.2;
    double angle = 0.0;
    std::vector<Part> parts;

    double body_distance(double u, double v) const {
        const double du = u - cu;
        const double dv = v - cv;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double lu = (c * du + s * dv) / rx;
        const double lv = (-s * du + c * dv) / ry;
        return (std::sqrt(lu * lu + lv * lv) - 1.0) * std::min(rx, ry);
    }
    double part_distance(std::size_t j, double u, double v) const {
        return std::hypot(u - parts[j].cu, v - parts[j].cv) - parts[j].radius;
    }
};

Geometry layout(const ToyBackboneConfig& cfg, const std::vector<double>& z) {
    auto at = [&](std::size_t i) { return z[i % z.size()]; };
    Geometry g;
    g.cu = 0.5 + 0.06 * std::tanh(at(0));
    g.cv = 0.5 + 0.06 * std::tanh(at(1));
    g.rx = lerp(cfg.body_radius, normal_cdf(at(2)));
    g.ry = lerp(cfg.body_radius, normal_cdf(at(3)));
    g.angle = 0.6 * std::tanh(at(4));
    const double c = std::cos(g.angle);
    const double s = std::sin(g.angle);
    const auto m = static_cast<double>(cfg.part_count);
    for (std::size_t j = 0; j < cfg.part_count; ++j) {
        const double phi = 2.0 * std::numbers::pi * static_cast<double>(j) / m + 0.5 * std::tanh(at(5 + 3 * j));
        const double inset = 1.0 - (0.15 + 0.2 * normal_cdf(at(7 + 3 * j)));
        const double lx = g.rx * std::cos(phi) * inset;
        const double ly = g.ry * std::sin(phi) * inset;
        g.parts.push_back({g.cu + c * lx - s * ly, g.cv + s * lx + c * ly,
                           lerp(cfg.part_radius, normal_cdf(at(6 + 3 * j)))});
    }
    return g;
}

std::uint8_t label_from_distances(std::span<const float> geometry) {
    for (std::size_t j = geometry.size() - 1; j >= 1; --j) {
        if (geometry[j] < 0.0f) return static_cast<std::uint8_t>(j + 1);
    }
    return geometry[0] < 0.0f ? 1 : 0;
}

// Value-noise field on a 5x5 lattice, smooth across the image.
double smooth_noise(std::uint64_t seed, double u, double v) {
    const double gu = std::clamp(u, 0.0, 1.0) * 4.0;
    const double gv = std::clamp(v, 0.0, 1.0) * 4.0;
    const auto iu = std::min<std::size_t>(static_cast<std::size_t>(gu), 3);
    const auto iv = std::min<std::size_t>(static_cast<std::size_t>(gv), 3);
    const double fu = gu - static_cast<double>(iu);
    const double fv = gv - static_cast<double>(iv);
    auto node = [&](std::size_t a, std::size_t b) { return hashed_unit(key(seed, a, b)); };
    const double top = (1 - fu) * node(iu, iv) + fu * node(iu + 1, iv);
    const double bottom = (1 - fu) * node(iu, iv + 1) + fu * node(iu + 1, iv + 1);
    return (1 - fv) * top + fv * bottom;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

const std::vector<Rgb> kPartColors = {{60, 120, 220}, {60, 200, 90}, {230, 200, 50}, {180, 80, 200},
                                      {60, 200, 200}, {240, 130, 40}, {140, 140, 140}, {250, 120, 160}};

} // namespace

LatentCode latent_from_seed(std::uint64_t seed, std::size_t dim) {
    Rng rng(seed);
    LatentCode code{seed, std::vector<double>(dim)};
    for (auto& v : code.z) v = rng.normal();
    return code;
}

std::size_t ToyBackboneConfig::dimension() const {
    std::size_t d = 0;
    for (auto c : channels) d += c;
    return d;
}

void ToyBackboneConfig::validate() const {
    if (num_levels < 2) throw ConfigError("num_levels", "need at least 2 levels");
    if (channels.size() != num_levels) throw ConfigError("channels", "one channel count per level required");
    if (base_height == 0 || base_width == 0) throw ConfigError("base_height", "zero base resolution");
    if (part_count == 0) throw ConfigError("part_count", "need at least one part");
    if (part_count + 2 > 256) throw ConfigError("part_count", "too many parts for 8-bit labels");
    if (latent_dim == 0) throw ConfigError("latent_dim", "must be positive");
    const std::size_t fixed = part_count + 1 + kCoordChannels + noise_channels + constant_channels;
    for (std::size_t l = 0; l < channels.size(); ++l) {
        if (channels[l] < fixed) {
            throw ConfigError("channels", "level " + std::to_string(l) + " has " + std::to_string(channels[l]) +
                                              " channels, needs at least " + std::to_string(fixed));
        }
    }
    if (!(body_radius.lo > 0 && body_radius.lo <= body_radius.hi && body_radius.hi <= 0.32)) {
        throw ConfigError("body_radius", "range must satisfy 0 < lo <= hi <= 0.32");
    }
    if (!(part_radius.lo > 0 && part_radius.lo <= part_radius.hi && part_radius.hi <= 0.1)) {
        throw ConfigError("part_radius", "range must satisfy 0 < lo <= hi <= 0.1");
    }
    if (!(corruption_fraction >= 0.0 && corruption_fraction <= 1.0)) {
        throw ConfigError("corruption_fraction", "must lie in [0, 1]");
    }
}

nlohmann::json to_json(const ToyBackboneConfig& c) {
    return {{"num_levels", c.num_levels},
            {"base_height", c.base_height},
            {"base_width", c.base_width},
            {"channels", c.channels},
            {"noise_channels", c.noise_channels},
            {"constant_channels", c.constant_channels},
            {"latent_dim", c.latent_dim},
            {"part_count", c.part_count},
            {"body_radius", {c.body_radius.lo, c.body_radius.hi}},
            {"part_radius", {c.part_radius.lo, c.part_radius.hi}},
            {"style_seed", c.style_seed},
            {"corruption_fraction", c.corruption_fraction},
            {"corruption_shrink", c.corruption_shrink},
            {"corruption_noise", c.corruption_noise}};
}

ToyBackboneConfig toy_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("backbone", "expected an object");
    ToyBackboneConfig c;
    static const std::set<std::string> known = {
        "num_levels", "base_height",  "base_width",  "channels",           "noise_channels",
        "constant_channels", "latent_dim", "part_count", "body_radius",   "part_radius",
        "style_seed", "corruption_fraction", "corruption_shrink", "corruption_noise"};
    for (const auto& [k, v] : j.items()) {
        if (!known.contains(k)) throw ConfigError("backbone." + k, "unknown key");
    }
    auto read = [&](const char* name, auto& field) {
        if (!j.contains(name)) return;
        try {
            j.at(name).get_to(field);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("backbone.") + name, e.what());
        }
    };
    auto read_range = [&](const char* name, SizeRange& r) {
        std::vector<double> v{r.lo, r.hi};
        read(name, v);
        if (v.size() != 2) throw ConfigError(std::string("backbone.") + name, "expected [lo, hi]");
        r = {v[0], v[1]};
    };
    read("num_levels", c.num_levels);
    read("base_height", c.base_height);
    read("base_width", c.base_width);
    if (j.contains("num_levels") && !j.contains("channels")) c.channels.assign(c.num_levels, 16);
    read("channels", c.channels);
    read("noise_channels", c.noise_channels);
    read("constant_channels", c.constant_channels);
    read("latent_dim", c.latent_dim);
    read("part_count", c.part_count);
    read_range("body_radius", c.body_radius);
    read_range("part_radius", c.part_radius);
    read("style_seed", c.style_seed);
    read("corruption_fraction", c.corruption_fraction);
    read("corruption_shrink", c.corruption_shrink);
    read("corruption_noise", c.corruption_noise);
    c.validate();
    return c;
}

LabelSchema toy_schema(const ToyBackboneConfig& config, Task task) {
    LabelSchema s;
    s.task = task;
    s.names = {"background", "body"};
    s.palette = {{0, 0, 0}, {200, 60, 60}};
    for (std::size_t j = 0; j < config.part_count; ++j) {
        s.names.push_back("part" + std::to_string(j + 1));
        s.palette.push_back(kPartColors[j % kPartColors.size()]);
    }
    return s;
}

ToyBackbone::ToyBackbone(ToyBackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t fixed = config_.part_count + 1 + kCoordChannels + config_.noise_channels + config_.constant_channels;
    std::size_t style_total = 0;
    for (auto c : config_.channels) style_total += c - fixed;
    const double norm = 1.0 / std::sqrt(static_cast<double>(config_.latent_dim));
    style_matrix_.assign(style_total, std::vector<double>(config_.latent_dim));
    for (std::size_t r = 0; r < style_total; ++r) {
        for (std::size_t k = 0; k < config_.latent_dim; ++k) {
            style_matrix_[r][k] = 1.7 * norm * hashed_unit(key(config_.style_seed, 0x57, r, k));
        }
    }
}

LatentCode ToyBackbone::latent(std::uint64_t seed) const { return latent_from_seed(seed, config_.latent_dim); }

nlohmann::json ToyBackbone::descriptor() const { return {{"kind", "toy"}, {"config", to_json(config_)}}; }

GeneratedSample ToyBackbone::generate(const LatentCode& latent) const {
    const auto& cfg = config_;
    if (latent.z.size() != cfg.latent_dim) {
        throw DataError("toy backbone: latent has dimension " + std::to_string(latent.z.size()) + ", expected " +
                        std::to_string(cfg.latent_dim));
    }
    const Geometry geo = layout(cfg, latent.z);
    const std::uint64_t zh = latent_hash(latent);
    const bool corrupted =
        cfg.corruption_fraction > 0.0 && 0.5 * (hashed_unit(key(zh, 0xC0)) + 1.0) < cfg.corruption_fraction;

    const std::size_t n_geo = cfg.part_count + 1;
    const std::size_t fixed = n_geo + kCoordChannels + cfg.noise_channels + cfg.constant_channels;
    const std::size_t last = cfg.num_levels - 1;
    const std::size_t th = cfg.target_height();
    const std::size_t tw = cfg.target_width();

    std::vector<double> style_values(style_matrix_.size());
    for (std::size_t r = 0; r < style_matrix_.size(); ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < latent.z.size(); ++k) acc += style_matrix_[r][k] * latent.z[k];
        style_values[r] = std::tanh(acc);
    }

    GroundTruth truth;
    truth.corrupted = corrupted;
    truth.mask = LabelMask(th, tw);

    std::vector<FeatureMap> maps;
    std::size_t style_offset = 0;
    std::vector<float> clean(n_geo);
    for (std::size_t l = 0; l < cfg.num_levels; ++l) {
        const std::size_t h = cfg.base_height << l;
        const std::size_t w = cfg.base_width << l;
        const std::size_t c = cfg.channels[l];
        const std::size_t n_style = c - fixed;
        const double freq = std::numbers::pi * static_cast<double>(std::size_t{1} << l);
        std::vector<float> data(h * w * c);
        for (std::size_t y = 0; y < h; ++y) {
            const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
            for (std::size_t x = 0; x < w; ++x) {
                const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
                float* px = data.data() + (y * w + x) * c;
                clean[0] = static_cast<float>(kDistanceScale * geo.body_distance(u, v));
                for (std::size_t j = 0; j < cfg.part_count; ++j) {
                    clean[j + 1] = static_cast<float>(kDistanceScale * geo.part_distance(j, u, v));
                }
                if (l == last) truth.mask.at(x, y) = label_from_distances(clean);
                for (std::size_t g = 0; g < n_geo; ++g) {
                    double value = clean[g];
                    if (corrupted) {
                        value = cfg.corruption_shrink * value +
                                cfg.corruption_noise * (smooth_noise(key(zh, 0xB1, l, g), u, v) +
                                                        0.5 * hashed_unit(key(zh, 0xB2, l, g, y * w + x)));
                    }
                    px[g] = static_cast<float>(value);
                }
                std::size_t ch = n_geo;
                px[ch++] = static_cast<float>(std::sin(freq * u));
                px[ch++] = static_cast<float>(std::cos(freq * u));
                px[ch++] = static_cast<float>(std::sin(freq * v));
                px[ch++] = static_cast<float>(std::cos(freq * v));
                for (std::size_t s = 0; s < n_style; ++s) px[ch++] = static_cast<float>(style_values[style_offset + s]);
                for (std::size_t k = 0; k < cfg.noise_channels; ++k) {
                    px[ch++] = static_cast<float>(hashed_unit(key(zh, 0xA0 + l, k, y, x)));
                }
                for (std::size_t k = 0; k < cfg.constant_channels; ++k) {
                    px[ch++] = static_cast<float>(0.25 * static_cast<double>(k + 1));
                }
            }
        }
        style_offset += n_style;
        maps.emplace_back(h, w, c, std::move(data));
    }

    // Image: shaded flat colours per label plus a background gradient.
    RgbImage image(th, tw);
    const double tint = 25.0 * std::tanh(latent.z[latent.z.size() > 20 ? 20 : 0]);
    const auto schema = toy_schema(cfg);
    for (std::size_t y = 0; y < th; ++y) {
        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(th);
        for (std::size_t x = 0; x < tw; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(tw);
            const std::uint8_t label = truth.mask.at(x, y);
            std::uint8_t* px = image.at(x, y);
            if (label == 0) {
                const double base = 70.0 + 60.0 * v + 10.0 * u;
                px[0] = to_byte(base);
                px[1] = to_byte(base);
                px[2] = to_byte(base + 15.0);
                continue;
            }
            const double d = label == 1 ? geo.body_distance(u, v) : geo.part_distance(label - 2, u, v);
            const double shade = 0.7 + 0.3 * std::min(1.0, -d * 20.0);
            const Rgb& col = schema.palette[label];
            px[0] = to_byte(shade * (col[0] + tint));
            px[1] = to_byte(shade * col[1]);
            px[2] = to_byte(shade * (col[2] - tint));
        }
    }
    if (corrupted) {
        for (std::size_t i = 0; i < image.pixels.size(); ++i) {
            image.pixels[i] = to_byte(image.pixels[i] + 40.0 * hashed_unit(key(zh, 0xD0, i)));
        }
    }

    const auto to_px = [](double n, std::size_t size) { return n * static_cast<double>(size) - 0.5; };
    truth.keypoints.push_back({"body", to_px(geo.cu, tw), to_px(geo.cv, th)});
    for (std::size_t j = 0; j < cfg.part_count; ++j) {
        truth.keypoints.push_back({"part" + std::to_string(j + 1), to_px(geo.parts[j].cu, tw), to_px(geo.parts[j].cv, th)});
    }

    GeneratedSample sample;
    sample.id = latent.seed;
    sample.latent = latent;
    sample.image = std::move(image);
    sample.features = FeatureVolume(std::move(maps));
    sample.truth = std::move(truth);
    return sample;
}

GeneratedSample toy_generate(const ToyBackboneConfig& config, const LatentCode& latent) {
    return ToyBackbone(config).generate(latent);
}

std::uint8_t toy_decode_label(const ToyBackboneConfig& config, std::span<const float> feature) {
    const std::size_t fine_offset = config.dimension() - config.channels.back();
    return label_from_distances(feature.subspan(fine_offset, config.part_count + 1));
}

// ---- dumps ----

namespace {

constexpr char kMagic[4] = {'F', 'V', 'D', '1'};

using Writer = detail::ByteWriter;

auto truncated = [](const std::string& what) {
    throw DumpError(DumpErrorKind::truncated, "truncated payload: " + what);
};

} // namespace

std::vector<std::uint8_t> encode_feature_dump(const GeneratedSample& sample) {
    const auto& maps = sample.features.maps();
    Writer w;
    for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
    w.put(kDumpVersion);
    w.put(static_cast<std::uint32_t>(sample.latent.z.size()));
    w.put(static_cast<std::uint32_t>(maps.size()));
    for (const auto& m : maps) {
        w.put(static_cast<std::uint32_t>(m.height()));
        w.put(static_cast<std::uint32_t>(m.width()));
        w.put(static_cast<std::uint32_t>(m.channels()));
    }
    w.put(static_cast<std::uint32_t>(sample.features.dimension()));
    const bool has_image = !sample.image.empty();
    w.put(static_cast<std::uint8_t>(has_image ? 1 : 0));
    w.put(static_cast<std::uint8_t>(sample.truth ? 1 : 0));

    w.put(sample.latent.seed);
    for (double v : sample.latent.z) w.put(v);
    for (const auto& m : maps) {
        for (float v : m.data()) w.put(v);
    }
    if (has_image) {
        if (sample.image.height != sample.features.target_height() || sample.image.width != sample.features.target_width()) {
            throw DataError("dump: image resolution differs from feature target resolution");
        }
        w.put_bytes(sample.image.pixels);
    }
    if (sample.truth) {
        const auto& t = *sample.truth;
        if (t.mask.height != sample.features.target_height() || t.mask.width != sample.features.target_width()) {
            throw DataError("dump: truth mask resolution differs from feature target resolution");
        }
        w.put_bytes(t.mask.labels);
        w.put(static_cast<std::uint32_t>(t.keypoints.size()));
        for (const auto& kp : t.keypoints) {
            if (kp.name.size() > 0xFFFF) throw DataError("dump: keypoint name too long");
            w.put(static_cast<std::uint16_t>(kp.name.size()));
            w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kp.name.data()), kp.name.size()));
            w.put(kp.x);
            w.put(kp.y);
        }
        w.put(static_cast<std::uint8_t>(t.corrupted ? 1 : 0));
    }
    return std::move(w.bytes);
}

GeneratedSample decode_feature_dump(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw DumpError(DumpErrorKind::bad_magic, "dump: bad magic (expected FVD1)");
    }
    detail::ByteReader r(bytes.subspan(4), truncated);
    const auto version = r.get<std::uint32_t>("header");
    if (version != kDumpVersion) {
        throw DumpError(DumpErrorKind::version_mismatch,
                        "dump: version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kDumpVersion) + ")");
    }
    const auto dz = r.get<std::uint32_t>("header");
    const auto k = r.get<std::uint32_t>("header");
    if (k == 0) throw DumpError(DumpErrorKind::header_mismatch, "dump: header declares zero maps");
    struct Shape {
        std::uint32_t h, w, c;
    };
    std::vector<Shape> shapes(k);
    std::uint64_t channel_sum = 0;
    for (auto& s : shapes) {
        s.h = r.get<std::uint32_t>("header");
        s.w = r.get<std::uint32_t>("header");
        s.c = r.get<std::uint32_t>("header");
        if (s.h == 0 || s.w == 0 || s.c == 0) throw DumpError(DumpErrorKind::header_mismatch, "dump: zero-sized map");
        channel_sum += s.c;
    }
    const auto declared_d = r.get<std::uint32_t>("header");
    if (declared_d != channel_sum) {
        throw DumpError(DumpErrorKind::header_mismatch, "dump: header declares D=" + std::to_string(declared_d) +
                                                            " but maps sum to " + std::to_string(channel_sum));
    }
    for (std::size_t i = 1; i < k; ++i) {
        if (shapes[i].h < shapes[i - 1].h || shapes[i].w < shapes[i - 1].w) {
            throw DumpError(DumpErrorKind::header_mismatch, "dump: map " + std::to_string(i) + " shrinks resolution");
        }
    }
    const bool has_image = r.get<std::uint8_t>("header") != 0;
    const bool has_truth = r.get<std::uint8_t>("header") != 0;

    GeneratedSample sample;
    sample.latent.seed = r.get<std::uint64_t>("latent");
    sample.id = sample.latent.seed;
    sample.latent.z.resize(dz);
    for (auto& v : sample.latent.z) v = r.get<double>("latent");

    std::vector<FeatureMap> maps;
    for (std::size_t i = 0; i < k; ++i) {
        const std::uint64_t n = std::uint64_t{shapes[i].h} * shapes[i].w * shapes[i].c;
        const std::string what = "map " + std::to_string(i);
        if (n > r.remaining() / 4) throw DumpError(DumpErrorKind::truncated, "truncated payload: " + what);
        std::vector<float> data(n);
        for (auto& v : data) v = r.get<float>(what);
        try {
            maps.emplace_back(shapes[i].h, shapes[i].w, shapes[i].c, std::move(data));
        } catch (const DataError& e) {
            throw DumpError(DumpErrorKind::header_mismatch, std::string("dump: ") + what + ": " + e.what());
        }
    }
    sample.features = FeatureVolume(std::move(maps));
    const std::size_t th = sample.features.target_height();
    const std::size_t tw = sample.features.target_width();
    if (has_image) {
        sample.image = RgbImage(th, tw);
        const auto raw = r.take(th * tw * 3, "image");
        std::copy(raw.begin(), raw.end(), sample.image.pixels.begin());
    }
    if (has_truth) {
        GroundTruth t;
        t.mask = LabelMask(th, tw);
        const auto raw = r.take(th * tw, "truth mask");
        std::copy(raw.begin(), raw.end(), t.mask.labels.begin());
        const auto n = r.get<std::uint32_t>("truth keypoints");
        for (std::uint32_t i = 0; i < n; ++i) {
            Keypoint kp;
            const auto len = r.get<std::uint16_t>("truth keypoints");
            const auto name = r.take(len, "truth keypoints");
            kp.name.assign(name.begin(), name.end());
            kp.x = r.get<double>("truth keypoints");
            kp.y = r.get<double>("truth keypoints");
            t.keypoints.push_back(std::move(kp));
        }
        t.corrupted = r.get<std::uint8_t>("truth") != 0;
        sample.truth = std::move(t);
    }
    if (r.remaining() != 0) {
        throw DumpError(DumpErrorKind::header_mismatch,
                        "dump: " + std::to_string(r.remaining()) + " trailing bytes beyond declared payload");
    }
    return sample;
}

void write_feature_dump(const GeneratedSample& sample, const std::filesystem::path& path) {
    const auto bytes = encode_feature_dump(sample);
    try {
        write_file(path, bytes);
    } catch (const DataError& e) {
        throw DumpError(DumpErrorKind::io, e.what());
    }
}

GeneratedSample load_feature_dump(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_file(path);
    } catch (const DataError& e) {
        throw DumpError(DumpErrorKind::io, e.what());
    }
    return decode_feature_dump(bytes);
}

std::string dump_filename(std::uint64_t seed) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06llu.fvd", static_cast<unsigned long long>(seed));
    return buf;
}

DumpBackbone::DumpBackbone(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!std::filesystem::is_directory(dir_)) throw DataError("dump backbone: not a directory: " + dir_.string());
}

LatentCode DumpBackbone::latent(std::uint64_t seed) const { return load_feature_dump(dir_ / dump_filename(seed)).latent; }

GeneratedSample DumpBackbone::generate(const LatentCode& latent) const {
    auto sample = load_feature_dump(dir_ / dump_filename(latent.seed));
    if (sample.latent.z != latent.z) throw DataError("dump backbone: stored latent differs for seed " + std::to_string(latent.seed));
    return sample;
}

nlohmann::json DumpBackbone::descriptor() const { return {{"kind", "dumps"}, {"dir", dir_.string()}}; }

std::unique_ptr<Backbone> backbone_from_descriptor(const nlohmann::json& d) {
    if (!d.is_object() || !d.contains("kind")) throw ConfigError("backbone.kind", "missing backbone kind");
    const auto kind = d.at("kind");
    if (kind == "toy") {
        for (const auto& [k, v] : d.items()) {
            if (k != "kind" && k != "config") throw ConfigError("backbone." + k, "unknown key");
        }
        return std::make_unique<ToyBackbone>(toy_config_from_json(d.value("config", nlohmann::json::object())));
    }
    if (kind == "dumps") {
        for (const auto& [k, v] : d.items()) {
            if (k != "kind" && k != "dir") throw ConfigError("backbone." + k, "unknown key");
        }
        if (!d.contains("dir") || !d.at("dir").is_string()) throw ConfigError("backbone.dir", "dump directory required");
        return std::make_unique<DumpBackbone>(d.at("dir").get<std::string>());
    }
    throw ConfigError("backbone.kind", "expected 'toy' or 'dumps', got " + kind.dump());
}

} // namespace dgan::backbone

#include "dgan/interpreter.hpp"

#include "dgan/hash.hpp"
#include "dgan/parallel.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace dgan::interpreter {

using features::FeatureVolume;
using features::Upsample;

// ---- annotations and sampling ----

void validate(const AnnotatedSample& a, const LabelSchema& schema) {
    const auto& f = a.sample.features;
    if (schema.task == Task::segmentation) {
        if (a.mask.height != f.target_height() || a.mask.width != f.target_width()) {
            throw DataError("annotation for sample " + std::to_string(a.sample.id) + ": mask resolution differs from sample");
        }
        for (auto l : a.mask.labels) {
            if (l >= schema.size()) {
                throw DataError("annotation for sample " + std::to_string(a.sample.id) + ": label index " +
                                std::to_string(l) + " outside schema");
            }
        }
    } else {
        for (const auto& kp : a.keypoints) {
            const auto idx = schema.index_of(kp.name);
            if (idx == 0 || idx >= schema.size()) {
                throw DataError("annotation for sample " + std::to_string(a.sample.id) + ": unknown keypoint '" + kp.name + "'");
            }
            if (!(kp.x >= 0 && kp.y >= 0 && kp.x <= f.target_width() - 1.0 && kp.y <= f.target_height() - 1.0)) {
                throw DataError("annotation for sample " + std::to_string(a.sample.id) + ": keypoint '" + kp.name + "' out of bounds");
            }
        }
    }
}

LabeledRegions find_regions(const LabelMask& mask) {
    LabeledRegions out;
    const std::size_t w = mask.width;
    const std::size_t h = mask.height;
    std::vector<bool> visited(w * h, false);
    std::vector<std::uint32_t> stack;
    for (std::size_t start = 0; start < w * h; ++start) {
        if (visited[start] || mask.labels[start] == 0) continue;
        const auto label = mask.labels[start];
        std::vector<std::uint32_t> region;
        stack.push_back(static_cast<std::uint32_t>(start));
        visited[start] = true;
        while (!stack.empty()) {
            const auto i = stack.back();
            stack.pop_back();
            region.push_back(i);
            const std::size_t x = i % w;
            const std::size_t y = i / w;
            auto visit = [&](std::size_t nx, std::size_t ny) {
                const std::size_t j = ny * w + nx;
                if (!visited[j] && mask.labels[j] == label) {
                    visited[j] = true;
                    stack.push_back(static_cast<std::uint32_t>(j));
                }
            };
            if (x > 0) visit(x - 1, y);
            if (x + 1 < w) visit(x + 1, y);
            if (y > 0) visit(x, y - 1);
            if (y + 1 < h) visit(x, y + 1);
        }
        std::sort(region.begin(), region.end());
        out.pixels.push_back(std::move(region));
    }
    return out;
}

std::vector<std::uint32_t> sample_pixel_indices(const LabeledRegions& regions, std::size_t pixel_count,
                                                std::size_t batch, Rng& rng) {
    if (regions.pixels.empty()) throw DataError("sample_pixels: no labelled pixels");
    if (batch < regions.pixels.size()) {
        throw DataError("sample_pixels: batch " + std::to_string(batch) + " smaller than region count " +
                        std::to_string(regions.pixels.size()));
    }
    std::vector<std::uint32_t> out;
    out.reserve(batch);
    for (const auto& r : regions.pixels) out.push_back(r[rng.below(r.size())]);
    while (out.size() < batch) out.push_back(static_cast<std::uint32_t>(rng.below(pixel_count)));
    return out;
}

namespace {

double sigma_pixels(const FeatureVolume& f, double fraction) {
    return fraction * static_cast<double>(std::max(f.target_height(), f.target_width()));
}

LabeledRegions keypoint_regions(const AnnotatedSample& a, double sigma) {
    LabeledRegions out;
    const auto w = a.sample.features.target_width();
    const auto h = a.sample.features.target_height();
    const double r = 2.0 * sigma;
    for (const auto& kp : a.keypoints) {
        std::vector<std::uint32_t> disc;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                if (std::hypot(x - kp.x, y - kp.y) <= r) disc.push_back(static_cast<std::uint32_t>(y * w + x));
            }
        }
        if (disc.empty()) {
            const auto x = static_cast<std::size_t>(std::lround(kp.x));
            const auto y = static_cast<std::size_t>(std::lround(kp.y));
            disc.push_back(static_cast<std::uint32_t>(std::min(y, h - 1) * w + std::min(x, w - 1)));
        }
        out.pixels.push_back(std::move(disc));
    }
    return out;
}

// Target heat rasters in schema keypoint order; keypoints missing from the
// annotation get an all-zero map.
std::vector<Heatmap> keypoint_targets(const AnnotatedSample& a, const LabelSchema& schema, double sigma) {
    const auto w = a.sample.features.target_width();
    const auto h = a.sample.features.target_height();
    std::vector<Heatmap> maps;
    for (std::size_t k = 1; k < schema.size(); ++k) {
        const auto it = std::find_if(a.keypoints.begin(), a.keypoints.end(),
                                     [&](const Keypoint& kp) { return kp.name == schema.names[k]; });
        if (it == a.keypoints.end()) {
            maps.push_back({h, w, std::vector<double>(h * w, 0.0)});
        } else {
            maps.push_back(gaussian_heatmap(it->x, it->y, h, w, sigma));
        }
    }
    return maps;
}

// Per-sample data shared read-only by all members during training.
struct Prepared {
    const AnnotatedSample* annotated = nullptr;
    LabeledRegions regions;
    std::vector<Heatmap> heat;
};

Prepared prepare(const AnnotatedSample& a, const LabelSchema& schema, double sigma_fraction) {
    Prepared p;
    p.annotated = &a;
    if (schema.task == Task::segmentation) {
        p.regions = find_regions(a.mask);
    } else {
        const double sigma = sigma_pixels(a.sample.features, sigma_fraction);
        p.regions = keypoint_regions(a, sigma);
        p.heat = keypoint_targets(a, schema, sigma);
    }
    if (p.regions.pixels.empty()) {
        throw DataError("sample " + std::to_string(a.sample.id) + ": no labelled pixels");
    }
    return p;
}

} // namespace

std::vector<TrainingPixel> sample_pixels(const AnnotatedSample& annotated, const LabelSchema& schema,
                                         std::size_t batch, Rng& rng, double sigma_fraction, Upsample mode) {
    validate(annotated, schema);
    const Prepared p = prepare(annotated, schema, sigma_fraction);
    const auto& vol = annotated.sample.features;
    const auto idx = sample_pixel_indices(p.regions, vol.pixel_count(), batch, rng);
    std::vector<TrainingPixel> out;
    out.reserve(idx.size());
    for (auto i : idx) {
        TrainingPixel tp;
        tp.feature = features::pixel_feature(vol, i % vol.target_width(), i / vol.target_width(), mode);
        if (schema.task == Task::segmentation) {
            tp.target.label = annotated.mask.labels[i];
        } else {
            for (const auto& m : p.heat) tp.target.heat.push_back(m.values[i]);
        }
        out.push_back(std::move(tp));
    }
    return out;
}

// ---- MLP ----

MlpParams MlpParams::zeros_like(const MlpParams& o) {
    MlpParams p;
    for (std::size_t l = 0; l < 3; ++l) {
        p.weights[l] = Eigen::MatrixXd::Zero(o.weights[l].rows(), o.weights[l].cols());
        p.biases[l] = Eigen::VectorXd::Zero(o.biases[l].size());
    }
    return p;
}

std::size_t MlpParams::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < 3; ++l) n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    return n;
}

std::array<std::size_t, 4> MlpClassifier::widths() const {
    return {static_cast<std::size_t>(params.weights[0].rows()), static_cast<std::size_t>(params.weights[0].cols()),
            static_cast<std::size_t>(params.weights[1].cols()), static_cast<std::size_t>(params.weights[2].cols())};
}

MlpClassifier MlpClassifier::initialise(std::size_t input, std::size_t hidden1, std::size_t hidden2,
                                        std::size_t output, Head head, Rng& rng) {
    MlpClassifier m;
    m.head = head;
    const std::array<std::size_t, 4> w{input, hidden1, hidden2, output};
    for (std::size_t l = 0; l < 3; ++l) {
        // He-uniform.
        const double bound = std::sqrt(6.0 / static_cast<double>(w[l]));
        m.params.weights[l].resize(static_cast<Eigen::Index>(w[l]), static_cast<Eigen::Index>(w[l + 1]));
        for (Eigen::Index j = 0; j < m.params.weights[l].cols(); ++j) {
            for (Eigen::Index i = 0; i < m.params.weights[l].rows(); ++i) {
                m.params.weights[l](i, j) = rng.uniform(-bound, bound);
            }
        }
        m.params.biases[l] = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(w[l + 1]));
    }
    return m;
}

namespace {

struct Activations {
    Eigen::MatrixXd z1, a1, z2, a2, out;
};

Activations run(const MlpParams& p, const Eigen::MatrixXd& x) {
    Activations a;
    a.z1 = x * p.weights[0];
    a.z1.rowwise() += p.biases[0].transpose();
    a.a1 = a.z1.cwiseMax(0.0);
    a.z2 = a.a1 * p.weights[1];
    a.z2.rowwise() += p.biases[1].transpose();
    a.a2 = a.z2.cwiseMax(0.0);
    a.out = a.a2 * p.weights[2];
    a.out.rowwise() += p.biases[2].transpose();
    return a;
}

void softmax_row(std::span<const double> logits, std::span<double> out) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        out[c] = std::exp(logits[c] - mx);
        sum += out[c];
    }
    for (auto& v : out) v /= sum;
}

void check_batch(const MlpClassifier& m, const Batch& b) {
    const auto w = m.widths();
    if (static_cast<std::size_t>(b.x.cols()) != w[0]) throw DataError("batch dimension differs from classifier input");
    if (m.head == Head::logits && b.labels.size() != static_cast<std::size_t>(b.x.rows())) {
        throw DataError("batch label count differs from row count");
    }
    if (m.head == Head::heat && (b.heat.rows() != b.x.rows() || static_cast<std::size_t>(b.heat.cols()) != w[3])) {
        throw DataError("batch heat targets have the wrong shape");
    }
}

} // namespace

std::vector<double> forward(const MlpClassifier& member, std::span<const float> feature) {
    const auto w = member.widths();
    if (feature.size() != w[0]) {
        throw DataError("forward: feature dimension " + std::to_string(feature.size()) + " != " + std::to_string(w[0]));
    }
    Eigen::MatrixXd x(1, static_cast<Eigen::Index>(w[0]));
    for (std::size_t i = 0; i < feature.size(); ++i) {
        if (!std::isfinite(feature[i])) throw DataError("forward: non-finite feature value");
        x(0, static_cast<Eigen::Index>(i)) = feature[i];
    }
    const auto a = run(member.params, x);
    std::vector<double> out(w[3]);
    for (std::size_t c = 0; c < w[3]; ++c) out[c] = a.out(0, static_cast<Eigen::Index>(c));
    if (member.head == Head::logits) {
        std::vector<double> p(w[3]);
        softmax_row(out, p);
        return p;
    }
    return out;
}

double loss_and_gradient(const MlpClassifier& member, const Batch& batch, MlpParams& grad) {
    check_batch(member, batch);
    const auto& p = member.params;
    const auto a = run(p, batch.x);
    const auto n = static_cast<double>(batch.x.rows());
    Eigen::MatrixXd dout(a.out.rows(), a.out.cols());
    double total = 0.0;
    if (member.head == Head::logits) {
        for (Eigen::Index i = 0; i < a.out.rows(); ++i) {
            const double mx = a.out.row(i).maxCoeff();
            const double lse = mx + std::log((a.out.row(i).array() - mx).exp().sum());
            total += lse - a.out(i, batch.labels[static_cast<std::size_t>(i)]);
            dout.row(i) = (a.out.row(i).array() - lse).exp();
            dout(i, batch.labels[static_cast<std::size_t>(i)]) -= 1.0;
        }
        total /= n;
        dout /= n;
    } else {
        const Eigen::MatrixXd diff = a.out - batch.heat;
        const double count = n * static_cast<double>(diff.cols());
        total = diff.squaredNorm() / count;
        dout = 2.0 * diff / count;
    }

    grad.weights[2].noalias() = a.a2.transpose() * dout;
    grad.biases[2] = dout.colwise().sum().transpose();
    Eigen::MatrixXd d2 = (dout * p.weights[2].transpose()).cwiseProduct((a.z2.array() > 0.0).cast<double>().matrix());
    grad.weights[1].noalias() = a.a1.transpose() * d2;
    grad.biases[1] = d2.colwise().sum().transpose();
    Eigen::MatrixXd d1 = (d2 * p.weights[1].transpose()).cwiseProduct((a.z1.array() > 0.0).cast<double>().matrix());
    grad.weights[0].noalias() = batch.x.transpose() * d1;
    grad.biases[0] = d1.colwise().sum().transpose();
    return total;
}

double loss(const MlpClassifier& member, const Batch& batch) {
    MlpParams scratch = MlpParams::zeros_like(member.params);
    return loss_and_gradient(member, batch, scratch);
}

// ---- training ----

std::uint64_t TrainConfig::member_seed(std::size_t m) const {
    const std::uint64_t offset = member_seed_offsets.empty() ? m : member_seed_offsets.at(m);
    return hash_combine(seed, offset);
}

void TrainConfig::validate() const {
    if (members == 0) throw ConfigError("members", "must be positive");
    if (steps == 0) throw ConfigError("steps", "must be positive");
    if (batch_pixels == 0) throw ConfigError("batch_pixels", "must be positive");
    if (hidden[0] == 0 || hidden[1] == 0) throw ConfigError("hidden", "widths must be positive");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate", "must be positive");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2", "must lie in [0, 1)");
    if (!(epsilon > 0)) throw ConfigError("epsilon", "must be positive");
    if (!(sigma_fraction > 0)) throw ConfigError("sigma_fraction", "must be positive");
    if (!member_seed_offsets.empty()) {
        if (member_seed_offsets.size() != members) {
            throw ConfigError("member_seed_offsets", "need one offset per member");
        }
        if (std::set(member_seed_offsets.begin(), member_seed_offsets.end()).size() != members) {
            throw ConfigError("member_seed_offsets", "offsets must be distinct");
        }
    }
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"members", c.members},
            {"steps", c.steps},
            {"batch_pixels", c.batch_pixels},
            {"hidden", {c.hidden[0], c.hidden[1]}},
            {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"epsilon", c.epsilon},
            {"seed", c.seed},
            {"member_seed_offsets", c.member_seed_offsets},
            {"sigma_fraction", c.sigma_fraction},
            {"upsample", c.upsample == Upsample::bilinear ? "bilinear" : "nearest"}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("train", "expected an object");
    static const std::set<std::string> known = {"members", "steps", "batch_pixels", "hidden", "learning_rate",
                                                "beta1", "beta2", "epsilon", "seed", "member_seed_offsets",
                                                "sigma_fraction", "upsample"};
    for (const auto& [k, v] : j.items()) {
        if (!known.contains(k)) throw ConfigError("train." + k, "unknown key");
    }
    TrainConfig c;
    auto read = [&](const char* name, auto& field) {
        if (!j.contains(name)) return;
        try {
            j.at(name).get_to(field);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("train.") + name, e.what());
        }
    };
    read("members", c.members);
    read("steps", c.steps);
    read("batch_pixels", c.batch_pixels);
    std::vector<std::size_t> hidden{c.hidden[0], c.hidden[1]};
    read("hidden", hidden);
    if (hidden.size() != 2) throw ConfigError("train.hidden", "expected two hidden widths");
    c.hidden = {hidden[0], hidden[1]};
    read("learning_rate", c.learning_rate);
    read("beta1", c.beta1);
    read("beta2", c.beta2);
    read("epsilon", c.epsilon);
    read("seed", c.seed);
    read("member_seed_offsets", c.member_seed_offsets);
    read("sigma_fraction", c.sigma_fraction);
    std::string mode = c.upsample == Upsample::bilinear ? "bilinear" : "nearest";
    read("upsample", mode);
    if (mode == "bilinear") {
        c.upsample = Upsample::bilinear;
    } else if (mode == "nearest") {
        c.upsample = Upsample::nearest;
    } else {
        throw ConfigError("train.upsample", "expected 'bilinear' or 'nearest'");
    }
    c.validate();
    return c;
}

namespace {

struct AdamState {
    MlpParams m;
    MlpParams v;
    std::size_t t = 0;
};

void adam_step(MlpParams& p, const MlpParams& g, AdamState& s, const TrainConfig& c) {
    ++s.t;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
    auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
        m = c.beta1 * m + (1.0 - c.beta1) * grad;
        v = c.beta2 * v + (1.0 - c.beta2) * grad.cwiseProduct(grad);
        param.array() -= c.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.epsilon);
    };
    for (std::size_t l = 0; l < 3; ++l) {
        update(p.weights[l], g.weights[l], s.m.weights[l], s.v.weights[l]);
        update(p.biases[l], g.biases[l], s.m.biases[l], s.v.biases[l]);
    }
}

std::pair<MlpClassifier, std::vector<double>> train_member(const std::vector<Prepared>& data, const LabelSchema& schema,
                                                           const TrainConfig& config, std::size_t member_index,
                                                           std::size_t dim) {
    Rng rng(config.member_seed(member_index));
    const bool seg = schema.task == Task::segmentation;
    const std::size_t outputs = seg ? schema.size() : schema.keypoint_count();
    MlpClassifier member = MlpClassifier::initialise(dim, config.hidden[0], config.hidden[1], outputs,
                                                     seg ? Head::logits : Head::heat, rng);
    MlpParams grad = MlpParams::zeros_like(member.params);
    AdamState adam{MlpParams::zeros_like(member.params), MlpParams::zeros_like(member.params)};

    const std::size_t n_images = data.size();
    std::vector<std::size_t> quota(n_images);
    std::size_t rows = 0;
    for (std::size_t i = 0; i < n_images; ++i) {
        quota[i] = config.batch_pixels / n_images + (i < config.batch_pixels % n_images ? 1 : 0);
        quota[i] = std::max(quota[i], data[i].regions.pixels.size());
        rows += quota[i];
    }

    Batch batch;
    batch.x.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
    if (seg) {
        batch.labels.resize(rows);
    } else {
        batch.heat.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(outputs));
    }
    std::vector<float> feature(dim);
    std::vector<double> curve;
    curve.reserve(config.steps);

    for (std::size_t step = 0; step < config.steps; ++step) {
        Eigen::Index row = 0;
        for (std::size_t i = 0; i < n_images; ++i) {
            const auto& vol = data[i].annotated->sample.features;
            const auto idx = sample_pixel_indices(data[i].regions, vol.pixel_count(), quota[i], rng);
            for (auto p : idx) {
                features::pixel_feature_into(vol, p % vol.target_width(), p / vol.target_width(), config.upsample, feature);
                for (std::size_t k = 0; k < dim; ++k) batch.x(row, static_cast<Eigen::Index>(k)) = feature[k];
                if (seg) {
                    batch.labels[static_cast<std::size_t>(row)] = data[i].annotated->mask.labels[p];
                } else {
                    for (std::size_t k = 0; k < outputs; ++k) batch.heat(row, static_cast<Eigen::Index>(k)) = data[i].heat[k].values[p];
                }
                ++row;
            }
        }
        const double l = loss_and_gradient(member, batch, grad);
        if (!std::isfinite(l)) {
            std::ostringstream msg;
            msg << "training diverged: member " << member_index << " step " << step << " loss " << l
                << " (learning_rate " << config.learning_rate << ")";
            throw DivergenceError(msg.str());
        }
        curve.push_back(l);
        adam_step(member.params, grad, adam, config);
    }
    return {std::move(member), std::move(curve)};
}

} // namespace

InterpreterEnsemble train_ensemble(const std::vector<AnnotatedSample>& annotated, const LabelSchema& schema,
                                   const TrainConfig& config, std::size_t workers) {
    config.validate();
    schema.validate();
    if (annotated.empty()) throw DataError("train_ensemble: no annotated samples");
    const std::size_t dim = annotated.front().sample.features.dimension();
    std::vector<Prepared> data;
    for (const auto& a : annotated) {
        if (a.sample.features.dimension() != dim) {
            throw DataError("train_ensemble: sample " + std::to_string(a.sample.id) + " has D=" +
                            std::to_string(a.sample.features.dimension()) + ", expected " + std::to_string(dim));
        }
        validate(a, schema);
        data.push_back(prepare(a, schema, config.sigma_fraction));
    }

    InterpreterEnsemble ensemble;
    ensemble.schema = schema;
    ensemble.config = config;
    ensemble.members.resize(config.members);
    ensemble.loss_curves.resize(config.members);
    parallel_for(
        config.members,
        [&](std::size_t m) {
            auto [member, curve] = train_member(data, schema, config, m, dim);
            ensemble.members[m] = std::move(member);
            ensemble.loss_curves[m] = std::move(curve);
        },
        workers);
    return ensemble;
}

// ---- inference ----

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic>;
using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FloatMember {
    std::array<MatF, 3> w;
    std::array<Eigen::RowVectorXf, 3> b;
};

std::vector<FloatMember> to_float(const InterpreterEnsemble& e) {
    std::vector<FloatMember> out;
    for (const auto& m : e.members) {
        FloatMember f;
        for (std::size_t l = 0; l < 3; ++l) {
            f.w[l] = m.params.weights[l].cast<float>();
            f.b[l] = m.params.biases[l].transpose().cast<float>();
        }
        out.push_back(std::move(f));
    }
    return out;
}

void check_volume(const InterpreterEnsemble& e, const FeatureVolume& v) {
    if (e.members.empty()) throw DataError("ensemble has no members");
    if (v.dimension() != e.dimension()) {
        throw DataError("volume D=" + std::to_string(v.dimension()) + " differs from ensemble D=" +
                        std::to_string(e.dimension()));
    }
}

// Row blocks of roughly 4096 pixels.
std::size_t rows_per_block(const FeatureVolume& v) { return std::max<std::size_t>(1, 4096 / v.target_width()); }

// Runs every member over each block; `consume(y0, y1, member, outputs)`
// receives a (pixels x outputs) matrix.
template <typename Consume>
void for_each_block(const InterpreterEnsemble& e, const FeatureVolume& v, std::size_t workers, Consume consume) {
    const auto members = to_float(e);
    const std::size_t rpb = rows_per_block(v);
    const std::size_t blocks = (v.target_height() + rpb - 1) / rpb;
    const std::size_t dim = v.dimension();
    parallel_for(
        blocks,
        [&](std::size_t b) {
            const std::size_t y0 = b * rpb;
            const std::size_t y1 = std::min(v.target_height(), y0 + rpb);
            const std::size_t n = (y1 - y0) * v.target_width();
            RowMatF x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
            features::materialize_rows(v, y0, y1, e.config.upsample, std::span(x.data(), static_cast<std::size_t>(x.size())));
            MatF h1, h2, out;
            for (std::size_t m = 0; m < members.size(); ++m) {
                const auto& f = members[m];
                h1.noalias() = x * f.w[0];
                h1.rowwise() += f.b[0];
                h1 = h1.cwiseMax(0.0f);
                h2.noalias() = h1 * f.w[1];
                h2.rowwise() += f.b[1];
                h2 = h2.cwiseMax(0.0f);
                out.noalias() = h2 * f.w[2];
                out.rowwise() += f.b[2];
                consume(y0, y1, m, out);
            }
        },
        workers);
}

} // namespace

std::uint8_t majority_vote(std::span<const std::uint32_t> votes) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < votes.size(); ++c) {
        if (votes[c] > votes[best]) best = c;
    }
    return static_cast<std::uint8_t>(best);
}

SegmentationPrediction predict_segmentation(const InterpreterEnsemble& e, const FeatureVolume& v, std::size_t workers) {
    check_volume(e, v);
    if (e.task() != Task::segmentation) throw DataError("predict_segmentation: ensemble is not a segmentation ensemble");
    SegmentationPrediction pred;
    pred.members = e.members.size();
    pred.classes = e.schema.size();
    pred.mask = LabelMask(v.target_height(), v.target_width());
    pred.probs.assign(v.pixel_count() * pred.members * pred.classes, 0.0);
    const std::size_t w = v.target_width();
    const std::size_t nc = pred.classes;
    for_each_block(e, v, workers, [&](std::size_t y0, std::size_t y1, std::size_t m, const MatF& logits) {
        Eigen::ArrayXXd p = logits.cast<double>().array();
        p.colwise() -= p.rowwise().maxCoeff();
        p = p.exp();
        p.colwise() /= p.rowwise().sum();
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
            double* dst = pred.probs.data() + ((y0 * w + static_cast<std::size_t>(i)) * pred.members + m) * nc;
            for (std::size_t c = 0; c < nc; ++c) dst[c] = p(i, static_cast<Eigen::Index>(c));
        }
        if (m + 1 < pred.members) return;
        std::vector<std::uint32_t> votes(nc);
        for (std::size_t pixel = y0 * w; pixel < y1 * w; ++pixel) {
            std::fill(votes.begin(), votes.end(), 0);
            for (std::size_t k = 0; k < pred.members; ++k) {
                const auto d = pred.distribution(pixel, k);
                ++votes[static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin())];
            }
            pred.mask.labels[pixel] = majority_vote(votes);
        }
    });
    return pred;
}

Heatmap gaussian_heatmap(double x, double y, std::size_t height, std::size_t width, double sigma) {
    if (!(sigma > 0.0)) throw DataError("gaussian_heatmap: sigma must be positive");
    if (!(x >= 0 && y >= 0 && x <= width - 1.0 && y <= height - 1.0)) {
        throw DataError("gaussian_heatmap: keypoint outside the raster");
    }
    Heatmap h{height, width, std::vector<double>(height * width)};
    const double denom = 2.0 * sigma * sigma;
    for (std::size_t py = 0; py < height; ++py) {
        for (std::size_t px = 0; px < width; ++px) {
            const double dx = static_cast<double>(px) - x;
            const double dy = static_cast<double>(py) - y;
            h.values[py * width + px] = std::exp(-(dx * dx + dy * dy) / denom);
        }
    }
    return h;
}

Keypoint heatmap_argmax(const Heatmap& map, const std::string& name) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < map.values.size(); ++i) {
        if (map.values[i] > map.values[best]) best = i;
    }
    return {name, static_cast<double>(best % map.width), static_cast<double>(best / map.width)};
}

KeypointPrediction predict_keypoints(const InterpreterEnsemble& e, const FeatureVolume& v, std::size_t workers) {
    check_volume(e, v);
    if (e.task() != Task::keypoints) throw DataError("predict_keypoints: ensemble is not a keypoint ensemble");
    const std::size_t k = e.schema.keypoint_count();
    const std::size_t w = v.target_width();
    const double n = static_cast<double>(e.members.size());
    KeypointPrediction pred;
    const Heatmap blank{v.target_height(), w, std::vector<double>(v.pixel_count(), 0.0)};
    pred.heatmaps.assign(k, blank);
    pred.member_heatmaps.assign(e.members.size(), std::vector<Heatmap>(k, blank));
    for_each_block(e, v, workers, [&](std::size_t y0, std::size_t, std::size_t m, const MatF& heat) {
        for (Eigen::Index i = 0; i < heat.rows(); ++i) {
            const std::size_t pixel = y0 * w + static_cast<std::size_t>(i);
            for (std::size_t c = 0; c < k; ++c) {
                const double h = std::clamp(static_cast<double>(heat(i, static_cast<Eigen::Index>(c))), 0.0, 1.0);
                pred.member_heatmaps[m][c].values[pixel] = h;
                pred.heatmaps[c].values[pixel] += h / n;
            }
        }
    });
    for (std::size_t c = 0; c < k; ++c) pred.locations.push_back(heatmap_argmax(pred.heatmaps[c], e.schema.names[c + 1]));
    return pred;
}

// ---- checkpoints ----

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'G', 'E', '1'};

void put_matrix(detail::ByteWriter& w, const Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) w.put(m.data()[i]);
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const InterpreterEnsemble& e) {
    detail::ByteWriter w;
    for (char c : kCheckpointMagic) w.put(static_cast<std::uint8_t>(c));
    w.put(kCheckpointVersion);
    w.put_string(to_json(e.schema).dump());
    w.put_string(to_json(e.config).dump());
    w.put(static_cast<std::uint32_t>(e.members.size()));
    for (std::size_t m = 0; m < e.members.size(); ++m) {
        const auto& mem = e.members[m];
        w.put(static_cast<std::uint8_t>(mem.head));
        for (auto width : mem.widths()) w.put(static_cast<std::uint32_t>(width));
        for (std::size_t l = 0; l < 3; ++l) {
            put_matrix(w, mem.params.weights[l]);
            for (Eigen::Index i = 0; i < mem.params.biases[l].size(); ++i) w.put(mem.params.biases[l][i]);
        }
        const auto& curve = m < e.loss_curves.size() ? e.loss_curves[m] : std::vector<double>{};
        w.put(static_cast<std::uint32_t>(curve.size()));
        for (double v : curve) w.put(v);
    }
    return std::move(w.bytes);
}

InterpreterEnsemble decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw DataError("checkpoint: bad magic (expected DGE1)");
    }
    detail::ByteReader r(bytes.subspan(4), [](const std::string& what) -> void {
        throw DataError("checkpoint: truncated at " + what);
    });
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    InterpreterEnsemble e;
    try {
        e.schema = schema_from_json(nlohmann::json::parse(r.get_string("schema")));
        e.config = train_config_from_json(nlohmann::json::parse(r.get_string("config")));
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(std::string("checkpoint: malformed metadata: ") + ex.what());
    }
    const auto n = r.get<std::uint32_t>("member count");
    for (std::uint32_t m = 0; m < n; ++m) {
        const std::string what = "member " + std::to_string(m);
        MlpClassifier mem;
        const auto head = r.get<std::uint8_t>(what);
        if (head > 1) throw DataError("checkpoint: unknown head in " + what);
        mem.head = static_cast<Head>(head);
        std::array<std::uint32_t, 4> widths{};
        for (auto& x : widths) x = r.get<std::uint32_t>(what);
        for (std::size_t l = 0; l < 3; ++l) {
            auto& wm = mem.params.weights[l];
            wm.resize(widths[l], widths[l + 1]);
            if (static_cast<std::size_t>(wm.size()) > r.remaining() / 8) throw DataError("checkpoint: truncated at " + what);
            for (Eigen::Index i = 0; i < wm.size(); ++i) wm.data()[i] = r.get<double>(what);
            auto& b = mem.params.biases[l];
            b.resize(widths[l + 1]);
            for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = r.get<double>(what);
        }
        if (!e.members.empty() && e.members.front().widths() != mem.widths()) {
            throw DataError("checkpoint: " + what + " has a different layer shape");
        }
        std::vector<double> curve(r.get<std::uint32_t>(what));
        if (curve.size() > r.remaining() / 8) throw DataError("checkpoint: truncated at " + what);
        for (auto& v : curve) v = r.get<double>(what);
        e.members.push_back(std::move(mem));
        e.loss_curves.push_back(std::move(curve));
    }
    if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes");
    return e;
}

void save_checkpoint(const InterpreterEnsemble& e, const std::filesystem::path& path) {
    write_file(path, encode_checkpoint(e));
}

InterpreterEnsemble load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::string checkpoint_hash(const InterpreterEnsemble& e) { return sha256_hex(encode_checkpoint(e)); }

} // namespace dgan::interpreter

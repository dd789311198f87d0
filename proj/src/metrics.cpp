#include "dgan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace dgan::metrics {

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

void ConfusionMatrix::add(const LabelMask& pred, const LabelMask& truth) {
    if (pred.height != truth.height || pred.width != truth.width) {
        throw DataError("mask resolution mismatch: " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                        " vs " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
    }
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const std::size_t p = pred.labels[i];
        const std::size_t t = truth.labels[i];
        if (p >= classes || t >= classes) throw DataError("mask label " + std::to_string(std::max(p, t)) + " outside schema");
        ++counts[t * classes + p];
    }
}

ConfusionMatrix confusion(const LabelMask& pred, const LabelMask& truth, std::size_t classes) {
    ConfusionMatrix cm(classes);
    cm.add(pred, truth);
    return cm;
}

MiouResult miou_from_confusion(const ConfusionMatrix& cm, bool ignore_background) {
    MiouResult r;
    r.per_label.resize(cm.classes);
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < cm.classes; ++c) {
        std::uint64_t row = 0;
        std::uint64_t col = 0;
        for (std::size_t k = 0; k < cm.classes; ++k) {
            row += cm.at(c, k);
            col += cm.at(k, c);
        }
        const std::uint64_t inter = cm.at(c, c);
        const std::uint64_t uni = row + col - inter;
        if (uni == 0) continue;
        r.per_label[c] = static_cast<double>(inter) / static_cast<double>(uni);
        if (ignore_background && c == 0) continue;
        sum += *r.per_label[c];
        ++present;
    }
    r.mean = present == 0 ? 0.0 : sum / static_cast<double>(present);
    return r;
}

MiouResult miou(const LabelMask& pred, const LabelMask& truth, const LabelSchema& schema, bool ignore_background) {
    return miou_from_confusion(confusion(pred, truth, schema.size()), ignore_background);
}

MiouResult miou(std::span<const LabelMask> preds, std::span<const LabelMask> truths, const LabelSchema& schema,
                bool ignore_background) {
    if (preds.size() != truths.size()) throw DataError("miou: prediction and truth counts differ");
    ConfusionMatrix cm(schema.size());
    for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], truths[i]);
    return miou_from_confusion(cm, ignore_background);
}

std::vector<double> pck(std::span<const KeypointImage> images, const PckConfig& config) {
    for (double t : config.thresholds) {
        if (!(t > 0.0)) throw ConfigError("pck.thresholds", "thresholds must be positive");
    }
    std::vector<std::size_t> correct(config.thresholds.size(), 0);
    std::size_t total = 0;
    for (const auto& img : images) {
        const double scale = static_cast<double>(std::max(img.height, img.width));
        std::map<std::string, const Keypoint*> pred;
        for (const auto& p : img.pred) pred[p.name] = &p;
        if (pred.size() != img.pred.size()) throw DataError("pck: duplicate predicted keypoint names");
        for (const auto& t : img.truth) {
            const auto it = pred.find(t.name);
            if (it == pred.end()) throw DataError("pck: no prediction for keypoint '" + t.name + "'");
            const double d = std::hypot(it->second->x - t.x, it->second->y - t.y);
            for (std::size_t k = 0; k < config.thresholds.size(); ++k) {
                if (d <= config.thresholds[k] / 100.0 * scale) ++correct[k];
            }
            ++total;
        }
        if (img.truth.size() != img.pred.size()) throw DataError("pck: prediction has keypoints absent from the truth");
    }
    if (total == 0) throw DataError("pck: no truth keypoints");
    std::vector<double> out;
    for (auto c : correct) out.push_back(100.0 * static_cast<double>(c) / static_cast<double>(total));
    return out;
}

std::vector<double> pck(const std::vector<Keypoint>& pred, const std::vector<Keypoint>& truth, std::size_t height,
                        std::size_t width, const PckConfig& config) {
    const KeypointImage img{pred, truth, height, width};
    return pck(std::span(&img, 1), config);
}

double l2_heatmap(std::span<const interpreter::Heatmap> pred, std::span<const interpreter::Heatmap> truth) {
    if (pred.size() != truth.size() || pred.empty()) throw DataError("l2_heatmap: keypoint counts differ");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        if (pred[k].height != truth[k].height || pred[k].width != truth[k].width ||
            pred[k].values.size() != truth[k].values.size()) {
            throw DataError("l2_heatmap: heatmap shapes differ");
        }
        for (std::size_t i = 0; i < pred[k].values.size(); ++i) {
            const double d = pred[k].values[i] - truth[k].values[i];
            sum += d * d;
        }
        n += pred[k].values.size();
    }
    return sum / static_cast<double>(n);
}

FoldResult five_fold_select(std::size_t images, std::size_t checkpoints,
                            const std::function<double(std::size_t, std::span<const std::size_t>)>& evaluate) {
    constexpr std::size_t folds = 5;
    if (images < folds) throw DataError("five_fold_select: need at least 5 test images, got " + std::to_string(images));
    if (checkpoints == 0) throw DataError("five_fold_select: no checkpoints");
    FoldResult r;
    for (std::size_t f = 0; f < folds; ++f) {
        std::vector<std::size_t> val;
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < images; ++i) (i * folds / images == f ? val : rest).push_back(i);
        std::size_t best = 0;
        double best_score = evaluate(0, val);
        for (std::size_t c = 1; c < checkpoints; ++c) {
            const double s = evaluate(c, val);
            if (s > best_score) {
                best = c;
                best_score = s;
            }
        }
        r.picks.push_back(best);
        r.fold_scores.push_back(evaluate(best, rest));
    }
    for (double s : r.fold_scores) r.mean += s;
    r.mean /= folds;
    for (double s : r.fold_scores) r.std += (s - r.mean) * (s - r.mean);
    r.std = std::sqrt(r.std / folds);
    return r;
}

FoldResult five_fold_select(const std::vector<std::vector<double>>& scores) {
    if (scores.empty()) throw DataError("five_fold_select: no checkpoints");
    const std::size_t images = scores.front().size();
    for (const auto& row : scores) {
        if (row.size() != images) throw DataError("five_fold_select: checkpoints scored on different image counts");
    }
    return five_fold_select(images, scores.size(), [&](std::size_t c, std::span<const std::size_t> idx) {
        double s = 0.0;
        for (auto i : idx) s += scores[c][i];
        return s / static_cast<double>(idx.size());
    });
}

nlohmann::json to_json(const MetricRecord& r) {
    return {{"dataset", r.dataset}, {"metric", r.metric}, {"value", r.value}, {"std", r.std}};
}

MetricRecord metric_record_from_json(const nlohmann::json& j) {
    try {
        return {j.at("dataset").get<std::string>(), j.at("metric").get<std::string>(), j.at("value").get<double>(),
                j.at("std").get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("metric record: ") + e.what());
    }
}

void append_metric_records(const std::filesystem::path& path, std::span<const MetricRecord> records) {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    if (!out) throw DataError("cannot open " + path.string() + " for appending");
    for (const auto& r : records) out << to_json(r).dump() << '\n';
    if (!out) throw DataError("write failed: " + path.string());
}

std::vector<MetricRecord> read_metric_records(const std::filesystem::path& path) {
    std::vector<MetricRecord> out;
    if (!std::filesystem::exists(path)) return out;
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(metric_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("metric log " + path.string() + ": " + e.what());
        }
    }
    return out;
}

} // namespace dgan::metrics

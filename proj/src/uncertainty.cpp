#include "dgan/uncertainty.hpp"

#include "dgan/image.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace dgan::uncertainty {

void check_distribution(std::span<const double> d) {
    if (d.empty()) throw DataError("empty distribution");
    double sum = 0.0;
    for (double p : d) {
        if (!std::isfinite(p) || p < 0.0) throw DataError("distribution has a negative or non-finite entry");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw DataError("distribution sums to " + std::to_string(sum));
}

namespace {

double raw_entropy(std::span<const double> d) {
    double h = 0.0;
    for (double p : d) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

double js_unchecked(std::span<const double> flat, std::size_t members, std::size_t classes, std::vector<double>& mean) {
    mean.assign(classes, 0.0);
    double mean_h = 0.0;
    for (std::size_t m = 0; m < members; ++m) {
        const auto d = flat.subspan(m * classes, classes);
        for (std::size_t c = 0; c < classes; ++c) mean[c] += d[c];
        mean_h += raw_entropy(d);
    }
    for (auto& v : mean) v /= static_cast<double>(members);
    const double js = raw_entropy(mean) - mean_h / static_cast<double>(members);
    return std::clamp(js, 0.0, std::log(static_cast<double>(members)));
}

} // namespace

double entropy(std::span<const double> d, double base) {
    check_distribution(d);
    return raw_entropy(d) / std::log(base);
}

double js_divergence_flat(std::span<const double> flat, std::size_t members, std::size_t classes, double base) {
    if (members == 0) throw DataError("js_divergence: no distributions");
    if (classes == 0 || flat.size() != members * classes) throw DataError("js_divergence: arity mismatch");
    for (std::size_t m = 0; m < members; ++m) check_distribution(flat.subspan(m * classes, classes));
    std::vector<double> mean;
    return js_unchecked(flat, members, classes, mean) / std::log(base);
}

double js_divergence(std::span<const std::span<const double>> dists, double base) {
    if (dists.empty()) throw DataError("js_divergence: no distributions");
    const std::size_t classes = dists.front().size();
    std::vector<double> flat;
    flat.reserve(dists.size() * classes);
    for (const auto& d : dists) {
        if (d.size() != classes) throw DataError("js_divergence: arity mismatch");
        flat.insert(flat.end(), d.begin(), d.end());
    }
    return js_divergence_flat(flat, dists.size(), classes, base);
}

double js_divergence(const std::vector<std::vector<double>>& dists, double base) {
    std::vector<std::span<const double>> spans(dists.begin(), dists.end());
    return js_divergence(std::span<const std::span<const double>>(spans), base);
}

UncertaintyReport score_image(std::uint64_t id, const interpreter::SegmentationPrediction& p, double base) {
    const std::size_t pixels = p.mask.height * p.mask.width;
    if (p.members == 0 || p.classes == 0 || p.probs.size() != pixels * p.members * p.classes) {
        throw DataError("score_image: distributions missing for some pixels of sample " + std::to_string(id));
    }
    const auto c = static_cast<Eigen::Index>(p.classes);
    const auto m = static_cast<Eigen::Index>(p.members);
    const auto n = static_cast<Eigen::Index>(pixels);
    // Column pixel * members + member holds one distribution.
    const Eigen::Map<const Eigen::ArrayXXd> all(p.probs.data(), c, m * n);
    if (!all.isFinite().all() || (all < 0.0).any() || ((all.colwise().sum() - 1.0).abs() > 1e-9).any()) {
        const std::span<const double> flat(p.probs);
        for (std::size_t i = 0; i < pixels * p.members; ++i) check_distribution(flat.subspan(i * p.classes, p.classes));
    }
    // p log p with 0 log 0 = 0: a zero entry multiplies a finite log.
    const double tiny = std::numeric_limits<double>::min();
    const Eigen::ArrayXXd plogp = all * all.max(tiny).log();
    const Eigen::ArrayXd member_h =
        -Eigen::Map<const Eigen::ArrayXXd>(plogp.data(), c * m, n).colwise().sum().transpose() / static_cast<double>(m);
    Eigen::ArrayXXd mean = Eigen::ArrayXXd::Zero(c, n);
    for (Eigen::Index k = 0; k < m; ++k) {
        mean += Eigen::Map<const Eigen::ArrayXXd, 0, Eigen::OuterStride<>>(p.probs.data() + k * c, c, n,
                                                                           Eigen::OuterStride<>(m * c));
    }
    mean /= static_cast<double>(m);
    const Eigen::ArrayXd mean_h = -(mean * mean.max(tiny).log()).colwise().sum().transpose();
    const Eigen::ArrayXd js = (mean_h - member_h).max(0.0).min(std::log(static_cast<double>(m)));

    UncertaintyReport r{id, p.mask.height, p.mask.width, std::vector<double>(pixels), 0.0};
    const double scale = 1.0 / std::log(base);
    for (std::size_t i = 0; i < pixels; ++i) {
        r.pixel_js[i] = js[static_cast<Eigen::Index>(i)] * scale;
        r.image_score += r.pixel_js[i];
    }
    return r;
}

UncertaintyReport score_heat_variance(std::uint64_t id, const interpreter::KeypointPrediction& p) {
    if (p.member_heatmaps.empty() || p.heatmaps.empty()) throw DataError("score_heat_variance: no member heatmaps");
    const auto& first = p.heatmaps.front();
    const std::size_t pixels = first.height * first.width;
    UncertaintyReport r{id, first.height, first.width, std::vector<double>(pixels, 0.0), 0.0};
    const double n = static_cast<double>(p.member_heatmaps.size());
    for (std::size_t k = 0; k < p.heatmaps.size(); ++k) {
        for (std::size_t i = 0; i < pixels; ++i) {
            double mean = 0.0;
            for (const auto& member : p.member_heatmaps) mean += member.at(k).values.at(i);
            mean /= n;
            double var = 0.0;
            for (const auto& member : p.member_heatmaps) {
                const double d = member[k].values[i] - mean;
                var += d * d;
            }
            r.pixel_js[i] += var / n;
        }
    }
    for (double v : r.pixel_js) r.image_score += v;
    return r;
}

std::size_t drop_count(std::size_t n, double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("filter_ratio", "must lie in [0, 1)");
    // Guard against 0.1 * 10000 landing a hair above 1000.
    return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
}

FilterResult filter_by_uncertainty(std::span<const ScoredId> scores, double ratio) {
    const std::size_t drop = drop_count(scores.size(), ratio);
    std::set<std::uint64_t> ids;
    for (const auto& s : scores) {
        if (!std::isfinite(s.score)) throw DataError("sample " + std::to_string(s.id) + " has a non-finite score");
        if (!ids.insert(s.id).second) throw DataError("duplicate sample id " + std::to_string(s.id));
    }
    std::vector<ScoredId> order(scores.begin(), scores.end());
    std::sort(order.begin(), order.end(), [](const ScoredId& a, const ScoredId& b) {
        return a.score != b.score ? a.score > b.score : a.id > b.id;
    });
    FilterResult r;
    std::set<std::uint64_t> dropped;
    for (std::size_t i = 0; i < drop; ++i) {
        r.dropped.push_back(order[i].id);
        dropped.insert(order[i].id);
    }
    for (const auto& s : scores) {
        if (!dropped.contains(s.id)) r.kept.push_back(s.id);
    }
    return r;
}

FilterResult filter_by_uncertainty(std::span<const UncertaintyReport> reports, double ratio) {
    std::vector<ScoredId> scores;
    scores.reserve(reports.size());
    for (const auto& r : reports) scores.push_back({r.id, r.image_score});
    return filter_by_uncertainty(scores, ratio);
}

void write_uncertainty_log(const std::filesystem::path& path, std::span<const ScoredId> scores,
                           const FilterResult& result) {
    const std::set<std::uint64_t> kept(result.kept.begin(), result.kept.end());
    std::string text;
    for (const auto& s : scores) {
        text += nlohmann::json{{"id", s.id}, {"image_score", s.score}, {"kept", kept.contains(s.id)}}.dump();
        text += '\n';
    }
    write_text_file(path, text);
}

} // namespace dgan::uncertainty

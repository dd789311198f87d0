#include "doctest.h"

#include "dgan/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

using namespace dgan;
using namespace dgan::uncertainty;

namespace {

std::vector<double> random_distribution(Rng& rng, std::size_t classes) {
    std::vector<double> d(classes);
    double s = 0;
    for (auto& v : d) {
        v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
        s += v;
    }
    if (s == 0) {
        d[0] = 1;
        return d;
    }
    for (auto& v : d) v /= s;
    return d;
}

// Direct formula, written out independently of the library.
double js_oracle(const std::vector<std::vector<double>>& ds) {
    const std::size_t c = ds[0].size();
    std::vector<long double> mean(c, 0);
    long double mean_h = 0;
    for (const auto& d : ds) {
        for (std::size_t k = 0; k < c; ++k) {
            mean[k] += d[k] / ds.size();
            if (d[k] > 0) mean_h -= d[k] * std::log(static_cast<long double>(d[k])) / ds.size();
        }
    }
    long double h = 0;
    for (auto m : mean) {
        if (m > 0) h -= m * std::log(m);
    }
    return static_cast<double>(h - mean_h);
}

interpreter::SegmentationPrediction unanimous(std::size_t h, std::size_t w, std::size_t members, std::size_t classes) {
    interpreter::SegmentationPrediction p;
    p.mask = LabelMask(h, w);
    p.members = members;
    p.classes = classes;
    p.probs.assign(h * w * members * classes, 0.0);
    for (std::size_t i = 0; i < h * w * members; ++i) p.probs[i * classes + (i / members) % classes] = 1.0;
    return p;
}

} // namespace

TEST_CASE("entropy examples") {
    CHECK(entropy(std::vector<double>{0, 1, 0}) == 0.0);
    CHECK(entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(entropy(std::vector<double>{0.75, 0.25}) == doctest::Approx(0.5623).epsilon(1e-4));
    CHECK(entropy(std::vector<double>{0.5, 0.5}, 2.0) == doctest::Approx(1.0));
    CHECK_THROWS_AS(entropy(std::vector<double>{0.5, 0.6}), DataError);
    CHECK_THROWS_AS(entropy(std::vector<double>{1.5, -0.5}), DataError);
    CHECK_THROWS_AS(entropy(std::vector<double>{}), DataError);
}

TEST_CASE("js divergence examples") {
    CHECK(js_divergence({{0.2, 0.8}, {0.2, 0.8}, {0.2, 0.8}}) == 0.0);
    CHECK(js_divergence({{1, 0}, {0, 1}}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const double expected = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25)) - 0.5 * std::log(2.0);
    const double js = js_divergence({{0.5, 0.5}, {1, 0}});
    CHECK(js == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(js - 0.2158) < 5e-5);
    CHECK_THROWS_AS(js_divergence({{0.5, 0.5}, {1, 0, 0}}), DataError);
    CHECK_THROWS_AS(js_divergence(std::vector<std::vector<double>>{}), DataError);
}

TEST_CASE("js divergence properties on random ensembles") {
    Rng rng(99);
    for (int t = 0; t < 500; ++t) {
        const std::size_t n = 1 + rng.below(10);
        const std::size_t c = 2 + rng.below(6);
        std::vector<std::vector<double>> ds;
        for (std::size_t m = 0; m < n; ++m) ds.push_back(random_distribution(rng, c));
        const double js = js_divergence(ds);
        CHECK(js >= 0.0);
        CHECK(js <= std::log(static_cast<double>(n)) + 1e-12);
        CHECK(js == doctest::Approx(js_oracle(ds)).epsilon(1e-9));
        auto perm = ds;
        std::reverse(perm.begin(), perm.end());
        CHECK(js_divergence(perm) == doctest::Approx(js).epsilon(1e-12));
        CHECK(js_divergence(ds, 2.0) == doctest::Approx(js / std::log(2.0)).epsilon(1e-12));
        // Adding the mean distribution keeps the value within the bound for N + 1.
        std::vector<double> mean(c, 0.0);
        for (const auto& d : ds) {
            for (std::size_t k = 0; k < c; ++k) mean[k] += d[k] / n;
        }
        auto more = ds;
        more.push_back(mean);
        CHECK(js_divergence(more) <= std::log(static_cast<double>(n + 1)) + 1e-12);
    }
}

TEST_CASE("image score is the sum of pixel values") {
    auto p = unanimous(2, 2, 3, 2);
    CHECK(score_image(7, p).image_score == 0.0);
    // Member 1 at pixel 2 switches to the other class.
    const std::size_t base = (2 * 3 + 1) * 2;
    std::swap(p.probs[base], p.probs[base + 1]);
    const auto r = score_image(7, p);
    const auto& d = p.probs;
    const double expected = js_divergence({{d[12], d[13]}, {d[14], d[15]}, {d[16], d[17]}});
    CHECK(expected > 0.0);
    CHECK(r.image_score == doctest::Approx(expected).epsilon(1e-12));
    CHECK(r.pixel_js[2] == r.image_score);
    CHECK(r.id == 7);
    p.probs.pop_back();
    CHECK_THROWS_AS(score_image(7, p), DataError);
}

TEST_CASE("image score is additive and its ranking ignores the log base") {
    Rng rng(5);
    std::vector<double> nats;
    std::vector<double> bits;
    for (int img = 0; img < 30; ++img) {
        interpreter::SegmentationPrediction p;
        p.mask = LabelMask(4, 4);
        p.members = 4;
        p.classes = 3;
        for (std::size_t i = 0; i < 16 * 4; ++i) {
            const auto d = random_distribution(rng, 3);
            p.probs.insert(p.probs.end(), d.begin(), d.end());
        }
        const auto r = score_image(img, p);
        const double sum = std::accumulate(r.pixel_js.begin(), r.pixel_js.end(), 0.0);
        CHECK(r.image_score == doctest::Approx(sum).epsilon(1e-12));
        const double first = std::accumulate(r.pixel_js.begin(), r.pixel_js.begin() + 7, 0.0);
        const double second = std::accumulate(r.pixel_js.begin() + 7, r.pixel_js.end(), 0.0);
        CHECK(std::abs(first + second - r.image_score) < 1e-6);
        nats.push_back(r.image_score);
        bits.push_back(score_image(img, p, 2.0).image_score);
    }
    auto argsort = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
        return idx;
    };
    CHECK(argsort(nats) == argsort(bits));
}

TEST_CASE("filter drops the highest scores with id tie-break") {
    std::vector<ScoredId> s{{1, 5}, {2, 4}, {3, 3}, {4, 2}, {5, 1}};
    auto r = filter_by_uncertainty(s, 0.2);
    CHECK(r.dropped == std::vector<std::uint64_t>{1});
    CHECK(r.kept == std::vector<std::uint64_t>{2, 3, 4, 5});
    CHECK(filter_by_uncertainty(s, 0.0).dropped.empty());
    std::vector<ScoredId> ties{{4, 1}, {9, 1}, {2, 1}, {7, 0.5}};
    r = filter_by_uncertainty(ties, 0.5);
    CHECK(r.dropped == std::vector<std::uint64_t>{9, 4});
    CHECK(r.kept == std::vector<std::uint64_t>{2, 7});
    CHECK_THROWS_AS(filter_by_uncertainty(s, 1.0), ConfigError);
    CHECK_THROWS_AS(filter_by_uncertainty(s, -0.1), ConfigError);
    std::vector<ScoredId> dup{{1, 1}, {1, 2}};
    CHECK_THROWS_AS(filter_by_uncertainty(dup, 0.1), DataError);
}

TEST_CASE("filter partitions and drops the ceiling count") {
    Rng rng(8);
    std::vector<ScoredId> s;
    for (std::uint64_t i = 0; i < 10000; ++i) s.push_back({i, std::floor(rng.uniform() * 50)});
    const auto r = filter_by_uncertainty(s, 0.10);
    CHECK(r.dropped.size() == 1000);
    CHECK(r.kept.size() == 9000);
    std::vector<std::uint64_t> all = r.kept;
    all.insert(all.end(), r.dropped.begin(), r.dropped.end());
    std::sort(all.begin(), all.end());
    for (std::uint64_t i = 0; i < 10000; ++i) CHECK(all[i] == i);
    for (double ratio : {0.05, 0.15, 0.2, 0.3, 0.33}) {
        CHECK(drop_count(7, ratio) == static_cast<std::size_t>(std::ceil(ratio * 7 - 1e-9)));
    }
    CHECK(drop_count(3, 0.34) == 2);
    CHECK(drop_count(1, 0.0) == 0);
}

TEST_CASE("uncertainty log lines") {
    std::vector<ScoredId> s{{3, 0.5}, {4, 2.0}};
    const auto r = filter_by_uncertainty(s, 0.5);
    const auto path = std::filesystem::temp_directory_path() / "dgan_test_uncertainty.log";
    write_uncertainty_log(path, s, r);
    std::istringstream in(read_text_file(path));
    std::string line;
    std::getline(in, line);
    auto j = nlohmann::json::parse(line);
    CHECK(j["id"] == 3);
    CHECK(j["kept"] == true);
    std::getline(in, line);
    j = nlohmann::json::parse(line);
    CHECK(j["image_score"] == 2.0);
    CHECK(j["kept"] == false);
    std::filesystem::remove(path);
}

TEST_CASE("heat variance extension") {
    interpreter::KeypointPrediction p;
    const interpreter::Heatmap zero{1, 2, {0.0, 0.0}};
    p.heatmaps = {zero};
    p.member_heatmaps = {{interpreter::Heatmap{1, 2, {0.0, 1.0}}}, {interpreter::Heatmap{1, 2, {0.0, 0.0}}}};
    const auto r = score_heat_variance(1, p);
    CHECK(r.pixel_js[0] == 0.0);
    CHECK(r.pixel_js[1] == doctest::Approx(0.25));
    CHECK(r.image_score == doctest::Approx(0.25));
}

// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance            run everything
//   acceptance --list     names only
//   acceptance --only X   run criterion X (repeatable)

#include "dgan/annotation.hpp"
#include "dgan/backbone.hpp"
#include "dgan/factory.hpp"
#include "dgan/interpreter.hpp"
#include "dgan/metrics.hpp"
#include "dgan/project.hpp"
#include "dgan/rng.hpp"
#include "dgan/selection.hpp"
#include "dgan/service.hpp"
#include "dgan/uncertainty.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

using namespace dgan;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    std::string tier;
    double budget_s;
    std::function<Outcome()> run;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("dgan_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

std::vector<interpreter::AnnotatedSample> toy_annotated(const backbone::Backbone& bb, std::uint64_t first, std::size_t n) {
    std::vector<interpreter::AnnotatedSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto s = bb.generate_seed(first + i);
        auto truth = *s.truth;
        out.push_back({std::move(s), truth.mask, truth.keypoints});
    }
    return out;
}

interpreter::TrainConfig ensemble_config(std::size_t h1, std::size_t h2, std::size_t steps, std::size_t batch,
                                         std::uint64_t seed) {
    interpreter::TrainConfig c;
    c.members = 10;
    c.hidden = {h1, h2};
    c.steps = steps;
    c.batch_pixels = batch;
    c.seed = seed;
    return c;
}

// ---- gradient check ----

Outcome gradient_check() {
    using namespace interpreter;
    Rng rng(20240);
    double worst = 0.0;
    int redraws = 0;
    for (int net = 0; net < 20; ++net) {
        const Head head = net % 2 == 0 ? Head::logits : Head::heat;
        const std::size_t d = 3 + rng.below(6), h1 = 2 + rng.below(5), h2 = 2 + rng.below(5), out = 2 + rng.below(4);
        const std::size_t b = 4 + rng.below(7);
        const auto member = MlpClassifier::initialise(d, h1, h2, out, head, rng);
        // Redraw until every ReLU input is clear of its kink by far more than h.
        Batch batch;
        for (;;) {
            batch = Batch{};
            batch.x = Eigen::MatrixXd(b, d);
            for (Eigen::Index i = 0; i < batch.x.size(); ++i) batch.x.data()[i] = rng.normal();
            const auto& p = member.params;
            const Eigen::MatrixXd z1 = (batch.x * p.weights[0]).rowwise() + p.biases[0].transpose();
            const Eigen::MatrixXd z2 = (z1.cwiseMax(0.0) * p.weights[1]).rowwise() + p.biases[1].transpose();
            if (z1.cwiseAbs().minCoeff() > 1e-4 && z2.cwiseAbs().minCoeff() > 1e-4) break;
            ++redraws;
        }
        if (head == Head::logits) {
            for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<std::uint8_t>(rng.below(out)));
        } else {
            batch.heat = Eigen::MatrixXd(b, out);
            for (Eigen::Index i = 0; i < batch.heat.size(); ++i) batch.heat.data()[i] = rng.uniform();
        }
        MlpParams analytic = MlpParams::zeros_like(member.params);
        loss_and_gradient(member, batch, analytic);
        MlpClassifier probe = member;
        double diff2 = 0.0, norm2 = 0.0;
        const double h = 1e-6;
        auto visit = [&](double& param, double g) {
            const double saved = param;
            param = saved + h;
            const double up = loss(probe, batch);
            param = saved - h;
            const double down = loss(probe, batch);
            param = saved;
            const double numeric = (up - down) / (2 * h);
            diff2 += (numeric - g) * (numeric - g);
            norm2 += numeric * numeric + g * g;
        };
        for (std::size_t l = 0; l < 3; ++l) {
            for (Eigen::Index i = 0; i < probe.params.weights[l].size(); ++i)
                visit(probe.params.weights[l].data()[i], analytic.weights[l].data()[i]);
            for (Eigen::Index i = 0; i < probe.params.biases[l].size(); ++i)
                visit(probe.params.biases[l][i], analytic.biases[l][i]);
        }
        worst = std::max(worst, std::sqrt(diff2) / std::sqrt(norm2));
    }
    return {worst < 1e-4, "20 nets, worst relative error " + fmt(worst, 3) + " (limit 1e-4), " +
                             std::to_string(redraws) + " batches redrawn off ReLU kinks"};
}

// ---- JS oracle ----

long double oracle_js(const std::vector<std::vector<double>>& d) {
    const std::size_t m = d.size(), k = d[0].size();
    std::vector<long double> mix(k, 0.0L);
    for (const auto& p : d)
        for (std::size_t c = 0; c < k; ++c) mix[c] += static_cast<long double>(p[c]) / static_cast<long double>(m);
    long double js = 0.0L;
    for (const auto& p : d) {
        for (std::size_t c = 0; c < k; ++c) {
            const long double pc = p[c];
            if (pc > 0.0L) js += pc * std::log(pc / mix[c]);
        }
    }
    return js / static_cast<long double>(m);
}

Outcome js_oracle() {
    Rng rng(77);
    double worst = 0.0;
    int bound_violations = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t m = 2 + rng.below(11), k = 2 + rng.below(15);
        std::vector<std::vector<double>> d(m, std::vector<double>(k));
        for (auto& p : d) {
            const int style = static_cast<int>(rng.below(4));
            double sum = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                p[c] = -std::log(1.0 - rng.uniform());
                if (style == 1 && rng.uniform() < 0.4) p[c] = 0.0;
                if (style == 2) p[c] = std::pow(p[c], 8.0);
                sum += p[c];
            }
            if (style == 3 || sum == 0.0) {
                std::fill(p.begin(), p.end(), 0.0);
                p[rng.below(k)] = 1.0;
                continue;
            }
            for (auto& v : p) v /= sum;
            double resum = std::accumulate(p.begin(), p.end(), 0.0);
            p[0] += 1.0 - resum;
            if (p[0] < 0.0) p[0] = 0.0;
        }
        const double js = uncertainty::js_divergence(d);
        const double oracle = static_cast<double>(oracle_js(d));
        worst = std::max(worst, std::abs(js - oracle));
        if (js < 0.0 || js > std::log(static_cast<double>(m))) ++bound_violations;
    }
    const double example = uncertainty::js_divergence({{0.5, 0.5}, {1.0, 0.0}});
    const double example_oracle = static_cast<double>(oracle_js({{0.5, 0.5}, {1.0, 0.0}}));
    const bool ok = worst <= 1e-10 && bound_violations == 0 && std::abs(example - 0.2158) < 5e-5 &&
                    std::abs(example - example_oracle) <= 1e-12;
    return {ok, "1000 tuples, worst |js - oracle| " + fmt(worst, 3) + " (limit 1e-10), bound violations " +
                    std::to_string(bound_violations) + ", {[.5,.5],[1,0]} = " + fmt(example, 6) + " nats (0.2158)"};
}

// ---- filter semantics ----

Outcome filter_semantics() {
    const backbone::ToyBackbone bb(backbone::ToyBackboneConfig{});
    const auto ensemble = interpreter::train_ensemble(toy_annotated(bb, 0, 16), backbone::toy_schema(bb.config()),
                                                      ensemble_config(16, 8, 200, 512, 1));
    const auto dir = scratch("filter");
    factory::SynthesisOptions o;
    o.count = 10000;
    o.filter_ratio = 0.10;
    o.seed = 0;
    o.out_dir = dir;
    const auto m = factory::synthesize(bb, ensemble, o);

    std::vector<uncertainty::ScoredId> ranked;
    std::set<std::uint64_t> ids, kept, dropped;
    for (const auto& p : m.pairs) {
        ids.insert(p.id);
        ranked.push_back({p.id, p.image_score});
        (p.kept.value_or(false) ? kept : dropped).insert(p.id);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.score != b.score ? a.score > b.score : a.id > b.id;
    });
    std::set<std::uint64_t> expected_dropped;
    for (std::size_t i = 0; i < 1000 && i < ranked.size(); ++i) expected_dropped.insert(ranked[i].id);
    bool partition = ids.size() == 10000 && *ids.begin() == 0 && *ids.rbegin() == 9999 &&
                     kept.size() + dropped.size() == ids.size();
    for (auto id : kept) partition = partition && !dropped.contains(id);

    std::size_t log_lines = 0, log_dropped = 0;
    std::istringstream log(read_text_file(dir / "uncertainty.log"));
    for (std::string line; std::getline(log, line);) {
        ++log_lines;
        if (!json::parse(line).at("kept").get<bool>()) ++log_dropped;
    }
    const auto violations = factory::validate_manifest(dir);
    fs::remove_all(dir);
    const bool ok = dropped.size() == 1000 && kept.size() == 9000 && partition && dropped == expected_dropped &&
                    log_lines == 10000 && log_dropped == 1000 && violations.empty();
    return {ok, "10000 pairs at 64x64: dropped " + std::to_string(dropped.size()) + ", kept " +
                    std::to_string(kept.size()) + ", partition " + (partition ? "ok" : "broken") +
                    ", dropped = top-1000 by score " + (dropped == expected_dropped ? "yes" : "no") +
                    ", manifest violations " + std::to_string(violations.size())};
}

// ---- coreset ----

double dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

double radius_of(const std::vector<selection::PoolEntry>& pool, const std::vector<std::size_t>& centers) {
    double r = 0.0;
    for (const auto& e : pool) {
        double best = INFINITY;
        for (auto c : centers) best = std::min(best, dist(e.embedding, pool[c].embedding));
        r = std::max(r, best);
    }
    return r;
}

double optimal_radius(const std::vector<selection::PoolEntry>& pool, std::size_t n) {
    double best = INFINITY;
    std::vector<std::size_t> pick;
    std::function<void(std::size_t)> rec = [&](std::size_t start) {
        if (pick.size() == n) {
            best = std::min(best, radius_of(pool, pick));
            return;
        }
        for (std::size_t i = start; i < pool.size(); ++i) {
            pick.push_back(i);
            rec(i + 1);
            pick.pop_back();
        }
    };
    rec(0);
    return best;
}

Outcome coreset() {
    Rng rng(500);
    int approx_fail = 0;
    double worst_ratio = 0.0;
    for (int t = 0; t < 500; ++t) {
        const std::size_t size = 1 + rng.below(10);
        const std::size_t n = 1 + rng.below(std::min<std::size_t>(3, size));
        const std::size_t dim = 1 + rng.below(4);
        std::vector<selection::PoolEntry> pool(size);
        for (std::size_t i = 0; i < size; ++i) {
            pool[i].id = 100 + i * 3;
            for (std::size_t k = 0; k < dim; ++k) pool[i].embedding.push_back(std::round(rng.uniform(-5, 5) * 4) / 4);
        }
        const auto seed = pool[rng.below(size)].id;
        const auto centers = selection::kcenter_greedy(pool, n, seed, 1);
        const double greedy = selection::covering_radius(pool, centers);
        const double opt = optimal_radius(pool, n);
        if (greedy > 2.0 * opt + 1e-12) ++approx_fail;
        if (opt > 0) worst_ratio = std::max(worst_ratio, greedy / opt);
    }

    int band_fail = 0, band_cases = 0;
    for (std::size_t size : {100u, 95u, 37u, 250u}) {
        for (auto [k, band] : std::vector<std::pair<int, int>>{{10, 10}, {5, 15}, {0, 20}, {20, 10}, {10, 30}}) {
            std::vector<selection::PoolEntry> pool(size);
            for (std::size_t i = 0; i < size; ++i) {
                pool[i].id = i;
                pool[i].image_score = static_cast<double>((i * 7) % 13);
                pool[i].embedding = {static_cast<double>((i * 31) % 17), static_cast<double>((i * 11) % 5)};
            }
            const std::size_t discard = (static_cast<std::size_t>(k) * size + 99) / 100;
            const std::size_t upto = (static_cast<std::size_t>(k + band) * size + 99) / 100;
            std::vector<std::size_t> order(size);
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](auto a, auto b) {
                return pool[a].image_score != pool[b].image_score ? pool[a].image_score > pool[b].image_score : a > b;
            });
            std::vector<std::uint64_t> want_discard(order.begin(), order.begin() + discard);
            std::vector<std::uint64_t> want_band(order.begin() + discard, order.begin() + upto);
            std::uint64_t want_seed = want_band.front();
            for (auto id : want_band) {
                if (pool[id].image_score < pool[want_seed].image_score ||
                    (pool[id].image_score == pool[want_seed].image_score && id < want_seed))
                    want_seed = id;
            }
            const std::size_t centers = std::min<std::size_t>(12, want_band.size());
            const auto r = selection::propose_batch(pool, k, band, centers, 1);
            const std::set<std::uint64_t> band_set(want_band.begin(), want_band.end());
            bool ok = r.discarded == want_discard && r.band == want_band && r.seed_id == want_seed &&
                      r.chosen.size() == centers && r.chosen.front() == want_seed;
            for (auto id : r.chosen) ok = ok && band_set.contains(id);
            ++band_cases;
            if (!ok) ++band_fail;
        }
    }
    return {approx_fail == 0 && band_fail == 0,
            "500 instances, 2-approx failures " + std::to_string(approx_fail) + " (worst greedy/opt " +
                fmt(worst_ratio) + "), band arithmetic " + std::to_string(band_cases - band_fail) + "/" +
                std::to_string(band_cases) + " pools"};
}

// ---- toy end-to-end ----

Outcome toy_end_to_end() {
    backbone::ToyBackboneConfig cfg;
    const backbone::ToyBackbone bb(cfg);
    const auto schema = backbone::toy_schema(cfg);

    std::size_t unrealizable = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto s = bb.generate_seed(seed);
        features::PixelFeatureStream stream(s.features, features::Upsample::bilinear);
        while (auto f = stream.next())
            if (backbone::toy_decode_label(cfg, f->values) != s.truth->mask.at(f->x, f->y)) ++unrealizable;
    }

    std::vector<LabelMask> truths;
    std::vector<backbone::GeneratedSample> held;
    for (std::uint64_t i = 0; i < 20; ++i) {
        held.push_back(bb.generate_seed(1000000 + i));
        truths.push_back(held.back().truth->mask);
    }
    std::vector<double> mious;
    std::optional<interpreter::InterpreterEnsemble> first;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto e = interpreter::train_ensemble(toy_annotated(bb, seed * 1000, 16), schema,
                                             ensemble_config(64, 32, 1000, 1024, seed));
        std::vector<LabelMask> preds;
        for (const auto& s : held) preds.push_back(interpreter::predict_segmentation(e, s.features).mask);
        mious.push_back(metrics::miou(preds, truths, schema).mean);
        if (!first) first = std::move(e);
    }
    const double mean_miou = std::accumulate(mious.begin(), mious.end(), 0.0) / 5.0;

    // Corrupted latents: does dropping the most uncertain 10% raise agreement?
    backbone::ToyBackboneConfig corrupt_cfg = cfg;
    corrupt_cfg.corruption_fraction = 0.3;
    const backbone::ToyBackbone corrupt(corrupt_cfg);
    const auto dir = scratch("agreement");
    int runs_ok = 0;
    double gain = 0.0;
    const int runs = 20;
    for (int r = 0; r < runs; ++r) {
        factory::SynthesisOptions o;
        o.count = 100;
        o.seed = 10000000 + static_cast<std::uint64_t>(r) * 100;
        o.out_dir = dir / std::to_string(r);
        const auto m = factory::synthesize(corrupt, *first, o);
        double all = 0.0, kept = 0.0;
        std::size_t kept_n = 0;
        for (const auto& p : m.pairs) {
            const auto mask = decode_png_indexed(read_file(o.out_dir / p.annotation));
            const auto truth = corrupt.generate_seed(p.seed).truth->mask;
            std::size_t agree = 0;
            for (std::size_t i = 0; i < mask.labels.size(); ++i) agree += mask.labels[i] == truth.labels[i] ? 1 : 0;
            const double a = static_cast<double>(agree) / static_cast<double>(mask.labels.size());
            all += a;
            if (p.kept.value_or(false)) {
                kept += a;
                ++kept_n;
            }
        }
        all /= static_cast<double>(m.pairs.size());
        kept /= static_cast<double>(kept_n);
        if (kept >= all) ++runs_ok;
        gain += (kept - all) / runs;
    }
    fs::remove_all(dir);

    std::string per;
    for (double v : mious) per += (per.empty() ? "" : " ") + fmt(v, 3);
    const bool ok = unrealizable == 0 && mean_miou >= 0.70 && runs_ok == runs;
    return {ok, "realizability mismatches " + std::to_string(unrealizable) + "; held-out mIoU per seed [" + per +
                    "], mean " + fmt(mean_miou, 4) + " min " + fmt(*std::min_element(mious.begin(), mious.end()), 4) + " (bar 0.70); kept-90% agreement >= full-set in " +
                    std::to_string(runs_ok) + "/" + std::to_string(runs) + " corrupted runs (mean gain " +
                    fmt(gain, 3) + ")"};
}

// ---- dataset-size trend ----

// 16x16 box-filtered RGB thumbnail.
std::vector<float> thumbnail(const RgbImage& img) {
    const std::size_t bh = img.height / 16, bw = img.width / 16;
    std::vector<float> t(16 * 16 * 3, 0.0f);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) t[((y / bh) * 16 + x / bw) * 3 + c] += img.at(x, y)[c];
    for (auto& v : t) v /= static_cast<float>(bh * bw);
    return t;
}

// Label-transfer probe: every test pixel takes the majority label of the k
// nearest training images (thumbnail distance).
struct TransferProbe {
    std::vector<std::vector<float>> thumbs;
    std::vector<LabelMask> masks;
    std::size_t k = 5;
    std::size_t classes = 0;

    LabelMask predict(const RgbImage& img) const {
        const auto q = thumbnail(img);
        std::vector<std::pair<double, std::size_t>> d;
        for (std::size_t i = 0; i < thumbs.size(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) s += (q[j] - thumbs[i][j]) * (q[j] - thumbs[i][j]);
            d.push_back({s, i});
        }
        const auto kk = std::min(k, d.size());
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(kk), d.end());
        LabelMask out(img.height, img.width);
        std::vector<std::uint32_t> votes(classes);
        for (std::size_t p = 0; p < out.labels.size(); ++p) {
            std::fill(votes.begin(), votes.end(), 0);
            for (std::size_t n = 0; n < kk; ++n) ++votes[masks[d[n].second].labels[p]];
            out.labels[p] = interpreter::majority_vote(votes);
        }
        return out;
    }
};

Outcome dataset_size_trend() {
    backbone::ToyBackboneConfig cfg;
    const backbone::ToyBackbone bb(cfg);
    const auto schema = backbone::toy_schema(cfg);
    const auto ensemble = interpreter::train_ensemble(toy_annotated(bb, 0, 16), schema, ensemble_config(64, 32, 1000, 1024, 0));

    std::vector<backbone::GeneratedSample> test;
    for (std::uint64_t i = 0; i < 100; ++i) test.push_back(bb.generate_seed(2000000 + i));
    std::vector<LabelMask> truths;
    for (const auto& s : test) truths.push_back(s.truth->mask);

    const auto dir = scratch("trend");
    std::vector<double> scores, accuracies;
    for (std::size_t count : {300u, 1000u, 3000u}) {
        factory::SynthesisOptions o;
        o.count = count;
        o.filter_ratio = 0.10;
        o.out_dir = dir / std::to_string(count);
        const auto m = factory::synthesize(bb, ensemble, o);
        TransferProbe probe;
        probe.classes = schema.size();
        for (const auto& p : m.pairs) {
            if (!p.kept.value_or(false)) continue;
            probe.thumbs.push_back(thumbnail(decode_png_rgb(read_file(o.out_dir / p.image))));
            probe.masks.push_back(decode_png_indexed(read_file(o.out_dir / p.annotation)));
        }
        std::vector<LabelMask> preds;
        std::size_t correct = 0, total = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
            preds.push_back(probe.predict(test[i].image));
            for (std::size_t p = 0; p < truths[i].labels.size(); ++p) correct += preds[i].labels[p] == truths[i].labels[p];
            total += truths[i].labels.size();
        }
        scores.push_back(metrics::miou(preds, truths, schema).mean);
        accuracies.push_back(static_cast<double>(correct) / static_cast<double>(total));
    }
    fs::remove_all(dir);
    const bool ok = scores[0] <= scores[1] && scores[1] <= scores[2];
    return {ok, "probe mIoU 300/1000/3000: " + fmt(scores[0]) + " / " + fmt(scores[1]) + " / " + fmt(scores[2]) +
                    " (pixel accuracy " + fmt(accuracies[0]) + " / " + fmt(accuracies[1]) + " / " +
                    fmt(accuracies[2]) + "), non-decreasing required"};
}

// ---- metric oracles ----

Outcome metric_oracles() {
    Rng rng(200);
    int miou_mismatch = 0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t classes = 2 + rng.below(7);
        LabelSchema schema;
        for (std::size_t c = 0; c < classes; ++c) {
            schema.names.push_back("l" + std::to_string(c));
            schema.palette.push_back({static_cast<std::uint8_t>(c), 0, 0});
        }
        LabelMask pred(32, 32), truth(32, 32);
        // Some labels stay absent from both masks.
        const std::size_t used = 1 + rng.below(classes);
        for (std::size_t i = 0; i < 32 * 32; ++i) {
            truth.labels[i] = static_cast<std::uint8_t>(rng.below(used));
            pred.labels[i] = rng.uniform() < 0.6 ? truth.labels[i] : static_cast<std::uint8_t>(rng.below(used));
        }
        for (bool ignore_bg : {false, true}) {
            double sum = 0.0;
            int count = 0;
            for (std::size_t c = ignore_bg ? 1 : 0; c < classes; ++c) {
                std::uint64_t inter = 0, uni = 0;
                for (std::size_t i = 0; i < 32 * 32; ++i) {
                    const bool p = pred.labels[i] == c, q = truth.labels[i] == c;
                    inter += p && q;
                    uni += p || q;
                }
                if (uni == 0) continue;
                sum += static_cast<double>(inter) / static_cast<double>(uni);
                ++count;
            }
            const double expected = count == 0 ? 0.0 : sum / count;
            if (metrics::miou(pred, truth, schema, ignore_bg).mean != expected) ++miou_mismatch;
        }
    }

    int pck_violations = 0;
    metrics::PckConfig pc;
    pc.thresholds = {1, 2, 5, 10, 15, 25, 50, 100};
    for (int t = 0; t < 200; ++t) {
        std::vector<Keypoint> pred, truth;
        for (int k = 0; k < 5; ++k) {
            truth.push_back({"k" + std::to_string(k), rng.uniform(0, 63), rng.uniform(0, 47)});
            pred.push_back({"k" + std::to_string(k), rng.uniform(0, 63), rng.uniform(0, 47)});
        }
        const auto v = metrics::pck(pred, truth, 48, 64, pc);
        for (std::size_t i = 1; i < v.size(); ++i) pck_violations += v[i] < v[i - 1];
    }

    const auto r = metrics::five_fold_select({{0.5, 0.5, 0.6, 0.6, 0.7, 0.7, 0.4, 0.4, 0.9, 0.9},
                                              {0.6, 0.6, 0.5, 0.5, 0.8, 0.8, 0.3, 0.3, 0.5, 0.5}});
    const double folds[5] = {0.525, 0.625, 0.475, 0.675, 0.55};
    bool fold_ok = r.picks == std::vector<std::size_t>{1, 0, 1, 0, 0};
    for (int f = 0; f < 5; ++f) fold_ok = fold_ok && std::abs(r.fold_scores[f] - folds[f]) <= 1e-12;
    fold_ok = fold_ok && std::abs(r.mean - 0.57) <= 1e-12 && std::abs(r.std - std::sqrt(0.0051)) <= 1e-12;

    return {miou_mismatch == 0 && pck_violations == 0 && fold_ok,
            "mIoU mismatches vs tally " + std::to_string(miou_mismatch) + "/400 (exact), PCK monotonicity violations " +
                std::to_string(pck_violations) + ", five-fold fixture mean " + fmt(r.mean, 6) + " std " +
                fmt(r.std, 6) + " (0.57, sqrt(0.0051), tol 1e-12) " + (fold_ok ? "ok" : "mismatch")};
}

// ---- determinism ----

std::map<std::string, std::string> files_of(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dir).string();
        if (rel == "manifest.json") continue;
        out[rel] = read_text_file(e.path());
    }
    return out;
}

Outcome determinism() {
    const backbone::ToyBackbone bb(backbone::ToyBackboneConfig{});
    const auto schema = backbone::toy_schema(bb.config());
    const auto ensemble = interpreter::train_ensemble(toy_annotated(bb, 0, 16), schema, ensemble_config(16, 8, 200, 512, 3));
    const auto dir = scratch("determinism");
    std::vector<std::pair<json, std::map<std::string, std::string>>> runs;
    for (std::size_t workers : {1u, 4u}) {
        factory::SynthesisOptions o;
        o.count = 1000;
        o.seed = 500;
        o.workers = workers;
        o.out_dir = dir / std::to_string(workers);
        factory::synthesize(bb, ensemble, o);
        runs.push_back({factory::without_timing(json::parse(read_text_file(factory::manifest_path(o.out_dir)))),
                        files_of(o.out_dir)});
    }
    // Keypoint task scored by heat variance.
    const auto kp_schema = backbone::toy_schema(bb.config(), Task::keypoints);
    auto kp_config = ensemble_config(16, 8, 100, 512, 4);
    kp_config.members = 4;
    const auto kp_ensemble = interpreter::train_ensemble(toy_annotated(bb, 0, 8), kp_schema, kp_config);
    std::vector<std::pair<json, std::map<std::string, std::string>>> kp_runs;
    for (std::size_t workers : {1u, 4u}) {
        factory::SynthesisOptions o;
        o.count = 100;
        o.seed = 700;
        o.workers = workers;
        o.heat_variance = true;
        o.out_dir = dir / ("kp" + std::to_string(workers));
        factory::synthesize(bb, kp_ensemble, o);
        kp_runs.push_back({factory::without_timing(json::parse(read_text_file(factory::manifest_path(o.out_dir)))),
                           files_of(o.out_dir)});
    }
    fs::remove_all(dir);
    const bool manifests = runs[0].first == runs[1].first && kp_runs[0].first == kp_runs[1].first;
    const bool files = runs[0].second == runs[1].second && kp_runs[0].second == kp_runs[1].second;
    return {manifests && files, "segmentation 1000 pairs and keypoint heat-variance 100 pairs, 1 vs 4 workers: manifests " +
                                    std::string(manifests ? "identical" : "differ") + ", " +
                                    std::to_string(runs[0].second.size() + kp_runs[0].second.size()) + " files " +
                                    (files ? "byte-identical" : "differ")};
}

// ---- performance ----

struct PerfSetup {
    backbone::GeneratedSample sample;
    interpreter::InterpreterEnsemble ensemble;
};

PerfSetup perf_setup() {
    backbone::ToyBackboneConfig cfg;
    cfg.base_height = 32;
    cfg.base_width = 32;
    cfg.channels = {128, 128, 128, 128};
    const backbone::ToyBackbone bb(cfg);
    PerfSetup s{bb.generate_seed(1), {}};
    s.ensemble.schema = backbone::toy_schema(cfg);
    s.ensemble.config = ensemble_config(256, 128, 1, 1, 0);
    Rng rng(9);
    for (int m = 0; m < 10; ++m) {
        s.ensemble.members.push_back(
            interpreter::MlpClassifier::initialise(512, 256, 128, s.ensemble.schema.size(), interpreter::Head::logits, rng));
    }
    s.ensemble.loss_curves.resize(10);
    return s;
}

double time_inference(const PerfSetup& s, std::size_t workers) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto p = interpreter::predict_segmentation(s.ensemble, s.sample.features, workers);
    const double t = seconds_since(t0);
    if (p.mask.labels.size() != 256 * 256) throw std::runtime_error("wrong mask size");
    return t;
}

Outcome perf_single_thread() {
    const auto s = perf_setup();
    const double t = time_inference(s, 1);
    return {t < 5.0, "N=10, D=" + std::to_string(s.sample.features.dimension()) + ", 256x256, hidden 256/128: " +
                         fmt(t, 3) + " s single-threaded (limit 5 s)"};
}

Outcome perf_scaling() {
    const auto s = perf_setup();
    const double t1 = time_inference(s, 1);
    const double t8 = time_inference(s, 8);
    const double speedup = t1 / t8;
    return {speedup >= 3.0, "1 worker " + fmt(t1, 3) + " s, 8 workers " + fmt(t8, 3) + " s, speedup " +
                                fmt(speedup, 3) + " (needs >= 3; " + std::to_string(std::thread::hardware_concurrency()) +
                                " hardware threads available)"};
}

// ---- secondary: rasterization ----

// Exact even-odd test at the pixel center, coordinates in 1/256 pixel.
bool inside(const std::vector<std::pair<std::int64_t, std::int64_t>>& poly, std::int64_t px, std::int64_t py) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto [xi, yi] = poly[i];
        const auto [xj, yj] = poly[j];
        if ((yi > py) == (yj > py)) continue;
        // px < xi + (py - yi) * (xj - xi) / (yj - yi), sign-corrected.
        const std::int64_t lhs = (px - xi) * (yj - yi);
        const std::int64_t rhs = (py - yi) * (xj - xi);
        if (yj > yi ? lhs < rhs : lhs > rhs) in = !in;
    }
    return in;
}

std::size_t count_label(const LabelMask& m, std::uint8_t label) {
    return static_cast<std::size_t>(std::count(m.labels.begin(), m.labels.end(), label));
}

Outcome rasterization_oracle() {
    LabelSchema schema{{"background", "A"}, {Rgb{0, 0, 0}, Rgb{255, 0, 0}}, Task::segmentation};
    Rng rng(100);
    int mismatched = 0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 3 + rng.below(10);
        const double cx = rng.uniform(8, 24), cy = rng.uniform(8, 24);
        std::vector<double> angles(n);
        for (auto& a : angles) a = rng.uniform(0, 2 * M_PI);
        std::sort(angles.begin(), angles.end());
        annotation::AnnotationRecord rec;
        annotation::Polygon poly{"A", {}};
        std::vector<std::pair<std::int64_t, std::int64_t>> snapped;
        for (double a : angles) {
            const double r = rng.uniform(2, 14);
            const double x = std::clamp(cx + r * std::cos(a), 0.0, 32.0);
            const double y = std::clamp(cy + r * std::sin(a), 0.0, 32.0);
            poly.points.push_back({x, y});
            snapped.push_back({annotation::snap(x), annotation::snap(y)});
        }
        rec.polygons.push_back(poly);
        const auto mask = annotation::rasterize(rec, 32, 32, schema);
        for (std::int64_t y = 0; y < 32; ++y) {
            for (std::int64_t x = 0; x < 32; ++x) {
                const bool want = inside(snapped, 256 * x + 128, 256 * y + 128);
                if ((mask.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) == 1) != want) {
                    ++mismatched;
                    x = y = 32;
                }
            }
        }
    }

    // The square through the HTTP surface, as the UI submits it.
    const auto dir = scratch("raster_http");
    project::ProjectConfig pc;
    pc.pool_size = 40;
    project::Project::init(dir / "p", pc);
    std::size_t square = 0;
    {
        service::Service svc(dir / "p", {"127.0.0.1", 0, 0});
        httplib::Client cli("127.0.0.1", svc.start());
        const std::string base = "/api/v1/rounds/0/candidates/" + std::to_string(project::kMeanSampleId);
        cli.Post(base + "/accept");
        cli.Post(base + "/annotation", R"({"annotator": "ui", "polygons": [{"label": "body", "points": [[2, 2], [6, 2], [6, 6], [2, 6]]}]})",
                 "application/json");
        const auto png = cli.Get(base + "/mask");
        if (png && png->status == 200) {
            square = count_label(decode_png_indexed(std::span(reinterpret_cast<const std::uint8_t*>(png->body.data()),
                                                              png->body.size())),
                                 1);
        }
        svc.stop();
    }
    fs::remove_all(dir);
    return {mismatched == 0 && square == 16, "100 random star polygons at 32x32: " + std::to_string(mismatched) +
                                                 " differ from the exhaustive oracle; submitted square (2..5)^2 -> " +
                                                 std::to_string(square) + " pixels (16)"};
}

// ---- secondary: AL round flow ----

Outcome al_round_flow() {
    const auto dir = scratch("al");
    project::ProjectConfig pc;
    pc.train = ensemble_config(32, 16, 300, 512, 0);
    pc.train.learning_rate = 5e-3;
    pc.pool_seed = 1;
    pc.pool_size = 200;
    pc.eval_count = 5;
    project::Project::init(dir / "p", pc);
    service::Service svc(dir / "p", {"127.0.0.1", 0, 0});
    httplib::Client cli("127.0.0.1", svc.start());
    cli.set_read_timeout(300, 0);
    auto cand = [](std::size_t r, std::uint64_t id) {
        return "/api/v1/rounds/" + std::to_string(r) + "/candidates/" + std::to_string(id);
    };
    auto annotate = [&](std::size_t r, std::uint64_t id) {
        const auto truth = svc.project().candidate(r, id).truth->mask;
        const auto& s = svc.project().schema();
        json polys = json::array();
        for (std::size_t y = 0; y < truth.height; ++y) {
            for (std::size_t x = 0; x < truth.width;) {
                std::size_t end = x;
                while (end < truth.width && truth.at(end, y) == truth.at(x, y)) ++end;
                if (truth.at(x, y) != 0) {
                    const double x0 = static_cast<double>(x), x1 = static_cast<double>(end), y0 = static_cast<double>(y);
                    polys.push_back({{"label", s.names[truth.at(x, y)]}, {"points", {{x0, y0}, {x1, y0}, {x1, y0 + 1}, {x0, y0 + 1}}}});
                }
                x = end;
            }
        }
        return cli.Post(cand(r, id) + "/annotation", json{{"annotator", "acceptance"}, {"polygons", polys}}.dump(),
                        "application/json")->status;
    };
    auto retrain = [&]() {
        if (cli.Post("/api/v1/retrain")->status != 202) return false;
        for (int i = 0; i < 3000; ++i) {
            const auto state = json::parse(cli.Get("/api/v1/retrain")->body).at("state");
            if (state != "running") return state == "succeeded";
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
        return false;
    };

    const auto t0 = std::chrono::steady_clock::now();
    bool ok = cli.Post(cand(0, project::kMeanSampleId) + "/accept")->status == 200;
    ok = ok && annotate(0, project::kMeanSampleId) == 200;
    ok = ok && retrain();
    const auto rounds = json::parse(cli.Get("/api/v1/rounds")->body);
    std::vector<std::uint64_t> candidates;
    if (rounds.size() == 2) candidates = rounds[1].at("candidates").get<std::vector<std::uint64_t>>();
    ok = ok && candidates.size() == 12;
    int accepted = 0;
    std::string seventh;
    if (ok) {
        for (int i = 0; i < 6; ++i) accepted += cli.Post(cand(1, candidates[i]) + "/accept")->status == 200;
        const auto r = cli.Post(cand(1, candidates[6]) + "/accept");
        seventh = std::to_string(r->status) + " " + json::parse(r->body).at("error").at("code").get<std::string>();
        for (int i = 0; i < 6; ++i) ok = ok && annotate(1, candidates[i]) == 200;
        ok = ok && retrain();
    }
    const double elapsed = seconds_since(t0);
    const auto round2 = cli.Get("/api/v1/rounds/2");
    const std::size_t trained_on = round2 && round2->status == 200 ? json::parse(round2->body).at("trained_on").size() : 0;
    svc.stop();
    fs::remove_all(dir);
    ok = ok && accepted == 6 && seventh == "409 accept_limit" && trained_on == 7 && elapsed < 120.0;
    return {ok, "12 candidates, accepted " + std::to_string(accepted) + ", 7th accept -> " + seventh +
                    ", round 2 trained on " + std::to_string(trained_on) + " samples, flow " + fmt(elapsed, 3) +
                    " s (limit 120 s)"};
}

std::vector<Criterion> criteria() {
    return {
        {"gradient_check", "PRIMARY", 10, gradient_check},
        {"js_oracle", "PRIMARY", 5, js_oracle},
        {"filter_semantics", "PRIMARY", 120, filter_semantics},
        {"coreset", "PRIMARY", 30, coreset},
        {"toy_end_to_end", "PRIMARY", 600, toy_end_to_end},
        {"dataset_size_trend", "PRIMARY", 900, dataset_size_trend},
        {"metric_oracles", "PRIMARY", 30, metric_oracles},
        {"determinism", "PRIMARY", 300, determinism},
        {"perf_single_thread", "PRIMARY", 60, perf_single_thread},
        {"perf_scaling", "PRIMARY", 60, perf_scaling},
        {"rasterization_oracle", "SECONDARY", 60, rasterization_oracle},
        {"al_round_flow", "SECONDARY", 120, al_round_flow},
    };
}

} // namespace

int main(int argc, char** argv) {
    std::set<std::string> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--list") {
            for (const auto& c : criteria()) std::cout << c.name << "\n";
            return 0;
        }
        if (a == "--only" && i + 1 < argc) {
            only.insert(argv[++i]);
            continue;
        }
        std::cerr << "usage: acceptance [--list] [--only NAME]...\n";
        return 2;
    }
    int failed = 0, ran = 0;
    for (const auto& c : criteria()) {
        if (!only.empty() && !only.contains(c.name)) continue;
        ++ran;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double t = seconds_since(t0);
        const bool within = t <= c.budget_s;
        const bool pass = o.pass && within;
        failed += pass ? 0 : 1;
        std::cout << (pass ? "PASS" : "FAIL") << " [" << c.tier << "] " << c.name << " (" << fmt(t, 3) << " s / "
                  << c.budget_s << " s" << (within ? "" : ", over budget") << "): " << o.detail << std::endl;
    }
    if (ran == 0) {
        std::cerr << "no criterion matched\n";
        return 2;
    }
    return failed == 0 ? 0 : 1;
}

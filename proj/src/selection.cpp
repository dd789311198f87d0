#include "dgan/selection.hpp"

#include "dgan/image.hpp"
#include "dgan/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace dgan::selection {

std::vector<double> embedding_of(const backbone::GeneratedSample& sample) {
    return features::mean_pooled(sample.features);
}

void check_pool(std::span<const PoolEntry> pool) {
    if (pool.empty()) throw DataError("selection pool is empty");
    std::set<std::uint64_t> ids;
    const std::size_t dim = pool.front().embedding.size();
    for (const auto& e : pool) {
        if (!ids.insert(e.id).second) throw DataError("duplicate pool id " + std::to_string(e.id));
        if (e.embedding.size() != dim) throw DataError("pool entry " + std::to_string(e.id) + " has a different embedding size");
        for (double v : e.embedding) {
            if (!std::isfinite(v)) throw DataError("pool entry " + std::to_string(e.id) + " has a non-finite embedding");
        }
        if (!std::isfinite(e.image_score)) throw DataError("pool entry " + std::to_string(e.id) + " has a non-finite score");
    }
}

namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

std::size_t index_of(std::span<const PoolEntry> pool, std::uint64_t id) {
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].id == id) return i;
    }
    throw DataError("id " + std::to_string(id) + " is not in the pool");
}

} // namespace

std::vector<std::uint64_t> kcenter_greedy(std::span<const PoolEntry> pool, std::size_t n, std::uint64_t seed_id,
                                          std::size_t workers) {
    check_pool(pool);
    if (n > pool.size()) {
        throw DataError("kcenter_greedy: cannot pick " + std::to_string(n) + " centers from " + std::to_string(pool.size()));
    }
    const std::size_t seed = index_of(pool, seed_id);
    std::vector<std::uint64_t> centers;
    if (n == 0) return centers;
    std::vector<double> nearest(pool.size(), std::numeric_limits<double>::infinity());
    std::vector<bool> chosen(pool.size(), false);
    std::size_t current = seed;
    for (;;) {
        chosen[current] = true;
        centers.push_back(pool[current].id);
        if (centers.size() == n) break;
        const auto& c = pool[current].embedding;
        parallel_for(
            pool.size(), [&](std::size_t i) { nearest[i] = std::min(nearest[i], squared_distance(pool[i].embedding, c)); },
            pool.size() < 4096 ? 1 : workers);
        std::size_t best = pool.size();
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (chosen[i]) continue;
            if (best == pool.size() || nearest[i] > nearest[best] ||
                (nearest[i] == nearest[best] && pool[i].id < pool[best].id)) {
                best = i;
            }
        }
        current = best;
    }
    return centers;
}

double covering_radius(std::span<const PoolEntry> pool, std::span<const std::uint64_t> centers) {
    if (centers.empty()) throw DataError("covering_radius: no centers");
    double radius = 0.0;
    for (const auto& e : pool) {
        double best = std::numeric_limits<double>::infinity();
        for (auto id : centers) best = std::min(best, squared_distance(e.embedding, pool[index_of(pool, id)].embedding));
        radius = std::max(radius, best);
    }
    return std::sqrt(radius);
}

namespace {

std::size_t percent_count(std::size_t n, double percent) {
    return static_cast<std::size_t>(std::ceil(percent / 100.0 * static_cast<double>(n) - 1e-9));
}

} // namespace

SelectionRound propose_batch(std::span<const PoolEntry> pool, double k_percent, double band_percent,
                             std::size_t n_centers, std::size_t workers) {
    check_pool(pool);
    if (!(k_percent >= 0.0 && band_percent > 0.0 && k_percent + band_percent <= 100.0)) {
        throw ConfigError("k_percent", "need 0 <= k, band > 0 and k + band <= 100");
    }
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return pool[a].image_score != pool[b].image_score ? pool[a].image_score > pool[b].image_score
                                                          : pool[a].id > pool[b].id;
    });
    const std::size_t top = percent_count(pool.size(), k_percent);
    const std::size_t end = std::min(pool.size(), percent_count(pool.size(), k_percent + band_percent));
    SelectionRound round;
    round.k_percent = k_percent;
    round.band_percent = band_percent;
    round.n_centers = n_centers;
    std::vector<PoolEntry> band;
    for (std::size_t r = 0; r < end; ++r) {
        const auto& e = pool[order[r]];
        if (r < top) {
            round.discarded.push_back(e.id);
        } else {
            round.band.push_back(e.id);
            band.push_back(e);
        }
    }
    if (band.empty()) throw DataError("propose_batch: the uncertainty band is empty; enlarge the pool");
    if (band.size() < n_centers) {
        throw DataError("propose_batch: band holds " + std::to_string(band.size()) + " entries, cannot pick " +
                        std::to_string(n_centers) + " centers; enlarge the pool");
    }
    const auto seed = std::min_element(band.begin(), band.end(), [](const PoolEntry& a, const PoolEntry& b) {
        return a.image_score != b.image_score ? a.image_score < b.image_score : a.id < b.id;
    });
    round.seed_id = seed->id;
    round.chosen = kcenter_greedy(band, n_centers, round.seed_id, workers);
    return round;
}

backbone::LatentCode first_round_seed(std::span<const PoolEntry> pool, std::uint64_t id) {
    if (pool.empty()) throw DataError("first_round_seed: empty pool");
    backbone::LatentCode code{id, {}};
    for (const auto& e : pool) {
        if (!e.latent) throw DataError("first_round_seed: pool entry " + std::to_string(e.id) + " has no latent");
        if (code.z.empty()) code.z.assign(e.latent->size(), 0.0);
        if (e.latent->size() != code.z.size()) throw DataError("first_round_seed: latent sizes differ");
        for (std::size_t i = 0; i < code.z.size(); ++i) code.z[i] += (*e.latent)[i];
    }
    for (auto& v : code.z) v /= static_cast<double>(pool.size());
    return code;
}

nlohmann::json to_json(const SelectionRound& r) {
    return {{"schema_version", kRoundSchemaVersion},
            {"index", r.index},
            {"k_percent", r.k_percent},
            {"band_percent", r.band_percent},
            {"n_centers", r.n_centers},
            {"confirm_target", r.confirm_target},
            {"discarded", r.discarded},
            {"band", r.band},
            {"seed_id", r.seed_id},
            {"chosen", r.chosen},
            {"confirmed", r.confirmed}};
}

SelectionRound round_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema_version").get<int>() != kRoundSchemaVersion) {
            throw DataError("round state: unsupported schema_version " + j.at("schema_version").dump());
        }
        SelectionRound r;
        j.at("index").get_to(r.index);
        j.at("k_percent").get_to(r.k_percent);
        j.at("band_percent").get_to(r.band_percent);
        j.at("n_centers").get_to(r.n_centers);
        j.at("confirm_target").get_to(r.confirm_target);
        j.at("discarded").get_to(r.discarded);
        j.at("band").get_to(r.band);
        j.at("seed_id").get_to(r.seed_id);
        j.at("chosen").get_to(r.chosen);
        j.at("confirmed").get_to(r.confirmed);
        const std::set<std::uint64_t> chosen(r.chosen.begin(), r.chosen.end());
        for (auto id : r.confirmed) {
            if (!chosen.contains(id)) throw DataError("round state: confirmed id " + std::to_string(id) + " was not chosen");
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("round state: ") + e.what());
    }
}

void save_round(const SelectionRound& round, const std::filesystem::path& path) {
    write_text_file(path, to_json(round).dump(2) + "\n");
}

SelectionRound load_round(const std::filesystem::path& path) {
    try {
        return round_from_json(nlohmann::json::parse(read_text_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("round state " + path.string() + ": " + e.what());
    }
}

} // namespace dgan::selection

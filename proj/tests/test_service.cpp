#include "doctest.h"

#include "dgan/service.hpp"

#include <httplib.h>

#include <chrono>
#include <filesystem>
#include <thread>

using namespace dgan;
using namespace dgan::project;

namespace {

std::filesystem::path fresh(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("dgan_test_service_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

ProjectConfig light_config() {
    ProjectConfig c;
    c.train.members = 3;
    c.train.steps = 150;
    c.train.batch_pixels = 512;
    c.train.hidden = {32, 16};
    c.train.learning_rate = 5e-3;
    c.pool_seed = 1;
    c.pool_size = 150;
    c.eval_count = 2;
    return c;
}

// One unit-height rectangle per horizontal run of equal non-background label;
// rasterises back to the mask exactly.
nlohmann::json mask_to_record(const LabelMask& m, const LabelSchema& s) {
    nlohmann::json polys = nlohmann::json::array();
    for (std::size_t y = 0; y < m.height; ++y) {
        std::size_t x = 0;
        while (x < m.width) {
            const auto l = m.at(x, y);
            std::size_t end = x;
            while (end < m.width && m.at(end, y) == l) ++end;
            if (l != 0) {
                const double x0 = static_cast<double>(x);
                const double x1 = static_cast<double>(end);
                const double y0 = static_cast<double>(y);
                polys.push_back({{"label", s.names[l]}, {"points", {{x0, y0}, {x1, y0}, {x1, y0 + 1}, {x0, y0 + 1}}}});
            }
            x = end;
        }
    }
    return {{"annotator", "test"}, {"polygons", polys}};
}

std::string cand(std::size_t round, std::uint64_t id) {
    return "/api/v1/rounds/" + std::to_string(round) + "/candidates/" + std::to_string(id);
}

std::string error_code(const httplib::Result& r) { return nlohmann::json::parse(r->body)["error"]["code"]; }

void wait_for_retrain(httplib::Client& cli) {
    for (int i = 0; i < 1200; ++i) {
        const auto r = cli.Get("/api/v1/retrain");
        const auto state = nlohmann::json::parse(r->body)["state"];
        if (state != "running") {
            REQUIRE(state == "succeeded");
            return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    FAIL("retrain did not finish");
}

} // namespace

TEST_CASE("project bootstrap and local operations") {
    const auto dir = fresh("local");
    Project::init(dir, light_config());
    CHECK_THROWS_AS(Project::init(dir, light_config()), DataError);
    Project p(dir);
    REQUIRE(p.round_count() == 1);
    const auto r0 = p.round(0);
    REQUIRE(r0.round.chosen == std::vector<std::uint64_t>{kMeanSampleId});
    CHECK(r0.latents.at(kMeanSampleId).size() == 64);
    try {
        p.retrain(1);
        FAIL("expected refusal");
    } catch (const annotation::TransitionError& e) {
        CHECK(e.code() == "no_annotations");
    }
    annotation::AnnotationRecord rec;
    rec.sample_id = kMeanSampleId;
    rec.polygons.push_back({"body", {{2, 2}, {6, 2}, {6, 6}, {2, 6}}});
    CHECK_THROWS_AS(p.submit(0, rec), annotation::TransitionError);
    p.accept(0, kMeanSampleId);
    const auto stored = p.submit(0, rec);
    CHECK(stored.mask_sha256.size() == 64);
    const auto mask = p.annotation_mask(kMeanSampleId);
    CHECK(std::count(mask.labels.begin(), mask.labels.end(), 1) == 16);
    CHECK(p.round(0).complete());
    std::filesystem::remove_all(dir);
}

TEST_CASE("active learning round flow over HTTP") {
    const auto dir = fresh("http");
    Project::init(dir, light_config());
    service::ServiceOptions opt;
    opt.port = 0;
    auto svc = std::make_unique<service::Service>(dir, opt);
    const int port = svc->start();
    CHECK(DirectoryLock::is_locked(dir));
    CHECK_THROWS_AS(service::Service(dir, opt), DataError);
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(120, 0);

    auto doc = cli.Get("/api/v1");
    REQUIRE(doc);
    CHECK(nlohmann::json::parse(doc->body) == service::api_document());
    const auto schema = schema_from_json(nlohmann::json::parse(cli.Get("/api/v1/schema")->body));
    CHECK(schema.names.front() == "background");
    CHECK(cli.Get("/api/v1/nothing")->status == 404);

    // Round 0: the mean-latent sample.
    auto img = cli.Get(cand(0, kMeanSampleId) + "/image");
    REQUIRE(img->status == 200);
    const auto image = decode_png_rgb(std::span(reinterpret_cast<const std::uint8_t*>(img->body.data()), img->body.size()));
    CHECK(image.width == 64);
    CHECK(cli.Get(cand(0, 5) + "/image")->status == 404);
    CHECK(cli.Get(cand(0, kMeanSampleId) + "/uncertainty")->status == 409);
    auto r = cli.Post("/api/v1/retrain");
    CHECK(r->status == 400);
    CHECK(error_code(r) == "no_annotations");
    r = cli.Post(cand(0, kMeanSampleId) + "/annotation", R"({"polygons": []})", "application/json");
    CHECK(r->status == 409);
    CHECK(cli.Post(cand(0, kMeanSampleId) + "/accept")->status == 200);
    r = cli.Post(cand(0, kMeanSampleId) + "/annotation", R"({"polygons": [{"label": "body", "points": [[1, 1], [2, 2]]}]})",
                 "application/json");
    CHECK(r->status == 400);
    CHECK(error_code(r) == "polygon_vertices");
    const auto mean_truth = svc->project().candidate(0, kMeanSampleId).truth->mask;
    r = cli.Post(cand(0, kMeanSampleId) + "/annotation", mask_to_record(mean_truth, schema).dump(), "application/json");
    REQUIRE(r->status == 200);
    const auto mask_png = cli.Get(cand(0, kMeanSampleId) + "/mask");
    const auto mask = decode_png_indexed(std::span(reinterpret_cast<const std::uint8_t*>(mask_png->body.data()), mask_png->body.size()));
    CHECK(mask == mean_truth);

    r = cli.Post("/api/v1/retrain");
    REQUIRE(r->status == 202);
    const auto again = cli.Post("/api/v1/retrain");
    if (nlohmann::json::parse(cli.Get("/api/v1/retrain")->body)["state"] == "running") {
        CHECK(again->status == 409);
        CHECK(error_code(again) == "retrain_in_flight");
    }
    wait_for_retrain(cli);

    // Round 1: twelve coreset candidates, six may be accepted.
    const auto rounds = nlohmann::json::parse(cli.Get("/api/v1/rounds")->body);
    REQUIRE(rounds.size() == 2);
    const auto candidates = rounds[1]["candidates"].get<std::vector<std::uint64_t>>();
    REQUIRE(candidates.size() == 12);
    for (int i = 0; i < 6; ++i) CHECK(cli.Post(cand(1, candidates[i]) + "/accept")->status == 200);
    r = cli.Post(cand(1, candidates[6]) + "/accept");
    CHECK(r->status == 409);
    CHECK(error_code(r) == "accept_limit");
    CHECK(cli.Post(cand(1, candidates[7]) + "/skip")->status == 200);
    CHECK(cli.Post(cand(1, candidates[7]) + "/accept")->status == 409);
    const auto unc = nlohmann::json::parse(cli.Get(cand(1, candidates[0]) + "/uncertainty")->body);
    CHECK(unc["pixel_js"].size() == 64 * 64);
    CHECK(cli.Get(cand(1, candidates[0]) + "/overlay")->status == 200);
    for (int i = 0; i < 6; ++i) {
        const auto truth = svc->project().candidate(1, candidates[i]).truth->mask;
        CHECK(cli.Post(cand(1, candidates[i]) + "/annotation", mask_to_record(truth, schema).dump(), "application/json")->status == 200);
    }
    CHECK(nlohmann::json::parse(cli.Get("/api/v1/rounds/1")->body)["round"]["confirmed"].size() == 6);

    r = cli.Put("/api/v1/config/next-round", R"({"n_centers": 8, "confirm_target": 4})", "application/json");
    CHECK(r->status == 200);
    CHECK(cli.Put("/api/v1/config/next-round", R"({"n_centers": 0})", "application/json")->status == 400);
    CHECK(cli.Post("/api/v1/retrain")->status == 202);
    wait_for_retrain(cli);
    const auto round2 = nlohmann::json::parse(cli.Get("/api/v1/rounds/2")->body);
    CHECK(round2["round"]["chosen"].size() == 8);
    CHECK(round2["round"]["confirm_target"] == 4);
    CHECK(round2["trained_on"].size() == 7);
    CHECK(nlohmann::json::parse(cli.Get("/api/v1/rounds/1")->body)["round"]["n_centers"] == 12);
    const auto metrics = nlohmann::json::parse(cli.Get("/api/v1/metrics")->body);
    CHECK(metrics.size() == 6);
    CHECK(metrics[0]["metric"] == "miou");

    // Restart: round files unchanged, state restored.
    const auto before = read_text_file(dir / "rounds" / "round_001.json");
    svc.reset();
    CHECK_FALSE(DirectoryLock::is_locked(dir));
    svc = std::make_unique<service::Service>(dir, opt);
    CHECK(svc->project().round_count() == 3);
    CHECK(annotation::to_json(svc->project().round(1)).dump(2) + "\n" == before);
    CHECK(read_text_file(dir / "rounds" / "round_001.json") == before);
    CHECK(svc->project().ensemble() != nullptr);
    svc.reset();
    std::filesystem::remove_all(dir);
}

TEST_CASE("shipped API document matches the service") {
    const auto path = std::filesystem::path(DGAN_SOURCE_DIR) / "docs" / "api_v1.json";
    REQUIRE(std::filesystem::exists(path));
    CHECK(nlohmann::json::parse(read_text_file(path)) == service::api_document());
}

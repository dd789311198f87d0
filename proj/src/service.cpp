#include "dgan/service.hpp"

#include "dgan/image.hpp"

#include <httplib.h>

#include <chrono>

namespace dgan::service {

using annotation::TransitionError;

nlohmann::json api_document() {
    auto ep = [](const char* method, const char* path, const char* summary, nlohmann::json responses,
                 nlohmann::json body = nullptr) {
        nlohmann::json e{{"method", method}, {"path", path}, {"summary", summary}, {"responses", std::move(responses)}};
        if (!body.is_null()) e["request"] = std::move(body);
        return e;
    };
    const nlohmann::json error{{"error", {{"code", "string"}, {"message", "string"}}}};
    return {
        {"version", "v1"},
        {"base", "/api/v1"},
        {"error_format", error},
        {"error_codes",
         {{"400", {"bad_json", "config", "invalid", "no_annotations", "empty_annotation", "polygon_vertices",
                   "vertex_bounds", "unknown_label", "keypoint_bounds", "unknown_keypoint", "sample_mismatch"}},
          {"404", {"not_found"}},
          {"409", {"accept_limit", "invalid_transition", "not_accepted", "retrain_in_flight", "no_ensemble"}}}},
        {"endpoints",
         {ep("GET", "/api/v1", "This document.", {{"200", "application/json"}}),
          ep("GET", "/api/v1/schema", "Label schema: names, palette, task.", {{"200", "application/json"}}),
          ep("GET", "/api/v1/rounds", "Round summaries with status counts.", {{"200", "application/json"}}),
          ep("GET", "/api/v1/rounds/{round}", "Full round state.", {{"200", "application/json"}, {"404", "error"}}),
          ep("GET", "/api/v1/rounds/{round}/candidates/{id}/image", "Candidate image.",
             {{"200", "image/png"}, {"404", "error"}}),
          ep("GET", "/api/v1/rounds/{round}/candidates/{id}/overlay",
             "Candidate image with the current ensemble prediction blended in.", {{"200", "image/png"}, {"404", "error"}}),
          ep("GET", "/api/v1/rounds/{round}/candidates/{id}/uncertainty",
             "Per-pixel JS divergence (row-major) and image score under the current ensemble.",
             {{"200", "application/json"}, {"404", "error"}, {"409", "error"}}),
          ep("GET", "/api/v1/rounds/{round}/candidates/{id}/mask", "Server-rasterised annotation mask (palette PNG).",
             {{"200", "image/png"}, {"404", "error"}}),
          ep("GET", "/api/v1/rounds/{round}/candidates/{id}/annotation", "Stored annotation record.",
             {{"200", "application/json"}, {"404", "error"}}),
          ep("POST", "/api/v1/rounds/{round}/candidates/{id}/annotation",
             "Submit an annotation record for an accepted candidate.",
             {{"200", "stored record with mask_sha256"}, {"400", "error"}, {"404", "error"}, {"409", "error"}},
             {{"annotator", "string"},
              {"polygons", "[{label: string, points: [[x, y], ...]}] painted in order"},
              {"keypoints", "[{name: string, x: number, y: number}]"}}),
          ep("POST", "/api/v1/rounds/{round}/candidates/{id}/accept", "Mark a proposed candidate realistic.",
             {{"200", "round state"}, {"404", "error"}, {"409", "error"}}),
          ep("POST", "/api/v1/rounds/{round}/candidates/{id}/skip", "Skip a proposed candidate.",
             {{"200", "round state"}, {"404", "error"}, {"409", "error"}}),
          ep("POST", "/api/v1/retrain", "Start training on all annotations, then propose the next round.",
             {{"202", "retrain status"}, {"400", "error"}, {"409", "error"}}),
          ep("GET", "/api/v1/retrain", "Retrain job status: idle, running, succeeded, failed.", {{"200", "application/json"}}),
          ep("GET", "/api/v1/metrics", "Metric history records {dataset, metric, value, std}.", {{"200", "application/json"}}),
          ep("GET", "/api/v1/config/next-round", "Parameters for the next proposed round.", {{"200", "application/json"}}),
          ep("PUT", "/api/v1/config/next-round", "Update next-round parameters; existing rounds are unchanged.",
             {{"200", "application/json"}, {"400", "error"}},
             {{"k_percent", "number"}, {"band_percent", "number"}, {"n_centers", "integer"},
              {"confirm_target", "integer"}, {"filter_ratio", "number"}})}}};
}

nlohmann::json to_json(const RetrainStatus& s) {
    nlohmann::json j{{"state", s.state}, {"job", s.job}, {"message", s.message}};
    j["round"] = s.round ? nlohmann::json(*s.round) : nlohmann::json(nullptr);
    return j;
}

namespace {

void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    send_json(res, {{"error", {{"code", code}, {"message", message}}}}, status);
}

int status_for(const std::string& code) {
    if (code == "not_found") return 404;
    if (code == "accept_limit" || code == "invalid_transition" || code == "not_accepted" || code == "retrain_in_flight" ||
        code == "no_ensemble") {
        return 409;
    }
    return 400;
}

nlohmann::json round_summary(const annotation::RoundState& s) {
    nlohmann::json counts = nlohmann::json::object();
    for (auto st : {annotation::Status::proposed, annotation::Status::accepted, annotation::Status::annotated,
                    annotation::Status::skipped}) {
        counts[annotation::to_string(st)] = s.count(st);
    }
    return {{"index", s.round.index},
            {"candidates", s.round.chosen},
            {"counts", counts},
            {"confirm_target", s.round.confirm_target},
            {"complete", s.complete()},
            {"ensemble_hash", s.ensemble_hash}};
}

// Wraps a handler so library errors become JSON error responses.
template <typename F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const TransitionError& e) {
            send_error(res, status_for(e.code()), e.code(), e.what());
        } catch (const ConfigError& e) {
            send_error(res, 400, "config", e.what());
        } catch (const nlohmann::json::exception& e) {
            send_error(res, 400, "bad_json", e.what());
        } catch (const Error& e) {
            send_error(res, 400, "invalid", e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, "internal", e.what());
        }
    };
}

std::size_t round_of(const httplib::Request& req) { return std::stoul(req.matches[1]); }
std::uint64_t id_of(const httplib::Request& req) { return std::stoull(req.matches[2]); }

} // namespace

Service::Service(std::filesystem::path project_dir, ServiceOptions options)
    : lock_(project_dir),
      project_(std::make_unique<project::Project>(project_dir)),
      options_(std::move(options)),
      server_(std::make_unique<httplib::Server>()) {
    routes();
}

Service::~Service() {
    stop();
    join_retrain();
}

void Service::routes() {
    auto& s = *server_;
    auto& p = *project_;
    s.Get("/api/v1", guarded([](const httplib::Request&, httplib::Response& res) { send_json(res, api_document()); }));
    s.Get("/api/v1/schema", guarded([&p](const httplib::Request&, httplib::Response& res) { send_json(res, to_json(p.schema())); }));
    s.Get("/api/v1/rounds", guarded([&p](const httplib::Request&, httplib::Response& res) {
              nlohmann::json out = nlohmann::json::array();
              for (std::size_t i = 0; i < p.round_count(); ++i) out.push_back(round_summary(p.round(i)));
              send_json(res, out);
          }));
    s.Get(R"(/api/v1/rounds/(\d+))", guarded([&p](const httplib::Request& req, httplib::Response& res) {
              send_json(res, annotation::to_json(p.round(round_of(req))));
          }));
    const std::string cand = R"(/api/v1/rounds/(\d+)/candidates/(\d+))";
    s.Get(cand + "/image", guarded([&p](const httplib::Request& req, httplib::Response& res) {
              const auto png = p.candidate_image_png(round_of(req), id_of(req));
              res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
          }));
    s.Get(cand + "/overlay", guarded([&p](const httplib::Request& req, httplib::Response& res) {
              const auto png = p.overlay_png(round_of(req), id_of(req));
              res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
          }));
    s.Get(cand + "/uncertainty", guarded([&p](const httplib::Request& req, httplib::Response& res) {
              const auto r = p.candidate_uncertainty(round_of(req), id_of(req));
              send_json(res, {{"id", r.id}, {"height", r.height}, {"width", r.width}, {"image_score", r.image_score},
                              {"pixel_js", r.pixel_js}});
          }));
    s.Get(cand + "/mask", guarded([&p](const httplib::Request& req, httplib::Response& res) {
              p.round(round_of(req));
              const auto id = id_of(req);
              const auto mask = p.annotation_mask(id);
              const auto png = encode_png_indexed(mask, p.schema().palette);
              res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
          }));
    s.Get(cand + "/annotation", guarded([&p](const httplib::Request& req, httplib::Response& res) {
              p.round(round_of(req));
              const auto rec = p.annotation_of(id_of(req));
              if (!rec) throw TransitionError("not_found", "no annotation for sample " + std::to_string(id_of(req)));
              send_json(res, annotation::to_json(*rec));
          }));
    s.Post(cand + "/annotation", guarded([&p](const httplib::Request& req, httplib::Response& res) {
               auto body = nlohmann::json::parse(req.body);
               const auto id = id_of(req);
               if (body.contains("sample_id") && body.at("sample_id").get<std::uint64_t>() != id) {
                   throw TransitionError("sample_mismatch", "sample_id in the body differs from the URL");
               }
               body["sample_id"] = id;
               const auto stored = p.submit(round_of(req), annotation::record_from_json(body));
               send_json(res, annotation::to_json(stored));
           }));
    s.Post(cand + "/accept", guarded([&p](const httplib::Request& req, httplib::Response& res) {
               p.accept(round_of(req), id_of(req));
               send_json(res, annotation::to_json(p.round(round_of(req))));
           }));
    s.Post(cand + "/skip", guarded([&p](const httplib::Request& req, httplib::Response& res) {
               p.skip(round_of(req), id_of(req));
               send_json(res, annotation::to_json(p.round(round_of(req))));
           }));
    s.Post("/api/v1/retrain", guarded([this](const httplib::Request&, httplib::Response& res) {
               std::lock_guard lock(job_mutex_);
               if (status_.state == "running") throw TransitionError("retrain_in_flight", "a retrain is already running");
               if (project_->annotated_count() == 0) {
                   throw TransitionError("no_annotations", "retraining needs at least one annotated sample");
               }
               if (job_.joinable()) job_.join();
               status_ = {"running", status_.job + 1, std::nullopt, ""};
               job_ = std::thread([this] {
                   RetrainStatus done;
                   try {
                       const auto round = project_->retrain(options_.workers);
                       done.state = "succeeded";
                       done.round = round;
                   } catch (const std::exception& e) {
                       done.state = "failed";
                       done.message = e.what();
                   }
                   std::lock_guard inner(job_mutex_);
                   done.job = status_.job;
                   status_ = done;
               });
               send_json(res, to_json(status_), 202);
           }));
    s.Get("/api/v1/retrain", guarded([this](const httplib::Request&, httplib::Response& res) { send_json(res, to_json(retrain_status())); }));
    s.Get("/api/v1/metrics", guarded([&p](const httplib::Request&, httplib::Response& res) {
              nlohmann::json out = nlohmann::json::array();
              for (const auto& r : p.metrics_history()) out.push_back(metrics::to_json(r));
              send_json(res, out);
          }));
    s.Get("/api/v1/config/next-round", guarded([&p](const httplib::Request&, httplib::Response& res) {
              send_json(res, project::to_json(p.next_round_params()));
          }));
    s.Put("/api/v1/config/next-round", guarded([&p](const httplib::Request& req, httplib::Response& res) {
              const auto params = project::round_params_from_json(nlohmann::json::parse(req.body), p.next_round_params());
              p.set_next_round_params(params);
              send_json(res, project::to_json(params));
          }));
    s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "not_found" : "error", "no such endpoint");
    });
}

int Service::start() {
    if (options_.port == 0) {
        port_ = server_->bind_to_any_port(options_.host);
    } else {
        if (!server_->bind_to_port(options_.host, options_.port)) port_ = -1;
        else port_ = options_.port;
    }
    if (port_ < 0) throw DataError("cannot bind " + options_.host + ":" + std::to_string(options_.port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return port_;
}

void Service::run() {
    if (!server_->listen(options_.host, options_.port)) {
        throw DataError("cannot listen on " + options_.host + ":" + std::to_string(options_.port));
    }
}

void Service::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

RetrainStatus Service::retrain_status() const {
    std::lock_guard lock(job_mutex_);
    return status_;
}

void Service::join_retrain() {
    std::thread job;
    {
        std::lock_guard lock(job_mutex_);
        job = std::move(job_);
    }
    if (job.joinable()) job.join();
}

} // namespace dgan::service

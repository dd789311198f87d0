#pragma once

#include "dgan/lock.hpp"
#include "dgan/project.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

namespace httplib {
class Server;
}

namespace dgan::service {

// Endpoint list served at GET /api/v1 and shipped as docs/api_v1.json.
nlohmann::json api_document();

struct ServiceOptions {
    std::string host = "127.0.0.1";
    int port = 8080; // 0 picks a free port
    std::size_t workers = 0;
};

struct RetrainStatus {
    std::string state = "idle"; // idle, running, succeeded, failed
    std::size_t job = 0;
    std::optional<std::size_t> round;
    std::string message;
};

nlohmann::json to_json(const RetrainStatus& s);

// Owns the project directory (lock file) while alive.
class Service {
public:
    Service(std::filesystem::path project_dir, ServiceOptions options);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds and serves on a background thread; returns the bound port.
    int start();
    // Serves on the calling thread until stop().
    void run();
    void stop();

    project::Project& project() noexcept { return *project_; }
    RetrainStatus retrain_status() const;
    // Waits for a running retrain job to finish.
    void join_retrain();

private:
    void routes();

    DirectoryLock lock_;
    std::unique_ptr<project::Project> project_;
    ServiceOptions options_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    int port_ = 0;

    mutable std::mutex job_mutex_;
    RetrainStatus status_;
    std::thread job_;
};

} // namespace dgan::service

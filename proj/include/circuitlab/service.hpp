#pragma once

// HTTP front end over one checkpoint and dataset. Inference endpoints run
// concurrently against read-only state; experiments go through a bounded
// single-worker queue.

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <json.hpp>

#include "circuitlab/runner.hpp"

namespace httplib {
class Server;
}

namespace circuitlab {

struct ServiceOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path report_dir = "reports";
  std::size_t queue_capacity = 8;
  std::size_t stats_pool = 512;
  std::size_t max_episodes = 200;  // cap on GET /episodes
};

enum class JobState : std::uint8_t { queued, running, done, failed };
std::string to_string(JobState s);

struct Job {
  std::string id;
  ExperimentConfig config;
  JobState state = JobState::queued;
  std::string error_type;
  std::string error;
  std::filesystem::path report;
};

// {"error": {"type": ..., "message": ...}}
nlohmann::json error_body(const std::string& type, const std::string& message);
// Class name of a library error, "internal" otherwise.
std::string error_type(const std::exception& e);
// 400 for request errors, 500 for the rest.
int error_status(const std::exception& e);

class LabService {
 public:
  explicit LabService(ServiceOptions opts);
  ~LabService();
  LabService(const LabService&) = delete;
  LabService& operator=(const LabService&) = delete;

  int bind_to_any_port(const std::string& host);
  bool bind(const std::string& host, int port);
  // Blocks until stop().
  void listen_after_bind();
  void stop();

  nlohmann::json queue_status() const;
  nlohmann::json model_info() const;
  const LabContext& context() const { return ctx_; }

 private:
  void routes();
  void worker_loop();
  // Adds or finds a job; returns the job id. Throws QueueFull.
  std::string submit(ExperimentConfig cfg);

  ServiceOptions opts_;
  LabContext ctx_;
  LabContext worker_ctx_;
  std::unique_ptr<httplib::Server> server_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::string> pending_;
  std::map<std::string, Job> jobs_;
  std::string running_;
  long completed_ = 0;
  bool stopping_ = false;
  std::thread worker_;
};

}  // namespace circuitlab

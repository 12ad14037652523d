#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "retrostory/config.h"
#include "retrostory/data.h"
#include "retrostory/training.h"

namespace httplib {
class Server;
}

namespace retrostory::service {

struct HttpResult {
  int status = 200;
  Json body = Json::object();
};

struct ServiceOptions {
  std::filesystem::path checkpoint;
  // Defaults to model-card.json next to the checkpoint.
  std::filesystem::path model_card;
  // Optional dataset root so requests may name a source frame by story id.
  std::filesystem::path data_root;
  std::string data_format = "synthetic";
  std::string host = "127.0.0.1";
  int port = 8080;
};

// Request handling is independent of the HTTP layer so it can be exercised
// directly. Generation runs on a single worker thread fed by a FIFO queue.
class StoryService {
 public:
  explicit StoryService(ServiceOptions options);
  ~StoryService();

  StoryService(const StoryService&) = delete;
  StoryService& operator=(const StoryService&) = delete;

  // Loads the checkpoint (and dataset, model card); throws on failure.
  void load();
  bool ready() const { return ready_.load(); }

  HttpResult health() const;
  HttpResult model_card() const;
  HttpResult generate(const std::string& body);

  // Binds the HTTP server; port 0 picks a free port. Returns the bound port.
  int bind();
  // Blocks until stop() is called.
  void listen();
  void stop();

  const ServiceOptions& options() const { return options_; }

 private:
  HttpResult run_generation(const Json& request);
  void worker_loop();

  ServiceOptions options_;
  std::atomic<bool> ready_{false};
  std::optional<training::StoryBundle> bundle_;
  std::optional<data::Dataset> dataset_;
  std::optional<Json> card_;
  std::string model_id_;
  std::string config_digest_;

  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::thread worker_;

  std::unique_ptr<httplib::Server> server_;
};

}  // namespace retrostory::service

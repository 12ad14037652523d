#include "retrostory/service.h"

#include <chrono>
#include <future>

#include "retrostory/errors.h"
#include "retrostory/pipeline.h"

// After Eigen: <resolv.h> defines a _res macro.
#include "httplib.h"

namespace retrostory::service {
namespace {

using Clock = std::chrono::steady_clock;

HttpResult error(int status, const std::string& message) {
  return {status, Json{{"error", message}}};
}

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

}  // namespace

StoryService::StoryService(ServiceOptions options) : options_(std::move(options)) {
  worker_ = std::thread([this] { worker_loop(); });
}

StoryService::~StoryService() {
  stop();
  {
    std::lock_guard<std::mutex> lock(mutex_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void StoryService::load() {
  auto bundle = training::load_story_checkpoint(options_.checkpoint);
  model_id_ = sha256_hex(read_file(options_.checkpoint)).substr(0, 16);
  config_digest_ = sha256_hex(to_json(bundle.config).dump()).substr(0, 16);
  if (!options_.data_root.empty()) dataset_ = data::load_dataset(options_.data_root, options_.data_format);
  auto card_path = options_.model_card.empty() ? options_.checkpoint.parent_path() / "model-card.json"
                                               : options_.model_card;
  if (std::filesystem::exists(card_path)) {
    const auto text = read_file(card_path);
    card_ = Json::parse(text.begin(), text.end());
  }
  bundle_ = std::move(bundle);
  ready_.store(true);
}

HttpResult StoryService::health() const {
  if (!ready()) return error(503, "model not ready");
  return {200, Json{{"status", "ok"}, {"model_id", model_id_}, {"config_digest", config_digest_}}};
}

HttpResult StoryService::model_card() const {
  if (!card_) return error(404, "no model card for this checkpoint");
  return {200, *card_};
}

HttpResult StoryService::generate(const std::string& body) {
  if (!ready()) return error(503, "model not ready");
  const Json request = Json::parse(body, nullptr, false);
  if (request.is_discarded() || !request.is_object()) return error(400, "request body must be a JSON object");

  const auto enqueued = Clock::now();
  auto task = std::make_shared<std::packaged_task<HttpResult()>>([this, request, enqueued] {
    const auto started = Clock::now();
    auto result = run_generation(request);
    if (result.status == 200)
      result.body["timings"] = {{"queue_ms", ms_between(enqueued, started)},
                                {"generate_ms", ms_between(started, Clock::now())}};
    return result;
  });
  auto future = task->get_future();
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (stopping_) return error(503, "service is shutting down");
    queue_.emplace_back([task] { (*task)(); });
  }
  cv_.notify_one();
  return future.get();
}

HttpResult StoryService::run_generation(const Json& request) {
  const auto& config = bundle_->config;
  for (const auto& [key, value] : request.items())
    if (key != "captions" && key != "source_image" && key != "source_id" && key != "sampler")
      return error(400, "unknown field '" + key + "'");
  if (!request.contains("captions") || !request["captions"].is_array())
    return error(400, "'captions' must be a list of strings");
  std::vector<std::string> captions;
  for (const auto& c : request["captions"]) {
    if (!c.is_string() || c.get<std::string>().empty())
      return error(400, "every caption must be a non-empty string");
    captions.push_back(c.get<std::string>());
  }
  if (captions.size() < 2) return error(400, "a story needs at least 2 captions (source + target)");
  if (static_cast<int>(captions.size()) > config.max_frames)
    return error(413, "at most " + std::to_string(config.max_frames) + " captions are supported");

  SamplerConfig sampler;
  if (request.contains("sampler")) {
    const auto& s = request["sampler"];
    if (!s.is_object()) return error(400, "'sampler' must be an object");
    for (const auto& [key, value] : s.items()) {
      if (key == "temperature" && value.is_number() && value.get<double>() >= 0.0) {
        sampler.temperature = value.get<double>();
      } else if (key == "top_k" && value.is_number_integer() && value.get<std::int64_t>() >= 0) {
        sampler.top_k = value.get<int>();
      } else if (key == "seed" && value.is_number_unsigned()) {
        sampler.seed = value.get<std::uint64_t>();
      } else {
        return error(400, "invalid sampler field '" + key + "'");
      }
    }
  }

  Image source;
  if (request.contains("source_image")) {
    if (!request["source_image"].is_string()) return error(400, "'source_image' must be a base64 PNG string");
    try {
      source = decode_png(base64_decode(request["source_image"].get<std::string>()));
    } catch (const std::exception& e) {
      return error(400, std::string("could not decode source_image: ") + e.what());
    }
  } else if (request.contains("source_id")) {
    if (!request["source_id"].is_string()) return error(400, "'source_id' must be a string");
    if (!dataset_) return error(400, "no dataset loaded; send source_image instead");
    const auto* sample = dataset_->find(request["source_id"].get<std::string>());
    if (!sample) return error(400, "unknown source_id");
    source = sample->source();
  } else {
    return error(400, "either 'source_image' or 'source_id' is required");
  }
  if (source.width != config.image_size || source.height != config.image_size)
    return error(400, "source image must be " + std::to_string(config.image_size) + "x" +
                          std::to_string(config.image_size));

  auto& vae = *bundle_->vae;
  auto& model = *bundle_->model;
  const auto story = pipeline::encode_captions(bundle_->vocab, captions, config.text_length);
  const auto source_tokens = vae.tokenize(source).to_tensor();
  const auto grids = model.generate_story(story, source_tokens, sampler);
  Json frames = Json::array();
  for (const auto& grid : grids) frames.push_back(base64_encode(encode_png(vae.decode(grid))));
  return {200, Json{{"frames", frames},
                    {"model_id", model_id_},
                    {"sampler", to_json(sampler)}}};
}

void StoryService::worker_loop() {
  for (;;) {
    std::function<void()> job;
    {
      std::unique_lock<std::mutex> lock(mutex_);
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      job = std::move(queue_.front());
      queue_.pop_front();
    }
    job();
  }
}

int StoryService::bind() {
  server_ = std::make_unique<httplib::Server>();
  auto& s = *server_;
  s.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                         {"Access-Control-Allow-Headers", "Content-Type"}});
  auto reply = [](httplib::Response& res, const HttpResult& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  s.Get("/api/health", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  s.Get("/api/model-card",
        [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, model_card()); });
  s.Post("/api/generate", [this, reply](const httplib::Request& req, httplib::Response& res) {
    HttpResult r;
    try {
      r = generate(req.body);
    } catch (const std::exception& e) {
      r = error(500, e.what());
    }
    reply(res, r);
  });
  s.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  if (options_.port == 0) return s.bind_to_any_port(options_.host);
  if (!s.bind_to_port(options_.host, options_.port))
    throw std::runtime_error("could not bind " + options_.host + ":" + std::to_string(options_.port));
  return options_.port;
}

void StoryService::listen() {
  if (!server_) throw std::logic_error("bind() must be called before listen()");
  server_->listen_after_bind();
}

void StoryService::stop() {
  if (server_) server_->stop();
}

}  // namespace retrostory::service

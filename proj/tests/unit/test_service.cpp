#include "testing.h"
#include "fixtures.h"
#include "retrostory/image.h"
#include "retrostory/service.h"
#include "retrostory/training.h"
#include "test_paths.h"

#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

// After Eigen: <resolv.h> defines a _res macro.
#include "httplib.h"

using namespace retrostory;
using namespace retrostory::service;
namespace fs = std::filesystem;

namespace {

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  return Json::parse(in);
}

std::string png_base64(int size) {
  Image img(size, size);
  for (size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 37 % 251);
  return base64_encode(encode_png(img));
}

// Writes a tiny random story checkpoint and returns its path.
fs::path tiny_checkpoint(bool with_card) {
  const auto dir = fs::temp_directory_path() / "retrostory-tests" / (with_card ? "service-card" : "service");
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto cfg = fixture::tiny_config();
  cfg.max_frames = 5;
  torch::manual_seed(51);
  model::StoryTransformer m(cfg);
  fixture::randomize(*m, 0.2, 51);
  tokenizer::VqVae vae(cfg);
  std::string words;
  for (char c = 'a'; c < 'a' + cfg.text_vocab - 4; ++c) words += std::string(1, c) + " ";
  training::save_story_checkpoint(dir / "model.ckpt", *m, *vae, Vocabulary::build({words}));
  if (with_card) std::ofstream(dir / "model-card.json") << R"({"name": "tiny"})";
  return dir / "model.ckpt";
}

Json substitute(Json body, const std::string& source, const std::string& small) {
  if (body.contains("source_image") && body["source_image"] == "$SOURCE") body["source_image"] = source;
  if (body.contains("source_image") && body["source_image"] == "$SMALL") body["source_image"] = small;
  return body;
}

Json request_with_seed(const std::string& source, std::uint64_t seed) {
  return Json{{"captions", {"a b c", "d e f", "g h"}},
              {"source_image", source},
              {"sampler", {{"seed", seed}, {"temperature", 1.0}, {"top_k", 0}}}};
}

}  // namespace

TEST_SUITE("service") {
  TEST_CASE("not ready until loaded") {
    const auto golden = read_json(fs::path(RETROSTORY_FIXTURES) / "service" / "health_response.json");
    StoryService s(ServiceOptions{tiny_checkpoint(false)});
    const auto h = s.health();
    CHECK(h.status == golden["loading"]["status"].get<int>());
    for (const auto& key : golden["loading"]["keys"]) CHECK(h.body.contains(key.get<std::string>()));
    CHECK(s.generate("{}").status == 503);
    s.load();
    const auto ready = s.health();
    CHECK(ready.status == golden["ready"]["status"].get<int>());
    for (const auto& key : golden["ready"]["keys"]) CHECK(ready.body.contains(key.get<std::string>()));
    CHECK(ready.body["model_id"].get<std::string>().size() == 16);
  }

  TEST_CASE("model card is optional") {
    StoryService without(ServiceOptions{tiny_checkpoint(false)});
    without.load();
    CHECK(without.model_card().status == 404);
    StoryService with(ServiceOptions{tiny_checkpoint(true)});
    with.load();
    const auto card = with.model_card();
    CHECK(card.status == 200);
    CHECK(card.body["name"] == "tiny");
  }

  TEST_CASE("requests match the golden status table") {
    const auto cases = read_json(fs::path(RETROSTORY_FIXTURES) / "service" / "requests.json");
    const auto shape = read_json(fs::path(RETROSTORY_FIXTURES) / "service" / "generate_response.json");
    StoryService s(ServiceOptions{tiny_checkpoint(false)});
    s.load();
    const auto source = png_base64(16), small = png_base64(8);
    for (const auto& c : cases) {
      const auto r = s.generate(substitute(c["body"], source, small).dump());
      CHECK_MESSAGE(r.status == c["status"].get<int>(), c["name"].get<std::string>());
      if (r.status == 200) {
        for (const auto& key : shape["required"]) CHECK(r.body.contains(key.get<std::string>()));
        for (const auto& key : shape["sampler"]) CHECK(r.body["sampler"].contains(key.get<std::string>()));
        for (const auto& key : shape["timings"]) CHECK(r.body["timings"].contains(key.get<std::string>()));
        REQUIRE(r.body["frames"].size() == c["frames"].get<size_t>());
        const auto img = decode_png(base64_decode(r.body["frames"][0].get<std::string>()));
        CHECK(img.width == 16);
      } else {
        CHECK(r.body.contains("error"));
      }
    }
    CHECK(s.generate("not json").status == 400);
    CHECK(s.generate("[1, 2]").status == 400);
  }

  TEST_CASE("same seed gives the same frames") {
    StoryService s(ServiceOptions{tiny_checkpoint(false)});
    s.load();
    const auto source = png_base64(16);
    const auto a = s.generate(request_with_seed(source, 9).dump());
    const auto b = s.generate(request_with_seed(source, 9).dump());
    const auto c = s.generate(request_with_seed(source, 10).dump());
    REQUIRE(a.status == 200);
    CHECK(a.body["frames"] == b.body["frames"]);
    CHECK(a.body["frames"] != c.body["frames"]);
    CHECK(a.body["sampler"]["seed"] == 9);
  }

  TEST_CASE("stored sources need a dataset") {
    const auto ckpt = tiny_checkpoint(false);
    SyntheticSpec spec;
    spec.image_size = 16;
    spec.train = 2;
    spec.val = 1;
    spec.test = 1;
    const auto root = ckpt.parent_path() / "data";
    data::save_dataset(data::generate_synthetic_dataset(spec), root);
    ServiceOptions opts{ckpt};
    opts.data_root = root;
    StoryService s(opts);
    s.load();
    const auto d = data::load_dataset(root, "synthetic");
    const Json ok{{"captions", {"a b", "c d"}}, {"source_id", d.samples[0].id}};
    CHECK(s.generate(ok.dump()).status == 200);
    const Json missing{{"captions", {"a b", "c d"}}, {"source_id", "no-such-story"}};
    CHECK(s.generate(missing.dump()).status == 400);
  }

  TEST_CASE("http routes, CORS and concurrent requests") {
    ServiceOptions opts{tiny_checkpoint(false)};
    opts.port = 0;
    StoryService s(opts);
    const int port = s.bind();
    REQUIRE(port > 0);
    std::thread server([&] { s.listen(); });
    httplib::Client client("127.0.0.1", port);

    auto health = client.Get("/api/health");
    REQUIRE(health);
    CHECK(health->status == 503);
    s.load();
    health = client.Get("/api/health");
    CHECK(health->status == 200);
    CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

    auto preflight = client.Options("/api/generate");
    REQUIRE(preflight);
    CHECK(preflight->status == 204);
    CHECK(preflight->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

    const auto source = png_base64(16);
    std::vector<std::future<Json>> pending;
    for (std::uint64_t seed : {1, 2, 3}) {
      pending.push_back(std::async(std::launch::async, [port, source, seed] {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(120);
        auto r = c.Post("/api/generate", request_with_seed(source, seed).dump(), "application/json");
        return r && r->status == 200 ? Json::parse(r->body) : Json();
      }));
    }
    std::vector<Json> replies;
    for (auto& f : pending) replies.push_back(f.get());
    for (size_t i = 0; i < replies.size(); ++i) {
      REQUIRE(replies[i].is_object());
      CHECK(replies[i]["sampler"]["seed"] == i + 1);
      const auto direct = s.generate(request_with_seed(source, i + 1).dump());
      CHECK(direct.body["frames"] == replies[i]["frames"]);
    }
    auto bad = client.Post("/api/generate", "{\"captions\": []}", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    CHECK(client.Get("/api/model-card")->status == 404);

    s.stop();
    server.join();
  }
}

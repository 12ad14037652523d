#include "testing.h"
#include "retrostory/config.h"
#include "retrostory/image.h"
#include "test_paths.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

namespace fs = std::filesystem;
using retrostory::Json;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(RETROSTORY_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "retrostory-tests" / "cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir.parent_path());
  return dir;
}

std::map<std::string, std::string> digests(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file())
      out[fs::relative(entry.path(), root).string()] = retrostory::sha256_hex(retrostory::read_file(entry.path()));
  return out;
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  return Json::parse(in);
}

const std::string kSmall =
    " --set synthetic.train=8 synthetic.val=2 synthetic.test=4 vae.steps=20 vae.render_frames=16"
    " classifier.steps=20 train.epochs=1 train.warmup_steps=1 train.batch_size=4 train.val_stories=2";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 2") {
    CHECK(run("") == 2);
    CHECK(run("--no-such-flag") == 2);
    CHECK(run("make-synthetic") == 2);
    CHECK(run("make-synthetic --out " + fresh_dir("bad-set").string() + " --set model.nope=1") == 2);
    CHECK(run("train --out " + fresh_dir("bad-train").string() + " --tokenizer x --mode sideways") == 2);
  }

  TEST_CASE("make-synthetic is reproducible to the byte") {
    const auto a = fresh_dir("synthetic-a"), b = fresh_dir("synthetic-b");
    REQUIRE(run("make-synthetic --out " + a.string() + kSmall) == 0);
    REQUIRE(run("make-synthetic --out " + b.string() + kSmall) == 0);
    const auto da = digests(a), db = digests(b);
    CHECK(da.size() > 10);
    CHECK(da == db);
    const auto c = fresh_dir("synthetic-c");
    REQUIRE(run("make-synthetic --seed 99 --out " + c.string() + kSmall) == 0);
    CHECK(digests(c).at("stories.jsonl") != da.at("stories.jsonl"));
  }

  TEST_CASE("a small pipeline runs end to end") {
    const auto data = fresh_dir("e2e-data"), vae = fresh_dir("e2e-vae"), cls = fresh_dir("e2e-cls");
    const auto backbone = fresh_dir("e2e-backbone");
    const auto model = fresh_dir("e2e-model"), gen = fresh_dir("e2e-gen"), eval = fresh_dir("e2e-eval");
    const auto with_data = " --data " + data.string() + kSmall;
    REQUIRE(run("make-synthetic --out " + data.string() + kSmall) == 0);
    REQUIRE(run("train-vae --out " + vae.string() + with_data) == 0);
    CHECK(fs::exists(vae / "tokenizer.ckpt"));
    REQUIRE(run("train-classifier --out " + cls.string() + with_data) == 0);
    CHECK(fs::exists(cls / "classifier.ckpt"));
    REQUIRE(run("pretrain --out " + backbone.string() + with_data + " pretrain.steps=5 pretrain.warmup_steps=1 pretrain.frames=16" +
                " --tokenizer " + (vae / "tokenizer.ckpt").string()) == 0);
    CHECK(fs::exists(backbone / "backbone.ckpt"));
    REQUIRE(run("train --out " + model.string() + with_data + " --tokenizer " + (vae / "tokenizer.ckpt").string() +
                " --classifier " + (cls / "classifier.ckpt").string() + " --init " +
                (backbone / "backbone.ckpt").string()) == 0);
    CHECK(fs::exists(model / "model-card.json"));
    CHECK(read_json(model / "run.json")["command"] == "train");

    fs::path checkpoint;
    for (const auto& e : fs::directory_iterator(model))
      if (e.path().extension() == ".ckpt") checkpoint = e.path();
    REQUIRE_FALSE(checkpoint.empty());

    std::ifstream lines(data / "stories.jsonl");
    std::string first;
    std::getline(lines, first);
    const auto story_id = Json::parse(first)["id"].get<std::string>();
    REQUIRE(run("generate --out " + gen.string() + with_data + " --checkpoint " + checkpoint.string() +
                " --story " + story_id) == 0);
    CHECK(fs::exists(gen / "frame-2.png"));
    CHECK(fs::exists(gen / "frame-4.png"));

    REQUIRE(run("evaluate --out " + eval.string() + with_data + " --checkpoint " + checkpoint.string() +
                " --classifier " + (cls / "classifier.ckpt").string()) == 0);
    const auto report = read_json(eval / "eval-report.json");
    CHECK(report.contains("fid"));
    CHECK(run("generate --out " + gen.string() + with_data + " --checkpoint " + checkpoint.string() +
              " --story no-such-story") != 0);
  }
}

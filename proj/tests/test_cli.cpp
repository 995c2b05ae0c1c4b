#include <doctest.h>

#include <fstream>
#include <sstream>

#include "aspf/image.hpp"
#include "cli.hpp"
#include "support.hpp"

using namespace aspf;
using namespace aspf::test;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// <subject>/<real|fake>/<attack>/<video>/<frame>.ppm; real frames are noisy,
// fake frames flat.
void make_source_tree(const fs::path& root) {
  std::mt19937_64 gen(9);
  for (int subject = 1; subject <= 4; ++subject) {
    for (const bool real : {true, false}) {
      const auto dir = root / std::to_string(subject) / (real ? "real" : "fake") / (real ? "genuine" : "paper_print") /
                       ("v" + std::to_string(subject));
      fs::create_directories(dir);
      for (int f = 0; f < 4; ++f) {
        Image img(32, 32, 3, 128);
        if (real) {
          for (auto& px : img.pixels) px = static_cast<std::uint8_t>(gen() % 256);
        }
        char name[16];
        std::snprintf(name, sizeof name, "%03d.ppm", f);
        write_pnm(dir / name, img);
      }
    }
  }
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2") {
    CHECK(invoke({}).code == cli::kExitUsage);
    CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);
    CHECK(invoke({"train", "--config", "x.json"}).code == cli::kExitUsage);
    CHECK(invoke({"prep", "--source", "a", "--out", "b", "--policy", "all"}).code == cli::kExitUsage);
    CHECK(invoke({"split", "--manifest", "m", "--holdout", "1,,2"}).code == cli::kExitUsage);
    CHECK(invoke({"eval", "--model", "m", "--manifest", "x", "--threshold", "1.5"}).code == cli::kExitUsage);
    const auto bad = invoke({"inspect"});
    CHECK(bad.err.find("usage error") != std::string::npos);
  }

  TEST_CASE("help exits 0") {
    const auto r = invoke({"--help"});
    CHECK(r.code == cli::kExitOk);
    CHECK(r.out.find("quantize") != std::string::npos);
  }

  TEST_CASE("runtime failures exit 1 with a named error") {
    const auto dir = temp_dir("cli_runtime");
    const auto r = invoke({"inspect", "--model", (dir / "missing.aspf").string()});
    CHECK(r.code == cli::kExitRuntime);
    CHECK(r.err.find("error: ") == 0);

    write_bytes(dir / "junk.aspf", {'X', 'X', 'X', 'X', 0, 0, 0, 0, 0, 0, 0, 0});
    const auto junk = invoke({"inspect", "--model", (dir / "junk.aspf").string()});
    CHECK(junk.code == cli::kExitRuntime);
    CHECK(junk.err.find("bad magic") != std::string::npos);

    write_text(dir / "cfg.json", R"({"model":{"preset":"light_tiny"},"extra":1})");
    CHECK(invoke({"train", "--config", (dir / "cfg.json").string(), "--data", dir.string(), "--out",
               (dir / "m.aspf").string()})
              .code == cli::kExitRuntime);
  }

  TEST_CASE("config documents are {model, train} only") {
    const auto cfg = cli::parse_run_config(R"({"model":{"preset":"light_tiny"},"train":{"epochs":3}})");
    CHECK(cfg.train.epochs == 3);
    CHECK(cfg.model.architecture == Architecture::kLight);
    CHECK(cli::parse_run_config(R"({"model":{"preset":"heavy_tiny"}})").train.epochs == TrainConfig{}.epochs);
    for (const char* bad : {R"({"train":{}})", R"({"model":{"preset":"light_tiny"},"optim":{}})", "[1]", "{",
                            R"({"model":{"preset":"light_tiny"},"train":{"epochz":1}})"}) {
      CAPTURE(bad);
      try {
        cli::parse_run_config(bad);
        FAIL("accepted");
      } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::kConfig);
      }
    }
  }

  TEST_CASE("end-to-end pipeline") {
    const auto dir = temp_dir("cli_pipeline");
    make_source_tree(dir / "src");
    const auto s = [&](const char* p) { return (dir / p).string(); };

    auto r = invoke({"prep", "--source", s("src"), "--out", s("crops"), "--size", "16"});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "crops" / "manifest.jsonl"));

    r = invoke({"split", "--manifest", s("crops/manifest.jsonl"), "--holdout", "4", "--seed", "1"});
    REQUIRE(r.code == 0);
    for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"}) CHECK(fs::exists(dir / "crops" / f));
    CHECK(invoke({"split", "--manifest", s("crops/manifest.jsonl"), "--holdout", "99"}).code == cli::kExitRuntime);

    write_text(dir / "cfg.json",
               R"({"model":{"preset":"light_tiny"},"train":{"learning_rate":0.01,"batch_size":8,"epochs":2,"seed":3}})");
    r = invoke({"train", "--config", s("cfg.json"), "--data", s("crops"), "--out", s("m.aspf")});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "m.aspf"));
    CHECK(fs::exists(dir / "m.history.csv"));

    r = invoke({"eval", "--model", s("m.aspf"), "--manifest", s("crops/test.jsonl"), "--heatmap", s("cm.ppm")});
    CHECK(r.code == 0);
    CHECK(r.out.find("f1") != std::string::npos);
    CHECK(read_pnm(dir / "cm.ppm").channels == 3);

    const auto frame = (dir / "crops" / "4" / "real" / "genuine");
    fs::path image;
    for (const auto& e : fs::directory_iterator(frame)) image = e.path();
    REQUIRE_FALSE(image.empty());
    for (const char* method : {"gradcam", "saliency"}) {
      r = invoke({"explain", "--model", s("m.aspf"), "--image", image.string(), "--method", method, "--out", s("h.ppm")});
      CHECK(r.code == 0);
      CHECK(read_pnm(dir / "h.ppm").width == 16);
    }
    CHECK(invoke({"explain", "--model", s("m.aspf"), "--method", "kernels", "--out", s("k.ppm")}).code == 0);
    CHECK(invoke({"explain", "--model", s("m.aspf"), "--method", "gradcam", "--out", s("h.ppm")}).code ==
          cli::kExitUsage);
    CHECK(invoke({"explain", "--model", s("m.aspf"), "--image", image.string(), "--method", "gradcam", "--layer", "head0", "--out", s("h.ppm")})
              .code == cli::kExitRuntime);

    r = invoke({"quantize", "--model", s("m.aspf"), "--out", s("q.aspf")});
    CHECK(r.code == 0);
    CHECK(r.out.find("ratio") != std::string::npos);

    r = invoke({"inspect", "--model", s("q.aspf")});
    CHECK(r.code == 0);
    CHECK(r.out.find("i8") != std::string::npos);
  }
}

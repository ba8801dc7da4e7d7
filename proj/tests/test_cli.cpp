#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "lm3d/util.hpp"

using namespace lm3d;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "lm3d_cli_test";

struct Run {
  int status;
  std::string err;
};

Run cli(const std::string& args) {
  const fs::path err = kRoot / "stderr.txt";
  const std::string cmd = std::string(LM3D_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  std::ifstream in(err);
  std::ostringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, ss.str()};
}

void write(const fs::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Built once: two tiny shards, an untrained checkpoint and a few images.
struct Fixture {
  Fixture() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    write(kRoot / "gen.json",
          R"({"shards":[{"dataset_id":0,"n_samples":6,"image_size":64,"layout":"dense","n_sequences":1,"sequence_length":4},
                        {"dataset_id":1,"n_samples":6,"image_size":64,"layout":"sparse51","annotation_uv_offset":[0.02,0]}]})");
    write(kRoot / "train.json",
          R"({"epochs":0,"batch_size":2,"shards":["data/shard_0","data/shard_1"],"out_dir":"run",
              "model":{"variant":"full","stn_input":32,"crop_size":32,"mesh_resolution":24,"predictor_width":32,
                       "feature_width":32,"stn_widths":[8,16],"encoder_widths":[8,16]}})");
    REQUIRE(cli("--seed 3 --out " + q(kRoot / "data") + " gen --config " + q(kRoot / "gen.json")).status == 0);
    REQUIRE(cli("train --config " + q(kRoot / "train.json")).status == 0);
    fs::create_directories(kRoot / "imgs");
    for (int i = 0; i < 4; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06d.png", i);
      fs::copy_file(kRoot / "data/shard_0/images" / name, kRoot / "imgs" / name, fs::copy_options::overwrite_existing);
    }
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("gen is reproducible across processes and seeds shards apart") {
  fixture();
  REQUIRE(cli("--seed 3 --out " + q(kRoot / "again") + " gen --config " + q(kRoot / "gen.json")).status == 0);
  for (const char* shard : {"shard_0", "shard_1"}) {
    CHECK(file_sha1(kRoot / "data" / shard / "index.jsonl") == file_sha1(kRoot / "again" / shard / "index.jsonl"));
  }
  CHECK(read_json_file(kRoot / "data/shard_0/spec.json").at("seed") == 3);
  CHECK(read_json_file(kRoot / "data/shard_1/spec.json").at("seed") == 4);

  const json m = read_json_file(kRoot / "data/manifest_gen.json");
  CHECK(m.at("command") == "gen");
  CHECK(m.at("outputs").size() == 4);
  CHECK(m.at("seeds").at("shard_1") == 4);
  CHECK(m.contains("wall_clock_seconds"));
}

TEST_CASE("errors exit 2 with a code on stderr") {
  fixture();
  Run r = cli("train --config " + q(kRoot / "missing.json"));
  CHECK(r.status == 2);
  CHECK(r.err.rfind("E_CONFIG_NOT_FOUND", 0) == 0);

  write(kRoot / "bad.json", R"({"epochs":1,"shards":[],"learning_rate":1})");
  r = cli("train --config " + q(kRoot / "bad.json"));
  CHECK(r.status == 2);
  CHECK(r.err.rfind("E_CONFIG_INVALID", 0) == 0);

  r = cli("infer --checkpoint " + q(kRoot / "run/best.ckpt") + " --input " + q(kRoot / "imgs") + " --dataset-style 5");
  CHECK(r.status == 2);
  CHECK(r.err.rfind("E_INVALID_ARGUMENT", 0) == 0);

  r = cli("frobnicate");
  CHECK(r.status == 2);
}

TEST_CASE("train with zero epochs writes the initialization") {
  fixture();
  CHECK(fs::exists(kRoot / "run/best.ckpt"));
  CHECK(fs::exists(kRoot / "run/last.ckpt"));
  const json m = read_json_file(kRoot / "run/manifest_train.json");
  CHECK(m.at("config").at("epochs") == 0);
  CHECK(m.at("inputs").size() == 3);
}

TEST_CASE("eval and plot of the initialization") {
  fixture();
  const fs::path out = kRoot / "eval";
  REQUIRE(cli("--out " + q(out) + " eval --checkpoint " + q(kRoot / "run/best.ckpt") + " --shards " +
               q(kRoot / "data/shard_0") + " " + q(kRoot / "data/shard_1") + " --temporal --visibility 2")
              .status == 0);
  fs::path report;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().filename().string().rfind("report_", 0) == 0) report = e.path();
  }
  REQUIRE(!report.empty());
  const json r = read_json_file(report);
  REQUIRE(r.at("variants").size() == 1);
  CHECK(r.at("variants")[0].at("runs")[0].at("shards").size() == 2);

  REQUIRE(cli("--out " + q(kRoot / "plots") + " plot --report " + q(report)).status == 0);
  const std::string tag = report.stem().string().substr(7);
  CHECK(fs::exists(kRoot / "plots" / ("nme_bars_" + tag + ".png")));
  CHECK(fs::exists(kRoot / "plots" / ("series_" + tag + ".json")));
}

TEST_CASE("infer writes landmarks, meshes and merged textures") {
  fixture();
  const fs::path out = kRoot / "infer";
  REQUIRE(cli("--out " + q(out) + " infer --checkpoint " + q(kRoot / "run/best.ckpt") + " --input " +
               q(kRoot / "imgs") + " --dense-mesh --merge-textures --overlay")
              .status == 0);
  const std::string tag = read_json_file(kRoot / "run/best.ckpt.json").at("sha1").get<std::string>().substr(0, 12);
  const json p = read_json_file(out / ("000000_" + tag + ".json"));
  REQUIRE(p.at("landmarks").size() == 51);
  CHECK(p.at("landmarks")[0].at("pixel").size() == 2);
  CHECK(p.at("landmarks")[0].contains("confidence"));
  CHECK(fs::exists(out / ("000001_" + tag + "_overlay.png")));

  std::ifstream obj(out / ("000000_" + tag + "_mesh.obj"));
  int vertices = 0, faces = 0;
  for (std::string line; std::getline(obj, line);) {
    vertices += line.rfind("v ", 0) == 0;
    faces += line.rfind("f ", 0) == 0;
  }
  CHECK(vertices == 25 * 25);  // resolution counts grid cells
  CHECK(faces > 0);

  const json cov = read_json_file(out / ("merged_" + tag + "_coverage.json"));
  REQUIRE(cov.at("views").size() == 4);
  long best = 0;
  for (const auto& v : cov.at("views")) best = std::max(best, v.at("covered_texels").get<long>());
  CHECK(cov.at("merged_covered_texels").get<long>() >= best);

  write(kRoot / "queries.json", "[[0.5, 0.5], [0.4, 0.6]]");
  REQUIRE(cli("--out " + q(kRoot / "infer_q") + " infer --checkpoint " + q(kRoot / "run/best.ckpt") + " --input " +
               q(kRoot / "imgs/000000.png") + " --queries " + q(kRoot / "queries.json"))
              .status == 0);
  CHECK(read_json_file(kRoot / "infer_q" / ("000000_" + tag + ".json")).at("landmarks").size() == 2);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int cli(const std::string& args) {
  const std::string cmd = "VOXSCREEN_LOG=error \"" VOXSCREEN_CLI "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("voxscreen_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Bright bottles against dim, noise-free clutter: separable by intensity alone.
const std::string kToy =
    "--set dataset.n_positive=8 --set dataset.n_negative=8 --set dataset.crop_min=16 --set dataset.crop_max=28 "
    "--set dataset.clutter.intensity_hi=0.4 --set dataset.clutter.noise_sigma=0 "
    "--set model.base_channels=4 --set model.fpn_channels=8 --set model.norm='\"batch\"' "
    "--set train.epochs=40 --set train.batch_size=4 --set train.learning_rate=0.003 --set preprocess.rotation_probability=0";

}  // namespace

TEST_CASE("gen is byte-identical for a fixed seed") {
  const fs::path dir = scratch("gen");
  const std::string flags = "--set dataset.n_positive=3 --set dataset.n_negative=3 --set split.k=3";
  const std::string gen = "--seed 42 --out \"" + (dir / "a").string() + "\" " + flags + " gen";
  REQUIRE(cli(gen) == 0);
  fs::copy(dir / "a", dir / "b", fs::copy_options::recursive);
  REQUIRE(cli(gen) == 0);
  int64_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "timings.json") continue;
    const fs::path other = dir / "b" / fs::relative(e.path(), dir / "a");
    CAPTURE(e.path().string());
    CHECK(slurp(e.path()) == slurp(other));
    ++files;
  }
  CHECK(files == 3 + 6);  // manifest, splits, run record and six volumes

  const json run = json::parse(slurp(dir / "a" / "run.json"));
  CHECK(run["seed"] == 42);
  CHECK(run["command"] == "gen");
  CHECK(run.contains("code_version"));
  CHECK(run["config"]["dataset"]["n_positive"] == 3);
}

TEST_CASE("exit codes") {
  const fs::path dir = scratch("codes");
  const std::string out = " --out \"" + dir.string() + "\" ";
  CHECK(cli("--help") == 0);
  CHECK(cli(out + "no-such-command") == 1);
  CHECK(cli(out + "--set train.lr=1 eval-cls") == 1);
  CHECK(cli(out + "--set eval.iou_threshold=2 eval-cls") == 1);
  CHECK(cli(out + "--config \"" + (dir / "missing.json").string() + "\" gen") == 1);
  CHECK(cli(out + "eval-det --checkpoint \"" + (dir / "missing.ckpt").string() + "\"") == 2);
  CHECK(cli(out + "infer --checkpoint x.ckpt") == 1);
}

TEST_CASE("separable toy set: trained classifier scores 100 / 0") {
  const fs::path dir = scratch("toy");
  const std::string out = " --out \"" + dir.string() + "\" ";
  REQUIRE(cli("--seed 1 --threads 1" + out + kToy + " train-cls") == 0);
  CHECK(fs::exists(dir / "loss.csv"));
  REQUIRE(cli("--seed 1 --threads 1" + out + kToy + " eval-cls --checkpoint \"" + (dir / "classifier.ckpt").string() + "\"") == 0);
  const json m = json::parse(slurp(dir / "metrics.json"));
  CHECK(m["tpr"]["text"] == "100.00 ± 0.00");
  CHECK(m["fpr"]["text"] == "0.00 ± 0.00");
  CHECK(slurp(dir / "table.txt").find("100.00 ± 0.00") != std::string::npos);

  // an architecture other than the one the checkpoint holds is refused
  CHECK(cli(out + kToy + " --set model.base_channels=8 eval-cls --checkpoint \"" + (dir / "classifier.ckpt").string() + "\"") == 2);
  CHECK(cli(out + kToy + " eval-det --checkpoint \"" + (dir / "classifier.ckpt").string() + "\"") == 2);
}

TEST_CASE("detector train, infer and bench") {
  const fs::path dir = scratch("det");
  const std::string out = " --out \"" + dir.string() + "\" ";
  const std::string det =
      "--set dataset.kind='\"bags\"' --set dataset.target='\"handgun\"' --set dataset.n_volumes=4 "
      "--set dataset.bag_dims=[32,32,32] --set dataset.total_targets=0 --set preprocess.resample_factor='\"1/2\"' "
      "--set detector.base_channels=4 --set detector.fpn_channels=8 --set train.max_iterations=3";
  REQUIRE(cli("--seed 2 --out \"" + (dir / "data").string() + "\" " + det + " gen") == 0);
  const std::string data = " --set dataset.path='\"" + (dir / "data").string() + "\"' ";
  REQUIRE(cli("--seed 2" + out + det + data + " train-det") == 0);
  const fs::path ckpt = dir / "detector.ckpt";
  REQUIRE(fs::exists(ckpt));
  fs::path volume;
  for (const auto& e : fs::directory_iterator(dir / "data" / "volumes")) volume = e.path();
  REQUIRE(cli(out + det + " --set eval.score_threshold=0.01 infer --checkpoint \"" + ckpt.string() + "\" \"" + volume.string() + "\"") == 0);
  CHECK(json::parse(slurp(dir / "detections.json")).is_array());
  REQUIRE(cli(out + det + data + " bench --volumes 2 --checkpoint \"" + ckpt.string() + "\"") == 0);
  const json b = json::parse(slurp(dir / "bench.json"));
  CHECK(b["n"] == 2);
  CHECK(b["median_s"].get<double>() > 0);
  // resampling differently from training is a mismatch
  CHECK(cli(out + det + " --set preprocess.resample_factor=1 infer --checkpoint \"" + ckpt.string() + "\" \"" + volume.string() + "\"") == 2);
}

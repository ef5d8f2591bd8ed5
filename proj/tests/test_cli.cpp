#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "dlvit/error.hpp"
#include "dlvit/experiment.hpp"

using namespace dlvit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dlvit_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DLVIT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(hex64(0xaf63dc4c8601ec8cULL) == "af63dc4c8601ec8c");
  CHECK(hex64(1) == "0000000000000001");
}

TEST_CASE("config overlay keeps unspecified defaults") {
  const RunConfig base;
  const RunConfig c = merge_config_json(base, R"({"seed": 5, "finetune": {"epochs": 3}, "label": {"rho": 0.002}})");
  CHECK(c.seed == 5);
  CHECK(c.finetune.epochs == 3);
  CHECK(c.finetune.lr == base.finetune.lr);
  CHECK(c.finetune.optimizer == "sgd");
  CHECK(c.label.has_rho);
  CHECK(c.label.rho == 0.002);
  CHECK(c.model.dim == base.model.dim);
  const RunConfig nulled = merge_config_json(c, R"({"label": {"rho": null}})");
  CHECK(!nulled.label.has_rho);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config errors") {
  const RunConfig base;
  CHECK_THROWS_AS(merge_config_json(base, R"({"sede": 1})"), ConfigError);
  CHECK_THROWS_AS(merge_config_json(base, R"({"model": {"depht": 2}})"), ConfigError);
  CHECK_THROWS_AS(merge_config_json(base, R"({"seed": "one"})"), ConfigError);
  CHECK_THROWS_AS(merge_config_json(base, R"([1, 2])"), ConfigError);
  CHECK_THROWS_AS(merge_config_json(base, "{not json"), ConfigError);
  try {
    merge_config_json(base, R"({"filter": {"treshold": 0.4}})", "x.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("filter.treshold") != std::string::npos);
  }
  RunConfig c;
  c.model.image_size = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.score.dl_sign = "backwards";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.label.label_ratio = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig{};
  c.finetune.mask_mode = "soft";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(load_config_file(RunConfig{}, "/nonexistent/cfg.json"), IoError);
}

TEST_CASE("config round trip through JSON") {
  RunConfig c;
  c.seed = 9;
  c.filter.mode = "random";
  c.label.rho_list = {0.001, 0.002};
  const RunConfig back = merge_config_json(RunConfig{}, config_to_json(c));
  CHECK(config_to_json(back) == config_to_json(c));
  const auto sections = nlohmann::json::parse(config_sections_json(c, {"seed", "label"}));
  CHECK(sections.size() == 2);
  CHECK(sections.at("seed") == 9);
}

TEST_CASE("run header") {
  const fs::path dir = scratch("header");
  RunConfig c;
  c.seed = 3;
  c.threads = 2;
  write_run_header(dir, "pipeline", c);
  const auto h = nlohmann::json::parse(slurp(dir / "run_header.json"));
  CHECK(h.at("version") == kVersion);
  CHECK(h.at("command") == "pipeline");
  CHECK(h.at("seed") == 3);
  CHECK(h.at("threads") == 2);
  CHECK(h.at("dl_sign") == "importance");
  CHECK(h.at("mac_convention").get<std::string>().find("MAC") != std::string::npos);
  CHECK(h.at("config").at("model").at("depth") == c.model.depth);
  fs::remove_all(dir);
}

TEST_CASE("stage runner skips unchanged stages") {
  const fs::path dir = scratch("stages");
  const fs::path in = dir / "in.txt", out = dir / "out.txt";
  write(in, "alpha");
  int runs = 0;
  auto body = [&] {
    ++runs;
    write(out, slurp(in) + "!");
  };
  StageRunner r(dir);
  CHECK(r.run("copy", "{}", {in}, {out}, body));
  CHECK(!r.run("copy", "{}", {in}, {out}, body));
  CHECK(runs == 1);
  CHECK(fs::exists(r.marker("copy")));

  SUBCASE("input content change") {
    write(in, "beta");
    CHECK(r.run("copy", "{}", {in}, {out}, body));
    CHECK(slurp(out) == "beta!");
  }
  SUBCASE("config change") { CHECK(r.run("copy", R"({"x":1})", {in}, {out}, body)); }
  SUBCASE("missing output") {
    fs::remove(out);
    CHECK(r.run("copy", "{}", {in}, {out}, body));
    CHECK(fs::exists(out));
  }
  SUBCASE("failed body leaves no marker") {
    write(in, "gamma");
    CHECK_THROWS_AS(r.run("copy", "{}", {in}, {out}, [] { throw TrainingError("boom"); }), TrainingError);
    CHECK(!fs::exists(r.marker("copy")));
  }
  fs::remove_all(dir);
}

TEST_CASE("cli exit codes and outputs") {
  const fs::path dir = scratch("exec");
  CHECK(run_cli("") == 2);
  CHECK(run_cli("pretrain --no-such-flag") == 2);
  CHECK(run_cli("eval --checkpoint /nonexistent/model.ckpt --out-dir " + dir.string()) == 3);
  write(dir / "bad.json", R"({"modle": {}})");
  CHECK(run_cli("flops --config " + (dir / "bad.json").string() + " --out-dir " + dir.string()) == 2);
  CHECK(run_cli("flops --deit-t --out-dir " + dir.string()) == 0);
  CHECK(fs::exists(dir / "flops.csv"));
  CHECK(fs::exists(dir / "run_header.json"));
  CHECK(run_cli("gen-data --per-class 2 --out-dir " + dir.string()) == 0);
  fs::remove_all(dir);
}

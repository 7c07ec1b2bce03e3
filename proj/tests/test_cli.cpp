// Config parsing, pipeline stage plumbing, and the command line driver.
// Subprocess cases run the real binary (BG_CLI_PATH) on the smoke config.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "bg/config.hpp"
#include "bg/pipeline.hpp"

using Catch::Matchers::ContainsSubstring;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kSmoke = std::string(BG_CONFIG_DIR) + "/smoke.json";

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  REQUIRE(out.good());
  out << content;
}

int run_cli(const std::string& args, const std::string& capture = "") {
  std::string cmd = std::string(BG_CLI_PATH) + " " + args;
  if (!capture.empty()) cmd += " > " + capture + " 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

size_t count_substr(const std::string& hay, const std::string& needle) {
  size_t n = 0;
  for (size_t i = hay.find(needle); i != std::string::npos;
       i = hay.find(needle, i + needle.size()))
    ++n;
  return n;
}

// checks every opened tag is closed in order; declarations and self-closing
// elements are skipped
bool xml_balanced(const std::string& s) {
  std::vector<std::string> stack;
  size_t i = 0;
  while ((i = s.find('<', i)) != std::string::npos) {
    const size_t j = s.find('>', i);
    if (j == std::string::npos) return false;
    const std::string tag = s.substr(i + 1, j - i - 1);
    if (!tag.empty() && tag[0] != '?' && tag[0] != '!') {
      if (tag[0] == '/') {
        if (stack.empty() || stack.back() != tag.substr(1)) return false;
        stack.pop_back();
      } else if (tag.back() != '/') {
        stack.push_back(tag.substr(0, tag.find_first_of(" \t\n")));
      }
    }
    i = j + 1;
  }
  return stack.empty();
}

// points attribute of the n-th element with the given class
std::string nth_points(const std::string& svg, const std::string& cls, size_t n) {
  const std::string key = "class=\"" + cls + "\"";
  size_t at = std::string::npos;
  size_t i = svg.find(key);
  for (size_t k = 0; i != std::string::npos; i = svg.find(key, i + 1), ++k)
    if (k == n) {
      at = i;
      break;
    }
  REQUIRE(at != std::string::npos);
  const size_t p = svg.find("points=\"", at);
  REQUIRE(p != std::string::npos);
  const size_t q = svg.find('"', p + 8);
  REQUIRE(q != std::string::npos);
  return svg.substr(p + 8, q - p - 8);
}

size_t point_count(const std::string& points) {
  size_t n = 0;
  bool in_token = false;
  for (char c : points) {
    if (c == ' ') {
      in_token = false;
    } else if (!in_token) {
      in_token = true;
      ++n;
    }
  }
  return n;
}

}  // namespace

TEST_CASE("config parsing, validation, and hashing") {
  const bg::cfg::RunConfig c = bg::cfg::load_config(kSmoke);
  CHECK(c.master_seed == 3);
  CHECK(c.gamma == 0.99);
  CHECK(c.tvf.gamma == c.gamma);  // one discount drives both
  CHECK(c.diffusion.K == c.diffusion.H);  // K defaults to H
  REQUIRE(c.routes.size() == 2);
  CHECK(c.routes[0].name == "corridor");
  CHECK_FALSE(c.routes[0].spawn.has_value());
  REQUIRE(c.routes[1].spawn.has_value());
  CHECK(c.routes[1].spawn->lo.x == 6.2);
  CHECK(c.dt.context == 5);
  CHECK(c.eval_episodes == 3);
  CHECK(c.expert_waypoints.size() == 4);

  const bg::env::MazeSpec spec = bg::cfg::maze_spec(c);
  CHECK(spec.max_episode_steps == 150);
  CHECK(spec.goal.x == 2.5);
  CHECK(spec.goal.y == 4.5);

  SECTION("hash ignores formatting, tracks fields") {
    json j = json::parse(slurp(kSmoke));
    CHECK(bg::cfg::config_hash(j) == c.hash);
    // same content, different formatting
    CHECK(bg::cfg::config_hash(json::parse(j.dump())) == c.hash);
    json edited = j;
    edited["master_seed"] = 4;
    CHECK(bg::cfg::config_hash(edited) != c.hash);
    edited = j;
    edited["tvf"]["tau"] = 0.8;
    CHECK(bg::cfg::config_hash(edited) != c.hash);
  }

  SECTION("unknown and missing keys are errors") {
    json j = json::parse(slurp(kSmoke));
    json extra = j;
    extra["typo_key"] = 1;
    CHECK_THROWS_WITH(bg::cfg::parse_config(extra),
                      ContainsSubstring("unknown key 'typo_key'"));
    json nested = j;
    nested["dt"]["warmup"] = 10;
    CHECK_THROWS_WITH(bg::cfg::parse_config(nested),
                      ContainsSubstring("unknown key 'warmup'") &&
                          ContainsSubstring("'dt'"));
    json missing = j;
    missing["tvf"].erase("tau");
    CHECK_THROWS_WITH(bg::cfg::parse_config(missing),
                      ContainsSubstring("missing key 'tau'"));
  }

  SECTION("range validation") {
    json j = json::parse(slurp(kSmoke));
    json bad = j;
    bad["collect"]["gamma"] = 1.5;
    CHECK_THROWS_WITH(bg::cfg::parse_config(bad), ContainsSubstring("gamma"));
    bad = j;
    bad["tvf"]["tau"] = 1.0;
    CHECK_THROWS_WITH(bg::cfg::parse_config(bad), ContainsSubstring("tau"));
    bad = j;
    bad["branch"]["percentile"] = 101.0;
    CHECK_THROWS_WITH(bg::cfg::parse_config(bad), ContainsSubstring("percentile"));
    bad = j;
    bad["maze"]["reward"] = "shaped";
    CHECK_THROWS_WITH(bg::cfg::parse_config(bad), ContainsSubstring("reward"));
  }
}

TEST_CASE("stage dependencies and artifact hash guard") {
  const bg::cfg::RunConfig c = bg::cfg::load_config(kSmoke);

  SECTION("first stage missing") {
    bg::pipe::StageOptions o;
    o.out_dir = fresh_dir("bg_test_deps_a").string();
    CHECK_THROWS_WITH(bg::pipe::run_stage(c, o, "train-tvf"),
                      ContainsSubstring("requires completed stage 'collect'"));
  }

  SECTION("expand before gen-branches names the missing stage") {
    bg::pipe::StageOptions o;
    o.out_dir = fresh_dir("bg_test_deps_b").string();
    bg::pipe::run_stage(c, o, "collect");
    bg::pipe::run_stage(c, o, "train-tvf");
    CHECK_THROWS_WITH(bg::pipe::run_stage(c, o, "expand"),
                      ContainsSubstring("requires completed stage 'gen-branches'"));
  }

  SECTION("config edits refuse existing artifacts") {
    bg::pipe::StageOptions o;
    o.out_dir = fresh_dir("bg_test_hash").string();
    bg::pipe::run_stage(c, o, "collect");

    json edited = json::parse(slurp(kSmoke));
    edited["master_seed"] = 99;
    bg::cfg::RunConfig c2 = bg::cfg::parse_config(edited);
    CHECK_THROWS_WITH(bg::pipe::run_stage(c2, o, "train-tvf"),
                      ContainsSubstring("hash mismatch"));
  }
}

TEST_CASE("cli smoke pipeline end to end") {
  const fs::path dir = fresh_dir("bg_test_cli_run");
  const std::string base = "--config " + kSmoke + " --out-dir " + dir.string();

  REQUIRE(run_cli("all " + base + " --baseline",
                  (dir / "all.log").string()) == 0);
  for (const char* f :
       {"manifest.json", "dataset.bin", "tvf.ckpt", "diffusion.ckpt",
        "candidates.jsonl", "expanded.bin", "dt.ckpt", "dt_baseline.ckpt",
        "eval.jsonl", "eval_baseline.jsonl"})
    CHECK(fs::exists(dir / f));

  const json manifest = json::parse(slurp((dir / "manifest.json").string()));
  CHECK(manifest.at("stages").size() == 7);
  const json& gb = manifest.at("stages").at("gen-branches").at("extra");
  const size_t attempted = gb.at("attempted").get<size_t>();
  const size_t accepted = gb.at("accepted").get<size_t>();
  CHECK(attempted == 10);
  CHECK(accepted <= attempted);

  SECTION("rerunning a stage reproduces artifact bytes") {
    const std::string before = slurp((dir / "dt.ckpt").string());
    REQUIRE(run_cli("train-dt " + base + " --baseline",
                    (dir / "rerun.log").string()) == 0);
    CHECK(slurp((dir / "dt.ckpt").string()) == before);
  }

  SECTION("candidate log round trips") {
    const auto cands =
        bg::pipe::load_candidates((dir / "candidates.jsonl").string());
    REQUIRE(cands.size() == attempted);
    size_t acc = 0;
    for (const auto& cand : cands) {
      CHECK(cand.seg.states.rows() == 5);  // smoke branch horizon
      CHECK(cand.seg.rewards.size() == 5);
      if (cand.accepted) ++acc;
    }
    CHECK(acc == accepted);
  }

  SECTION("report prints seeds, acceptance rate, and paired scores") {
    REQUIRE(run_cli("report " + base, (dir / "report.txt").string()) == 0);
    const std::string report = slurp((dir / "report.txt").string());
    for (const char* stage : {"collect=0x", "train-tvf=0x", "train-diffusion=0x",
                              "gen-branches=0x", "expand=0x", "train-dt=0x",
                              "eval=0x"})
      CHECK_THAT(report, ContainsSubstring(stage));
    char rate[32];
    std::snprintf(rate, sizeof(rate), "rate %.2f%%",
                  100.0 * double(accepted) / double(attempted));
    CHECK_THAT(report, ContainsSubstring(rate));
    CHECK_THAT(report, ContainsSubstring("BG+DT:"));
    CHECK_THAT(report, ContainsSubstring("DT-baseline:"));
    CHECK_THAT(report, ContainsSubstring("attempted 10"));
  }

  SECTION("plot draws one branch polyline per accepted candidate") {
    REQUIRE(run_cli("plot " + base, (dir / "plot.log").string()) == 0);
    const std::string svg = slurp((dir / "branches.svg").string());
    CHECK(xml_balanced(svg));
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(count_substr(svg, "class=\"wall\"") > 20);
    CHECK(count_substr(svg, "class=\"traj\"") > 10);
    CHECK(count_substr(svg, "class=\"goal\"") == 1);
    CHECK(count_substr(svg, "class=\"branch\"") == accepted);
    CHECK(count_substr(svg, "class=\"condition\"") == accepted);
    for (size_t b = 0; b < accepted; ++b) {
      CHECK(point_count(nth_points(svg, "branch", b)) == 5);     // H points
      CHECK(point_count(nth_points(svg, "condition", b)) == 5);  // K points
    }
  }

  SECTION("eval log ends with a summary record") {
    std::ifstream in((dir / "eval.jsonl").string());
    std::string line, last;
    size_t lines = 0;
    while (std::getline(in, line))
      if (!line.empty()) {
        last = line;
        ++lines;
      }
    const json summary = json::parse(last);
    CHECK(summary.at("summary").get<bool>());
    CHECK(summary.at("episodes").get<size_t>() == 3);
    CHECK(lines == 4);  // three episodes plus the summary
  }
}

TEST_CASE("cli exit codes") {
  const fs::path dir = fresh_dir("bg_test_cli_err");
  const std::string log = (dir / "log.txt").string();

  CHECK(run_cli("", log) == 1);                      // no subcommand
  CHECK(run_cli("collect", log) == 1);               // missing --config
  CHECK(run_cli("collect --config " + kSmoke + " --bogus-flag", log) == 1);
  CHECK(run_cli("--help", log) == 0);

  // pipeline errors: missing dependency, unreadable config
  CHECK(run_cli("expand --config " + kSmoke + " --out-dir " + dir.string(),
                log) == 2);
  CHECK(run_cli("collect --config /nonexistent.json --out-dir " + dir.string(),
                log) == 2);
  const std::string msg = slurp(log);
  CHECK_THAT(msg, ContainsSubstring("error:"));

  // malformed json reports the file and parse position
  spit((dir / "broken.json").string(), "{ not json");
  CHECK(run_cli("collect --config " + (dir / "broken.json").string() +
                    " --out-dir " + dir.string(),
                log) == 2);
  CHECK_THAT(slurp(log), ContainsSubstring("parse error"));
}

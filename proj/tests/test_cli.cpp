#include <doctest.h>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <locale>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "iclgd/cli.hpp"
#include "iclgd/icl_bench.hpp"
#include "iclgd/io.hpp"
#include "iclgd/prune_search.hpp"

using namespace iclgd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("iclgd_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string file(const std::string& name, const std::string& content) const {
    write_text_file(path_ / name, content);
    return (path_ / name).string();
  }

 private:
  fs::path path_;
};

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::istringstream in(read_text_file(p));
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

double num(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  REQUIRE(ec == std::errc{});
  REQUIRE(ptr == s.data() + s.size());
  return v;
}

// Comma decimal separator, to prove the writers ignore the global locale.
struct CommaPunct : std::numpunct<char> {
  char do_decimal_point() const override { return ','; }
};

}  // namespace

TEST_CASE("io helpers") {
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(format_double(0.1) == "0.10000000000000001");
  CHECK(format_double(1.0) == "1");
  CHECK(num(format_double(1.0 / 3.0)) == 1.0 / 3.0);
  CHECK(stream_seed(5, 1) != stream_seed(5, 2));
  CHECK(stream_seed(5, 1) == stream_seed(5, 1));
}

TEST_CASE("usage errors exit 2") {
  TempDir dir;
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"verify", "--threads", "0"}).code == kExitUsage);
  CHECK(run({"verify", "--bogus"}).code == kExitUsage);
  CHECK(run({"verify", "--inject-fault", "no_such_suite"}).code == kExitUsage);
  CHECK(run({"algo1", "--inject-fault", "lemma1"}).code == kExitUsage);
  CHECK(run({"algo1", "--config", dir.file("empty.json", "")}).code == kExitUsage);
  CHECK(run({"algo1", "--config", dir.file("obj.json", "{}")}).code == kExitUsage);
  CHECK(run({"algo1", "--config", (dir.path() / "missing.json").string()}).code == kExitUsage);
  CHECK(run({"algo1", "--config", dir.file("bad.json", "{\"command\": \"algo1\",")}).code == kExitUsage);
  CHECK(run({"algo1", "--config", dir.file("unk.json", R"({"command":"algo1","seed":1,"params":{"xi":0.5}})")}).code ==
        kExitUsage);
  CHECK(run({"algo1", "--config", dir.file("top.json", R"({"command":"algo1","seed":1,"extra":1})")}).code ==
        kExitUsage);
  CHECK(run({"algo1", "--config", dir.file("noseed.json", R"({"command":"algo1"})")}).code == kExitUsage);
  CHECK(run({"verify", "--config", dir.file("mismatch.json", R"({"command":"algo1","seed":1})")}).code == kExitUsage);
  CHECK(run({"algo1", "--config",
             dir.file("type.json", R"({"command":"algo1","seed":1,"params":{"candidates":"all"}})")})
            .code == kExitUsage);
  CHECK(run({"bound-report", "--config",
             dir.file("stack2.json",
                      R"({"command":"bound-report","seed":1,"params":{"stack":{"generate":"gd","file":"x.json"}}})")})
            .code == kExitUsage);
  // --seed stands in for a missing config seed
  CHECK(run({"algo1", "--seed", "4", "--config", dir.file("seed.json", R"({"command":"algo1","params":{"task":{"n_val":4,"n_test":4}}})")})
            .code == kExitOk);
  CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("verify passes and injected faults fail") {
  TempDir dir;
  const Run ok = run({"verify", "--out", dir.path().string()});
  CHECK(ok.code == kExitOk);
  CHECK(ok.out.find("PASS lemma1") != std::string::npos);
  const json report = json::parse(read_text_file(dir.path() / "verify_report.json"));
  CHECK(report.contains("config_hash"));

  const Run bad = run({"verify", "--inject-fault", "lemma1"});
  CHECK(bad.code == kExitCheckFailure);
  CHECK(bad.err.find("lemma1") != std::string::npos);
  const Run bad2 = run({"verify", "--inject-fault", "planted_search", "--threads", "3"});
  CHECK(bad2.code == kExitCheckFailure);
  CHECK(bad2.err.find("planted_search") != std::string::npos);
}

TEST_CASE("algo1") {
  TempDir a, b, c;
  const std::string cfg = R"({"command":"algo1","seed":11,"params":{}})";
  const std::string path = a.file("cfg.json", cfg);
  REQUIRE(run({"algo1", "--config", path, "--out", (a.path() / "o").string()}).code == kExitOk);
  REQUIRE(run({"algo1", "--config", path, "--out", b.path().string(), "--threads", "4"}).code == kExitOk);
  const std::string r1 = read_text_file(a.path() / "o" / "algo1_result.json");
  CHECK(r1 == read_text_file(b.path() / "algo1_result.json"));
  CHECK(read_text_file(a.path() / "o" / "algo1_trace.csv") == read_text_file(b.path() / "algo1_trace.csv"));

  const auto trace = read_csv(b.path() / "algo1_trace.csv");
  REQUIRE(trace.size() == 9);
  CHECK(trace[0] == std::vector<std::string>{"xi", "val_score"});
  const json res = json::parse(r1);
  const double xi = res["result"]["xi_star"];
  CHECK(std::find(kDefaultClipCandidates.begin(), kDefaultClipCandidates.end(), xi) != kDefaultClipCandidates.end());
  CHECK(res["config_hash"] == git_blob_hash(json{{"command", "algo1"}, {"seed", 11}, {"params", json::object()}}.dump()));
  CHECK(res["outputs"]["algo1_trace.csv"] == git_blob_hash(read_text_file(b.path() / "algo1_trace.csv")));

  // candidates [0]: the test score is the unpruned stack's, rebuilt here from
  // the documented task stream (seed, 2)
  const std::string zero_cfg = c.file(
      "zero.json", R"({"command":"algo1","seed":11,"params":{"candidates":[0],"task":{"d":3,"n_demos":6,"n_val":5,"n_test":7}}})");
  REQUIRE(run({"algo1", "--config", zero_cfg, "--out", c.path().string()}).code == kExitOk);
  const json zr = json::parse(read_text_file(c.path() / "algo1_result.json"));
  Rng rng(stream_seed(11, 2));
  const LinearTask task = sample_task(3, rng);
  const PromptSequence demos = sample_prompt(task, 6, rng);
  const double eta = default_eta(demos);
  std::normal_distribution<double> normal;
  std::vector<LabeledQuery> val, test;
  for (auto [set, n] : {std::pair{&val, 5}, std::pair{&test, 7}})
    for (int i = 0; i < n; ++i) {
      Vector x(3);
      for (double& v : x) v = normal(rng);
      const double y = dot(task.w_true, x);
      set->push_back({std::move(x), Vector{y}});
    }
  const Stack planted = plant_attention_noise(construct_gd_stack(3, 3, eta, 6), 2, 0.8);
  const double expect = evaluate(planted, assemble_examples(demos.demos(), test, 1), {Metric::regression, true});
  CHECK(zr["result"]["test_score"].get<double>() == expect);
  CHECK(zr["result"]["xi_star"].get<double>() == 0.0);
}

TEST_CASE("bound-report") {
  TempDir dir;
  const std::string zero = dir.file(
      "zero.json", R"({"command":"bound-report","seed":2,"params":{"stack":{"generate":"zero","d":3,"layers":3}}})");
  REQUIRE(run({"bound-report", "--config", zero, "--out", (dir.path() / "z").string()}).code == kExitOk);
  const auto z = read_csv(dir.path() / "z" / "bound_report.csv");
  REQUIRE(z.size() == 4);
  for (std::size_t i = 1; i < z.size(); ++i) CHECK(num(z[i][1]) == 0.0);

  const std::string same = dir.file(
      "same.json",
      R"({"command":"bound-report","seed":2,"params":{"prune":{"layer":1,"module":"attn_all","xi":0}}})");
  REQUIRE(run({"bound-report", "--config", same, "--out", (dir.path() / "s").string()}).code == kExitOk);
  const auto s = read_csv(dir.path() / "s" / "bound_report.csv");
  REQUIRE(s[0].size() == 11);
  CHECK(s[0][9] == "delta_term");
  for (std::size_t i = 1; i < s.size(); ++i) {
    CHECK(num(s[i][9]) == 0.0);
    CHECK(num(s[i][10]) == 0.0);
  }

  const std::string wv = dir.file(
      "wv.json", R"({"command":"bound-report","seed":3,"params":{"stack":{"generate":"random","variant":"linear","d":3,"layers":2,"scale":0.3},"prune":{"layer":1,"module":"w_v","xi":0.9}}})");
  REQUIRE(run({"bound-report", "--config", wv, "--out", (dir.path() / "v").string()}).code == kExitOk);
  const auto v = read_csv(dir.path() / "v" / "bound_report.csv");
  CHECK(num(v[2][10]) <= 0.0);  // row for t = 2, the pruned layer
  CHECK(num(v[1][10]) == 0.0);  // layers before it are untouched

  CHECK(run({"bound-report", "--config",
             dir.file("b.json", R"({"command":"bound-report","seed":2,"params":{"shots":4,"b":5}})")})
            .code == kExitUsage);
  CHECK(run({"bound-report", "--config",
             dir.file("sm.json", R"({"command":"bound-report","seed":2,"params":{"stack":{"generate":"random","variant":"softmax"}}})")})
            .code == kExitUsage);
}

TEST_CASE("csv output ignores the global locale") {
  TempDir dir;
  const std::locale saved = std::locale::global(std::locale(std::locale::classic(), new CommaPunct));
  const Run r = run({"svd-inspect", "--seed", "7", "--out", dir.path().string()});
  std::locale::global(saved);
  REQUIRE(r.code == kExitOk);
  const auto rows = read_csv(dir.path() / "svd.csv");
  CHECK(rows[0] == std::vector<std::string>{"rank", "xi", "trunc_error", "tail_norm"});
  REQUIRE(rows.size() == 5);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == 4);
    CHECK(num(rows[i][2]) == doctest::Approx(num(rows[i][3])).epsilon(1e-10));
  }
  CHECK(num(rows[4][2]) <= 1e-10);
}

TEST_CASE("other commands run") {
  TempDir dir;
  const auto out = [&](const char* n) { return (dir.path() / n).string(); };
  CHECK(run({"cond-profile", "--seed", "1", "--out", out("cp")}).code == kExitOk);
  CHECK(read_csv(dir.path() / "cp" / "cond_profile.csv")[0][0] == "layer");
  CHECK(run({"drop-layer-bench", "--seed", "1", "--out", out("dl")}).code == kExitOk);
  CHECK(read_csv(dir.path() / "dl" / "drop_layer.csv").size() == 5);
  const std::string garg = dir.file(
      "g.json", R"({"command":"garg-bench","seed":1,"params":{"d":4,"shots":[0,8],"tasks":40,"gd_layers":10}})");
  CHECK(run({"garg-bench", "--config", garg, "--out", out("g")}).code == kExitOk);
  const auto g = read_csv(dir.path() / "g" / "garg.csv");
  CHECK(g.size() == 1 + 1 + 4);  // k = 0 only reports the zero estimator
  const std::string sweep = dir.file(
      "s.json", R"({"command":"prune-sweep","seed":1,"params":{"shots":[4],"batch":8,"candidates":[0,0.5]}})");
  const Run s1 = run({"prune-sweep", "--config", sweep, "--out", out("s1")});
  const Run s4 = run({"prune-sweep", "--config", sweep, "--out", out("s4"), "--threads", "4"});
  REQUIRE(s1.code == kExitOk);
  REQUIRE(s4.code == kExitOk);
  const auto a = read_csv(dir.path() / "s1" / "sweep.csv"), b = read_csv(dir.path() / "s4" / "sweep.csv");
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)  // everything but runtime_ms
    CHECK(std::vector(a[i].begin(), a[i].end() - 1) == std::vector(b[i].begin(), b[i].end() - 1));
}

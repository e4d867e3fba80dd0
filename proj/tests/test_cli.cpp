#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <json.hpp>

#include <fstream>
#include <sstream>

#include "cma/cli.hpp"
#include "oracle/reference_gpt2.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "cma_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cma::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const std::string& checkpoint() {
  static const std::string path = [] {
    const auto p = (work() / "toy.cma1").string();
    const auto r = cli({"init-random", "--checkpoint", p, "--n-layers", "2", "--n-heads", "2", "--d-model", "8",
                        "--d-ff", "32", "--vocab-size", "51", "--max-positions", "32", "--seed", "7", "--std", "0.5"});
    REQUIRE(r.code == 0);
    return p;
  }();
  return path;
}

std::vector<std::string> professions_args() {
  return {"--checkpoint", checkpoint(), "--vocab", support::source("tests/fixtures/toy/vocab.tsv").string(),
          "--templates", support::source("data/templates.txt").string(), "--professions",
          support::source("tests/fixtures/toy/professions.tsv").string()};
}

std::vector<std::string> winograd_args() {
  return {"--checkpoint", checkpoint(), "--vocab", support::source("tests/fixtures/toy/vocab.tsv").string(),
          "--corpus", support::source("tests/fixtures/toy/winograd.tsv").string()};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

}  // namespace

TEST_CASE("init-random is reproducible") {
  const auto again = (work() / "again.cma1").string();
  REQUIRE(cli({"init-random", "--checkpoint", again, "--n-layers", "2", "--n-heads", "2", "--d-model", "8", "--d-ff",
               "32", "--vocab-size", "51", "--max-positions", "32", "--seed", "7", "--std", "0.5"})
              .code == 0);
  CHECK(slurp(again) == slurp(checkpoint()));
  CHECK(cma::cli::sha256_file(again) == cma::cli::sha256_file(checkpoint()));
}

TEST_CASE("every command is byte-identical across worker counts") {
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"te_prof", concat({"total-effect", "--filter-te"}, professions_args())},
      {"te_wino", concat({"total-effect", "--filter-te"}, winograd_args())},
      {"med_neuron", concat({"mediate", "--mediator", "neuron", "--top-percent", "25"}, professions_args())},
      {"med_head", concat({"mediate", "--mediator", "head"}, winograd_args())},
      {"sel_greedy", concat({"select", "--mediator", "head", "--method", "greedy", "--budget", "3"}, winograd_args())},
      {"sel_topk", concat({"select", "--mediator", "neuron", "--method", "topk", "--budget", "12", "--block-size", "4",
                           "--layers", "1,2"},
                          professions_args())},
      {"diag_dec", concat({"diagnostics", "--analysis", "decomposition"}, winograd_args())},
      {"diag_str", concat({"diagnostics", "--analysis", "stripes", "--seed", "5", "--trials", "20"}, professions_args())},
      {"diag_cor", concat({"diagnostics", "--analysis", "correlation"}, professions_args())},
  };
  for (const auto& [name, args] : commands) {
    CAPTURE(name);
    const auto d1 = work() / (name + "_w1"), d8 = work() / (name + "_w8");
    const auto r1 = cli(concat(args, {"--workers", "1", "--out-dir", d1.string()}));
    const auto r8 = cli(concat(args, {"--workers", "8", "--out-dir", d8.string()}));
    REQUIRE_MESSAGE(r1.code == 0, r1.err);
    REQUIRE_MESSAGE(r8.code == 0, r8.err);
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(d1)) {
      const auto file = entry.path().filename();
      if (file == "manifest.json") continue;
      CAPTURE(file);
      CHECK(slurp(entry.path()) == slurp(d8 / file));
      ++files;
    }
    CHECK(files > 0);
  }
}

TEST_CASE("output formats") {
  const auto d = work() / "te_prof_w1";
  const auto rows = csv_lines(d / "total_effect.csv");
  CHECK(rows.front() ==
        "example,group,aggregate,prompt,p_anti_null,p_stereo_null,p_anti_intervened,p_stereo_intervened,te,degenerate,"
        "metric");
  CHECK(rows.size() == 1 + 17 * 12);
  const auto summary = csv_lines(d / "total_effect_summary.csv");
  CHECK(summary.size() == 5);  // header, all, female, male, filtered

  const auto map = csv_lines(work() / "med_neuron_w1" / "nie_map.csv");
  CHECK(map.size() == 1 + 3);  // n_layers + 1 rows
  CHECK(std::count(map[1].begin(), map[1].end(), ',') == 8);
  const auto heads = csv_lines(work() / "med_head_w1" / "nie_map.csv");
  CHECK(heads.size() == 1 + 2);

  const auto manifest = json::parse(slurp(d / "manifest.json"));
  CHECK(manifest["command"] == "total-effect");
  CHECK(manifest["checkpoint"]["sha256"] == cma::cli::sha256_file(checkpoint()));
  CHECK(manifest["inputs"].size() == 3);
  CHECK(manifest["workers"] == 1);
  CHECK(manifest.contains("wall_clock_seconds"));
  for (const auto& o : manifest["outputs"]) CHECK(o["sha256"] == cma::cli::sha256_file(d / o["file"].get<std::string>()));

  CHECK(cma::cli::format_number(0.1) == "0.10000000000000001");
  CHECK(cma::cli::csv_field("a,b") == "\"a,b\"");
  CHECK(cma::cli::csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
}

TEST_CASE("metric flag keeps the shape") {
  const auto d = work() / "med_head_tv";
  REQUIRE(cli(concat(concat({"mediate", "--mediator", "head", "--metric", "tv"}, winograd_args()),
                     {"--out-dir", d.string()}))
              .code == 0);
  const auto a = csv_lines(d / "effects.csv"), b = csv_lines(work() / "med_head_w1" / "effects.csv");
  CHECK(a.size() == b.size());
  CHECK(a[1] != b[1]);
}

TEST_CASE("null intervention gives zero total effects") {
  const auto d = work() / "te_null";
  REQUIRE(cli(concat(concat({"total-effect", "--null-intervention"}, professions_args()), {"--out-dir", d.string()}))
              .code == 0);
  const auto rows = csv_lines(d / "total_effect.csv");
  REQUIRE(rows.size() > 1);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<std::string> fields;
    std::istringstream in(rows[i]);
    for (std::string f; std::getline(in, f, ',');) fields.push_back(f);
    REQUIRE(fields.size() == 11);
    CHECK(fields[8] == "0");
  }
}

TEST_CASE("replay reproduces outputs") {
  const auto src = work() / "sel_greedy_w1";
  const auto dst = work() / "sel_greedy_replay";
  REQUIRE(cli({"replay", "--manifest", (src / "manifest.json").string(), "--out-dir", dst.string()}).code == 0);
  for (const auto& f : {"selection_curve.csv", "selection_order.csv", "selection_summary.csv"})
    CHECK(slurp(src / f) == slurp(dst / f));
}

TEST_CASE("exit codes") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  const auto out = (work() / "bad").string();
  CHECK(cli(concat(concat({"total-effect", "--metric", "kl"}, professions_args()), {"--out-dir", out})).code == 1);
  CHECK(cli(concat(concat({"mediate", "--mediator", "neuron"}, winograd_args()), {"--out-dir", out})).code == 1);
  CHECK(cli(concat(concat({"select", "--mediator", "neuron", "--method", "greedy"}, professions_args()),
                   {"--out-dir", out}))
            .code == 1);
  CHECK(cli(concat(concat({"diagnostics", "--analysis", "stripes"}, professions_args()), {"--out-dir", out})).code == 1);
  CHECK(cli(concat(concat({"select", "--mediator", "head", "--budget", "5"}, winograd_args()), {"--out-dir", out}))
            .code == 1);
  auto missing = winograd_args();
  missing[1] = (work() / "nope.cma1").string();
  CHECK(cli(concat(concat({"total-effect"}, missing), {"--out-dir", out})).code == 2);

  // A model that puts all mass on one token floors the candidates.
  auto ck = support::toy_checkpoint(7);
  auto& wte = ck.tensors.at("wte");
  for (float& v : wte.data()) v = 0.0f;
  auto& bias = ck.tensors.at("ln_f.bias");
  auto& gain = ck.tensors.at("ln_f.weight");
  for (float& v : gain.data()) v = 0.0f;
  bias.data()[0] = 1.0f;
  wte.at(0, 0) = 1000.0f;
  const auto degenerate = (work() / "degenerate.cma1").string();
  cma::save_checkpoint(ck, degenerate);
  auto args = winograd_args();
  args[1] = degenerate;
  const auto loose = cli(concat(concat({"total-effect"}, args), {"--out-dir", out}));
  CHECK(loose.code == 0);
  CHECK(loose.err.find("probability floor") != std::string::npos);
  CHECK(cli(concat(concat({"total-effect", "--strict"}, args), {"--out-dir", out})).code == 3);
}

TEST_CASE("fixture check against the straight-line oracle") {
  const auto ck = cma::init_random(support::toy_config(2, 424), 31, 0.3);
  const auto ckpt = (work() / "bpe.cma1").string();
  cma::save_checkpoint(ck, ckpt);
  const auto tok = cma::Tokenizer::load(support::source("tests/fixtures/bpe/vocab.tsv"),
                                        support::source("tests/fixtures/bpe/merges.txt"));
  json fixtures = json::array();
  for (const std::string prompt : {"The nurse said that", "The farmer examined the nurse because she"}) {
    const auto ids = tok.encode(prompt);
    const auto p = oracle::last_probs(oracle::forward(ck, std::vector<int>(ids.begin(), ids.end())));
    std::vector<int> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + 10, order.end(), [&](int a, int b) { return p[a] > p[b]; });
    json top = json::array();
    for (int i = 0; i < 10; ++i) top.push_back({order[i], p[order[i]]});
    fixtures.push_back({{"prompt", prompt}, {"ids", ids}, {"top10", top}});
  }
  const auto good = work() / "fixtures.json";
  std::ofstream(good) << json{{"fixtures", fixtures}}.dump();
  const std::vector<std::string> base{"check-fixtures", "--checkpoint", ckpt, "--vocab",
                                      support::source("tests/fixtures/bpe/vocab.tsv").string(), "--merges",
                                      support::source("tests/fixtures/bpe/merges.txt").string()};
  const auto ok = cli(concat(base, {"--fixtures", good.string(), "--out-dir", (work() / "fx").string()}));
  CHECK_MESSAGE(ok.code == 0, ok.err);

  fixtures[0]["top10"][0][1] = fixtures[0]["top10"][0][1].get<double>() + 1e-3;
  const auto bad = work() / "fixtures_bad.json";
  std::ofstream(bad) << json{{"fixtures", fixtures}}.dump();
  CHECK(cli(concat(base, {"--fixtures", bad.string(), "--out-dir", (work() / "fx_bad").string()})).code == 2);
}

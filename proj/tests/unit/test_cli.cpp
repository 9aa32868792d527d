#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "tiny.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Run cli(const std::string& args, const std::string& env = "") {
  const fs::path err = fs::path(SPOTDIFF_TEST_TMP) / "cli_stderr.txt";
  fs::create_directories(err.parent_path());
  const std::string cmd = env + " '" + SPOTDIFF_CLI + "' " + args + " > /dev/null 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

fs::path tiny_config_file() {
  const fs::path dir = fs::path(SPOTDIFF_TEST_TMP) / "cli";
  fs::create_directories(dir);
  const fs::path p = dir / "tiny.cfg";
  std::ofstream(p) << tiny::config(4).to_string();
  return p;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

}  // namespace

TEST_CASE("usage errors exit with the config code") {
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("train --mode diagonal").code == 2);
  CHECK(cli("sample --count 0").code == 2);
  CHECK(cli("--help").code == 0);
  CHECK(cli("train --help").code == 0);
}

TEST_CASE("missing inputs exit with the persistence code") {
  const fs::path out = tiny::fresh_dir("cli_missing");
  const Run r = cli("train --out '" + out.string() + "'");
  CHECK(r.code == 3);
  CHECK(r.err.find("corpus not found") != std::string::npos);
  CHECK(r.err.find("category=persistence") != std::string::npos);

  CHECK(cli("eval --corpus '" + out.string() + "' --checkpoint '" + (out / "nope.bin").string() + "'").code == 3);
  CHECK(cli("sample --out '" + out.string() + "'").code == 3);
  CHECK(cli("gen-corpus --config '" + (out / "none.cfg").string() + "'").code == 2);
}

TEST_CASE("malformed environment overrides are config errors") {
  const fs::path out = tiny::fresh_dir("cli_env");
  const Run r = cli("gen-corpus --out '" + out.string() + "'", "SPOTDIFF_CORPUS_POSES=many");
  CHECK(r.code == 2);
  CHECK(r.err.find("category=config") != std::string::npos);
}

TEST_CASE("gen-corpus is deterministic per seed") {
  const fs::path cfg = tiny_config_file();
  const fs::path a = tiny::fresh_dir("cli_corpus_a"), b = tiny::fresh_dir("cli_corpus_b"),
                 c = tiny::fresh_dir("cli_corpus_c");
  REQUIRE(cli("gen-corpus --quiet --config '" + cfg.string() + "' --out '" + a.string() + "'").code == 0);
  REQUIRE(cli("gen-corpus --quiet --config '" + cfg.string() + "' --out '" + b.string() + "'").code == 0);
  REQUIRE(cli("gen-corpus --quiet --seed 9 --config '" + cfg.string() + "' --out '" + c.string() + "'").code == 0);
  const auto ta = tree(a), tb = tree(b), tc = tree(c);
  CHECK(ta.size() > 2);
  CHECK(ta == tb);
  CHECK(ta.at("manifest.json") != tc.at("manifest.json"));

  const auto prov = nlohmann::json::parse(ta.at("provenance.json"));
  CHECK(prov.at("command") == "gen-corpus");
  CHECK(prov.at("seed") == 4);
  CHECK(prov.at("config_hash").get<std::string>().size() == 16);
}

TEST_CASE("train, sample and eval chain on a tiny config") {
  const fs::path cfg = tiny_config_file();
  const fs::path corpus = tiny::fresh_dir("cli_chain_corpus"), run = tiny::fresh_dir("cli_chain_run"),
                 samples = tiny::fresh_dir("cli_chain_samples"), eval = tiny::fresh_dir("cli_chain_eval");
  const std::string c = " --quiet --config '" + cfg.string() + "'";
  REQUIRE(cli("gen-corpus" + c + " --out '" + corpus.string() + "'").code == 0);
  const Run t = cli("train" + c + " --steps 2 --corpus '" + corpus.string() + "' --out '" + run.string() + "'");
  REQUIRE_MESSAGE(t.code == 0, t.err);
  for (const char* f : {"provenance.json", "stages.json", "train_log.csv", "timing.csv", "checkpoint.bin"})
    CHECK(fs::exists(run / f));
  CHECK(nlohmann::json::parse(slurp(run / "stages.json")).size() == 3);

  const std::string ck = " --checkpoint '" + (run / "checkpoint.bin").string() + "' --corpus '" + corpus.string() + "'";
  const Run s = cli("sample" + c + ck + " --count 2 --steps 2 --out '" + samples.string() + "'");
  REQUIRE_MESSAGE(s.code == 0, s.err);
  const auto index = nlohmann::json::parse(slurp(samples / "samples.json"));
  REQUIRE(index.size() == 2);
  for (const auto& g : index) CHECK(fs::exists(samples / g.at("sample").get<std::string>()));

  const Run e = cli("eval" + c + ck + " --out '" + eval.string() + "'");
  REQUIRE_MESSAGE(e.code == 0, e.err);
  const auto metrics = nlohmann::json::parse(slurp(eval / "metrics.json"));
  REQUIRE(metrics.size() == 1);
  CHECK(metrics[0].at("checkpoint_id") == "checkpoint.bin");
  CHECK(fs::exists(eval / "metrics.csv"));
}

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "support.hpp"

namespace fs = std::filesystem;

namespace {

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(BAYESQ_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  const auto dir = testing::scratch("cli_usage");
  CHECK(cli("", dir / "log") == 2);
  CHECK(cli("no-such-command", dir / "log") == 2);
  CHECK(cli("run", dir / "log") == 2);
  CHECK(cli("--help", dir / "log") == 0);
}

TEST_CASE("make-toy then the staged commands") {
  const auto dir = testing::scratch("cli_stages");
  const auto toy = dir / "toy";
  REQUIRE(cli("make-toy --out " + toy.string() + " --dims 16,32,4 --samples 64", dir / "log") == 0);
  CHECK(fs::exists(toy / "config.ini"));
  const std::string cfg = "--config " + (toy / "config.ini").string();

  // table before posteriors: a stage failure
  CHECK(cli("build-table " + cfg, dir / "log") == 3);

  CHECK(cli("fit-posterior " + cfg, dir / "log") == 0);
  CHECK(cli("design-codebooks " + cfg, dir / "log") == 0);
  CHECK(cli("build-table " + cfg, dir / "log") == 0);
  CHECK(cli("allocate --dp " + cfg, dir / "log") == 0);
  CHECK(slurp(dir / "log").find("# dp loss") != std::string::npos);
  CHECK(cli("export --verify " + cfg, dir / "log") == 0);
  CHECK(slurp(dir / "log").find("verified") != std::string::npos);
  CHECK(cli("distill " + cfg, dir / "log") == 0);
  CHECK(fs::exists(toy / "out" / "distilled.qmanifest"));
  CHECK(cli("frontier " + cfg, dir / "log") == 0);
  CHECK(fs::exists(toy / "out" / "frontier.tsv"));

  // flip one payload byte: verification failure
  const auto blob = toy / "out" / "model.qblob";
  {
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(8);
    char c = 0;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x5a);
    f.seekp(8);
    f.write(&c, 1);
  }
  CHECK(cli("distill " + cfg, dir / "log") == 4);
}

TEST_CASE("run with overrides and config errors") {
  const auto dir = testing::scratch("cli_run");
  const auto toy = dir / "toy";
  REQUIRE(cli("make-toy --out " + toy.string() + " --dims 16,32,4 --samples 64", dir / "log") == 0);
  const std::string cfg = "--config " + (toy / "config.ini").string();
  CHECK(cli("run " + cfg + " --out " + (dir / "a").string() + " --seed 5", dir / "log") == 0);
  CHECK(fs::exists(dir / "a" / "report.json"));
  CHECK(cli("run " + cfg + " --out " + (dir / "b").string() + " --seed 5", dir / "log") == 0);
  CHECK(slurp(dir / "a" / "report.json") == slurp(dir / "b" / "report.json"));

  {
    std::ofstream bad(dir / "bad.ini");
    bad << "[model]\npath = toy\n[budget]\ntarget_bits = 3\ntotal_bits = 100\n";
  }
  CHECK(cli("run --config " + (dir / "bad.ini").string(), dir / "log") == 2);
  CHECK(cli("run --config " + (dir / "missing.ini").string(), dir / "log") == 2);
}

TEST_CASE("allocate from explicit costs and metrics from predictions") {
  const auto dir = testing::scratch("cli_tables");
  {
    std::ofstream t(dir / "table.tsv");
    t << "block\tm\tloss\n"
         "a\t2\t4\na\t3\t1\na\t4\t0.25\n"
         "b\t2\t2\nb\t3\t0.5\nb\t4\t0.125\n";
    std::ofstream c(dir / "costs.tsv");
    c << "block\tm\tcost\na\t2\t2\na\t3\t3\na\t4\t4\nb\t2\t2\nb\t3\t3\nb\t4\t4\n";
  }
  const int rc = cli("allocate --table " + (dir / "table.tsv").string() + " --costs " + (dir / "costs.tsv").string() +
                         " --budget 6 --dp",
                     dir / "log");
  INFO(slurp(dir / "log"));
  CHECK(rc == 0);
  CHECK(cli("allocate --table " + (dir / "table.tsv").string() + " --costs " + (dir / "costs.tsv").string(),
            dir / "log") == 2);

  {
    std::ofstream p(dir / "pred.tsv");
    p << "label\tpredicted\tprobs\n0\t0\t0.9\t0.1\n1\t0\t0.6\t0.4\n1\t1\t0.2\t0.8\n0\t0\t0.7\t0.3\n";
  }
  CHECK(cli("metrics --predictions " + (dir / "pred.tsv").string() + " --k 50 --alpha 0.5", dir / "log") == 0);
  CHECK(slurp(dir / "log").find("top1\t0.75") != std::string::npos);
  CHECK(cli("metrics --predictions " + (dir / "nothing.tsv").string(), dir / "log") == 3);
}

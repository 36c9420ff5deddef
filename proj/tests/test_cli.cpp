#include "doctest.h"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <sys/wait.h>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "spatconf_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string("\"") + SPATCONF_CLI + "\" " + args + " > \"" + (kWork / "stdout.txt").string() +
                          "\" 2> \"" + (kWork / "stderr.txt").string() + "\"";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> data_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  return out;
}

struct Workdir {
  Workdir() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
  ~Workdir() { fs::remove_all(kWork); }
};

}  // namespace

TEST_CASE("identify reports the GM2 ring as identifiable") {
  Workdir w;
  const auto out = kWork / "id";
  REQUIRE(run("identify --phiU 0.5 --phiZ 0.2 --rho 0.3 --n 400 --out " + out.string()) == 0);
  CHECK(slurp(kWork / "stdout.txt") == "identifiable\n");
  const json j = json::parse(slurp(out / "identify.json"));
  CHECK(j["report"]["verdict"] == "identifiable");
  CHECK(j["config"]["phi_u"] == 0.5);
  CHECK(j.contains("seed"));

  REQUIRE(run("identify --phiU 0 --phiZ 0 --rho 0 --out " + out.string()) == 0);
  CHECK(slurp(kWork / "stdout.txt") == "non-identifiable\n");
}

TEST_CASE("generate then fit recovers the exposure effect") {
  Workdir w;
  const auto data = kWork / "gen";
  REQUIRE(run("generate --gm GM2 --n 300 --seed 4 --stem gm2 --out " + data.string()) == 0);
  CHECK(fs::exists(data / "gm2.csv"));
  CHECK(fs::exists(data / "gm2_adjacency.csv"));
  const auto truth_path = data / "gm2.sealed_truth.json";
  REQUIRE(fs::exists(truth_path));

  const auto out = kWork / "fit";
  REQUIRE(run("fit --data " + (data / "gm2.csv").string() + " --adjacency " + (data / "gm2_adjacency.csv").string() +
              " --model affine-rs --seed 1 --out " + out.string()) == 0);
  const json fit = json::parse(slurp(out / "fit.json"));
  const auto& rr = fit["result"]["relative_rate"];
  const double point = rr["geometric_mean"];
  CHECK(rr["lower"].get<double>() < point);
  CHECK(point < rr["upper"].get<double>());
  CHECK(fit["config"]["model"]["estimator"] == "affine-rs");
  CHECK(fit["seed"] == 1);
  CHECK(data_lines(out / "samples.csv").size() == 10001);

  // scoring reads the truth directly; the fit pipeline never does
  const json truth = json::parse(slurp(truth_path));
  CHECK(std::abs(std::log(point) - truth["beta_z"].get<double>()) < 0.5);

  CHECK(run("fit --data " + truth_path.string() + " --adjacency " + (data / "gm2_adjacency.csv").string() +
            " --out " + out.string()) == 2);
}

TEST_CASE("simulate writes one row per estimator") {
  Workdir w;
  const auto out = kWork / "sim";
  REQUIRE(run("simulate --gm GM2 --reps 100 --estimators nonspatial,spatial-rs,affine-rs --iterations 1100 "
              "--burn-in 100 --out " + out.string()) == 0);
  const auto rows = data_lines(out / "study.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[1].rfind("GM2,Non-spatial,", 0) == 0);
  CHECK(rows[3].rfind("GM2,Affine-RS,", 0) == 0);
  const json j = json::parse(slurp(out / "study.json"));
  CHECK(j["config"]["reps"] == 100);
  CHECK(j["study"]["replicates"].size() == 300);
}

TEST_CASE("exit codes") {
  Workdir w;
  CHECK(run("fit --data nowhere.csv --adjacency nowhere.csv --out " + kWork.string()) == 3);
  CHECK(run("simulate --gm GM9 --out " + kWork.string()) == 2);
  CHECK(run("bogus") == 2);
  CHECK(run("identify --phiU 1.5 --out " + kWork.string()) == 2);

  std::ofstream(kWork / "d.csv") << "id,y,z\na,1,0.1\nb,2,0.2\nc,3,0.3\n";
  std::ofstream(kWork / "adj.csv") << "src,dst\na,b\n";
  CHECK(run("fit --data " + (kWork / "d.csv").string() + " --adjacency " + (kWork / "adj.csv").string() + " --out " +
            kWork.string()) == 3);
  CHECK(slurp(kWork / "stderr.txt").find("c") != std::string::npos);
}

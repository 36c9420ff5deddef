#include "doctest.h"

#include "spatconf/errors.hpp"
#include "spatconf/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace spatconf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("spatconf_io_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name, const std::string& content = {}) const {
    const auto p = (path / name).string();
    if (!content.empty()) std::ofstream(p) << content;
    return p;
  }
};

}  // namespace

TEST_CASE("three-row dataset is ingested") {
  TempDir dir;
  const auto path = dir.file("d.csv",
                             "id,y,z,population,x1\n"
                             "a,3,0.5,100,1.5\n"
                             "b,0,-0.25,200,2\n"
                             "c,7,1,300,-1\n");
  const auto in = ingest_dataset(path);
  const auto& d = in.data;
  REQUIRE(d.n() == 3);
  CHECK(d.ids == std::vector<std::string>{"a", "b", "c"});
  CHECK(d.y(2) == 7.0);
  CHECK(d.z(1) == -0.25);
  REQUIRE(d.x_minus_z.cols() == 2);
  CHECK(d.x_minus_z(0, 0) == 1.0);
  CHECK(d.x_minus_z(1, 1) == 2.0);
  CHECK(d.covariate_names == std::vector<std::string>{"intercept", "x1"});
  REQUIRE(in.population);
  CHECK((*in.population)(2) == 300.0);
  CHECK(in.index.at("b") == 1);
  CHECK(!d.offset);
  CHECK(d.censored.empty());
}

TEST_CASE("censored rows keep a placeholder") {
  TempDir dir;
  const auto path = dir.file("d.csv",
                             "# synthetic\n"
                             "id,y,z,censored\n"
                             "a,NA,0.5,1\n"
                             "b,12,0.1,0\n"
                             "c,,0.2,true\n");
  const auto d = ingest_dataset(path).data;
  REQUIRE(d.censored.size() == 3);
  CHECK(d.censored[0] == 1);
  CHECK(d.censored[1] == 0);
  CHECK(d.censored[2] == 1);
  CHECK(d.y(0) == 0.0);
  CHECK(d.y(1) == 12.0);
  CHECK(d.censor_threshold == 10);
}

TEST_CASE("malformed datasets raise DataError") {
  TempDir dir;
  CHECK_THROWS_AS(ingest_dataset(dir.file("a.csv", "id,y\na,1\n")), DataError);
  CHECK_THROWS_AS(ingest_dataset(dir.file("b.csv", "id,y,z\na,1,0\na,2,1\n")), DataError);
  CHECK_THROWS_WITH_AS(ingest_dataset(dir.file("c.csv", "id,y,z\na,1,0\nb,x,1\n")),
                       doctest::Contains("row 2"), DataError);
  CHECK_THROWS_AS(ingest_dataset(dir.file("d.csv", "id,y,z,censored\na,1,0,maybe\n")), DataError);
  CHECK_THROWS_AS(ingest_dataset(dir.file("missing.csv")), DataError);
}

TEST_CASE("adjacency alignment") {
  const std::map<std::string, int> index{{"a", 0}, {"b", 1}, {"c", 2}};
  const auto g = align_adjacency({{"a", "b"}, {"b", "a"}, {"b", "c"}}, index);
  CHECK(g.size() == 3);
  CHECK(g.edge_count() == 2);
  CHECK_THROWS_WITH_AS(align_adjacency({{"a", "b"}}, index), doctest::Contains("c"), DataError);
  CHECK_THROWS_WITH_AS(align_adjacency({{"a", "b"}, {"b", "c"}, {"c", "zz"}}, index), doctest::Contains("zz"),
                       DataError);
  CHECK_THROWS_AS(align_adjacency({{"a", "a"}, {"b", "c"}}, index), DataError);

  TempDir dir;
  const auto path = dir.file("adj.csv", "src,dst\na,b\nb,c\n");
  CHECK(read_adjacency(path, index).edge_count() == 2);
}

TEST_CASE("internal standardisation offsets") {
  const Eigen::VectorXd one = Eigen::VectorXd::Constant(1, 500.0);
  CHECK(compute_offset(one, 40.0, 500.0)(0) == doctest::Approx(std::log(40.0)));

  const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(4, 250.0);
  const auto u = compute_offset(uniform, 20.0, 1000.0);
  CHECK(u(0) == doctest::Approx(std::log(5.0)));
  CHECK((u.array() == u(0)).all());

  Eigen::VectorXd pop(2);
  pop << 100.0, 300.0;
  const auto o = compute_offset(pop, 8.0, 400.0);
  CHECK(o(0) == doctest::Approx(std::log(2.0)));
  CHECK(o(1) == doctest::Approx(std::log(6.0)));

  pop(1) = 0.0;
  CHECK_THROWS_WITH_AS(compute_offset(pop, 8.0, 400.0, {"u1", "u2"}), doctest::Contains("u2"), DataError);
  CHECK_THROWS_AS(compute_offset(uniform, 0.0, 1000.0), DataError);
}

TEST_CASE("config JSON round trips") {
  FitConfig f;
  f.method = FitMethod::likelihood;
  f.model.estimator = Estimator::spatial_rs;
  f.model.family = OutcomeFamily::gaussian;
  f.model.priors.tau_kind = TauPrior::flat;
  f.model.chain.iterations = 500;
  f.model.chain.burn_in = 100;
  f.model.chain.seed = 77;
  f.spline = SplineRequest{};
  f.spline->knot_count = 5;
  f.schema.covariates = {"x1", "x2"};
  f.deaths_total = 12.0;
  f.curve_grid = {-1.0, 0.0, 1.0};
  const json j = to_json(f);
  const FitConfig g = fit_config_from_json(json::parse(j.dump()));
  CHECK(to_json(g) == j);
  CHECK(g.model.chain.seed == 77);
  CHECK(g.spline->knot_count == 5);
  CHECK(!g.population_total);

  StudyConfig s;
  s.generator = gm_config(Mechanism::gm5);
  s.estimators = {Estimator::affine};
  s.reps = 3;
  s.master_seed = 9;
  const json sj = to_json(s);
  CHECK(to_json(study_config_from_json(json::parse(sj.dump()))) == sj);

  CHECK_THROWS_AS(fit_config_from_json(json{{"methd", "bayesian"}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(json{{"family", "binomial"}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(json{{"chain", {{"iterations", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(json{{"chain", {{"iterations", 10}, {"burn_in", 20}}}}), ConfigError);
}

TEST_CASE("sealed truth is never read back") {
  TempDir dir;
  const auto path = sealed_truth_path((dir.path / "run").string());
  CHECK(is_sealed_truth_path(path));
  CHECK(!is_sealed_truth_path(dir.file("run.json")));

  GenerativeConfig c = gm_config(Mechanism::gm2);
  c.n = 20;
  c.seed = 3;
  const auto gen = generate_dataset(c);
  const json t = sealed_truth_json(gen.truth, c);
  CHECK(t["u"].size() == 20);
  write_json(path, t);
  CHECK(fs::exists(path));
  CHECK_THROWS_AS(read_json(path), ConfigError);
  CHECK_THROWS_AS(ingest_dataset(path), ConfigError);
  CHECK_THROWS_AS(read_adjacency(path, {}), ConfigError);
}

TEST_CASE("generated datasets survive a CSV round trip") {
  TempDir dir;
  GenerativeConfig c = gm_config(Mechanism::gm3);
  c.n = 30;
  c.seed = 5;
  const auto gen = generate_dataset(c);
  const auto path = dir.file("gen.csv");
  write_dataset_csv(path, gen.data);
  const auto back = ingest_dataset(path);
  CHECK(back.data.n() == 30);
  CHECK((back.data.y - gen.data.y).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((back.data.x_minus_z - gen.data.x_minus_z).cwiseAbs().maxCoeff() < 1e-8);
  REQUIRE(back.data.offset);
  CHECK(back.data.offset->cwiseAbs().maxCoeff() == 0.0);

  const auto adj = dir.file("adj.csv");
  write_edge_list_csv(gen.graph, back.data.ids, adj);
  CHECK(read_adjacency(adj, back.index).edge_count() == gen.graph.edge_count());
}

TEST_CASE("study CSV has one row per estimator") {
  StudyConfig s;
  s.generator = gm_config(Mechanism::gm1);
  s.generator.n = 40;
  s.generator.family = OutcomeFamily::gaussian;
  s.reps = 2;
  s.method = FitMethod::likelihood;
  s.estimators = {Estimator::nonspatial, Estimator::spatial};
  const auto summary = run_study(s);

  TempDir dir;
  const auto path = dir.file("study.csv");
  write_study_csv(path, summary, "mechanism GM1\nreps 2");
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "# mechanism GM1");
  CHECK(lines[2] == "Mechanism,Estimator,Bias,Std. Err.,RMSE,95% CI Coverage,Successes,Failures");
  CHECK(lines[3].rfind("GM1,OLS,", 0) == 0);

  const json j = study_json(summary);
  CHECK(j["rows"].size() == 2);
  CHECK(j["replicates"].size() == 4);
  CHECK(j["config"]["reps"] == 2);
}

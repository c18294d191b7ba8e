#include "test_support.hpp"

#include "cli.hpp"

using namespace ctxadjust;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ctxadjust");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ctxadjust-cli-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string artifact_hash(const fs::path& dir, const std::string& name) {
  const auto m = json::parse(ctxtest::slurp((dir / "manifest.json").string()));
  for (const auto& a : m["artifacts"])
    if (a["path"] == name) return a["sha256"];
  return "";
}

// Small league: 8 teams, 3 seasons, Poisson shots. Simulated once per test binary.
const fs::path& league_dir() {
  static const fs::path dir = [] {
    const auto d = scratch("league");
    std::ofstream(d / "gen.json") << R"({"teams": 8, "seasons": 3, "family": "poisson"})";
    if (run_cli({"simulate", "--seed", "7", "--config", (d / "gen.json").string(), "--out", (d / "sim").string()}) != 0)
      throw std::runtime_error("simulate failed");
    return d;
  }();
  return dir;
}

std::string minutes() { return (league_dir() / "sim" / "minutes.csv").string(); }
std::string results() { return (league_dir() / "sim" / "results.csv").string(); }

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli({}), 2);
  EXPECT_EQ(run_cli({"fit", "--no-such-flag"}), 2);
  EXPECT_EQ(run_cli({"frobnicate"}), 2);
  EXPECT_EQ(run_cli({"fit"}), 2);  // --data is required
  const auto out = scratch("missing");
  EXPECT_EQ(run_cli({"fit", "--data", (out / "absent.csv").string(), "--out", out.string()}), 2);
  // Stochastic commands refuse to run without a seed.
  EXPECT_EQ(run_cli({"simulate", "--out", out.string()}), 2);
}

TEST(Cli, SimulateIsReproducibleFromItsManifest) {
  const auto a = scratch("sim-a"), b = scratch("sim-b");
  const auto cfg = (league_dir() / "gen.json").string();
  ASSERT_EQ(run_cli({"simulate", "--seed", "7", "--config", cfg, "--out", a.string()}), 0);
  ASSERT_EQ(run_cli({"simulate", "--seed", "7", "--config", cfg, "--out", b.string(), "--threads", "3"}), 0);
  const auto ma = json::parse(ctxtest::slurp((a / "manifest.json").string()));
  const auto mb = json::parse(ctxtest::slurp((b / "manifest.json").string()));
  EXPECT_EQ(ma["artifacts"], mb["artifacts"]);
  EXPECT_EQ(ma["command"], "simulate");
  EXPECT_EQ(ma["seed"], 7);
  EXPECT_EQ(ma["artifacts"].size(), 4u);
  for (const auto& art : ma["artifacts"]) EXPECT_EQ(sha256_file((a / art["path"].get<std::string>()).string()), art["sha256"]);
  EXPECT_EQ(ma["config_hash"], sha256_hex(ma["config"].dump()));
  // Rebuilding from the recorded generator config gives the same data.
  const auto c = scratch("sim-c");
  std::ofstream(c / "replay.json") << ma["config"]["options"]["generator"].dump();
  ASSERT_EQ(run_cli({"simulate", "--seed", "7", "--config", (c / "replay.json").string(), "--out", c.string()}), 0);
  EXPECT_EQ(artifact_hash(c, "minutes.csv"), artifact_hash(a, "minutes.csv"));
  EXPECT_EQ(ctxtest::slurp((a / "minutes.csv").string()).substr(0, 20), "game_id,team,opponen");
}

TEST(Cli, IngestFlagsInvalidRows) {
  const auto d = scratch("ingest");
  auto text = ctxtest::slurp(minutes());
  std::ofstream(d / "good.csv") << text;
  ASSERT_EQ(run_cli({"ingest", "--data", (d / "good.csv").string(), "--out", (d / "g").string()}), 0);
  EXPECT_EQ(ctxtest::slurp((d / "g" / "minutes.csv").string()), text);
  // Make the first data row's corner count negative.
  const auto pos = text.find('\n', text.find('\n') + 1);
  const auto comma = text.rfind(',', pos - 1);
  text.replace(comma + 1, pos - comma - 1, "-3");
  std::ofstream(d / "bad.csv") << text;
  EXPECT_EQ(run_cli({"ingest", "--data", (d / "bad.csv").string(), "--out", (d / "b").string()}), 2);
  const auto issues = ctxtest::slurp((d / "b" / "issues.csv").string());
  EXPECT_NE(issues.find("2,"), std::string::npos);
}

TEST(Cli, IngestBuildsMinutesFromCommentary) {
  const std::string samples = CTXADJUST_SAMPLES_DIR;
  const auto d = scratch("commentary");
  ASSERT_EQ(run_cli({"ingest", "--fixtures", samples + "/fixtures.csv", "--commentary-dir", samples + "/commentary",
                     "--odds", samples + "/odds.csv", "--out", d.string()}),
            0);
  EXPECT_EQ(ctxtest::slurp((d / "results.csv").string()),
            "game_id,season,league,round,home_team,away_team,home_goals,away_goals\n"
            "ENG2012-001,2012/13,ENG,1,Arsenal,Chelsea,1,1\n"
            "ENG2012-002,2012/13,ENG,1,Everton,Fulham,1,0\n");
  const auto warnings = json::parse(ctxtest::slurp((d / "ingest_warnings.json").string()));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_EQ(warnings[0]["game_id"], "ENG2012-002");
  std::ifstream in(d / "minutes.csv");
  const auto table = parse_minute_csv(in);
  ASSERT_TRUE(table.issues.empty());
  int arsenal_shots = 0;
  for (const auto& r : table.rows) arsenal_shots += r.team == "Arsenal" ? r.shots : 0;
  EXPECT_EQ(arsenal_shots, 5);
  EXPECT_EQ(run_cli({"ingest", "--fixtures", samples + "/fixtures.csv", "--out", d.string()}), 2);
}

TEST(Cli, SelectListsEveryFamily) {
  const auto d = scratch("select");
  ASSERT_EQ(run_cli({"select", "--data", minutes(), "--family", "all", "--out", d.string()}), 0);
  const auto csv = ctxtest::slurp((d / "selection.csv").string());
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "family,log_likelihood,edf,aic,bic,theta,status");
  for (const auto* f : {"poisson", "negative_binomial", "zip", "gaussian_identity", "gaussian_log"})
    EXPECT_NE(csv.find(std::string("\n") + f + ","), std::string::npos) << f;
  EXPECT_EQ(run_cli({"select", "--data", minutes(), "--family", "poisson,bogus", "--out", d.string()}), 2);
}

TEST(Cli, FitAdjustComposeLikeReport) {
  const auto d = scratch("pipeline");
  ASSERT_EQ(run_cli({"fit", "--data", minutes(), "--family", "poisson", "--out", (d / "fit").string()}), 0);
  ASSERT_EQ(run_cli({"adjust", "--model", (d / "fit" / "model.json").string(), "--data", minutes(), "--stat", "shots",
                     "--out", (d / "adj").string()}),
            0);
  ASSERT_EQ(run_cli({"report", "--data", minutes(), "--results", results(), "--family", "poisson", "--out",
                     (d / "rep").string()}),
            0);
  const auto game_report = ctxtest::slurp((d / "adj" / "game_report.csv").string());
  EXPECT_EQ(game_report.substr(0, game_report.find('\n')),
            "league,team,opponent,season,actual,adjusted,ci_lo,ci_hi,up1goal_stat,up1goal_min,down1goal_stat,"
            "down1goal_min,up1man_stat,up1man_min,down1man_stat,down1man_min");
  EXPECT_EQ(artifact_hash(d / "adj", "game_report.csv"), artifact_hash(d / "rep", "game_report.csv"));
  EXPECT_EQ(artifact_hash(d / "adj", "adjustment_table.csv"), artifact_hash(d / "rep", "adjustment_table.csv"));
  EXPECT_EQ(artifact_hash(d / "fit", "model.json"), artifact_hash(d / "rep", "model.json"));
  EXPECT_TRUE(fs::exists(d / "rep" / "season_report.csv"));
  EXPECT_TRUE(fs::exists(d / "rep" / "correlations.csv"));
  const auto summary = json::parse(ctxtest::slurp((d / "fit" / "fit_summary.json").string()));
  EXPECT_EQ(summary["family"], "poisson");

  ASSERT_EQ(run_cli({"forecast-eval", "--data", minutes(), "--results", results(), "--model",
                     (d / "fit" / "model.json").string(), "--out", (d / "fc").string()}),
            0);
  const auto fc = ctxtest::slurp((d / "fc" / "forecast_eval.csv").string());
  EXPECT_EQ(std::count(fc.begin(), fc.end(), '\n'), 4);
  const auto fs_json = json::parse(ctxtest::slurp((d / "fc" / "forecast_summary.json").string()));
  EXPECT_EQ(fs_json[0]["seasons"], 3);
}

TEST(Cli, DiagnoseAndInfer) {
  const auto d = scratch("diag");
  ASSERT_EQ(run_cli({"diagnose", "--data", minutes(), "--family", "poisson", "--seed", "3", "--n-sim", "50", "--out",
                     (d / "dg").string()}),
            0);
  const auto rep = json::parse(ctxtest::slurp((d / "dg" / "diagnostics.json").string()));
  EXPECT_TRUE(rep.contains("ks_p"));
  EXPECT_EQ(run_cli({"diagnose", "--data", minutes(), "--out", (d / "noseed").string()}), 2);
  ASSERT_EQ(run_cli({"infer", "--data", minutes(), "--family", "poisson", "--out", (d / "inf").string()}), 0);
  const auto battery = ctxtest::slurp((d / "inf" / "battery.csv").string());
  EXPECT_EQ(std::count(battery.begin(), battery.end(), '\n'), 1 + 3 * 5);
}

#include "test_support.hpp"

#include <random>
#include <set>

#include "ctxadjust/diagnostics.hpp"
#include "ctxadjust/synth.hpp"

using namespace ctxadjust;

namespace {

// Intercept + team random effect, fitted to counts drawn around exp(-0.7 + team effect).
struct CountFit {
  Design design;
  Eigen::VectorXd y;
};

CountFit count_data(std::size_t n, const std::string& family, double theta, std::uint64_t seed) {
  RandomStream rs(seed);
  std::vector<std::string> team(n);
  CountFit c;
  c.y.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const int t = static_cast<int>(i % 8);
    team[i] = "t" + std::to_string(t);
    const double mu = std::exp(-0.7 + 0.08 * (t - 3.5));
    c.y(static_cast<Eigen::Index>(i)) = static_cast<double>(family == "poisson" ? rs.poisson(mu) : rs.negative_binomial(mu, theta));
  }
  CovariateFrame f(n);
  f.add_categorical("team", team);
  SmoothSpec re;
  re.covariate = "team";
  re.kind = TermKind::random_effect;
  c.design = assemble_design(std::vector<SmoothSpec>{re}, f);
  return c;
}

FittedGam constant_fit(FamilyKind kind, std::size_t n, double mu, double pi = 0.0) {
  FittedGam f;
  f.family.kind = kind;
  f.mu = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), mu);
  if (kind == FamilyKind::zip) f.pi = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), pi);
  return f;
}

std::vector<MinuteObservation> two_season_rows(std::uint64_t seed) {
  GeneratorConfig c;
  c.seed = seed;
  c.teams = 4;
  c.family = "poisson";
  const auto league = simulate_league(c);
  auto rows = league.rows;
  for (auto r : league.rows) {
    r.season = "2009/10";
    r.game_id = "copy-" + r.game_id;
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST(SimulatedResiduals, DeterministicBoundedAndSeeded) {
  const auto c = count_data(500, "poisson", 0, 3);
  const auto fit = optimize_lambda(c.design, c.y, Family::poisson());
  const auto a = simulate_residuals(fit, c.y, 100, 9), b = simulate_residuals(fit, c.y, 100, 9);
  const auto other = simulate_residuals(fit, c.y, 100, 10);
  EXPECT_EQ(a.residuals, b.residuals);
  EXPECT_NE(a.residuals, other.residuals);
  for (double r : a.residuals) {
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
  }
  EXPECT_THROW(simulate_residuals(fit, c.y.head(10), 100, 9), PreconditionError);
}

TEST(SimulatedResiduals, ExtremeObservationRanksAtTop) {
  auto fit = constant_fit(FamilyKind::poisson, 3, 0.5);
  Eigen::VectorXd y(3);
  y << 0, 1, 1000;
  const auto r = simulate_residuals(fit, y, 250, 1);
  EXPECT_GE(r.residuals[2], 250.0 / 251.0);
  EXPECT_EQ(count_outliers(r), 1u);
}

TEST(SimulatedResiduals, RelabelingIdenticalRowsIsExchangeable) {
  auto fit = constant_fit(FamilyKind::poisson, 4000, 0.8);
  Eigen::VectorXd y(4000);
  RandomStream rs(5);
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = static_cast<double>(rs.poisson(0.8));
  const auto r = simulate_residuals(fit, y, 200, 2);
  // Rows share their covariates, so two halves of the sample look alike.
  double lo = 0, hi = 0;
  for (std::size_t i = 0; i < 2000; ++i) lo += r.residuals[i] / 2000, hi += r.residuals[i + 2000] / 2000;
  EXPECT_NEAR(lo, 0.5, 0.03);
  EXPECT_NEAR(hi, 0.5, 0.03);
  EXPECT_NEAR(lo, hi, 0.03);
}

TEST(ResidualTests, CorrectPoissonModelPassesUniformity) {
  int pass = 0;
  for (std::uint64_t rep = 0; rep < 20; ++rep) {
    const auto c = count_data(2000, "poisson", 0, 100 + rep);
    const auto fit = optimize_lambda(c.design, c.y, Family::poisson());
    pass += test_uniformity(simulate_residuals(fit, c.y, 250, rep)).p_value > 0.05;
  }
  EXPECT_GE(pass, 18);
}

TEST(ResidualTests, PoissonFailsAndNbPassesOnOverdispersedCounts) {
  int pois_fail = 0, nb_pass = 0;
  for (std::uint64_t rep = 0; rep < 5; ++rep) {
    const auto c = count_data(8000, "negative_binomial", 1.0, 200 + rep);
    const auto pois = optimize_lambda(c.design, c.y, Family::poisson());
    const auto nb = estimate_theta(c.design, c.y);
    const auto rp = simulate_residuals(pois, c.y, 250, rep), rn = simulate_residuals(nb, c.y, 250, rep);
    pois_fail += test_dispersion(rp) < 0.05 && test_zero_inflation(rp) < 0.05;
    nb_pass += test_dispersion(rn) > 0.05 && test_zero_inflation(rn) > 0.05;
  }
  EXPECT_GE(pois_fail, 5);
  EXPECT_GE(nb_pass, 4);
}

TEST(ResidualTests, NoZerosAtCenterGivesUnitP) {
  auto fit = constant_fit(FamilyKind::poisson, 200, 60.0);
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(200, 60.0);
  const auto r = simulate_residuals(fit, y, 100, 4);
  EXPECT_EQ(r.observed_zeros, 0.0);
  EXPECT_DOUBLE_EQ(test_zero_inflation(r), 1.0);
}

TEST(ResidualTests, MonteCarloPBounds) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> sim(50);
    for (auto& s : sim) s = g(rng);
    const double p = detail::monte_carlo_p(3.0 * g(rng), sim);
    EXPECT_GE(p, 1.0 / 51.0);
    EXPECT_LE(p, 1.0);
  }
  EXPECT_NEAR(detail::monte_carlo_p(100.0, std::vector<double>(50, 0.0)), 2.0 / 51.0, 1e-15);
}

TEST(ResidualTests, OutlierBinomialAgainstEnvelope) {
  SimulatedResiduals r;
  r.n_sim = 9;
  r.below = {9, 0, 3, 9, 5, 0, 2, 1, 4, 6};
  r.equal = {0, 0, 2, 0, 1, 1, 0, 0, 0, 0};
  EXPECT_EQ(count_outliers(r), 3u);  // two above the envelope, one below
  EXPECT_NEAR(test_outliers(r), stats::binomial_test_two_sided(3, 10, 0.2), 1e-15);
}

TEST(Diagnose, WarningsAndJson) {
  auto fit = constant_fit(FamilyKind::zip, 20, 1.0, 0.2);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(20);
  y(3) = 2;
  const auto rep = diagnose(fit, y, 50, 3);
  EXPECT_TRUE(rep.extension);
  EXPECT_EQ(rep.warnings.size(), 2u);
  const auto j = to_json(rep);
  for (const char* k : {"ks_p", "dispersion_p", "zero_inflation_p", "outlier_p"}) {
    ASSERT_TRUE(j.contains(k)) << k;
    EXPECT_GE(j[k].get<double>(), 0.0);
    EXPECT_LE(j[k].get<double>(), 1.0);
  }
}

TEST(Calibration, BucketArithmetic) {
  EXPECT_EQ(calibration_bucket(0.013), 1u);
  EXPECT_EQ(calibration_bucket(0.0), 0u);
  EXPECT_EQ(calibration_bucket(0.01), 0u);
  EXPECT_EQ(calibration_bucket(0.02), 1u);
  EXPECT_EQ(calibration_bucket(0.0200001), 2u);
  EXPECT_THROW(calibration_bucket(-0.001), DomainError);
  Eigen::VectorXd p(3), o(3);
  p << 0.013, 0.017, 0.052;
  o << 0, 1, 0;
  const auto c = calibration_curve(p, o);
  ASSERT_EQ(c.buckets.size(), 6u);
  EXPECT_DOUBLE_EQ(c.buckets[1].midpoint, 0.015);
  EXPECT_EQ(c.buckets[1].n, 2u);
  EXPECT_DOUBLE_EQ(c.buckets[1].obs_mean, 0.5);
  EXPECT_TRUE(c.buckets[1].low_support);
  std::ostringstream csv;
  write_calibration_csv(csv, c);
  ctxtest::expect_golden("calibration.csv", csv.str());
}

TEST(Calibration, BucketsPartitionAndSlopeMatchesWls) {
  std::mt19937_64 rng(4);
  std::gamma_distribution<double> gam(3.0, 0.05);
  const Eigen::Index n = 60000;
  Eigen::VectorXd pred(n), obs(n);
  RandomStream rs(11);
  for (Eigen::Index i = 0; i < n; ++i) {
    pred(i) = gam(rng);
    obs(i) = static_cast<double>(rs.poisson(0.8 * pred(i) + 0.01));
  }
  const auto c = calibration_curve(pred, obs);
  EXPECT_EQ(c.total(), static_cast<std::size_t>(n));
  for (std::size_t b = 0; b < c.buckets.size(); ++b) {
    EXPECT_NEAR(c.buckets[b].lo, b / 100.0, 1e-15);
    if (b) EXPECT_EQ(c.buckets[b].lo, c.buckets[b - 1].hi);
  }
  // Weighted normal equations on the supported buckets.
  std::vector<std::array<double, 3>> rows;
  for (const auto& b : c.buckets)
    if (b.n >= 1000) rows.push_back({static_cast<double>(b.n), b.midpoint, b.obs_mean});
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), 2);
  Eigen::VectorXd y(x.rows()), w(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    x(i, 0) = 1.0;
    x(i, 1) = r[1];
    y(i) = r[2];
    w(i) = r[0];
  }
  const Eigen::VectorXd beta = (x.transpose() * w.asDiagonal() * x).ldlt().solve(x.transpose() * w.asDiagonal() * y);
  EXPECT_NEAR(calibration_slope(c), beta(1), 1e-10);
  EXPECT_NEAR(calibration_slope(c), 0.8, 0.1);
  EXPECT_THROW(calibration_slope(c, 100000000), PreconditionError);
}

TEST(Losocv, IdenticalSeasonsGiveIdenticalFolds) {
  const auto rows = two_season_rows(7);
  auto spec = baseline_spec(Stat::shots, true);
  spec.family = FamilyKind::poisson;
  const auto res = losocv(rows, spec, {}, 2);
  ASSERT_EQ(res.folds.size(), 2u);
  for (const auto& f : res.folds) ASSERT_FALSE(f.failed) << f.error;
  EXPECT_EQ(res.folds[0].minute.mae, res.folds[1].minute.mae);
  EXPECT_EQ(res.folds[0].minute.rmse, res.folds[1].minute.rmse);
  EXPECT_EQ(res.folds[0].game.rmse, res.folds[1].game.rmse);
  EXPECT_EQ(res.folds[0].train_rows + res.folds[0].test_rows, rows.size());
  // Train and test never share a game.
  for (const auto& f : res.folds) {
    std::set<std::string> train, test;
    for (const auto& r : rows) (r.season == f.season ? test : train).insert(r.game_id);
    for (const auto& g : test) EXPECT_FALSE(train.contains(g));
  }
  EXPECT_FALSE(res.predicted.hasNaN());
  EXPECT_THROW(losocv(std::vector<MinuteObservation>(rows.begin(), rows.begin() + 100), spec), PreconditionError);
}

TEST(Losocv, NoiselessModelIsExact) {
  auto rows = two_season_rows(8);
  for (auto& r : rows) r.shots = std::clamp(r.score_diff, -3, 3) + 3;
  ModelSpec spec;
  spec.family = FamilyKind::gaussian_identity;
  SmoothSpec s;
  s.covariate = "score_diff";
  s.k = 7;
  spec.terms.push_back(s);
  const auto res = losocv(rows, spec);
  for (const auto& f : res.folds) {
    ASSERT_FALSE(f.failed) << f.error;
    EXPECT_LT(f.minute.rmse, 1e-6);
    EXPECT_NEAR(f.minute.r2, 1.0, 1e-9);
  }
}

TEST(Losocv, ManySeasonsHavePositiveR2) {
  GeneratorConfig c;
  c.seed = 12;
  c.teams = 6;
  c.seasons = 15;
  c.season_sd = 0.0;
  const auto league = simulate_league(c);
  FitOptions opt;
  opt.fixed_theta = c.theta;
  const auto res = losocv(league.rows, baseline_spec(), opt, 2);
  ASSERT_EQ(res.folds.size(), 15u);
  std::vector<double> mae;
  for (const auto& f : res.folds) {
    ASSERT_FALSE(f.failed) << f.error;
    EXPECT_GT(f.minute.r2, 0.0) << f.season;
    mae.push_back(f.game.mae);
  }
  EXPECT_LT(stats::sd(mae) / stats::mean(mae), 0.15);
  const auto j = to_json(res);
  EXPECT_EQ(j["folds"].size(), 15u);
}

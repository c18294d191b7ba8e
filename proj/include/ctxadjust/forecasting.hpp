#pragma once

// Half-season forecasting of final score differentials from raw or adjusted
// team statistics, with the paired t-test and Shapiro-Wilk check used to
// compare the two.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "ctxadjust/adjustment.hpp"
#include "ctxadjust/inference.hpp"
#include "ctxadjust/stats.hpp"

namespace ctxadjust {

struct ForecastEval {
  std::string league;
  std::string season;
  double rmse_actual = 0.0;
  double rmse_adjusted = 0.0;
  double diff() const { return rmse_actual - rmse_adjusted; }
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t excluded = 0;  // test games with a team absent from training
};

struct HalfSeasonFit {
  double rmse = 0.0;
  Eigen::Vector3d coef = Eigen::Vector3d::Zero();  // intercept, home average, away average
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t excluded = 0;
  std::map<std::string, double> train_average;  // per team, training games only
};

// Games ordered by (round, game_id); the first ceil(G/2) train the model.
inline std::pair<std::vector<GameResult>, std::vector<GameResult>> split_half_season(std::vector<GameResult> games) {
  std::sort(games.begin(), games.end(), [](const GameResult& a, const GameResult& b) {
    return a.round != b.round ? a.round < b.round : a.game_id < b.game_id;
  });
  const auto cut = (games.size() + 1) / 2;
  return {std::vector<GameResult>(games.begin(), games.begin() + static_cast<std::ptrdiff_t>(cut)),
          std::vector<GameResult>(games.begin() + static_cast<std::ptrdiff_t>(cut), games.end())};
}

// OLS of home-minus-away goals on the home and away teams' training-half
// per-game averages of `values` (keyed "game_id|team"), scored on the test half.
inline HalfSeasonFit half_season_forecast(const std::vector<GameResult>& games,
                                          const std::map<std::string, double>& values, std::size_t min_half = 20) {
  const auto [train, test] = split_half_season(games);
  if (train.size() < min_half || test.size() < min_half) {
    throw PreconditionError("half-season forecast needs at least " + std::to_string(min_half) + " games per half");
  }
  auto value = [&](const GameResult& g, const std::string& team) {
    const auto it = values.find(g.game_id + "|" + team);
    if (it == values.end()) throw InputError("no statistic for team " + team + " in game " + g.game_id);
    return it->second;
  };
  HalfSeasonFit out;
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& g : train) {
    for (const auto& team : {g.home_team, g.away_team}) {
      auto& a = acc[team];
      a.first += value(g, team);
      ++a.second;
    }
  }
  for (const auto& [team, a] : acc) out.train_average[team] = a.first / a.second;

  const auto n = static_cast<Eigen::Index>(train.size());
  Eigen::MatrixXd x(n, 3);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& g = train[static_cast<std::size_t>(i)];
    x.row(i) << 1.0, out.train_average.at(g.home_team), out.train_average.at(g.away_team);
    y(i) = g.home_goals - g.away_goals;
  }
  // Minimum-norm least squares; predictors collinear with the intercept drop
  // out. (ColPivHouseholderQR::solve ignores the rank threshold, this does not.)
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(x.rows(), x.cols());
  cod.setThreshold(1e-10);
  cod.compute(x);
  out.coef = cod.solve(y);
  out.n_train = train.size();

  double sse = 0.0;
  for (const auto& g : test) {
    const auto h = out.train_average.find(g.home_team);
    const auto a = out.train_average.find(g.away_team);
    if (h == out.train_average.end() || a == out.train_average.end()) {
      ++out.excluded;
      continue;
    }
    const double pred = out.coef(0) + out.coef(1) * h->second + out.coef(2) * a->second;
    const double e = (g.home_goals - g.away_goals) - pred;
    sse += e * e;
    ++out.n_test;
  }
  if (out.n_test == 0) throw PreconditionError("no test game has both teams in the training half");
  out.rmse = std::sqrt(sse / static_cast<double>(out.n_test));
  return out;
}

// Per team-game totals of the raw statistic, or of its adjusted value when a
// table is given; keys are "game_id|team".
inline std::map<std::string, double> team_game_values(const std::vector<MinuteObservation>& rows, Stat stat,
                                                      const AdjustmentTable* table = nullptr) {
  std::map<std::string, double> out;
  if (!table) {
    for (const auto& r : rows) out[r.game_id + "|" + r.team] += r.count(stat);
    return out;
  }
  for (const auto& g : adjust_games(rows, *table, stat)) out[g.game_id + "|" + g.team] = g.adjusted;
  return out;
}

inline ForecastEval evaluate_season(const std::vector<MinuteObservation>& rows, const std::vector<GameResult>& games,
                                    const AdjustmentTable& table, Stat stat) {
  ForecastEval e;
  if (!games.empty()) {
    e.league = games.front().league;
    e.season = games.front().season;
  }
  const auto actual = half_season_forecast(games, team_game_values(rows, stat));
  const auto adjusted = half_season_forecast(games, team_game_values(rows, stat, &table));
  e.rmse_actual = actual.rmse;
  e.rmse_adjusted = adjusted.rmse;
  e.n_train = actual.n_train;
  e.n_test = actual.n_test;
  e.excluded = actual.excluded;
  return e;
}

// ---------------------------------------------------------------------------
// Tests on the per-season RMSE differences

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  double mean = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

// One-sample t-test of the differences against 0, two-sided.
inline TTestResult paired_ttest(const std::vector<double>& diffs) {
  if (diffs.size() < 3) throw PreconditionError("paired t-test needs at least 3 differences");
  const double n = static_cast<double>(diffs.size());
  const double m = stats::mean(diffs);
  const double s = stats::sd(diffs);
  if (!(s > 1e-12 * std::abs(m))) throw DomainError("paired t-test is degenerate: zero standard deviation");
  TTestResult r;
  r.mean = m;
  r.df = n - 1.0;
  const double se = s / std::sqrt(n);
  r.t = m / se;
  r.p = std::min(1.0, 2.0 * stats::students_t_cdf(-std::abs(r.t), r.df));
  const double q = stats::students_t_quantile(0.975, r.df);
  r.ci_lo = m - q * se;
  r.ci_hi = m + q * se;
  return r;
}

struct ShapiroWilkResult {
  double w = 1.0;
  double p = 1.0;
};

namespace detail {

template <std::size_t N>
double poly(const std::array<double, N>& c, double x) {
  double r = 0.0;
  for (std::size_t i = N; i-- > 0;) r = r * x + c[i];
  return r;
}

}  // namespace detail

// Royston's approximation (algorithm AS R94): coefficients from normal
// order-statistic scores with polynomial corrections for the two extreme
// pairs; W is the squared correlation of the coefficients with the sorted
// sample and its p-value comes from a normalizing transformation.
inline ShapiroWilkResult shapiro_wilk(std::vector<double> x) {
  const std::size_t n = x.size();
  if (n < 3 || n > 5000) throw PreconditionError("Shapiro-Wilk needs 3 <= n <= 5000");
  std::sort(x.begin(), x.end());
  if (x.back() - x.front() < 1e-19 * std::max(1.0, std::abs(x.front()))) {
    throw DomainError("Shapiro-Wilk is undefined for a constant sample");
  }
  const std::size_t half = n / 2;
  const double an = static_cast<double>(n);
  std::vector<double> a(half);
  if (n == 3) {
    a[0] = std::sqrt(0.5);
  } else {
    std::vector<double> m(half);
    double summ2 = 0.0;
    for (std::size_t i = 0; i < half; ++i) {
      m[i] = stats::normal_quantile((i + 1 - 0.375) / (an + 0.25));
      summ2 += m[i] * m[i];
    }
    summ2 *= 2.0;
    const double ssumm2 = std::sqrt(summ2);
    const double rsn = 1.0 / std::sqrt(an);
    const double a1 =
        detail::poly(std::array{0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056}, rsn) - m[0] / ssumm2;
    std::size_t first;
    double fac;
    if (n > 5) {
      first = 2;
      const double a2 =
          -m[1] / ssumm2 + detail::poly(std::array{0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633}, rsn);
      fac = std::sqrt((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2));
      a[1] = a2;
    } else {
      first = 1;
      fac = std::sqrt((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1));
    }
    a[0] = a1;
    for (std::size_t i = first; i < half; ++i) a[i] = -m[i] / fac;
  }
  // Full antisymmetric coefficient vector against the sorted sample.
  Eigen::VectorXd av = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < half; ++i) {
    av(static_cast<Eigen::Index>(i)) = -a[i];
    av(static_cast<Eigen::Index>(n - 1 - i)) = a[i];
  }
  const Eigen::Map<const Eigen::VectorXd> xs(x.data(), static_cast<Eigen::Index>(n));
  const Eigen::VectorXd ac = av.array() - av.mean();
  const Eigen::VectorXd xc = xs.array() - xs.mean();
  const double sax = ac.dot(xc), ssa = ac.squaredNorm(), ssx = xc.squaredNorm();
  ShapiroWilkResult r;
  r.w = sax * sax / (ssa * ssx);
  const double w1 = 1.0 - r.w;
  if (n == 3) {
    constexpr double pi6 = 1.90985931710274, stqr = 1.04719755119660;
    r.p = std::max(0.0, pi6 * (std::asin(std::sqrt(r.w)) - stqr));
    return r;
  }
  double y = std::log(w1);
  double mean, sd;
  if (n <= 11) {
    const double gamma = detail::poly(std::array{-2.273, 0.459}, an);
    if (y >= gamma) {
      r.p = 1e-99;
      return r;
    }
    y = -std::log(gamma - y);
    mean = detail::poly(std::array{0.544, -0.39978, 0.025054, -6.714e-4}, an);
    sd = std::exp(detail::poly(std::array{1.3822, -0.77857, 0.062767, -0.0020322}, an));
  } else {
    const double ln = std::log(an);
    mean = detail::poly(std::array{-1.5861, -0.31082, -0.083751, 0.0038915}, ln);
    sd = std::exp(detail::poly(std::array{-0.4803, -0.082676, 0.0030302}, ln));
  }
  r.p = stats::normal_sf((y - mean) / sd);
  return r;
}

// ---------------------------------------------------------------------------
// Summary across seasons, one t-test per league, Holm across leagues

struct LeagueForecastSummary {
  std::string league;
  std::size_t seasons = 0;
  TTestResult ttest;
  double holm_p = 1.0;
  double shapiro_p = 1.0;
  bool failed = false;
  std::string error;
};

inline std::vector<LeagueForecastSummary> summarize_forecasts(const std::vector<ForecastEval>& evals) {
  std::map<std::string, std::vector<double>> diffs;
  for (const auto& e : evals) diffs[e.league].push_back(e.diff());
  std::vector<LeagueForecastSummary> out;
  std::vector<double> p;
  std::vector<std::size_t> ok;
  for (const auto& [league, d] : diffs) {
    LeagueForecastSummary s;
    s.league = league;
    s.seasons = d.size();
    try {
      s.ttest = paired_ttest(d);
      s.shapiro_p = shapiro_wilk(d).p;
      ok.push_back(out.size());
      p.push_back(s.ttest.p);
    } catch (const Error& e) {
      s.failed = true;
      s.error = e.what();
    }
    out.push_back(s);
  }
  const auto adj = holm_adjust(p);
  for (std::size_t k = 0; k < ok.size(); ++k) out[ok[k]].holm_p = adj[k];
  return out;
}

inline void write_forecast_csv(std::ostream& out, const std::vector<ForecastEval>& evals) {
  out << "league,season,rmse_actual,rmse_adjusted,diff\n";
  for (const auto& e : evals) {
    out << e.league << ',' << e.season << ',' << detail::format_double(e.rmse_actual) << ','
        << detail::format_double(e.rmse_adjusted) << ',' << detail::format_double(e.diff()) << '\n';
  }
}

inline json to_json(const std::vector<LeagueForecastSummary>& s) {
  json out = json::array();
  for (const auto& l : s) {
    out.push_back({{"league", l.league},
                   {"seasons", l.seasons},
                   {"t", l.ttest.t},
                   {"df", l.ttest.df},
                   {"p", l.ttest.p},
                   {"holm_p", l.holm_p},
                   {"mean_diff", l.ttest.mean},
                   {"ci95", {l.ttest.ci_lo, l.ttest.ci_hi}},
                   {"shapiro_p", l.shapiro_p},
                   {"failed", l.failed},
                   {"error", l.error}});
  }
  return out;
}

}  // namespace ctxadjust

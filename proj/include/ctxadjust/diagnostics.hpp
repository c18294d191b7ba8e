#pragma once

// Simulation-based quantile residuals and the residual tests built on them
// (uniformity, dispersion, zero inflation, outliers); leave-one-season-out
// cross-validation and calibration curves.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "ctxadjust/gam_fit.hpp"
#include "ctxadjust/parallel.hpp"
#include "ctxadjust/random.hpp"
#include "ctxadjust/stats.hpp"

namespace ctxadjust {

// One pass of n_sim simulations from the fitted model: per-observation rank
// tallies plus per-simulation Pearson statistics and zero counts.
struct SimulatedResiduals {
  std::vector<double> residuals;
  int n_sim = 0;
  std::uint64_t seed = 0;
  std::vector<int> below;  // #{simulated < observed}
  std::vector<int> equal;  // #{simulated == observed}
  std::vector<double> sim_pearson;
  std::vector<double> sim_zeros;
  double observed_pearson = 0.0;
  double observed_zeros = 0.0;
  bool extension = false;  // zero-inflated fits: outside the reference toolset
};

struct DiagnosticsReport {
  std::size_t n = 0;
  int n_sim = 0;
  double ks_statistic = 0.0;
  double ks_p = 1.0;
  double dispersion_ratio = 1.0;  // observed / mean simulated Pearson statistic
  double dispersion_p = 1.0;
  double observed_zeros = 0.0;
  double expected_zeros = 0.0;
  double zero_inflation_p = 1.0;
  std::size_t outliers = 0;
  double outlier_p = 1.0;
  double aic = 0.0;
  double bic = 0.0;
  bool extension = false;
  std::vector<std::string> warnings;
};

namespace detail {

struct RowMoments {
  double mean = 0.0;
  double variance = 1.0;
};

inline RowMoments fitted_moments(const FittedGam& fit, Eigen::Index i) {
  const double mu = fit.mu(i);
  switch (fit.family.kind) {
    case FamilyKind::poisson: return {mu, mu};
    case FamilyKind::negative_binomial: return {mu, std::isfinite(fit.family.theta) ? mu + mu * mu / fit.family.theta : mu};
    case FamilyKind::zip: {
      const double p = fit.pi(i);
      return {(1.0 - p) * mu, (1.0 - p) * mu * (1.0 + p * mu)};
    }
    default: return {mu, fit.scale};
  }
}

inline double draw_response(RandomStream& rng, const FittedGam& fit, Eigen::Index i) {
  const double mu = fit.mu(i);
  switch (fit.family.kind) {
    case FamilyKind::poisson: return static_cast<double>(rng.poisson(mu));
    case FamilyKind::negative_binomial: return static_cast<double>(rng.negative_binomial(mu, fit.family.theta));
    case FamilyKind::zip: return rng.bernoulli(fit.pi(i)) ? 0.0 : static_cast<double>(rng.poisson(mu));
    default: return mu + std::sqrt(fit.scale) * rng.normal();
  }
}

inline double monte_carlo_p(double observed, const std::vector<double>& simulated) {
  const double n = static_cast<double>(simulated.size());
  double ge = 0.0, le = 0.0;
  for (double s : simulated) {
    ge += s >= observed;
    le += s <= observed;
  }
  return std::min(1.0, 2.0 * std::min((ge + 1.0) / (n + 1.0), (le + 1.0) / (n + 1.0)));
}

}  // namespace detail

// residual_i = (#{sim < y_i} + U (#{sim = y_i} + 1)) / (n_sim + 1), U ~ Uniform(0, 1).
inline SimulatedResiduals simulate_residuals(const FittedGam& fit, const Eigen::VectorXd& y, int n_sim = 250,
                                             std::uint64_t seed = 1) {
  const auto n = y.size();
  if (fit.mu.size() != n) throw PreconditionError("fitted values are not available for these observations");
  if (n_sim < 1) throw DomainError("n_sim must be positive");
  SimulatedResiduals r;
  r.n_sim = n_sim;
  r.seed = seed;
  r.extension = fit.family.kind == FamilyKind::zip;
  r.below.assign(static_cast<std::size_t>(n), 0);
  r.equal.assign(static_cast<std::size_t>(n), 0);
  std::vector<detail::RowMoments> moments(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    moments[static_cast<std::size_t>(i)] = detail::fitted_moments(fit, i);
    const auto& m = moments[static_cast<std::size_t>(i)];
    r.observed_pearson += (y(i) - m.mean) * (y(i) - m.mean) / m.variance;
    r.observed_zeros += y(i) == 0.0;
  }
  RandomStream rng(derive_seed(seed, "simulated-residuals"));
  for (int k = 0; k < n_sim; ++k) {
    double pearson = 0.0, zeros = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double s = detail::draw_response(rng, fit, i);
      const auto& m = moments[static_cast<std::size_t>(i)];
      pearson += (s - m.mean) * (s - m.mean) / m.variance;
      zeros += s == 0.0;
      r.below[static_cast<std::size_t>(i)] += s < y(i);
      r.equal[static_cast<std::size_t>(i)] += s == y(i);
    }
    r.sim_pearson.push_back(pearson);
    r.sim_zeros.push_back(zeros);
  }
  RandomStream tie(derive_seed(seed, "residual-ties"));
  r.residuals.resize(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < r.residuals.size(); ++i) {
    r.residuals[i] = (r.below[i] + tie.uniform() * (r.equal[i] + 1)) / (n_sim + 1.0);
  }
  return r;
}

inline stats::KsResult test_uniformity(const SimulatedResiduals& res) { return stats::ks_test_uniform(res.residuals); }

inline double test_dispersion(const SimulatedResiduals& res) {
  return detail::monte_carlo_p(res.observed_pearson, res.sim_pearson);
}

inline double test_zero_inflation(const SimulatedResiduals& res) {
  return detail::monte_carlo_p(res.observed_zeros, res.sim_zeros);
}

inline double test_dispersion(const FittedGam& fit, const Eigen::VectorXd& y, int n_sim = 250, std::uint64_t seed = 1) {
  return test_dispersion(simulate_residuals(fit, y, n_sim, seed));
}

inline double test_zero_inflation(const FittedGam& fit, const Eigen::VectorXd& y, int n_sim = 250,
                                  std::uint64_t seed = 1) {
  return test_zero_inflation(simulate_residuals(fit, y, n_sim, seed));
}

// Observations outside the simulation envelope (all simulations strictly
// below, or all strictly above).
inline std::size_t count_outliers(const SimulatedResiduals& res) {
  std::size_t k = 0;
  for (std::size_t i = 0; i < res.below.size(); ++i) {
    if (res.below[i] == res.n_sim || (res.below[i] == 0 && res.equal[i] == 0)) ++k;
  }
  return k;
}

// Binomial test of the outlier count against the envelope probability 2/(n_sim+1).
inline double test_outliers(const SimulatedResiduals& res) {
  return stats::binomial_test_two_sided(count_outliers(res), res.below.size(), 2.0 / (res.n_sim + 1.0));
}

inline DiagnosticsReport diagnose(const FittedGam& fit, const Eigen::VectorXd& y, int n_sim = 250,
                                  std::uint64_t seed = 1) {
  DiagnosticsReport rep;
  rep.n = static_cast<std::size_t>(y.size());
  rep.n_sim = n_sim;
  if (rep.n < 30) rep.warnings.push_back("fewer than 30 observations; residual tests have little power");
  const auto res = simulate_residuals(fit, y, n_sim, seed);
  const auto ks = test_uniformity(res);
  rep.ks_statistic = ks.statistic;
  rep.ks_p = ks.p_value;
  double sim_mean = 0.0;
  for (double v : res.sim_pearson) sim_mean += v / res.sim_pearson.size();
  rep.dispersion_ratio = sim_mean > 0.0 ? res.observed_pearson / sim_mean : 1.0;
  rep.dispersion_p = test_dispersion(res);
  rep.observed_zeros = res.observed_zeros;
  for (double v : res.sim_zeros) rep.expected_zeros += v / res.sim_zeros.size();
  rep.zero_inflation_p = test_zero_inflation(res);
  rep.outliers = count_outliers(res);
  rep.outlier_p = test_outliers(res);
  rep.aic = fit.aic;
  rep.bic = fit.bic;
  rep.extension = res.extension;
  if (rep.extension) rep.warnings.push_back("zero-inflated residual diagnostics are an extension beyond the reference method");
  return rep;
}

inline json to_json(const DiagnosticsReport& r) {
  return json{{"n", r.n},
              {"n_sim", r.n_sim},
              {"ks_statistic", r.ks_statistic},
              {"ks_p", r.ks_p},
              {"dispersion_ratio", r.dispersion_ratio},
              {"dispersion_p", r.dispersion_p},
              {"observed_zeros", r.observed_zeros},
              {"expected_zeros", r.expected_zeros},
              {"zero_inflation_p", r.zero_inflation_p},
              {"outliers", r.outliers},
              {"outlier_p", r.outlier_p},
              {"aic", r.aic},
              {"bic", r.bic},
              {"extension_beyond_reference", r.extension},
              {"warnings", r.warnings}};
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationBucket {
  double lo = 0.0, hi = 0.0, midpoint = 0.0;
  std::size_t n = 0;
  double pred_mean = 0.0;
  double obs_mean = 0.0;
  bool low_support = true;
};

struct CalibrationCurve {
  std::vector<CalibrationBucket> buckets;
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& b : buckets) n += b.n;
    return n;
  }
};

// Bucket k covers (k/100, (k+1)/100]; bucket 0 also takes rate 0.
inline std::size_t calibration_bucket(double rate) {
  if (!(rate >= 0.0)) throw DomainError("predicted rates must be ≥ 0");
  const double scaled = rate * 100.0;
  const double c = std::ceil(scaled - 1e-9 * std::max(1.0, scaled));
  return c <= 1.0 ? 0 : static_cast<std::size_t>(c) - 1;
}

inline CalibrationCurve calibration_curve(const Eigen::VectorXd& predicted, const Eigen::VectorXd& observed,
                                          std::size_t low_support = 100) {
  if (predicted.size() != observed.size()) throw InputError("calibration inputs differ in length");
  CalibrationCurve curve;
  std::vector<double> pred_sum, obs_sum;
  std::vector<std::size_t> count;
  for (Eigen::Index i = 0; i < predicted.size(); ++i) {
    const auto b = calibration_bucket(predicted(i));
    if (b >= count.size()) {
      count.resize(b + 1, 0);
      pred_sum.resize(b + 1, 0.0);
      obs_sum.resize(b + 1, 0.0);
    }
    ++count[b];
    pred_sum[b] += predicted(i);
    obs_sum[b] += observed(i);
  }
  for (std::size_t b = 0; b < count.size(); ++b) {
    CalibrationBucket k;
    k.lo = b / 100.0;
    k.hi = (b + 1) / 100.0;
    k.midpoint = (b + 0.5) / 100.0;
    k.n = count[b];
    k.pred_mean = count[b] ? pred_sum[b] / count[b] : std::nan("");
    k.obs_mean = count[b] ? obs_sum[b] / count[b] : std::nan("");
    k.low_support = count[b] < low_support;
    curve.buckets.push_back(k);
  }
  return curve;
}

// Weighted (by bucket size) least-squares slope of observed mean on bucket
// midpoint, with intercept, over buckets with at least min_n observations.
inline double calibration_slope(const CalibrationCurve& curve, std::size_t min_n = 1000) {
  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (const auto& b : curve.buckets) {
    if (b.n < min_n) continue;
    sw += b.n;
    sx += b.n * b.midpoint;
    sy += b.n * b.obs_mean;
  }
  if (sw == 0.0) throw PreconditionError("no calibration bucket reaches the support threshold");
  const double mx = sx / sw, my = sy / sw;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& b : curve.buckets) {
    if (b.n < min_n) continue;
    sxx += b.n * (b.midpoint - mx) * (b.midpoint - mx);
    sxy += b.n * (b.midpoint - mx) * (b.obs_mean - my);
  }
  if (sxx == 0.0) throw PreconditionError("calibration slope needs at least two supported buckets");
  return sxy / sxx;
}

inline void write_calibration_csv(std::ostream& out, const CalibrationCurve& c) {
  out << "bucket_lo,bucket_hi,midpoint,n,pred_mean,obs_mean\n";
  for (const auto& b : c.buckets) {
    out << detail::format_double(b.lo) << ',' << detail::format_double(b.hi) << ',' << detail::format_double(b.midpoint)
        << ',' << b.n << ',' << (b.n ? detail::format_double(b.pred_mean) : "") << ','
        << (b.n ? detail::format_double(b.obs_mean) : "") << '\n';
  }
}

// ---------------------------------------------------------------------------
// Leave-one-season-out cross-validation

struct ErrorMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  double r2 = 0.0;  // 1 - SSE/SST, SST around the training mean
  std::size_t n = 0;
};

struct FoldResult {
  std::string season;
  bool failed = false;
  std::string error;
  ErrorMetrics minute;
  ErrorMetrics game;
  std::size_t train_rows = 0;
  std::size_t test_rows = 0;
};

struct LosocvResult {
  std::vector<FoldResult> folds;
  ErrorMetrics minute_mean;  // average over successful folds
  ErrorMetrics game_mean;
  Eigen::VectorXd predicted;  // out-of-sample rate per input row (NaN for failed folds)
  Eigen::VectorXd observed;
};

namespace detail {

inline ErrorMetrics error_metrics(const std::vector<double>& pred, const std::vector<double>& obs, double train_mean) {
  ErrorMetrics m;
  m.n = pred.size();
  double sse = 0.0, sst = 0.0, sae = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = obs[i] - pred[i];
    sae += std::abs(e);
    sse += e * e;
    sst += (obs[i] - train_mean) * (obs[i] - train_mean);
  }
  if (m.n) {
    m.mae = sae / m.n;
    m.rmse = std::sqrt(sse / m.n);
    m.r2 = sst > 0.0 ? 1.0 - sse / sst : (sse == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity());
  }
  return m;
}

}  // namespace detail

// For every season s: fit on the other seasons, predict s at population level
// for the held-out season effect, and score per-minute and per-game errors.
inline LosocvResult losocv(const std::vector<MinuteObservation>& rows, const ModelSpec& spec,
                           const FitOptions& opt = {}, unsigned threads = 1) {
  std::set<std::string> season_set;
  for (const auto& r : rows) season_set.insert(r.season);
  if (season_set.size() < 2) throw PreconditionError("leave-one-season-out needs at least 2 seasons");
  const std::vector<std::string> seasons(season_set.begin(), season_set.end());
  LosocvResult out;
  out.folds.resize(seasons.size());
  out.predicted = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(rows.size()), std::nan(""));
  out.observed = response_vector(rows, spec.response);

  parallel_for(seasons.size(), threads, [&](std::size_t f) {
    auto& fold = out.folds[f];
    fold.season = seasons[f];
    std::vector<MinuteObservation> train, test;
    std::vector<std::size_t> test_index;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].season == seasons[f]) {
        test.push_back(rows[i]);
        test_index.push_back(i);
      } else {
        train.push_back(rows[i]);
      }
    }
    fold.train_rows = train.size();
    fold.test_rows = test.size();
    ModelSpec fold_spec = spec;
    if (seasons.size() == 2) fold_spec = spec.without_covariate("season");
    try {
      const auto fit = fit_model(fold_spec, train, opt);
      const auto pred = predict(fit, test);
      std::vector<double> p_min(test.size()), o_min(test.size());
      double train_mean = 0.0;
      for (const auto& r : train) train_mean += r.count(spec.response);
      train_mean /= static_cast<double>(train.size());
      std::map<std::string, std::pair<double, double>> games;
      for (std::size_t i = 0; i < test.size(); ++i) {
        p_min[i] = pred.rate(static_cast<Eigen::Index>(i));
        o_min[i] = test[i].count(spec.response);
        auto& g = games[test[i].game_id + "|" + test[i].team];
        g.first += p_min[i];
        g.second += o_min[i];
        out.predicted(static_cast<Eigen::Index>(test_index[i])) = p_min[i];
      }
      std::map<std::string, double> train_games;
      for (const auto& r : train) train_games[r.game_id + "|" + r.team] += r.count(spec.response);
      double train_game_mean = 0.0;
      for (const auto& [k, v] : train_games) train_game_mean += v / static_cast<double>(train_games.size());
      std::vector<double> p_game, o_game;
      for (const auto& [k, v] : games) {
        p_game.push_back(v.first);
        o_game.push_back(v.second);
      }
      fold.minute = detail::error_metrics(p_min, o_min, train_mean);
      fold.game = detail::error_metrics(p_game, o_game, train_game_mean);
    } catch (const Error& e) {
      fold.failed = true;
      fold.error = e.what();
    }
  });

  std::size_t ok = 0;
  for (const auto& f : out.folds) {
    if (f.failed) continue;
    ++ok;
    out.minute_mean.mae += f.minute.mae;
    out.minute_mean.rmse += f.minute.rmse;
    out.minute_mean.r2 += f.minute.r2;
    out.minute_mean.n += f.minute.n;
    out.game_mean.mae += f.game.mae;
    out.game_mean.rmse += f.game.rmse;
    out.game_mean.r2 += f.game.r2;
    out.game_mean.n += f.game.n;
  }
  if (ok) {
    for (auto* m : {&out.minute_mean, &out.game_mean}) {
      m->mae /= ok;
      m->rmse /= ok;
      m->r2 /= ok;
    }
  }
  return out;
}

inline json to_json(const LosocvResult& r) {
  auto metrics = [](const ErrorMetrics& m) { return json{{"mae", m.mae}, {"rmse", m.rmse}, {"r2", m.r2}, {"n", m.n}}; };
  json folds = json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"season", f.season},
                     {"failed", f.failed},
                     {"error", f.error},
                     {"train_rows", f.train_rows},
                     {"test_rows", f.test_rows},
                     {"minute", metrics(f.minute)},
                     {"game", metrics(f.game)}});
  }
  return json{{"folds", folds}, {"minute_mean", metrics(r.minute_mean)}, {"game_mean", metrics(r.game_mean)}};
}

}  // namespace ctxadjust

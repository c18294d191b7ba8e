#pragma once

// Wald-type significance tests for fitted terms, pairwise interactions and the
// game-level random effect, plus Holm step-down adjustment.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "ctxadjust/gam_fit.hpp"
#include "ctxadjust/parallel.hpp"
#include "ctxadjust/stats.hpp"

namespace ctxadjust {

// adjusted_(i) = max_{j ≤ i} min(1, (m - j + 1) p_(j)) over ascending p, in input order.
inline std::vector<double> holm_adjust(const std::vector<double>& p) {
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("p-values must lie in [0, 1]");
  }
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> out(m);
  double running = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    running = std::max(running, std::min(1.0, static_cast<double>(m - j) * p[order[j]]));
    out[order[j]] = running;
  }
  return out;
}

struct TermTest {
  std::string term;
  double statistic = 0.0;  // χ² for smooth blocks, z for dummies
  double df = 0.0;         // reference df (rounded edf)
  double edf = 0.0;
  double raw_p = 1.0;
  double holm_p = 1.0;
  std::string league;
  std::string season;
  bool effectively_null = false;  // edf < 0.5
  bool failed = false;
  std::string error;
  double delta_aic = 0.0;  // interaction tests: with - without
  double delta_bic = 0.0;
};

namespace detail {

// Columns (in the full design) and summed edf of a set of fitted terms.
inline std::vector<Eigen::Index> term_columns(const FittedGam& fit, const std::vector<std::string>& labels,
                                              double& edf, bool& all_dummy) {
  std::vector<Eigen::Index> cols;
  edf = 0.0;
  all_dummy = true;
  for (const auto& label : labels) {
    const auto* t = fit.term(label);
    if (!t) throw PreconditionError("term '" + label + "' is not in the fitted model");
    for (Eigen::Index c = 0; c < t->width; ++c) cols.push_back(t->first_column + c);
    edf += t->edf;
    all_dummy = all_dummy && t->kind == TermKind::dummy;
  }
  return cols;
}

// T = fᵀ V_f⁻ f with f = X_j β_j, V_f = X_j V_j X_jᵀ, using X_j = QR so that
// T = (Rβ)ᵀ (R V Rᵀ)⁻ (Rβ); the pseudo-inverse keeps the leading `rank` eigenvalues.
inline double wald_statistic(const Eigen::MatrixXd& xj, const Eigen::VectorXd& bj, const Eigen::MatrixXd& vj, int rank) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(xj);
  const Eigen::Index w = xj.cols();
  const Eigen::MatrixXd r = qr.matrixQR().topRows(w).triangularView<Eigen::Upper>();
  const Eigen::VectorXd rb = r * bj;
  const Eigen::MatrixXd m = r * vj * r.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  const auto& ev = eig.eigenvalues();  // ascending
  const Eigen::MatrixXd& u = eig.eigenvectors();
  double t = 0.0;
  for (int k = 0; k < rank; ++k) {
    const Eigen::Index idx = w - 1 - k;
    if (ev(idx) <= ev(w - 1) * 1e-12) break;
    const double proj = u.col(idx).dot(rb);
    t += proj * proj / ev(idx);
  }
  return t;
}

}  // namespace detail

// Joint test of one or more terms given the fitted model and its design matrix.
inline TermTest test_terms(const FittedGam& fit, const Eigen::MatrixXd& x, const std::vector<std::string>& labels,
                           const std::string& name = "") {
  TermTest out;
  out.term = name.empty() ? labels.front() : name;
  bool all_dummy = false;
  const auto cols = detail::term_columns(fit, labels, out.edf, all_dummy);
  const auto w = static_cast<Eigen::Index>(cols.size());
  if (x.cols() != fit.beta.size()) throw PreconditionError("design width does not match the fitted model");
  Eigen::VectorXd bj(w);
  Eigen::MatrixXd vj(w, w);
  for (Eigen::Index a = 0; a < w; ++a) {
    bj(a) = fit.beta(cols[static_cast<std::size_t>(a)]);
    for (Eigen::Index b = 0; b < w; ++b)
      vj(a, b) = fit.posterior_cov(cols[static_cast<std::size_t>(a)], cols[static_cast<std::size_t>(b)]);
  }
  if (all_dummy && w == 1) {
    const double se = std::sqrt(vj(0, 0));
    out.statistic = bj(0) / se;
    out.df = 1.0;
    out.raw_p = std::min(1.0, 2.0 * stats::normal_sf(std::abs(out.statistic)));
    out.holm_p = out.raw_p;
    return out;
  }
  if (out.edf < 0.5) {
    out.effectively_null = true;
    out.raw_p = out.holm_p = 1.0;
    return out;
  }
  const int rank = static_cast<int>(std::clamp<double>(std::round(out.edf), 1.0, static_cast<double>(w)));
  Eigen::MatrixXd xj(x.rows(), w);
  for (Eigen::Index a = 0; a < w; ++a) xj.col(a) = x.col(cols[static_cast<std::size_t>(a)]);
  out.statistic = detail::wald_statistic(xj, bj, vj, rank);
  out.df = rank;
  out.raw_p = std::clamp(stats::chi_squared_sf(out.statistic, rank), 0.0, 1.0);
  out.holm_p = out.raw_p;
  return out;
}

inline TermTest test_smooth_term(const FittedGam& fit, const Eigen::MatrixXd& x, const std::string& label) {
  return test_terms(fit, x, {label});
}

inline TermTest test_smooth_term(const FittedGam& fit, const std::vector<MinuteObservation>& rows,
                                 const std::string& label) {
  return test_smooth_term(fit, evaluate_design(fit.bases, make_covariate_frame(rows, fit.spec.binning)), label);
}

// The five baseline factors and the term labels that carry each one. The
// minute factor spans the half dummy and both per-half minute smooths.
inline const std::vector<std::string>& key_factors() {
  static const std::vector<std::string> f{"score_diff", "red_card_diff", "home", "win_prob_diff", "minute"};
  return f;
}

inline std::vector<std::string> factor_terms(const ModelSpec& spec, const std::string& factor) {
  std::vector<std::string> out;
  for (const auto& t : spec.terms) {
    if (t.kind == TermKind::tensor_interaction) continue;
    if (t.covariate == factor || (factor == "minute" && t.covariate == "half" && t.kind == TermKind::dummy)) {
      out.push_back(t.label());
    }
  }
  if (out.empty()) throw PreconditionError("no term carries factor '" + factor + "'");
  return out;
}

inline TermTest test_factor(const FittedGam& fit, const Eigen::MatrixXd& x, const std::string& factor) {
  return test_terms(fit, x, factor_terms(fit.spec, factor), factor);
}

// Covariate used for a factor inside a tensor interaction.
inline std::string interaction_covariate(const std::string& factor) {
  return factor == "minute" ? "game_minute" : factor;
}

inline std::vector<std::pair<std::string, std::string>> interaction_pairs() {
  std::vector<std::pair<std::string, std::string>> out;
  const auto& f = key_factors();
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t j = i + 1; j < f.size(); ++j) out.emplace_back(f[i], f[j]);
  return out;
}

// Fits base + ti(a, b) and tests the interaction block. `base_fit` supplies
// the AIC/BIC reference; it is fitted here when absent.
inline TermTest test_interaction(const std::vector<MinuteObservation>& rows, const ModelSpec& base,
                                 const std::string& a, const std::string& b, const FitOptions& opt = {},
                                 const FittedGam* base_fit = nullptr) {
  const auto ca = interaction_covariate(a), cb = interaction_covariate(b);
  if (ca == cb) throw PreconditionError("interaction of a covariate with itself: " + a);
  SmoothSpec ti;
  ti.kind = TermKind::tensor_interaction;
  ti.covariate = ca;
  ti.covariate2 = cb;
  ti.k = 5;
  ti.k2 = 5;
  TermTest out;
  out.term = ti.label();
  try {
    ModelSpec spec = base;
    spec.terms.push_back(ti);
    const auto frame = make_covariate_frame(rows, spec.binning);
    const auto design = assemble_design(spec, frame);
    const auto y = response_vector(rows, spec.response);
    Family fam;
    fam.kind = spec.family;
    auto fit = fit_family(design, y, fam, opt);
    fit.spec = spec;
    const auto t = test_terms(fit, design.x, {ti.label()});
    out.statistic = t.statistic;
    out.df = t.df;
    out.edf = t.edf;
    out.raw_p = out.holm_p = t.raw_p;
    out.effectively_null = t.effectively_null;
    FittedGam own;
    if (!base_fit) {
      own = fit_model(base, rows, opt);
      base_fit = &own;
    }
    out.delta_aic = fit.aic - base_fit->aic;
    out.delta_bic = fit.bic - base_fit->bic;
  } catch (const FitError& e) {
    out.failed = true;
    out.error = e.what();
  }
  return out;
}

// Replaces the season random intercept with a per-game one and tests it.
inline TermTest test_game_random_effect(const std::vector<MinuteObservation>& rows, const ModelSpec& spec,
                                        const FitOptions& opt = {}) {
  std::set<std::string> games;
  for (const auto& r : rows) games.insert(r.game_id);
  if (games.size() < 2) throw PreconditionError("game random-effect test needs at least 2 games");
  ModelSpec s = spec.without_covariate("season");
  SmoothSpec game;
  game.covariate = "game_id";
  game.kind = TermKind::random_effect;
  s.terms.push_back(game);
  const auto frame = make_covariate_frame(rows, s.binning);
  const auto design = assemble_design(s, frame);
  Family fam;
  fam.kind = s.family;
  auto fit = fit_family(design, response_vector(rows, s.response), fam, opt);
  fit.spec = s;
  return test_smooth_term(fit, design.x, game.label());
}

// ---------------------------------------------------------------------------
// Factor battery: per (league, season) fits without the season intercept,
// the five factor tests each, Holm within each factor across the battery.

struct BatteryResult {
  std::vector<TermTest> tests;
  std::vector<std::string> failures;  // "league season: message"
};

inline std::map<std::pair<std::string, std::string>, std::vector<MinuteObservation>> split_league_season(
    const std::vector<MinuteObservation>& rows) {
  std::map<std::pair<std::string, std::string>, std::vector<MinuteObservation>> out;
  for (const auto& r : rows) out[{r.league, r.season}].push_back(r);
  return out;
}

inline void holm_by_term(std::vector<TermTest>& tests) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < tests.size(); ++i)
    if (!tests[i].failed) groups[tests[i].term].push_back(i);
  for (const auto& [term, idx] : groups) {
    std::vector<double> p;
    for (auto i : idx) p.push_back(tests[i].raw_p);
    const auto adj = holm_adjust(p);
    for (std::size_t k = 0; k < idx.size(); ++k) tests[idx[k]].holm_p = adj[k];
  }
}

inline BatteryResult factor_battery(const std::vector<MinuteObservation>& rows, const ModelSpec& spec,
                                    const FitOptions& opt = {}, unsigned threads = 1) {
  const auto groups = split_league_season(rows);
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& [k, v] : groups) keys.push_back(k);
  std::vector<std::vector<TermTest>> per(keys.size());
  std::vector<std::string> errors(keys.size());
  const ModelSpec s = spec.without_covariate("season");
  parallel_for(keys.size(), threads, [&](std::size_t g) {
    const auto& data = groups.at(keys[g]);
    try {
      const auto frame = make_covariate_frame(data, s.binning);
      const auto design = assemble_design(s, frame);
      Family fam;
      fam.kind = s.family;
      auto fit = fit_family(design, response_vector(data, s.response), fam, opt);
      fit.spec = s;
      for (const auto& f : key_factors()) {
        auto t = test_factor(fit, design.x, f);
        t.league = keys[g].first;
        t.season = keys[g].second;
        per[g].push_back(t);
      }
    } catch (const Error& e) {
      errors[g] = keys[g].first + " " + keys[g].second + ": " + e.what();
    }
  });
  BatteryResult out;
  for (std::size_t g = 0; g < keys.size(); ++g) {
    for (auto& t : per[g]) out.tests.push_back(std::move(t));
    if (!errors[g].empty()) out.failures.push_back(errors[g]);
  }
  holm_by_term(out.tests);
  return out;
}

inline void write_battery_csv(std::ostream& out, const std::vector<TermTest>& tests) {
  out << "league,season,term,stat,edf,raw_p,holm_p\n";
  for (const auto& t : tests) {
    out << t.league << ',' << t.season << ',' << t.term << ',' << detail::format_double(t.statistic) << ','
        << detail::format_double(t.edf) << ',' << detail::format_double(t.raw_p) << ','
        << detail::format_double(t.holm_p) << '\n';
  }
}

inline json to_json(const TermTest& t) {
  return json{{"term", t.term},         {"statistic", t.statistic}, {"df", t.df},
              {"edf", t.edf},           {"raw_p", t.raw_p},         {"holm_p", t.holm_p},
              {"league", t.league},     {"season", t.season},       {"effectively_null", t.effectively_null},
              {"failed", t.failed},     {"error", t.error},         {"delta_aic", t.delta_aic},
              {"delta_bic", t.delta_bic}};
}

}  // namespace ctxadjust

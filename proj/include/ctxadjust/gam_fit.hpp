#pragma once

// Penalized IRLS for count and Gaussian GAMs, GCV smoothing-parameter
// selection, negative binomial theta by profile likelihood and a zero-inflated
// Poisson EM fit.

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ctxadjust/errors.hpp"
#include "ctxadjust/model_spec.hpp"
#include "ctxadjust/serialization.hpp"

namespace ctxadjust {

struct Family {
  FamilyKind kind = FamilyKind::poisson;
  double theta = std::numeric_limits<double>::infinity();  // negative binomial size

  static Family poisson() { return {FamilyKind::poisson}; }
  static Family negative_binomial(double theta) {
    if (!(theta > 0.0)) throw DomainError("theta must be > 0");
    return {FamilyKind::negative_binomial, theta};
  }
  static Family zip() { return {FamilyKind::zip}; }
  static Family gaussian_identity() { return {FamilyKind::gaussian_identity}; }
  static Family gaussian_log() { return {FamilyKind::gaussian_log}; }

  bool log_link() const { return kind != FamilyKind::gaussian_identity; }
  bool gaussian() const { return kind == FamilyKind::gaussian_identity || kind == FamilyKind::gaussian_log; }
};

struct FitOptions {
  double tolerance = 1e-8;    // relative change in penalized deviance
  int max_iterations = 200;
  double theta_tolerance = 1e-6;  // |Δ log θ|
  double theta_cap = 1e7;
  std::optional<double> fixed_theta;  // skip θ estimation
  double grid_lo = -6.0;  // log10 λ
  double grid_hi = 6.0;
  int grid_points = 25;
  int golden_rounds = 2;
  int zip_em_iterations = 10;  // EM warm-up before the joint Newton phase
};

namespace detail {

enum class Working { poisson, negative_binomial, gaussian_identity, gaussian_log, binomial };

inline double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }

struct WorkingFamily {
  Working kind = Working::poisson;
  double theta = std::numeric_limits<double>::infinity();

  bool log_link() const {
    return kind == Working::poisson || kind == Working::negative_binomial || kind == Working::gaussian_log;
  }

  double linkinv(double eta) const {
    switch (kind) {
      case Working::gaussian_identity: return eta;
      case Working::binomial: {
        const double m = 1.0 / (1.0 + std::exp(-std::clamp(eta, -700.0, 700.0)));
        return std::clamp(m, 1e-12, 1.0 - 1e-12);
      }
      default: return std::max(std::exp(std::clamp(eta, -700.0, 700.0)), 1e-300);
    }
  }
  double link(double mu) const {
    switch (kind) {
      case Working::gaussian_identity: return mu;
      case Working::binomial: return std::log(mu / (1.0 - mu));
      default: return std::log(mu);
    }
  }
  double mu_eta(double mu) const {
    switch (kind) {
      case Working::gaussian_identity: return 1.0;
      case Working::binomial: return mu * (1.0 - mu);
      default: return mu;
    }
  }
  double variance(double mu) const {
    switch (kind) {
      case Working::poisson: return mu;
      case Working::negative_binomial: return std::isfinite(theta) ? mu + mu * mu / theta : mu;
      case Working::binomial: return mu * (1.0 - mu);
      default: return 1.0;
    }
  }
  double dev_resid(double y, double mu) const {
    switch (kind) {
      case Working::poisson: return 2.0 * (xlogy(y, y / mu) - (y - mu));
      case Working::negative_binomial:
        if (!std::isfinite(theta)) return 2.0 * (xlogy(y, y / mu) - (y - mu));
        return 2.0 * (xlogy(y, y / mu) - (y + theta) * std::log((y + theta) / (mu + theta)));
      case Working::binomial: return 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu)));
      default: return (y - mu) * (y - mu);
    }
  }
  // Log density up to the Gaussian scale, which the caller supplies.
  double loglik(double y, double mu, double scale) const {
    switch (kind) {
      case Working::poisson: return xlogy(y, mu) - mu - std::lgamma(y + 1.0);
      case Working::negative_binomial:
        if (!std::isfinite(theta)) return xlogy(y, mu) - mu - std::lgamma(y + 1.0);
        return std::lgamma(y + theta) - std::lgamma(theta) - std::lgamma(y + 1.0) +
               theta * std::log(theta / (theta + mu)) + xlogy(y, mu / (theta + mu));
      case Working::binomial: return xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu);
      default: return -0.5 * std::log(2.0 * std::numbers::pi * scale) - (y - mu) * (y - mu) / (2.0 * scale);
    }
  }
  double initial_mu(double y, double ybar) const {
    switch (kind) {
      case Working::gaussian_identity: return y;
      case Working::gaussian_log: return std::max(y, 0.0) + 0.1 * std::max(ybar, 0.1);
      case Working::binomial: return (y + 0.5) / 2.0;
      default: return y + 0.1;
    }
  }
};

inline WorkingFamily working_family(const Family& f) {
  switch (f.kind) {
    case FamilyKind::poisson: return {Working::poisson};
    case FamilyKind::negative_binomial: return {Working::negative_binomial, f.theta};
    case FamilyKind::zip: return {Working::poisson};
    case FamilyKind::gaussian_identity: return {Working::gaussian_identity};
    case FamilyKind::gaussian_log: return {Working::gaussian_log};
  }
  return {};
}

// A penalty embedded at [offset, offset + width) of the coefficient vector.
struct PenaltyBlock {
  Eigen::Index offset = 0;
  Eigen::MatrixXd s;
};

inline std::vector<PenaltyBlock> penalty_blocks(const Design& d) {
  std::vector<PenaltyBlock> out;
  for (std::size_t k = 0; k < d.slots.size(); ++k) out.push_back({d.terms[d.slots[k].term].first_column, d.penalty(k)});
  return out;
}

inline void add_penalty(Eigen::MatrixXd& h, const std::vector<PenaltyBlock>& pens, const Eigen::VectorXd& lambda) {
  for (std::size_t k = 0; k < pens.size(); ++k) {
    const auto w = pens[k].s.rows();
    h.block(pens[k].offset, pens[k].offset, w, w) += lambda(static_cast<Eigen::Index>(k)) * pens[k].s;
  }
}

inline double penalty_value(const std::vector<PenaltyBlock>& pens, const Eigen::VectorXd& lambda,
                            const Eigen::VectorXd& beta) {
  double v = 0.0;
  for (std::size_t k = 0; k < pens.size(); ++k) {
    const auto w = pens[k].s.rows();
    const auto seg = beta.segment(pens[k].offset, w);
    v += lambda(static_cast<Eigen::Index>(k)) * seg.dot(pens[k].s * seg);
  }
  return v;
}

// X^T W X and X^T W z accumulated in row chunks.
inline void weighted_cross_products(const Eigen::MatrixXd& x, const Eigen::VectorXd& w, const Eigen::VectorXd& z,
                                    Eigen::MatrixXd& a, Eigen::VectorXd& b, double& c) {
  const auto n = x.rows(), p = x.cols();
  a.setZero(p, p);
  b = x.transpose() * w.cwiseProduct(z);
  c = w.dot(z.cwiseProduct(z));
  constexpr Eigen::Index chunk = 4096;
  Eigen::MatrixXd xw;
  for (Eigen::Index r = 0; r < n; r += chunk) {
    const auto len = std::min(chunk, n - r);
    xw = x.middleRows(r, len);
    xw.array().colwise() *= w.segment(r, len).array().sqrt();
    a.selfadjointView<Eigen::Lower>().rankUpdate(xw.transpose());
  }
  a.triangularView<Eigen::StrictlyUpper>() = a.transpose();
}

// Working-model GCV for the performance iteration.
class GcvCriterion {
 public:
  GcvCriterion(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, double c, double n,
               const std::vector<PenaltyBlock>& pens)
      : a_(a), b_(b), c_(c), n_(n), pens_(pens) {}

  double operator()(const Eigen::VectorXd& log10_lambda) const {
    Eigen::VectorXd lambda = log10_lambda.unaryExpr([](double l) { return std::pow(10.0, l); });
    Eigen::MatrixXd h = a_;
    add_penalty(h, pens_, lambda);
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
    const Eigen::VectorXd beta = llt.solve(b_);
    const double edf = llt.solve(a_).trace();
    const double rss = std::max(c_ - 2.0 * beta.dot(b_) + beta.dot(a_ * beta), 0.0);
    const double denom = n_ - edf;
    if (!(denom > 0.0)) return std::numeric_limits<double>::infinity();
    return n_ * rss / (denom * denom);
  }

 private:
  const Eigen::MatrixXd& a_;
  const Eigen::VectorXd& b_;
  double c_;
  double n_;
  const std::vector<PenaltyBlock>& pens_;
};

// Golden-section minimization of f along coordinate j within [lo, hi].
template <class F>
double golden_coordinate(const F& f, Eigen::VectorXd& l, Eigen::Index j, double lo, double hi, double tol,
                         double& best) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  auto eval = [&](double v) {
    const double keep = l(j);
    l(j) = v;
    const double r = f(l);
    l(j) = keep;
    return r;
  };
  double a = lo, b = hi;
  double x1 = b - g * (b - a), x2 = a + g * (b - a);
  double f1 = eval(x1), f2 = eval(x2);
  while (b - a > tol) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - g * (b - a);
      f1 = eval(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + g * (b - a);
      f2 = eval(x2);
    }
  }
  const double cand = f1 <= f2 ? x1 : x2;
  const double fc = std::min(f1, f2);
  if (fc < best) {
    best = fc;
    l(j) = cand;
  }
  return l(j);
}

// Coordinate-wise search: optional coarse grid pass, then golden rounds.
inline void search_lambda(const GcvCriterion& gcv, Eigen::VectorXd& l, bool full, const FitOptions& opt) {
  double best = gcv(l);
  const double step = (opt.grid_hi - opt.grid_lo) / (opt.grid_points - 1);
  if (full) {
    for (Eigen::Index j = 0; j < l.size(); ++j) {
      Eigen::VectorXd trial = l;
      for (int g = 0; g < opt.grid_points; ++g) {
        trial(j) = opt.grid_lo + g * step;
        const double v = gcv(trial);
        if (v < best) {
          best = v;
          l(j) = trial(j);
        }
      }
    }
  }
  const double half_width = full ? step : 2.0 * step;
  for (int round = 0; round < opt.golden_rounds; ++round) {
    for (Eigen::Index j = 0; j < l.size(); ++j) {
      for (int expand = 0; expand < 6; ++expand) {
        const double lo = std::max(opt.grid_lo, l(j) - half_width);
        const double hi = std::min(opt.grid_hi, l(j) + half_width);
        const double before = l(j);
        golden_coordinate(gcv, l, j, lo, hi, 1e-4, best);
        const bool at_inner_edge = (l(j) - lo < 1e-3 && lo > opt.grid_lo) || (hi - l(j) < 1e-3 && hi < opt.grid_hi);
        if (!at_inner_edge || l(j) == before) break;
      }
    }
  }
}

struct PirlsResult {
  Eigen::VectorXd beta, eta, mu;
  Eigen::VectorXd lambda;  // natural scale
  std::vector<bool> lambda_at_boundary;
  Eigen::MatrixXd a;     // X^T W X at convergence
  Eigen::MatrixXd hinv;  // (X^T W X + S_λ)^{-1}
  double deviance = 0.0;
  double penalty = 0.0;
  double working_rss = 0.0;
  int iterations = 0;
  double final_change = 0.0;
  bool converged = false;
  std::vector<double> trace;
};

inline double deviance(const WorkingFamily& fam, const Eigen::VectorXd& y, const Eigen::VectorXd& mu,
                       const Eigen::VectorXd* prior) {
  double d = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) d += (prior ? (*prior)(i) : 1.0) * fam.dev_resid(y(i), mu(i));
  return d;
}

inline std::string deficient_term(const Eigen::MatrixXd& h, const Design* design) {
  if (!design) return "design";
  // First term whose columns make the leading block of h singular.
  for (const auto& t : design->terms) {
    const auto end = t.first_column + t.width;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(h.topLeftCorner(end, end));
    const double mx = eig.eigenvalues().cwiseAbs().maxCoeff();
    if (!(eig.eigenvalues().minCoeff() > 1e-12 * std::max(mx, 1e-300))) return t.label;
  }
  return "a combination of terms";
}

// Cholesky success with no numerically vanishing pivot.
inline bool factor_ok(const Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::MatrixXd& h) {
  if (llt.info() != Eigen::Success) return false;
  const Eigen::VectorXd d = Eigen::MatrixXd(llt.matrixL()).diagonal();
  return d.minCoeff() * d.minCoeff() > 1e-13 * h.diagonal().cwiseAbs().maxCoeff();
}

// Core PIRLS loop. With optimize = true the smoothing parameters are chosen by
// GCV on each working model until they settle, then held fixed to convergence.
inline PirlsResult pirls(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd* prior,
                         const WorkingFamily& fam, const std::vector<PenaltyBlock>& pens, Eigen::VectorXd lambda,
                         bool optimize, const FitOptions& opt, const Eigen::VectorXd* start_eta = nullptr,
                         const Design* design = nullptr, bool full_search = true, int max_iterations = -1) {
  const auto n = x.rows(), p = x.cols();
  if (y.size() != n) throw InputError("response length does not match design rows");
  if (max_iterations < 0) max_iterations = opt.max_iterations;
  PirlsResult r;
  r.eta.resize(n);
  r.mu.resize(n);
  const double ybar = y.mean();
  if (start_eta) {
    r.eta = *start_eta;
    for (Eigen::Index i = 0; i < n; ++i) r.mu(i) = fam.linkinv(r.eta(i));
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      r.mu(i) = fam.initial_mu(y(i), ybar);
      r.eta(i) = fam.link(r.mu(i));
    }
  }
  if (lambda.size() != static_cast<Eigen::Index>(pens.size())) lambda = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(pens.size()));
  Eigen::VectorXd log_lambda = lambda.unaryExpr([&](double v) {
    return std::clamp(std::log10(std::max(v, 1e-300)), opt.grid_lo, opt.grid_hi);
  });
  if (optimize) lambda = log_lambda.unaryExpr([](double l) { return std::pow(10.0, l); });

  Eigen::VectorXd w(n), z(n), b;
  double c = 0.0;
  bool frozen = !optimize || pens.empty();
  int searches = 0;
  double dev = deviance(fam, y, r.mu, prior);
  bool have_beta = false;
  r.beta = Eigen::VectorXd::Zero(p);
  double prev_pdev = std::numeric_limits<double>::infinity();

  for (int it = 1; it <= max_iterations; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double g = fam.mu_eta(r.mu(i));
      const double v = fam.variance(r.mu(i));
      w(i) = (prior ? (*prior)(i) : 1.0) * g * g / v;
      z(i) = r.eta(i) + (y(i) - r.mu(i)) / g;
    }
    weighted_cross_products(x, w, z, r.a, b, c);

    if (!frozen) {
      const Eigen::VectorXd before = log_lambda;
      GcvCriterion gcv(r.a, b, c, static_cast<double>(n), pens);
      search_lambda(gcv, log_lambda, full_search && searches < 2, opt);
      ++searches;
      lambda = log_lambda.unaryExpr([](double l) { return std::pow(10.0, l); });
      const double moved = (log_lambda - before).cwiseAbs().maxCoeff();
      if (searches >= 3 && (moved < 1e-3 || searches >= 30)) frozen = true;
    }

    Eigen::MatrixXd h = r.a;
    add_penalty(h, pens, lambda);
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (!factor_ok(llt, h)) {
      throw FitError("penalized system is singular; deficient term: " + deficient_term(h, design), r.trace);
    }
    Eigen::VectorXd beta_new = llt.solve(b);
    if (!beta_new.allFinite()) throw FitError("non-finite coefficients; deficient term: " + deficient_term(h, design), r.trace);

    // Step halving on the penalized deviance at the current λ.
    const double old_pdev = have_beta ? dev + penalty_value(pens, lambda, r.beta) : std::numeric_limits<double>::infinity();
    Eigen::VectorXd eta_new, mu_new(n);
    double dev_new = 0.0, pdev_new = 0.0;
    for (int half = 0; half < 40; ++half) {
      eta_new = x * beta_new;
      for (Eigen::Index i = 0; i < n; ++i) mu_new(i) = fam.linkinv(eta_new(i));
      dev_new = deviance(fam, y, mu_new, prior);
      pdev_new = dev_new + penalty_value(pens, lambda, beta_new);
      if (std::isfinite(pdev_new) && pdev_new <= old_pdev * (1.0 + 1e-12) + 1e-12) break;
      if (!have_beta) {
        if (std::isfinite(pdev_new)) break;
        beta_new *= 0.5;
        continue;
      }
      beta_new = 0.5 * (beta_new + r.beta);
    }
    r.beta = beta_new;
    r.eta = eta_new;
    r.mu = mu_new;
    dev = dev_new;
    have_beta = true;
    r.trace.push_back(pdev_new);
    r.iterations = it;
    r.final_change = std::abs(pdev_new - prev_pdev) / (0.1 + std::abs(pdev_new));
    prev_pdev = pdev_new;
    if (frozen && r.final_change < opt.tolerance) {
      r.converged = true;
      break;
    }
    if (!frozen && it >= 30) frozen = true;
  }
  if (!r.converged) {
    throw FitError("PIRLS did not converge in " + std::to_string(max_iterations) + " iterations", r.trace);
  }

  // Final quantities at the converged coefficients.
  for (Eigen::Index i = 0; i < n; ++i) {
    const double g = fam.mu_eta(r.mu(i));
    w(i) = (prior ? (*prior)(i) : 1.0) * g * g / fam.variance(r.mu(i));
    z(i) = r.eta(i) + (y(i) - r.mu(i)) / g;
  }
  weighted_cross_products(x, w, z, r.a, b, c);
  Eigen::MatrixXd h = r.a;
  add_penalty(h, pens, lambda);
  Eigen::LLT<Eigen::MatrixXd> llt(h);
  if (!factor_ok(llt, h)) {
    throw FitError("penalized system is singular; deficient term: " + deficient_term(h, design), r.trace);
  }
  r.hinv = llt.solve(Eigen::MatrixXd::Identity(p, p));
  r.hinv = 0.5 * (r.hinv + r.hinv.transpose()).eval();
  r.lambda = lambda;
  r.deviance = dev;
  r.penalty = penalty_value(pens, lambda, r.beta);
  r.working_rss = std::max(c - 2.0 * r.beta.dot(b) + r.beta.dot(r.a * r.beta), 0.0);
  r.lambda_at_boundary.assign(pens.size(), false);
  if (optimize) {
    for (std::size_t k = 0; k < pens.size(); ++k) {
      const double l = log_lambda(static_cast<Eigen::Index>(k));
      r.lambda_at_boundary[k] = l <= opt.grid_lo + 1e-3 || l >= opt.grid_hi - 1e-3;
    }
  }
  return r;
}

inline double log_likelihood(const WorkingFamily& fam, const Eigen::VectorXd& y, const Eigen::VectorXd& mu,
                             double scale, const Eigen::VectorXd* prior = nullptr) {
  double l = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) l += (prior ? (*prior)(i) : 1.0) * fam.loglik(y(i), mu(i), scale);
  return l;
}

}  // namespace detail

struct TermSummary {
  std::string label;
  TermKind kind = TermKind::penalized_cubic;
  Eigen::Index first_column = 0;
  Eigen::Index width = 0;
  double edf = 0.0;
  double edf_zero = 0.0;  // ZIP inflation part
  std::vector<std::size_t> lambda_slots;
};

struct FittedGam {
  ModelSpec spec;
  std::string spec_hash;
  Family family;
  bool theta_estimated = false;
  bool effectively_poisson = false;
  std::vector<TermSummary> terms;
  std::vector<TermBasis> bases;

  Eigen::VectorXd beta;
  Eigen::VectorXd beta_zero;  // ZIP logit(π) coefficients
  Eigen::VectorXd lambda;
  std::vector<bool> lambda_at_boundary;
  double edf_total = 0.0;
  double scale = 1.0;
  double deviance = 0.0;
  double log_likelihood = 0.0;
  double aic = 0.0;
  double bic = 0.0;
  std::size_t n = 0;
  Eigen::MatrixXd posterior_cov;
  Eigen::MatrixXd posterior_cov_zero;
  Eigen::MatrixXd xtwx;  // X^T W X at convergence (count part)

  int iterations = 0;
  double final_change = 0.0;
  std::vector<std::string> warnings;

  // Training-row fitted values, kept in memory only.
  Eigen::VectorXd mu;
  Eigen::VectorXd pi;

  Eigen::Index columns() const { return beta.size(); }

  const TermSummary* term(const std::string& label) const {
    for (const auto& t : terms)
      if (t.label == label) return &t;
    return nullptr;
  }

  // Event rate per row: (1 - π) μ for ZIP, μ otherwise.
  Eigen::VectorXd rate() const {
    if (family.kind != FamilyKind::zip) return mu;
    return (1.0 - pi.array()).matrix().cwiseProduct(mu);
  }
};

// k_eff = edf_total, +1 when θ is estimated, +1 for the Gaussian scale.
inline std::pair<double, double> information_criteria(double log_likelihood, double k_eff, std::size_t n) {
  return {-2.0 * log_likelihood + 2.0 * k_eff, -2.0 * log_likelihood + std::log(static_cast<double>(n)) * k_eff};
}

inline double effective_parameters(const FittedGam& fit) {
  double k = fit.edf_total;
  if (fit.theta_estimated) k += 1.0;
  if (fit.family.gaussian()) k += 1.0;
  return k;
}

inline std::pair<double, double> information_criteria(const FittedGam& fit, std::size_t n) {
  return information_criteria(fit.log_likelihood, effective_parameters(fit), n);
}

namespace detail {

inline void fill_terms(FittedGam& fit, const Design& design, const Eigen::VectorXd& edf_diag,
                       const Eigen::VectorXd* edf_zero_diag) {
  fit.terms.clear();
  std::map<std::size_t, std::vector<std::size_t>> slots;
  for (std::size_t k = 0; k < design.slots.size(); ++k) slots[design.slots[k].term].push_back(k);
  for (std::size_t j = 0; j < design.terms.size(); ++j) {
    const auto& t = design.terms[j];
    TermSummary s;
    s.label = t.label;
    s.kind = t.kind;
    s.first_column = t.first_column;
    s.width = t.width;
    s.edf = edf_diag.segment(t.first_column, t.width).sum();
    if (edf_zero_diag) s.edf_zero = edf_zero_diag->segment(t.first_column, t.width).sum();
    s.lambda_slots = slots[j];
    fit.terms.push_back(std::move(s));
  }
  fit.bases = design.bases();
  for (const auto& w : design.warnings) fit.warnings.push_back(w);
}

inline FittedGam make_fit(const Design& design, const Family& family, const PirlsResult& r, const Eigen::VectorXd& y) {
  FittedGam fit;
  fit.family = family;
  fit.beta = r.beta;
  fit.lambda = r.lambda;
  fit.lambda_at_boundary = r.lambda_at_boundary;
  fit.n = static_cast<std::size_t>(y.size());
  fit.mu = r.mu;
  fit.xtwx = r.a;
  const Eigen::VectorXd edf_diag = (r.hinv * r.a).diagonal();
  fit.edf_total = edf_diag.sum();
  const auto fam = working_family(family);
  fit.deviance = r.deviance;
  if (family.gaussian()) {
    const double n = static_cast<double>(y.size());
    fit.scale = r.deviance / std::max(n - fit.edf_total, 1.0);
    fit.log_likelihood = log_likelihood(fam, y, r.mu, r.deviance / n);
  } else {
    fit.scale = 1.0;
    fit.log_likelihood = log_likelihood(fam, y, r.mu, 1.0);
  }
  fit.posterior_cov = r.hinv * fit.scale;
  fit.iterations = r.iterations;
  fit.final_change = r.final_change;
  fill_terms(fit, design, edf_diag, nullptr);
  for (std::size_t k = 0; k < r.lambda_at_boundary.size(); ++k) {
    if (r.lambda_at_boundary[k]) {
      fit.warnings.push_back("smoothing parameter for " + design.terms[design.slots[k].term].label +
                             " (penalty " + std::to_string(design.slots[k].index) + ") at grid boundary");
    }
  }
  return fit;
}

inline void finish(FittedGam& fit) {
  const auto [aic, bic] = information_criteria(fit, fit.n);
  fit.aic = aic;
  fit.bic = bic;
}

}  // namespace detail

// PIRLS at fixed smoothing parameters (natural scale, one per penalty slot).
inline FittedGam pirls_fit(const Design& design, const Eigen::VectorXd& y, const Family& family,
                           const Eigen::VectorXd& lambda, const FitOptions& opt = {}) {
  if (family.kind == FamilyKind::zip) throw PreconditionError("use fit_zip for the zero-inflated family");
  if (lambda.size() != static_cast<Eigen::Index>(design.penalty_count())) {
    throw PreconditionError("lambda has " + std::to_string(lambda.size()) + " entries, design has " +
                            std::to_string(design.penalty_count()) + " penalties");
  }
  const auto pens = detail::penalty_blocks(design);
  const auto r = detail::pirls(design.x, y, nullptr, detail::working_family(family), pens, lambda, false, opt,
                               nullptr, &design);
  auto fit = detail::make_fit(design, family, r, y);
  detail::finish(fit);
  return fit;
}

// PIRLS with GCV-selected smoothing parameters.
inline FittedGam optimize_lambda(const Design& design, const Eigen::VectorXd& y, const Family& family,
                                 const FitOptions& opt = {}) {
  if (family.kind == FamilyKind::zip) throw PreconditionError("use fit_zip for the zero-inflated family");
  const auto pens = detail::penalty_blocks(design);
  const auto r = detail::pirls(design.x, y, nullptr, detail::working_family(family), pens,
                               Eigen::VectorXd::Ones(static_cast<Eigen::Index>(pens.size())), true, opt, nullptr,
                               &design);
  auto fit = detail::make_fit(design, family, r, y);
  detail::finish(fit);
  return fit;
}

// Profile log-likelihood of θ at fixed means, and its first two derivatives
// with respect to log θ.
struct ThetaProfile {
  double loglik = 0.0;
  double d1 = 0.0;  // d ℓ / d log θ
  double d2 = 0.0;  // d² ℓ / d (log θ)²
};

inline ThetaProfile theta_profile(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, double theta) {
  ThetaProfile p;
  double g = 0.0, h = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double yi = y(i), m = mu(i);
    double dig = 0.0, trig = 0.0;
    if (yi < 1000.0) {
      for (int j = 0; j < static_cast<int>(yi); ++j) {
        const double t = 1.0 / (theta + j);
        dig += t;
        trig -= t * t;
      }
    } else {
      dig = boost::math::digamma(yi + theta) - boost::math::digamma(theta);
      trig = boost::math::trigamma(yi + theta) - boost::math::trigamma(theta);
    }
    p.loglik += std::lgamma(yi + theta) - std::lgamma(theta) - std::lgamma(yi + 1.0) +
                theta * std::log(theta / (theta + m)) + detail::xlogy(yi, m / (theta + m));
    g += dig + std::log(theta) + 1.0 - std::log(theta + m) - (theta + yi) / (theta + m);
    h += trig + 1.0 / theta - 2.0 / (theta + m) + (theta + yi) / ((theta + m) * (theta + m));
  }
  p.d1 = theta * g;
  p.d2 = theta * theta * h + theta * g;
  return p;
}

namespace detail {

// Maximizes the θ profile at fixed μ by Newton steps on log θ.
inline double maximize_theta(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, double theta, double cap) {
  double t = std::log(std::clamp(theta, 1e-8, cap));
  const double log_cap = std::log(cap);
  for (int it = 0; it < 100; ++it) {
    const auto p = theta_profile(y, mu, std::exp(t));
    double step;
    if (p.d2 < 0.0) step = -p.d1 / p.d2;
    else step = p.d1 > 0.0 ? 1.0 : -1.0;
    step = std::clamp(step, -2.0, 2.0);
    // Backtrack if the step lowers the profile.
    double tn = std::min(t + step, log_cap);
    for (int k = 0; k < 30; ++k) {
      if (theta_profile(y, mu, std::exp(tn)).loglik >= p.loglik - 1e-10 * std::abs(p.loglik)) break;
      step *= 0.5;
      tn = std::min(t + step, log_cap);
    }
    const double delta = tn - t;
    t = tn;
    if (std::abs(delta) < 1e-10 || t >= log_cap) break;
  }
  return std::exp(std::min(t, log_cap));
}

}  // namespace detail

// NB fit with θ by profile likelihood: alternate a GCV PIRLS fit at fixed θ
// with maximization over θ at fixed μ until |Δ log θ| < tolerance.
inline FittedGam estimate_theta(const Design& design, const Eigen::VectorXd& y, const FitOptions& opt = {}) {
  const auto pens = detail::penalty_blocks(design);
  auto r = detail::pirls(design.x, y, nullptr, {detail::Working::poisson}, pens,
                         Eigen::VectorXd::Ones(static_cast<Eigen::Index>(pens.size())), true, opt, nullptr, &design);
  // Moment start from the Poisson fit.
  double num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    num += r.mu(i) * r.mu(i);
    den += (y(i) - r.mu(i)) * (y(i) - r.mu(i)) - r.mu(i);
  }
  double theta = den > 0.0 ? std::clamp(num / den, 1e-3, opt.theta_cap) : opt.theta_cap;
  bool converged = false;
  std::vector<double> trace;
  for (int outer = 0; outer < 100; ++outer) {
    const double next = detail::maximize_theta(y, r.mu, theta, opt.theta_cap);
    trace.push_back(next);
    const double change = std::abs(std::log(next) - std::log(theta));
    theta = next;
    if (outer > 0 && change < opt.theta_tolerance) {
      converged = true;
      break;
    }
    const Eigen::VectorXd eta = r.eta;
    r = detail::pirls(design.x, y, nullptr, {detail::Working::negative_binomial, theta}, pens, r.lambda, true, opt,
                      &eta, &design, false);
  }
  if (!converged) throw FitError("theta iteration did not converge", trace);
  auto fit = detail::make_fit(design, Family::negative_binomial(theta), r, y);
  fit.theta_estimated = true;
  if (theta >= opt.theta_cap * (1.0 - 1e-9)) {
    fit.effectively_poisson = true;
    fit.warnings.push_back("theta reached the cap " + std::to_string(opt.theta_cap) + ": effectively Poisson");
  }
  detail::finish(fit);
  return fit;
}

inline double zip_loglik(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, const Eigen::VectorXd& pi) {
  double l = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) == 0.0) l += std::log(pi(i) + (1.0 - pi(i)) * std::exp(-mu(i)));
    else l += std::log1p(-pi(i)) + y(i) * std::log(mu(i)) - mu(i) - std::lgamma(y(i) + 1.0);
  }
  return l;
}

namespace detail {

// X^T diag(d) X for weights of any sign.
inline Eigen::MatrixXd weighted_gram(const Eigen::MatrixXd& x, const Eigen::VectorXd& d) {
  const auto n = x.rows(), p = x.cols();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(p, p);
  constexpr Eigen::Index chunk = 4096;
  Eigen::MatrixXd xd;
  for (Eigen::Index r = 0; r < n; r += chunk) {
    const auto len = std::min(chunk, n - r);
    xd = x.middleRows(r, len);
    xd.array().colwise() *= d.segment(r, len).array();
    g.noalias() += x.middleRows(r, len).transpose() * xd;
  }
  return 0.5 * (g + g.transpose());
}

// Per-row derivatives of the ZIP log-likelihood with respect to the count
// predictor η and the inflation predictor ζ.
struct ZipDerivatives {
  Eigen::VectorXd g_eta, g_zeta, h_eta, h_zeta, h_cross;  // Hessian entries are of -ℓ
};

inline ZipDerivatives zip_derivatives(const Eigen::VectorXd& y, const Eigen::VectorXd& mu, const Eigen::VectorXd& pi) {
  const auto n = y.size();
  ZipDerivatives d{Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = mu(i), p = pi(i);
    if (y(i) == 0.0) {
      const double e = std::exp(-m);
      const double r = p / (p + (1.0 - p) * e);
      d.g_eta(i) = -m * (1.0 - r);
      d.g_zeta(i) = r - p;
      d.h_eta(i) = m * (1.0 - r) * (1.0 - m * r);
      d.h_zeta(i) = p * (1.0 - p) - r * (1.0 - r);
      d.h_cross(i) = -m * r * (1.0 - r);
    } else {
      d.g_eta(i) = y(i) - m;
      d.g_zeta(i) = -p;
      d.h_eta(i) = m;
      d.h_zeta(i) = p * (1.0 - p);
      d.h_cross(i) = 0.0;
    }
  }
  return d;
}

}  // namespace detail

// Zero-inflated Poisson. EM iterations (structural-zero responsibilities, then
// a weighted Poisson fit for the counts and a logistic fit for the inflation
// part) settle the smoothing parameters and the starting point; the count
// part's GCV smoothing parameters are shared with the inflation part. EM is
// slow when most zeros are ambiguous, so the fit is finished by penalized
// Newton steps on both coefficient vectors jointly at the settled λ.
inline FittedGam fit_zip(const Design& design, const Eigen::VectorXd& y, const FitOptions& opt = {}) {
  const auto n = y.size();
  const auto p = design.cols();
  if ((y.array() == 0.0).count() == 0) throw PreconditionError("zero-inflated fit needs zero counts in the response");
  const auto pens = detail::penalty_blocks(design);
  const detail::WorkingFamily pois{detail::Working::poisson};
  const detail::WorkingFamily logit{detail::Working::binomial};

  auto count = detail::pirls(design.x, y, nullptr, pois, pens,
                             Eigen::VectorXd::Ones(static_cast<Eigen::Index>(pens.size())), true, opt, nullptr, &design);
  double zeros = 0.0, expected = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    zeros += y(i) == 0.0;
    expected += std::exp(-count.mu(i));
  }
  const double pi0 = std::clamp((zeros - expected) / static_cast<double>(n), 0.01, 0.9);
  Eigen::VectorXd pi = Eigen::VectorXd::Constant(n, pi0);
  Eigen::VectorXd eta_zero = Eigen::VectorXd::Constant(n, std::log(pi0 / (1.0 - pi0)));
  Eigen::VectorXd resp(n), prior(n);
  detail::PirlsResult zero;
  std::vector<double> trace{zip_loglik(y, count.mu, pi)};
  for (int it = 1; it <= opt.zip_em_iterations; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (y(i) == 0.0) {
        const double a = pi(i), b = (1.0 - pi(i)) * std::exp(-count.mu(i));
        resp(i) = a / (a + b);
      } else {
        resp(i) = 0.0;
      }
      prior(i) = 1.0 - resp(i);
    }
    const Eigen::VectorXd eta_count = count.eta;
    count = detail::pirls(design.x, y, &prior, pois, pens, count.lambda, it <= 5, opt, &eta_count, &design, false);
    zero = detail::pirls(design.x, resp, nullptr, logit, pens, count.lambda, false, opt, &eta_zero, &design, false);
    eta_zero = zero.eta;
    pi = zero.mu;
    trace.push_back(zip_loglik(y, count.mu, pi));
    if ((pi.array() > 1.0 - 1e-6).all()) throw FitError("degenerate zero-inflated fit: π → 1 everywhere", trace);
  }

  const Eigen::VectorXd lambda = count.lambda;
  Eigen::VectorXd coef(2 * p);
  coef << count.beta, zero.beta;
  auto evaluate = [&](const Eigen::VectorXd& c, Eigen::VectorXd& mu, Eigen::VectorXd& pr) {
    const Eigen::VectorXd eta = design.x * c.head(p), zeta = design.x * c.tail(p);
    mu = eta.unaryExpr([&](double e) { return pois.linkinv(e); });
    pr = zeta.unaryExpr([&](double z) { return logit.linkinv(z); });
    return zip_loglik(y, mu, pr) - 0.5 * detail::penalty_value(pens, lambda, c.head(p)) -
           0.5 * detail::penalty_value(pens, lambda, c.tail(p));
  };
  Eigen::MatrixXd spen = Eigen::MatrixXd::Zero(p, p);
  detail::add_penalty(spen, pens, lambda);
  auto joint_information = [&](const detail::ZipDerivatives& d) {
    Eigen::MatrixXd j(2 * p, 2 * p);
    j.topLeftCorner(p, p) = detail::weighted_gram(design.x, d.h_eta);
    j.bottomRightCorner(p, p) = detail::weighted_gram(design.x, d.h_zeta);
    j.topRightCorner(p, p) = detail::weighted_gram(design.x, d.h_cross);
    j.bottomLeftCorner(p, p) = j.topRightCorner(p, p).transpose();
    return j;
  };
  auto penalized = [&](Eigen::MatrixXd j) {
    j.topLeftCorner(p, p) += spen;
    j.bottomRightCorner(p, p) += spen;
    return j;
  };

  Eigen::VectorXd mu, pr;
  double pll = evaluate(coef, mu, pr);
  bool converged = false;
  int iterations = opt.zip_em_iterations;
  double change = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    ++iterations;
    const auto d = detail::zip_derivatives(y, mu, pr);
    Eigen::VectorXd grad(2 * p);
    grad.head(p) = design.x.transpose() * d.g_eta - spen * coef.head(p);
    grad.tail(p) = design.x.transpose() * d.g_zeta - spen * coef.tail(p);
    Eigen::MatrixXd h = penalized(joint_information(d));
    // Levenberg damping when the observed information is not positive definite.
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    double damp = 1e-8 * h.diagonal().cwiseAbs().maxCoeff();
    while (llt.info() != Eigen::Success) {
      h.diagonal().array() += damp;
      damp *= 10.0;
      llt.compute(h);
      if (damp > 1e30) throw FitError("zero-inflated Newton step failed", trace);
    }
    Eigen::VectorXd step = llt.solve(grad);
    Eigen::VectorXd mu_new, pr_new;
    double pll_new = pll;
    for (int half = 0; half < 40; ++half) {
      pll_new = evaluate(coef + step, mu_new, pr_new);
      if (std::isfinite(pll_new) && pll_new >= pll - 1e-12 * std::abs(pll)) break;
      step *= 0.5;
    }
    coef += step;
    mu = mu_new;
    pr = pr_new;
    change = std::abs(pll_new - pll) / (0.1 + std::abs(pll_new));
    pll = pll_new;
    trace.push_back(zip_loglik(y, mu, pr));
    if ((pr.array() > 1.0 - 1e-6).all()) throw FitError("degenerate zero-inflated fit: π → 1 everywhere", trace);
    if (change < opt.tolerance && it > 0) {
      converged = true;
      break;
    }
  }
  if (!converged) throw FitError("zero-inflated fit did not converge", trace);

  const auto d = detail::zip_derivatives(y, mu, pr);
  const Eigen::MatrixXd info = joint_information(d);
  const Eigen::MatrixXd h = penalized(info);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
  Eigen::MatrixXd hinv = ldlt.solve(Eigen::MatrixXd::Identity(2 * p, 2 * p));
  hinv = 0.5 * (hinv + hinv.transpose()).eval();
  const Eigen::VectorXd edf = (hinv * info).diagonal();

  count.beta = coef.head(p);
  count.eta = design.x * count.beta;
  count.mu = mu;
  count.hinv = hinv.topLeftCorner(p, p);
  count.a = info.topLeftCorner(p, p);
  count.lambda = lambda;
  auto fit = detail::make_fit(design, Family::zip(), count, y);
  fit.beta_zero = coef.tail(p);
  fit.pi = pr;
  fit.posterior_cov = hinv.topLeftCorner(p, p);
  fit.posterior_cov_zero = hinv.bottomRightCorner(p, p);
  const Eigen::VectorXd edf_count = edf.head(p), edf_zero = edf.tail(p);
  detail::fill_terms(fit, design, edf_count, &edf_zero);
  fit.edf_total = edf.sum();
  fit.log_likelihood = zip_loglik(y, mu, pr);
  fit.deviance = -2.0 * fit.log_likelihood;
  fit.iterations = iterations;
  fit.final_change = change;
  detail::finish(fit);
  return fit;
}

// Fits one family with its default smoothing-parameter and θ handling.
inline FittedGam fit_family(const Design& design, const Eigen::VectorXd& y, const Family& family,
                            const FitOptions& opt = {}) {
  switch (family.kind) {
    case FamilyKind::zip: return fit_zip(design, y, opt);
    case FamilyKind::negative_binomial:
      if (opt.fixed_theta) return optimize_lambda(design, y, Family::negative_binomial(*opt.fixed_theta), opt);
      return estimate_theta(design, y, opt);
    default: return optimize_lambda(design, y, family, opt);
  }
}

// Full pipeline from minute rows: binning, covariates, design and fit.
inline FittedGam fit_model(const ModelSpec& spec, const std::vector<MinuteObservation>& rows,
                           const FitOptions& opt = {}) {
  const auto frame = make_covariate_frame(rows, spec.binning);
  const auto design = assemble_design(spec, frame);
  const auto y = response_vector(rows, spec.response);
  Family family;
  family.kind = spec.family;
  auto fit = fit_family(design, y, family, opt);
  fit.spec = spec;
  fit.spec_hash = spec_hash(spec);
  return fit;
}

// Penalized log-likelihood in deviance units: ℓ(β) - ½ βᵀS_λβ for the count
// families, -½(RSS + βᵀS_λβ) for the Gaussian ones. For ZIP, theta holds the
// stacked (β, γ) vector and both components carry the same penalty.
inline double penalized_loglik(const FittedGam& fit, const Design& design, const Eigen::VectorXd& y,
                               const Eigen::VectorXd& coef) {
  const auto pens = detail::penalty_blocks(design);
  const auto p = design.cols();
  if (fit.family.kind == FamilyKind::zip) {
    const Eigen::VectorXd b = coef.head(p), g = coef.tail(p);
    const Eigen::VectorXd mu = (design.x * b).array().exp();
    const Eigen::VectorXd pi = (1.0 / (1.0 + (-(design.x * g).array()).exp())).matrix();
    return zip_loglik(y, mu, pi) - 0.5 * detail::penalty_value(pens, fit.lambda, b) -
           0.5 * detail::penalty_value(pens, fit.lambda, g);
  }
  const auto fam = detail::working_family(fit.family);
  const Eigen::VectorXd eta = design.x * coef;
  Eigen::VectorXd mu(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) mu(i) = fam.linkinv(eta(i));
  const double pen = detail::penalty_value(pens, fit.lambda, coef);
  if (fit.family.gaussian()) return -0.5 * (detail::deviance(fam, y, mu, nullptr) + pen);
  return detail::log_likelihood(fam, y, mu, 1.0) - 0.5 * pen;
}

// Analytic gradient of penalized_loglik.
inline Eigen::VectorXd penalized_score(const FittedGam& fit, const Design& design, const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& coef) {
  const auto pens = detail::penalty_blocks(design);
  const auto p = design.cols();
  auto penalty_grad = [&](const Eigen::VectorXd& b) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    for (std::size_t k = 0; k < pens.size(); ++k) {
      const auto w = pens[k].s.rows();
      g.segment(pens[k].offset, w) += fit.lambda(static_cast<Eigen::Index>(k)) * pens[k].s * b.segment(pens[k].offset, w);
    }
    return g;
  };
  if (fit.family.kind == FamilyKind::zip) {
    const Eigen::VectorXd b = coef.head(p), g = coef.tail(p);
    const Eigen::VectorXd mu = (design.x * b).array().exp();
    const Eigen::VectorXd pi = (1.0 / (1.0 + (-(design.x * g).array()).exp())).matrix();
    Eigen::VectorXd rb(y.size()), rg(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (y(i) == 0.0) {
        const double e = std::exp(-mu(i));
        const double d = pi(i) + (1.0 - pi(i)) * e;
        rb(i) = -(1.0 - pi(i)) * e * mu(i) / d;
        rg(i) = (1.0 - e) * pi(i) * (1.0 - pi(i)) / d;
      } else {
        rb(i) = y(i) - mu(i);
        rg(i) = -pi(i);
      }
    }
    Eigen::VectorXd out(2 * p);
    out.head(p) = design.x.transpose() * rb - penalty_grad(b);
    out.tail(p) = design.x.transpose() * rg - penalty_grad(g);
    return out;
  }
  const auto fam = detail::working_family(fit.family);
  const Eigen::VectorXd eta = design.x * coef;
  Eigen::VectorXd r(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double mu = fam.linkinv(eta(i));
    const double g = fam.mu_eta(mu);
    r(i) = (y(i) - mu) * g / fam.variance(mu);
  }
  return design.x.transpose() * r - penalty_grad(coef);
}

struct Prediction {
  Eigen::VectorXd eta;
  Eigen::VectorXd mu;    // count mean
  Eigen::VectorXd pi;    // ZIP inflation probability (empty otherwise)
  Eigen::VectorXd rate;  // expected event count per row
  std::vector<std::size_t> unseen_rows;  // rows with an unseen random-effect level
};

// Rowwise predictions; random-effect levels not seen in training contribute 0.
inline Prediction predict(const FittedGam& fit, const CovariateFrame& frame) {
  Prediction out;
  const Eigen::MatrixXd x = evaluate_design(fit.bases, frame, &out.unseen_rows);
  if (x.cols() != fit.beta.size()) throw PreconditionError("design width does not match the fitted model");
  out.eta = x * fit.beta;
  const auto fam = detail::working_family(fit.family);
  out.mu = out.eta.unaryExpr([&](double e) { return fam.linkinv(e); });
  out.rate = out.mu;
  if (fit.family.kind == FamilyKind::zip) {
    const Eigen::VectorXd g = x * fit.beta_zero;
    out.pi = g.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    out.rate = (1.0 - out.pi.array()).matrix().cwiseProduct(out.mu);
  }
  return out;
}

inline Prediction predict(const FittedGam& fit, const std::vector<MinuteObservation>& rows) {
  return predict(fit, make_covariate_frame(rows, fit.spec.binning));
}

// Sum of rowwise predictions per game (keyed by game_id, and team when given).
inline std::map<std::string, double> aggregate_by_game(const std::vector<MinuteObservation>& rows,
                                                       const Eigen::VectorXd& values, bool per_team = true) {
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto key = per_team ? rows[i].game_id + "|" + rows[i].team : rows[i].game_id;
    out[key] += values(static_cast<Eigen::Index>(i));
  }
  return out;
}

inline json to_json(const FittedGam& fit) {
  json terms = json::array();
  for (const auto& t : fit.terms) {
    terms.push_back({{"label", t.label},
                     {"kind", to_string(t.kind)},
                     {"first_column", t.first_column},
                     {"width", t.width},
                     {"edf", t.edf},
                     {"edf_zero", t.edf_zero},
                     {"lambda_slots", t.lambda_slots}});
  }
  json bases = json::array();
  for (const auto& b : fit.bases) bases.push_back(to_json(b));
  json j{{"spec_hash", fit.spec_hash},
         {"spec", to_json(fit.spec)},
         {"family", to_string(fit.family.kind)},
         {"theta", std::isfinite(fit.family.theta) ? json(fit.family.theta) : json(nullptr)},
         {"theta_estimated", fit.theta_estimated},
         {"effectively_poisson", fit.effectively_poisson},
         {"beta", to_json(fit.beta)},
         {"lambda", to_json(fit.lambda)},
         {"lambda_at_boundary", fit.lambda_at_boundary},
         {"edf_total", fit.edf_total},
         {"terms", terms},
         {"bases", bases},
         {"scale", fit.scale},
         {"deviance", fit.deviance},
         {"log_likelihood", fit.log_likelihood},
         {"aic", fit.aic},
         {"bic", fit.bic},
         {"n", fit.n},
         {"posterior_cov", to_json(fit.posterior_cov)},
         {"iterations", fit.iterations},
         {"final_change", fit.final_change},
         {"warnings", fit.warnings}};
  if (fit.family.kind == FamilyKind::zip) {
    j["beta_zero"] = to_json(fit.beta_zero);
    j["posterior_cov_zero"] = to_json(fit.posterior_cov_zero);
  }
  return j;
}

inline FittedGam fitted_gam_from_json(const json& j) {
  FittedGam fit;
  fit.spec_hash = j.at("spec_hash").get<std::string>();
  fit.spec = model_spec_from_json(j.at("spec"));
  fit.family.kind = parse_family(j.at("family").get<std::string>());
  if (!j.at("theta").is_null()) fit.family.theta = j.at("theta").get<double>();
  fit.theta_estimated = j.value("theta_estimated", false);
  fit.effectively_poisson = j.value("effectively_poisson", false);
  fit.beta = vector_from_json(j.at("beta"));
  fit.lambda = vector_from_json(j.at("lambda"));
  fit.lambda_at_boundary = j.value("lambda_at_boundary", std::vector<bool>{});
  fit.edf_total = j.at("edf_total").get<double>();
  for (const auto& t : j.at("terms")) {
    TermSummary s;
    s.label = t.at("label").get<std::string>();
    s.kind = parse_term_kind(t.at("kind").get<std::string>());
    s.first_column = t.at("first_column").get<Eigen::Index>();
    s.width = t.at("width").get<Eigen::Index>();
    s.edf = t.at("edf").get<double>();
    s.edf_zero = t.value("edf_zero", 0.0);
    s.lambda_slots = t.value("lambda_slots", std::vector<std::size_t>{});
    fit.terms.push_back(std::move(s));
  }
  for (const auto& b : j.at("bases")) fit.bases.push_back(term_basis_from_json(b));
  fit.scale = j.at("scale").get<double>();
  fit.deviance = j.at("deviance").get<double>();
  fit.log_likelihood = j.at("log_likelihood").get<double>();
  fit.aic = j.at("aic").get<double>();
  fit.bic = j.at("bic").get<double>();
  fit.n = j.at("n").get<std::size_t>();
  fit.posterior_cov = matrix_from_json(j.at("posterior_cov"));
  fit.iterations = j.value("iterations", 0);
  fit.final_change = j.value("final_change", 0.0);
  fit.warnings = j.value("warnings", std::vector<std::string>{});
  if (j.contains("beta_zero")) {
    fit.beta_zero = vector_from_json(j.at("beta_zero"));
    fit.posterior_cov_zero = matrix_from_json(j.at("posterior_cov_zero"));
  }
  return fit;
}

}  // namespace ctxadjust

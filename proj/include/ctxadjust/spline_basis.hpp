#pragma once

// Design-matrix blocks and penalties for every term type of the context model.
//
// Penalized smooths use a cubic regression spline parameterized by its values
// at the knots; the curvature penalty is the integrated squared second
// derivative. Identifiability constraints are absorbed by a Householder
// reparameterization so that the penalized least-squares problem stays
// unconstrained.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctxadjust/errors.hpp"
#include "ctxadjust/serialization.hpp"

namespace ctxadjust {

enum class TermKind { penalized_cubic, natural_cubic_manual_knots, dummy, random_effect, tensor_interaction };

inline std::string to_string(TermKind k) {
  switch (k) {
    case TermKind::penalized_cubic: return "penalized_cubic";
    case TermKind::natural_cubic_manual_knots: return "natural_cubic_manual_knots";
    case TermKind::dummy: return "dummy";
    case TermKind::random_effect: return "random_effect";
    case TermKind::tensor_interaction: return "tensor_interaction";
  }
  return "unknown";
}

inline TermKind parse_term_kind(const std::string& s) {
  for (auto k : {TermKind::penalized_cubic, TermKind::natural_cubic_manual_knots, TermKind::dummy,
                 TermKind::random_effect, TermKind::tensor_interaction}) {
    if (to_string(k) == s) return k;
  }
  throw InputError("unknown term kind '" + s + "'");
}

// Column-oriented covariates. Categorical columns keep integer codes into a
// sorted level list.
struct Covariate {
  bool categorical = false;
  std::vector<double> values;
  std::vector<int> codes;
  std::vector<std::string> levels;

  std::size_t size() const { return categorical ? codes.size() : values.size(); }
};

class CovariateFrame {
 public:
  CovariateFrame() = default;
  explicit CovariateFrame(std::size_t rows) : rows_(rows) {}

  std::size_t rows() const { return rows_; }

  void add_numeric(const std::string& name, std::vector<double> values) {
    check_size(name, values.size());
    Covariate c;
    c.values = std::move(values);
    columns_[name] = std::move(c);
  }

  void add_categorical(const std::string& name, const std::vector<std::string>& labels) {
    check_size(name, labels.size());
    Covariate c;
    c.categorical = true;
    c.levels = labels;
    std::sort(c.levels.begin(), c.levels.end());
    c.levels.erase(std::unique(c.levels.begin(), c.levels.end()), c.levels.end());
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < c.levels.size(); ++i) index[c.levels[i]] = static_cast<int>(i);
    c.codes.reserve(labels.size());
    for (const auto& l : labels) c.codes.push_back(index[l]);
    columns_[name] = std::move(c);
  }

  bool has(const std::string& name) const { return columns_.contains(name); }

  const Covariate& get(const std::string& name) const {
    const auto it = columns_.find(name);
    if (it == columns_.end()) throw TermError("unknown covariate '" + name + "'");
    return it->second;
  }

  const std::vector<double>& numeric(const std::string& name) const {
    const auto& c = get(name);
    if (c.categorical) throw TermError("covariate '" + name + "' is categorical, numeric expected");
    return c.values;
  }

  const Covariate& categorical(const std::string& name) const {
    const auto& c = get(name);
    if (!c.categorical) throw TermError("covariate '" + name + "' is numeric, categorical expected");
    return c;
  }

 private:
  void check_size(const std::string& name, std::size_t n) {
    if (columns_.empty() && rows_ == 0) rows_ = n;
    if (n != rows_) throw InputError("covariate '" + name + "' has " + std::to_string(n) + " rows, expected " +
                                     std::to_string(rows_));
  }

  std::size_t rows_ = 0;
  std::map<std::string, Covariate> columns_;
};

namespace detail {

inline std::vector<double> distinct_sorted(const std::vector<double>& x) {
  std::vector<double> u(x);
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  return u;
}

// Type-7 quantiles of the distinct values at probabilities j/(k-1).
inline std::vector<double> quantile_knots(const std::vector<double>& distinct, int k) {
  std::vector<double> knots(static_cast<std::size_t>(k));
  const double m = static_cast<double>(distinct.size() - 1);
  for (int j = 0; j < k; ++j) {
    const double pos = m * j / (k - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, distinct.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    knots[static_cast<std::size_t>(j)] = distinct[lo] + frac * (distinct[hi] - distinct[lo]);
  }
  knots.front() = distinct.front();
  knots.back() = distinct.back();
  return knots;
}

// Null-space basis of the sum-to-zero constraint c^T beta = 0.
inline Eigen::MatrixXd centering_transform(const Eigen::VectorXd& column_sums) {
  const auto k = column_sums.size();
  const Eigen::MatrixXd c = column_sums;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(c);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(k, k);
  return q.rightCols(k - 1);
}

inline double frobenius_scale(const Eigen::MatrixXd& x, const Eigen::MatrixXd& s) {
  const double sn = s.norm();
  if (sn == 0.0) return 1.0;
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(x.cols(), x.cols());
  xtx.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());
  xtx.triangularView<Eigen::StrictlyUpper>() = xtx.transpose();
  const double xn = xtx.norm();
  return xn > 0.0 ? xn / sn : 1.0;
}

}  // namespace detail

// Cubic regression spline with knot-value parameterization. With k knots the
// raw basis has k columns; beyond the boundary knots it continues linearly.
class CubicRegressionSpline {
 public:
  CubicRegressionSpline() = default;

  explicit CubicRegressionSpline(std::vector<double> knots) : knots_(std::move(knots)) {
    if (knots_.size() < 2) throw TermError("a cubic spline needs at least 2 knots");
    for (std::size_t i = 1; i < knots_.size(); ++i) {
      if (!(knots_[i] > knots_[i - 1])) throw TermError("knots must be strictly increasing");
    }
    build();
  }

  int k() const { return static_cast<int>(knots_.size()); }
  const std::vector<double>& knots() const { return knots_; }
  const Eigen::MatrixXd& penalty() const { return penalty_; }
  // Maps knot values to second derivatives at the knots.
  const Eigen::MatrixXd& second_derivative_map() const { return f_; }

  void row(double x, double* out) const {
    const int k = this->k();
    std::fill(out, out + k, 0.0);
    const auto h = [&](int j) { return knots_[static_cast<std::size_t>(j + 1)] - knots_[static_cast<std::size_t>(j)]; };
    if (x < knots_.front()) {
      const double hh = h(0), d = x - knots_.front();
      out[0] += 1.0 - d / hh;
      out[1] += d / hh;
      for (int c = 0; c < k; ++c) out[c] += d * (-hh / 3.0 * f_(0, c) - hh / 6.0 * f_(1, c));
      return;
    }
    if (x > knots_.back()) {
      const double hh = h(k - 2), d = x - knots_.back();
      out[k - 1] += 1.0 + d / hh;
      out[k - 2] += -d / hh;
      for (int c = 0; c < k; ++c) out[c] += d * (hh / 6.0 * f_(k - 2, c) + hh / 3.0 * f_(k - 1, c));
      return;
    }
    auto it = std::upper_bound(knots_.begin(), knots_.end(), x);
    int j = static_cast<int>(it - knots_.begin()) - 1;
    j = std::clamp(j, 0, k - 2);
    const double hh = h(j);
    const double xl = knots_[static_cast<std::size_t>(j)], xr = knots_[static_cast<std::size_t>(j + 1)];
    const double am = (xr - x) / hh, ap = (x - xl) / hh;
    const double cm = ((xr - x) * (xr - x) * (xr - x) / hh - hh * (xr - x)) / 6.0;
    const double cp = ((x - xl) * (x - xl) * (x - xl) / hh - hh * (x - xl)) / 6.0;
    out[j] += am;
    out[j + 1] += ap;
    for (int c = 0; c < k; ++c) out[c] += cm * f_(j, c) + cp * f_(j + 1, c);
  }

  Eigen::MatrixXd evaluate(const std::vector<double>& x) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(static_cast<Eigen::Index>(x.size()), k());
    for (std::size_t i = 0; i < x.size(); ++i) row(x[i], m.row(static_cast<Eigen::Index>(i)).data());
    return m;
  }

 private:
  void build() {
    const int k = this->k();
    f_ = Eigen::MatrixXd::Zero(k, k);
    penalty_ = Eigen::MatrixXd::Zero(k, k);
    if (k < 3) return;
    std::vector<double> h(static_cast<std::size_t>(k - 1));
    for (int j = 0; j < k - 1; ++j) h[static_cast<std::size_t>(j)] = knots_[static_cast<std::size_t>(j + 1)] - knots_[static_cast<std::size_t>(j)];
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(k - 2, k);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(k - 2, k - 2);
    for (int i = 0; i < k - 2; ++i) {
      const double h0 = h[static_cast<std::size_t>(i)], h1 = h[static_cast<std::size_t>(i + 1)];
      d(i, i) = 1.0 / h0;
      d(i, i + 1) = -1.0 / h0 - 1.0 / h1;
      d(i, i + 2) = 1.0 / h1;
      b(i, i) = (h0 + h1) / 3.0;
      if (i + 1 < k - 2) {
        b(i, i + 1) = h1 / 6.0;
        b(i + 1, i) = h1 / 6.0;
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(b);
    const Eigen::MatrixXd binv_d = ldlt.solve(d);
    f_.block(1, 0, k - 2, k) = binv_d;
    penalty_ = d.transpose() * binv_d;
    penalty_ = 0.5 * (penalty_ + penalty_.transpose()).eval();
  }

  std::vector<double> knots_;
  Eigen::MatrixXd f_;
  Eigen::MatrixXd penalty_;
};

// Declarative term description.
struct SmoothSpec {
  std::string covariate;
  TermKind kind = TermKind::penalized_cubic;
  int k = 10;
  std::vector<double> knots;             // natural_cubic_manual_knots
  std::string by;                        // by-smooth conditioning covariate
  std::optional<double> by_level;        // rows with by == by_level keep the smooth
  std::optional<double> level;           // dummy: indicator of covariate == level; raw 0/1 otherwise
  std::string covariate2;                // tensor_interaction
  int k2 = 5;

  std::string label() const {
    switch (kind) {
      case TermKind::dummy: return level ? covariate + "==" + fmt(*level) : covariate;
      case TermKind::random_effect: return "s(" + covariate + ",re)";
      case TermKind::tensor_interaction: return "ti(" + covariate + "," + covariate2 + ")";
      case TermKind::natural_cubic_manual_knots: return "ns(" + covariate + ")";
      case TermKind::penalized_cubic:
        return by.empty() ? "s(" + covariate + ")" : "s(" + covariate + "|" + by + "=" + fmt(by_level.value_or(1)) + ")";
    }
    return covariate;
  }

  bool operator==(const SmoothSpec&) const = default;

 private:
  static std::string fmt(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  }
};

inline json to_json(const SmoothSpec& s) {
  json j{{"kind", to_string(s.kind)}, {"covariate", s.covariate}};
  switch (s.kind) {
    case TermKind::penalized_cubic:
      j["k"] = s.k;
      if (!s.by.empty()) {
        j["by"] = s.by;
        j["by_level"] = s.by_level.value_or(1.0);
      }
      break;
    case TermKind::natural_cubic_manual_knots: j["knots"] = s.knots; break;
    case TermKind::dummy:
      if (s.level) j["level"] = *s.level;
      break;
    case TermKind::random_effect: break;
    case TermKind::tensor_interaction:
      j["covariate2"] = s.covariate2;
      j["k"] = s.k;
      j["k2"] = s.k2;
      break;
  }
  return j;
}

inline SmoothSpec smooth_spec_from_json(const json& j) {
  SmoothSpec s;
  s.kind = parse_term_kind(j.at("kind").get<std::string>());
  s.covariate = j.at("covariate").get<std::string>();
  s.k = j.value("k", s.kind == TermKind::tensor_interaction ? 5 : 10);
  if (j.contains("knots")) s.knots = j.at("knots").get<std::vector<double>>();
  if (j.contains("by")) {
    s.by = j.at("by").get<std::string>();
    s.by_level = j.value("by_level", 1.0);
  }
  if (j.contains("level")) s.level = j.at("level").get<double>();
  if (j.contains("covariate2")) s.covariate2 = j.at("covariate2").get<std::string>();
  s.k2 = j.value("k2", 5);
  if (s.kind == TermKind::penalized_cubic && s.k < 3) throw TermError("basis dimension k must be ≥ 3");
  if (s.kind == TermKind::tensor_interaction && (s.covariate2.empty() || s.covariate2 == s.covariate)) {
    throw TermError("tensor interaction needs two distinct covariates");
  }
  return s;
}

// Everything needed to evaluate a term on new rows.
struct TermBasis {
  SmoothSpec spec;
  CubicRegressionSpline spline;   // smooth / first margin
  Eigen::MatrixXd z;              // centering transform (k x k-1), empty when uncentered
  CubicRegressionSpline spline2;  // second margin
  Eigen::MatrixXd z2;
  Eigen::RowVectorXd column_means;  // tensor: subtracted after the row-wise product
  std::vector<std::string> levels;  // random effect

  int columns() const {
    switch (spec.kind) {
      case TermKind::dummy: return 1;
      case TermKind::random_effect: return static_cast<int>(levels.size());
      case TermKind::tensor_interaction: return static_cast<int>(z.cols() * z2.cols());
      default: return static_cast<int>(z.cols());
    }
  }
};

struct TermBlock {
  std::string label;
  TermKind kind = TermKind::penalized_cubic;
  Eigen::MatrixXd columns;                 // n x k_j (cleared once copied into a design)
  std::vector<Eigen::MatrixXd> penalties;  // one per smoothing parameter, already scaled
  bool centered = false;
  Eigen::Index first_column = 0;
  Eigen::Index width = 0;
  TermBasis basis;
  std::vector<std::string> warnings;

  // Sum of the penalties at unit smoothing parameters.
  Eigen::MatrixXd penalty() const {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(width, width);
    for (const auto& p : penalties) s += p;
    return s;
  }
};

namespace detail {

inline void scale_penalties(TermBlock& block) {
  for (auto& s : block.penalties) s *= frobenius_scale(block.columns, s);
}

inline bool has_nonzero(const Eigen::MatrixXd& s) { return s.cwiseAbs().maxCoeff() > 0.0; }

// Knots, uncentered columns and raw penalty for a penalized smooth on x.
inline CubicRegressionSpline make_cr(const std::vector<double>& x, int k, std::vector<std::string>& warnings,
                                     const std::string& name) {
  if (k < 3) throw TermError(name + ": basis dimension k must be ≥ 3");
  const auto distinct = distinct_sorted(x);
  if (distinct.size() < 3) {
    throw TermError(name + ": needs at least 3 distinct values, found " + std::to_string(distinct.size()));
  }
  if (static_cast<int>(distinct.size()) < k) {
    warnings.push_back(name + ": k reduced from " + std::to_string(k) + " to " + std::to_string(distinct.size()) +
                       " (distinct values)");
    k = static_cast<int>(distinct.size());
  }
  return CubicRegressionSpline(quantile_knots(distinct, k));
}

}  // namespace detail

inline TermBlock build_cubic_smooth(const std::vector<double>& values, int k, const std::string& name = "s(x)") {
  TermBlock block;
  block.label = name;
  block.kind = TermKind::penalized_cubic;
  block.basis.spec.kind = TermKind::penalized_cubic;
  block.basis.spec.k = k;
  block.basis.spline = detail::make_cr(values, k, block.warnings, name);
  const Eigen::MatrixXd raw = block.basis.spline.evaluate(values);
  block.basis.z = detail::centering_transform(raw.colwise().sum().transpose());
  block.columns = raw * block.basis.z;
  block.penalties.push_back(block.basis.z.transpose() * block.basis.spline.penalty() * block.basis.z);
  block.centered = true;
  block.width = block.columns.cols();
  detail::scale_penalties(block);
  return block;
}

inline TermBlock build_natural_cubic(const std::vector<double>& values, const std::vector<double>& knots,
                                     const std::string& name = "ns(x)") {
  if (knots.size() < 2) throw TermError(name + ": at least 2 knots required");
  TermBlock block;
  block.label = name;
  block.kind = TermKind::natural_cubic_manual_knots;
  block.basis.spec.kind = TermKind::natural_cubic_manual_knots;
  block.basis.spec.knots = knots;
  block.basis.spline = CubicRegressionSpline(knots);
  const Eigen::MatrixXd raw = block.basis.spline.evaluate(values);
  block.basis.z = detail::centering_transform(raw.colwise().sum().transpose());
  block.columns = raw * block.basis.z;
  block.centered = true;
  block.width = block.columns.cols();
  return block;
}

inline TermBlock build_random_effect(const Covariate& cov, const std::string& name = "s(g,re)") {
  if (!cov.categorical) throw TermError(name + ": random effect needs a categorical covariate");
  std::vector<char> used(cov.levels.size(), 0);
  for (int c : cov.codes) used[static_cast<std::size_t>(c)] = 1;
  TermBlock block;
  block.label = name;
  block.kind = TermKind::random_effect;
  block.basis.spec.kind = TermKind::random_effect;
  std::vector<int> remap(cov.levels.size(), -1);
  for (std::size_t l = 0; l < cov.levels.size(); ++l) {
    if (used[l]) {
      remap[l] = static_cast<int>(block.basis.levels.size());
      block.basis.levels.push_back(cov.levels[l]);
    }
  }
  const auto m = static_cast<Eigen::Index>(block.basis.levels.size());
  if (m < 2) throw TermError(name + ": random effect needs at least 2 levels");
  block.columns = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cov.codes.size()), m);
  for (std::size_t i = 0; i < cov.codes.size(); ++i) block.columns(static_cast<Eigen::Index>(i), remap[static_cast<std::size_t>(cov.codes[i])]) = 1.0;
  block.penalties.push_back(Eigen::MatrixXd::Identity(m, m));
  block.width = m;
  detail::scale_penalties(block);
  return block;
}

inline TermBlock build_random_effect(const std::vector<std::string>& labels, const std::string& name = "s(g,re)") {
  CovariateFrame f;
  f.add_categorical("g", labels);
  return build_random_effect(f.get("g"), name);
}

inline TermBlock build_by_smooth(const std::vector<double>& values, const std::vector<bool>& by, int k,
                                 const std::string& name = "s(x|by)") {
  if (by.size() != values.size()) throw TermError(name + ": indicator length mismatch");
  std::vector<double> inside;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (by[i]) inside.push_back(values[i]);
  if (inside.empty()) throw TermError(name + ": by-indicator is false for every row");
  TermBlock block;
  block.label = name;
  block.kind = TermKind::penalized_cubic;
  block.basis.spec.kind = TermKind::penalized_cubic;
  block.basis.spec.k = k;
  block.basis.spline = detail::make_cr(inside, k, block.warnings, name);
  Eigen::MatrixXd raw = block.basis.spline.evaluate(values);
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!by[i]) raw.row(static_cast<Eigen::Index>(i)).setZero();
  block.basis.z = detail::centering_transform(raw.colwise().sum().transpose());
  block.columns = raw * block.basis.z;
  block.penalties.push_back(block.basis.z.transpose() * block.basis.spline.penalty() * block.basis.z);
  block.centered = true;
  block.width = block.columns.cols();
  detail::scale_penalties(block);
  return block;
}

namespace detail {

// Centered marginal for a tensor interaction. Two-valued covariates get a
// linear (2-knot) margin with no penalty.
inline void tensor_margin(const std::vector<double>& x, int k, CubicRegressionSpline& spline, Eigen::MatrixXd& z,
                          Eigen::MatrixXd& centered, Eigen::MatrixXd& penalty, std::vector<std::string>& warnings,
                          const std::string& name) {
  const auto distinct = distinct_sorted(x);
  if (distinct.size() < 2) throw TermError(name + ": margin is constant");
  if (distinct.size() == 2) {
    spline = CubicRegressionSpline(distinct);
  } else {
    spline = make_cr(x, k, warnings, name);
  }
  const Eigen::MatrixXd raw = spline.evaluate(x);
  z = centering_transform(raw.colwise().sum().transpose());
  centered = raw * z;
  penalty = z.transpose() * spline.penalty() * z;
}

inline Eigen::MatrixXd row_kronecker(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.cols(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) out.col(i * b.cols() + j) = a.col(i).cwiseProduct(b.col(j));
  return out;
}

inline Eigen::MatrixXd kronecker(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

}  // namespace detail

// Interaction-only tensor product: margins are centered before the product, so
// the block carries no main effects. Besides one curvature penalty per
// penalized margin, the unpenalized (bilinear) directions get their own ridge
// penalty so the whole interaction can shrink to zero.
inline TermBlock build_tensor_interaction(const std::vector<double>& x1, const std::vector<double>& x2, int k1,
                                          int k2, const std::string& name = "ti(x1,x2)") {
  if (x1.size() != x2.size()) throw TermError(name + ": covariate length mismatch");
  TermBlock block;
  block.label = name;
  block.kind = TermKind::tensor_interaction;
  block.basis.spec.kind = TermKind::tensor_interaction;
  block.basis.spec.k = k1;
  block.basis.spec.k2 = k2;
  Eigen::MatrixXd m1, m2, s1, s2;
  detail::tensor_margin(x1, k1, block.basis.spline, block.basis.z, m1, s1, block.warnings, name);
  detail::tensor_margin(x2, k2, block.basis.spline2, block.basis.z2, m2, s2, block.warnings, name);
  block.columns = detail::row_kronecker(m1, m2);
  block.basis.column_means = block.columns.colwise().mean();
  block.columns.rowwise() -= block.basis.column_means;
  const Eigen::MatrixXd i1 = Eigen::MatrixXd::Identity(m1.cols(), m1.cols());
  const Eigen::MatrixXd i2 = Eigen::MatrixXd::Identity(m2.cols(), m2.cols());
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(block.columns.cols(), block.columns.cols());
  if (detail::has_nonzero(s1)) {
    block.penalties.push_back(detail::kronecker(s1, i2));
    total += block.penalties.back() / block.penalties.back().norm();
  }
  if (detail::has_nonzero(s2)) {
    block.penalties.push_back(detail::kronecker(i1, s2));
    total += block.penalties.back() / block.penalties.back().norm();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(total);
  const double tol = 1e-8 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  std::vector<Eigen::Index> null_dirs;
  for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i)
    if (eig.eigenvalues()(i) < tol) null_dirs.push_back(i);
  if (!null_dirs.empty()) {
    Eigen::MatrixXd u(total.rows(), static_cast<Eigen::Index>(null_dirs.size()));
    for (std::size_t c = 0; c < null_dirs.size(); ++c) u.col(static_cast<Eigen::Index>(c)) = eig.eigenvectors().col(null_dirs[c]);
    block.penalties.push_back(u * u.transpose());
  }
  block.centered = true;
  block.width = block.columns.cols();
  detail::scale_penalties(block);
  return block;
}

// Builds the block for a spec against a covariate frame.
inline TermBlock build_term(const SmoothSpec& spec, const CovariateFrame& frame) {
  TermBlock block;
  const auto label = spec.label();
  switch (spec.kind) {
    case TermKind::penalized_cubic:
      if (spec.by.empty()) {
        block = build_cubic_smooth(frame.numeric(spec.covariate), spec.k, label);
      } else {
        const auto& by = frame.numeric(spec.by);
        std::vector<bool> ind(by.size());
        const double lvl = spec.by_level.value_or(1.0);
        for (std::size_t i = 0; i < by.size(); ++i) ind[i] = by[i] == lvl;
        block = build_by_smooth(frame.numeric(spec.covariate), ind, spec.k, label);
      }
      break;
    case TermKind::natural_cubic_manual_knots:
      block = build_natural_cubic(frame.numeric(spec.covariate), spec.knots, label);
      break;
    case TermKind::random_effect:
      block = build_random_effect(frame.categorical(spec.covariate), label);
      break;
    case TermKind::tensor_interaction:
      if (spec.covariate == spec.covariate2) throw PreconditionError(label + ": interaction of a covariate with itself");
      block = build_tensor_interaction(frame.numeric(spec.covariate), frame.numeric(spec.covariate2), spec.k, spec.k2,
                                       label);
      break;
    case TermKind::dummy: {
      const auto& x = frame.numeric(spec.covariate);
      block.label = label;
      block.kind = TermKind::dummy;
      block.columns.resize(static_cast<Eigen::Index>(x.size()), 1);
      for (std::size_t i = 0; i < x.size(); ++i)
        block.columns(static_cast<Eigen::Index>(i), 0) = spec.level ? (x[i] == *spec.level ? 1.0 : 0.0) : x[i];
      if (block.columns.size() > 0 && block.columns.maxCoeff() == block.columns.minCoeff()) {
        throw TermError(label + ": dummy column is constant");
      }
      block.width = 1;
      break;
    }
  }
  block.basis.spec = spec;
  block.kind = spec.kind;
  block.label = label;
  return block;
}

// Evaluates a term on new rows. Rows whose random-effect level was not seen
// in training get a zero row and are listed in `unseen_rows`.
inline Eigen::MatrixXd evaluate_term(const TermBasis& basis, const CovariateFrame& frame,
                                     std::vector<std::size_t>* unseen_rows = nullptr) {
  const auto& spec = basis.spec;
  const auto n = static_cast<Eigen::Index>(frame.rows());
  switch (spec.kind) {
    case TermKind::penalized_cubic:
    case TermKind::natural_cubic_manual_knots: {
      const auto& x = frame.numeric(spec.covariate);
      Eigen::MatrixXd m = basis.spline.evaluate(x) * basis.z;
      if (!spec.by.empty()) {
        const auto& by = frame.numeric(spec.by);
        const double lvl = spec.by_level.value_or(1.0);
        for (Eigen::Index i = 0; i < n; ++i)
          if (by[static_cast<std::size_t>(i)] != lvl) m.row(i).setZero();
      }
      return m;
    }
    case TermKind::dummy: {
      const auto& x = frame.numeric(spec.covariate);
      Eigen::MatrixXd m(n, 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double v = x[static_cast<std::size_t>(i)];
        m(i, 0) = spec.level ? (v == *spec.level ? 1.0 : 0.0) : v;
      }
      return m;
    }
    case TermKind::random_effect: {
      const auto& cov = frame.categorical(spec.covariate);
      std::vector<int> remap(cov.levels.size(), -1);
      for (std::size_t l = 0; l < cov.levels.size(); ++l) {
        const auto it = std::lower_bound(basis.levels.begin(), basis.levels.end(), cov.levels[l]);
        if (it != basis.levels.end() && *it == cov.levels[l]) remap[l] = static_cast<int>(it - basis.levels.begin());
      }
      Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(basis.levels.size()));
      for (Eigen::Index i = 0; i < n; ++i) {
        const int c = remap[static_cast<std::size_t>(cov.codes[static_cast<std::size_t>(i)])];
        if (c >= 0) m(i, c) = 1.0;
        else if (unseen_rows) unseen_rows->push_back(static_cast<std::size_t>(i));
      }
      return m;
    }
    case TermKind::tensor_interaction: {
      const Eigen::MatrixXd m1 = basis.spline.evaluate(frame.numeric(spec.covariate)) * basis.z;
      const Eigen::MatrixXd m2 = basis.spline2.evaluate(frame.numeric(spec.covariate2)) * basis.z2;
      Eigen::MatrixXd m = detail::row_kronecker(m1, m2);
      m.rowwise() -= basis.column_means;
      return m;
    }
  }
  return {};
}

inline json to_json(const TermBasis& b) {
  json j{{"spec", to_json(b.spec)}};
  if (b.spec.kind == TermKind::random_effect) {
    j["levels"] = b.levels;
  } else if (b.spec.kind != TermKind::dummy) {
    j["knots"] = b.spline.knots();
    j["z"] = to_json(b.z);
    if (b.spec.kind == TermKind::tensor_interaction) {
      j["knots2"] = b.spline2.knots();
      j["z2"] = to_json(b.z2);
      j["column_means"] = to_json(Eigen::VectorXd(b.column_means.transpose()));
    }
  }
  return j;
}

inline TermBasis term_basis_from_json(const json& j) {
  TermBasis b;
  b.spec = smooth_spec_from_json(j.at("spec"));
  if (b.spec.kind == TermKind::random_effect) {
    b.levels = j.at("levels").get<std::vector<std::string>>();
  } else if (b.spec.kind != TermKind::dummy) {
    b.spline = CubicRegressionSpline(j.at("knots").get<std::vector<double>>());
    b.z = matrix_from_json(j.at("z"));
    if (b.spec.kind == TermKind::tensor_interaction) {
      b.spline2 = CubicRegressionSpline(j.at("knots2").get<std::vector<double>>());
      b.z2 = matrix_from_json(j.at("z2"));
      b.column_means = vector_from_json(j.at("column_means")).transpose();
    }
  }
  return b;
}

}  // namespace ctxadjust

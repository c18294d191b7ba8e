#pragma once

// Small statistical toolkit shared by the diagnostics, inference and
// forecasting layers. Distribution functions come from Boost.Math; the
// two-sided Kolmogorov distribution follows Simard & L'Ecuyer (2011): the
// Durbin matrix (Marsaglia-Tsang-Wang) where it is tractable, Pelz-Good
// otherwise, and the Birnbaum-Tingey sum for the far tail.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "ctxadjust/errors.hpp"

namespace ctxadjust::stats {

inline double mean(std::span<const double> x) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

// Sample variance (n - 1 denominator).
inline double variance(std::span<const double> x) {
  if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / static_cast<double>(x.size() - 1);
}

inline double sd(std::span<const double> x) { return std::sqrt(variance(x)); }

// NaN when either vector is constant.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

inline double normal_cdf(double z) {
  return boost::math::cdf(boost::math::normal_distribution<>(), z);
}

inline double normal_sf(double z) {
  return boost::math::cdf(boost::math::complement(boost::math::normal_distribution<>(), z));
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<>(), p);
}

inline double chi_squared_sf(double x, double df) {
  if (x <= 0.0) return 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<>(df), x));
}

inline double students_t_cdf(double t, double df) {
  return boost::math::cdf(boost::math::students_t_distribution<>(df), t);
}

inline double students_t_quantile(double p, double df) {
  return boost::math::quantile(boost::math::students_t_distribution<>(df), p);
}

// Two-sided exact binomial test, doubling the smaller tail.
inline double binomial_test_two_sided(std::size_t successes, std::size_t trials, double p) {
  if (trials == 0) return 1.0;
  const boost::math::binomial_distribution<> dist(static_cast<double>(trials), p);
  const auto k = static_cast<double>(successes);
  const double lower = boost::math::cdf(dist, k);
  const double upper = successes == 0 ? 1.0 : boost::math::cdf(boost::math::complement(dist, k - 1.0));
  return std::min(1.0, 2.0 * std::min(lower, upper));
}

namespace detail {

// P(D_n <= d) by the Durbin matrix, Marsaglia-Tsang-Wang formulation.
inline double kolmogorov_cdf_durbin(std::size_t n, double d) {
  const double nd = static_cast<double>(n) * d;
  if (nd <= 0.5) return 0.0;
  const auto k = static_cast<Eigen::Index>(std::ceil(nd));
  const double h = static_cast<double>(k) - nd;
  const Eigen::Index m = 2 * k - 1;

  Eigen::VectorXd v(m), w(m);
  double fac = 1.0;
  for (Eigen::Index j = 1; j <= m; ++j) {
    w(j - 1) = fac;
    fac /= static_cast<double>(j);
    v(j - 1) = (1.0 - std::pow(h, static_cast<double>(j))) * fac;
  }
  const double tt = std::pow(std::max(2.0 * h - 1.0, 0.0), static_cast<double>(m)) -
                    2.0 * std::pow(h, static_cast<double>(m));
  v(m - 1) = (1.0 + tt) * fac;

  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index i = 1; i < m; ++i) {
    for (Eigen::Index r = i - 1; r < m; ++r) H(r, i) = w(r - i + 1);
  }
  H.col(0) = v;
  H.row(m - 1) = v.reverse().transpose();

  constexpr int kScaleExp = 128;
  const double big = std::ldexp(1.0, kScaleExp);
  const double tiny = std::ldexp(1.0, -kScaleExp);

  Eigen::MatrixXd power = Eigen::MatrixXd::Identity(m, m);
  long long power_exp = 0, h_exp = 0;
  std::size_t nn = n;
  while (nn > 0) {
    if (nn % 2) {
      power = power * H;
      power_exp += h_exp;
    }
    H = H * H;
    h_exp *= 2;
    if (std::abs(H(k - 1, k - 1)) > big) {
      H *= tiny;
      h_exp += kScaleExp;
    }
    nn /= 2;
  }
  double p = power(k - 1, k - 1);
  long long p_exp = power_exp;
  for (std::size_t i = 1; i <= n; ++i) {
    p = static_cast<double>(i) * p / static_cast<double>(n);
    if (std::abs(p) < tiny) {
      p *= big;
      p_exp -= kScaleExp;
    }
  }
  if (p_exp != 0) p = std::ldexp(p, static_cast<int>(p_exp));
  return std::clamp(p, 0.0, 1.0);
}

// Pelz-Good asymptotic expansion of P(D_n <= x).
inline double kolmogorov_cdf_pelz_good(std::size_t n, double x) {
  constexpr double pi = 3.14159265358979323846;
  const double pi2 = pi * pi, pi4 = pi2 * pi2, pi6 = pi4 * pi2;
  const double sqrt2pi = std::sqrt(2.0 * pi);
  const double dn = static_cast<double>(n);
  const double z = std::sqrt(dn) * x;
  const double z2 = z * z, z3 = z2 * z, z4 = z2 * z2, z6 = z4 * z2, z8 = z4 * z4;
  const double qlog = -pi2 / 8.0 / z2;
  if (qlog < -708.0) return 0.0;
  double q = std::exp(qlog);

  const double k1a = -z2, k1b = pi2 / 4.0;
  const double k2a = 6.0 * z6 + 2.0 * z4;
  const double k2b = (2.0 * z4 - 5.0 * z2) * pi2 / 4.0;
  const double k2c = pi4 * (1.0 - 2.0 * z2) / 16.0;
  const double k3d = pi6 * (5.0 - 30.0 * z2) / 64.0;
  const double k3c = pi4 * (-60.0 * z2 + 212.0 * z4) / 16.0;
  const double k3b = pi2 * (135.0 * z4 - 96.0 * z6) / 4.0;
  const double k3a = -30.0 * z6 - 90.0 * z8;

  double K[4] = {0.0, 0.0, 0.0, 0.0};
  const int maxk = static_cast<int>(std::ceil(16.0 * z / pi));
  for (int k = maxk; k >= 1; --k) {
    const double m = 2.0 * k - 1.0;
    const double m2 = m * m, m4 = m2 * m2, m6 = m4 * m2;
    const double qpower = std::pow(q, 8.0 * k);
    const double coeffs[4] = {1.0, k1a + k1b * m2, k2a + k2b * m2 + k2c * m4,
                              k3a + k3b * m2 + k3c * m4 + k3d * m6};
    for (int i = 0; i < 4; ++i) K[i] = K[i] * qpower + coeffs[i];
  }
  const double denom[4] = {z, 6.0 * z4, 72.0 * z6 * z, 6480.0 * z8 * z2};
  for (int i = 0; i < 4; ++i) K[i] = K[i] * q * sqrt2pi / denom[i];

  q = std::exp(-pi2 / 2.0 / z2);
  double k2extra = 0.0, k3extra = 0.0;
  const double sqrt3z = std::sqrt(3.0) * z;
  for (int k = maxk; k >= 1; --k) {
    const double kk = static_cast<double>(k) * k;
    const double qp = std::pow(q, kk);
    const double kspi = pi * k;
    k2extra += kk * qp;
    k3extra += (sqrt3z + kspi) * (sqrt3z - kspi) * kk * qp;
  }
  K[2] += k2extra * pi2 * sqrt2pi / (-36.0 * z3);
  K[3] += k3extra * pi2 * sqrt2pi / (216.0 * z6);
  double sum = 0.0;
  for (int i = 0; i < 4; ++i) sum += K[i] / std::pow(dn, i / 2.0);
  return std::clamp(sum, 0.0, 1.0);
}

// One-sided Smirnov P(D+_n >= x), Birnbaum-Tingey sum in log space.
inline double smirnov_sf(std::size_t n, double x) {
  if (x <= 0.0) return 1.0;
  if (x >= 1.0) return 0.0;
  const double dn = static_cast<double>(n);
  const auto jmax = static_cast<std::size_t>(std::floor(dn * (1.0 - x)));
  const double lgn = std::lgamma(dn + 1.0);
  std::vector<double> logs;
  logs.reserve(jmax + 1);
  for (std::size_t j = 0; j <= jmax; ++j) {
    const double dj = static_cast<double>(j);
    const double a = 1.0 - x - dj / dn;
    if (a <= 0.0) continue;
    const double lc = lgn - std::lgamma(dj + 1.0) - std::lgamma(dn - dj + 1.0);
    logs.push_back(lc + (dn - dj) * std::log(a) + (dj - 1.0) * std::log(x + dj / dn));
  }
  if (logs.empty()) return 0.0;
  const double mx = *std::max_element(logs.begin(), logs.end());
  double s = 0.0;
  for (double l : logs) s += std::exp(l - mx);
  return std::clamp(x * std::exp(mx) * s, 0.0, 1.0);
}

}  // namespace detail

// Survival function P(D_n >= d) of the two-sided one-sample KS statistic.
inline double kolmogorov_sf(std::size_t n, double d) {
  if (n == 0) throw DomainError("kolmogorov_sf: n must be positive");
  if (d >= 1.0) return 0.0;
  if (d <= 0.0) return 1.0;
  const double dn = static_cast<double>(n);
  const double t = dn * d;
  if (t <= 1.0) {
    if (t <= 0.5) return 1.0;
    const double log_cdf = std::lgamma(dn + 1.0) - dn * std::log(dn) + dn * std::log(2.0 * t - 1.0);
    return std::clamp(1.0 - std::exp(log_cdf), 0.0, 1.0);
  }
  if (t >= dn - 1.0) return std::clamp(2.0 * std::pow(1.0 - d, dn), 0.0, 1.0);
  if (d >= 0.5) return std::clamp(2.0 * detail::smirnov_sf(n, d), 0.0, 1.0);
  const double nx2 = t * d;
  if (n <= 140) {
    if (nx2 <= 4.0) return std::clamp(1.0 - detail::kolmogorov_cdf_durbin(n, d), 0.0, 1.0);
    return std::clamp(2.0 * detail::smirnov_sf(n, d), 0.0, 1.0);
  }
  if (nx2 >= 370.0) return 0.0;
  if (nx2 >= 2.2) return std::clamp(2.0 * detail::smirnov_sf(n, d), 0.0, 1.0);
  double cdf;
  if (n <= 100000 && dn * std::pow(d, 1.5) <= 1.4) {
    cdf = detail::kolmogorov_cdf_durbin(n, d);
  } else {
    cdf = detail::kolmogorov_cdf_pelz_good(n, d);
  }
  return std::clamp(1.0 - cdf, 0.0, 1.0);
}

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Two-sided KS test of a sample against Uniform(0, 1).
inline KsResult ks_test_uniform(std::span<const double> sample) {
  if (sample.empty()) throw DomainError("ks_test_uniform: empty sample");
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = std::clamp(x[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - u, u - static_cast<double>(i) / n});
  }
  return {d, kolmogorov_sf(x.size(), d)};
}

}  // namespace ctxadjust::stats

#pragma once
// Time-rescaled Ornstein-Uhlenbeck forward process: rate schedules beta_t,
// closed-form marginal parameters (m_t, sigma_t^2), forward sampling from a
// discrete base measure, Gaussian-KL bounds, and the mixture log-density of
// the noised empirical measure.

#include "scorelab/measure_ot.hpp"

namespace scorelab {

namespace detail {

// Adaptive Simpson quadrature; exact for piecewise cubics when split at knots.
template <typename F>
double simpson_rec(const F& f, double a, double b, double fa, double fm, double fb, double whole,
                   double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

template <typename F>
double adaptive_simpson(const F& f, double a, double b, double tol = 1e-12) {
  if (a == b) return 0.0;
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return simpson_rec(f, a, b, fa, fm, fb, whole, tol, 42);
}

}  // namespace detail

// Noise-rate schedule t -> beta_t, bounded between beta_lower and beta_upper
// (both positive). Supports the constant and affine families in closed form
// and tabulated C1 (cubic Hermite) schedules integrated by adaptive Simpson
// split at the knots.
struct BetaSchedule {
  enum class Kind { constant, affine, tabulated };

  Kind kind = Kind::constant;
  double beta_lower = 1.0;
  double beta_upper = 1.0;

  // constant/affine: beta(t) = c0 + c1 * min(t, horizon)
  double c0 = 1.0, c1 = 0.0, horizon = 0.0;
  // tabulated: Hermite knots (strictly increasing from 0) with derivatives
  std::vector<double> knot_t, knot_v, knot_d;

  static BetaSchedule constant(double beta) {
    if (!(beta > 0)) throw std::invalid_argument("BetaSchedule: beta must be positive");
    BetaSchedule s;
    s.kind = Kind::constant;
    s.c0 = beta;
    s.beta_lower = s.beta_upper = beta;
    return s;
  }

  // beta(t) = beta0 + slope * t on [0, horizon], held constant beyond.
  static BetaSchedule affine(double beta0, double slope, double horizon) {
    if (!(horizon > 0)) throw std::invalid_argument("BetaSchedule: horizon must be positive");
    const double end = beta0 + slope * horizon;
    if (!(beta0 > 0) || !(end > 0))
      throw std::invalid_argument("BetaSchedule: affine rate must stay positive");
    BetaSchedule s;
    s.kind = Kind::affine;
    s.c0 = beta0;
    s.c1 = slope;
    s.horizon = horizon;
    s.beta_lower = std::min(beta0, end);
    s.beta_upper = std::max(beta0, end);
    return s;
  }

  static BetaSchedule tabulated(const std::vector<double>& times,
                                const std::vector<double>& values) {
    if (times.size() < 2 || times.size() != values.size())
      throw std::invalid_argument("BetaSchedule: need >= 2 tabulated knots");
    if (times.front() != 0.0) throw std::invalid_argument("BetaSchedule: knots must start at 0");
    for (size_t i = 1; i < times.size(); ++i)
      if (times[i] <= times[i - 1])
        throw std::invalid_argument("BetaSchedule: knot times must be strictly increasing");
    BetaSchedule s;
    s.kind = Kind::tabulated;
    s.knot_t = times;
    s.knot_v = values;
    const size_t K = times.size();
    s.knot_d.resize(K);
    for (size_t i = 0; i < K; ++i) {
      if (i == 0)
        s.knot_d[i] = (values[1] - values[0]) / (times[1] - times[0]);
      else if (i == K - 1)
        s.knot_d[i] = (values[K - 1] - values[K - 2]) / (times[K - 1] - times[K - 2]);
      else
        s.knot_d[i] = (values[i + 1] - values[i - 1]) / (times[i + 1] - times[i - 1]);
    }
    // Exact range of each Hermite cubic via the roots of its derivative.
    double lo = values[0], hi = values[0];
    for (size_t i = 0; i + 1 < K; ++i) {
      const double h = times[i + 1] - times[i];
      auto value_at = [&](double u) {  // u in [0,1]
        const double h00 = (1 + 2 * u) * (1 - u) * (1 - u), h10 = u * (1 - u) * (1 - u);
        const double h01 = u * u * (3 - 2 * u), h11 = u * u * (u - 1);
        return h00 * values[i] + h10 * h * s.knot_d[i] + h01 * values[i + 1] +
               h11 * h * s.knot_d[i + 1];
      };
      lo = std::min(lo, std::min(value_at(0.0), value_at(1.0)));
      hi = std::max(hi, std::max(value_at(0.0), value_at(1.0)));
      // derivative in u is quadratic: a u^2 + b u + c
      const double p0 = values[i], p1 = values[i + 1];
      const double m0 = s.knot_d[i] * h, m1 = s.knot_d[i + 1] * h;
      const double a = 6 * p0 + 3 * m0 - 6 * p1 + 3 * m1;
      const double b = -6 * p0 - 4 * m0 + 6 * p1 - 2 * m1;
      const double c = m0;
      const double disc = b * b - 4 * a * c;
      if (disc >= 0) {
        for (double sign : {-1.0, 1.0}) {
          const double u = std::abs(a) > 1e-300 ? (-b + sign * std::sqrt(disc)) / (2 * a)
                                                : (std::abs(b) > 1e-300 ? -c / b : -1.0);
          if (u > 0 && u < 1) {
            lo = std::min(lo, value_at(u));
            hi = std::max(hi, value_at(u));
          }
        }
      }
    }
    if (!(lo > 0))
      throw std::invalid_argument("BetaSchedule: tabulated rate must stay positive");
    s.beta_lower = lo;
    s.beta_upper = hi;
    return s;
  }

  double beta(double t) const {
    switch (kind) {
      case Kind::constant:
        return c0;
      case Kind::affine:
        return c0 + c1 * std::clamp(t, 0.0, horizon);
      case Kind::tabulated: {
        if (t <= knot_t.front()) return knot_v.front();
        if (t >= knot_t.back()) return knot_v.back();
        const auto it = std::upper_bound(knot_t.begin(), knot_t.end(), t);
        const size_t i = static_cast<size_t>(it - knot_t.begin()) - 1;
        const double h = knot_t[i + 1] - knot_t[i];
        const double u = (t - knot_t[i]) / h;
        const double h00 = (1 + 2 * u) * (1 - u) * (1 - u), h10 = u * (1 - u) * (1 - u);
        const double h01 = u * u * (3 - 2 * u), h11 = u * u * (u - 1);
        return h00 * knot_v[i] + h10 * h * knot_d[i] + h01 * knot_v[i + 1] +
               h11 * h * knot_d[i + 1];
      }
    }
    return c0;
  }

  // integral of beta over [s, t]; requires s <= t.
  double integral(double s, double t) const {
    if (s > t) throw std::invalid_argument("BetaSchedule::integral: need s <= t");
    switch (kind) {
      case Kind::constant:
        return c0 * (t - s);
      case Kind::affine: {
        auto anti = [&](double x) {  // antiderivative with the held tail
          const double y = std::min(x, horizon);
          double v = c0 * y + 0.5 * c1 * y * y;
          if (x > horizon) v += (c0 + c1 * horizon) * (x - horizon);
          return v;
        };
        return anti(t) - anti(s);
      }
      case Kind::tabulated: {
        auto f = [&](double x) { return beta(x); };
        // split at interior knots so Simpson sees a single cubic per panel
        double total = 0.0, a = s;
        for (double knot : knot_t) {
          if (knot > a && knot < t) {
            total += detail::adaptive_simpson(f, a, knot, 1e-12);
            a = knot;
          }
        }
        total += detail::adaptive_simpson(f, a, t, 1e-12);
        return total;
      }
    }
    return 0.0;
  }
};

// Marginal of the forward process: X_t | X_s ~ N(m X_s, sigma2 I).
struct MarginalParams {
  double m = 1.0;
  double sigma2 = 0.0;
  double sigma() const { return std::sqrt(sigma2); }
};

inline MarginalParams marginal_params(const BetaSchedule& schedule, double s, double t) {
  if (s < 0 || t < s) throw std::invalid_argument("marginal_params: need 0 <= s <= t");
  MarginalParams p;
  p.m = std::exp(-schedule.integral(s, t));
  p.sigma2 = 1.0 - p.m * p.m;
  return p;
}

inline MarginalParams marginal_params(const BetaSchedule& schedule, double t) {
  return marginal_params(schedule, 0.0, t);
}

// Draw `count` samples of X_t = m_t X_0 + sigma_t Z with X_0 from the measure.
inline MatrixXd sample_forward(const DiscreteMeasure& measure, const BetaSchedule& schedule,
                               double t, int count, uint64_t rng_seed) {
  if (t < 0) throw std::invalid_argument("sample_forward: need t >= 0");
  if (count <= 0) throw std::invalid_argument("sample_forward: need count > 0");
  const auto mp = marginal_params(schedule, t);
  const double sigma = mp.sigma();
  const int n = measure.size(), D = measure.dim();
  std::vector<double> cum(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) cum[i] = (acc += measure.weights(i));
  auto rng = rng_stream(rng_seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  MatrixXd out(count, D);
  for (int r = 0; r < count; ++r) {
    const auto it = std::lower_bound(cum.begin(), cum.end(), unif(rng) * acc);
    const int idx = std::min(n - 1, static_cast<int>(it - cum.begin()));
    out.row(r) = mp.m * measure.points.row(idx) +
                 sigma * normal_vector(rng, D).transpose();
  }
  return out;
}

// KL(N(mean, sigma2 I_D) || N(0, I_D)).
inline double gaussian_kl(const VectorXd& mean, double sigma2) {
  if (!(sigma2 > 0)) throw std::invalid_argument("gaussian_kl: sigma2 must be positive");
  const double D = static_cast<double>(mean.size());
  return 0.5 * (D * sigma2 - D - D * std::log(sigma2) + mean.squaredNorm());
}

// Forward-convergence bound KL(P_t, gamma_D) <= exp(-2 beta_lower t) (D + M2^2),
// valid for t >= log 2 / beta_upper; earlier times are rejected.
inline double kl_bound_to_gaussian(const DiscreteMeasure& measure, const BetaSchedule& schedule,
                                   double t) {
  const double window = std::log(2.0) / schedule.beta_upper;
  if (t < window - 1e-12)
    throw std::invalid_argument("kl_bound_to_gaussian: bound valid only for t >= log2/beta_upper = " +
                                std::to_string(window));
  const double m2 = moments(measure, 2.0).value;
  return std::exp(-2.0 * schedule.beta_lower * t) *
         (static_cast<double>(measure.dim()) + m2 * m2);
}

// log p_t(x) of the noised empirical measure: a Gaussian mixture with centers
// m_t x_i and shared covariance sigma_t^2 I. Rejected at t = 0 where the
// discrete base measure has no density.
inline double mixture_log_density(const DiscreteMeasure& measure, const BetaSchedule& schedule,
                                  double t, const VectorXd& x) {
  if (!(t > 0)) throw std::invalid_argument("mixture_log_density: need t > 0");
  if (x.size() != measure.dim())
    throw std::invalid_argument("mixture_log_density: dimension mismatch");
  const auto mp = marginal_params(schedule, t);
  const double sigma2 = std::max(mp.sigma2, 1e-12);
  const int n = measure.size();
  VectorXd terms(n);
  for (int i = 0; i < n; ++i)
    terms(i) = std::log(measure.weights(i)) -
               (x - mp.m * measure.points.row(i).transpose()).squaredNorm() / (2.0 * sigma2);
  const double D = static_cast<double>(measure.dim());
  return log_sum_exp(terms) - 0.5 * D * std::log(2.0 * M_PI * sigma2);
}

}  // namespace scorelab

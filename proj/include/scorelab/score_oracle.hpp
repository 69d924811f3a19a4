#pragma once
// Exact score and Hessian of the noised empirical measure via posterior
// (Tweedie) statistics of the Gaussian mixture, plus a Monte-Carlo check of
// the denoising identity that equates excess score-matching risk with the
// noise-prediction objective.

#include <functional>

#include "scorelab/diffusion_process.hpp"

namespace scorelab {

// Common evaluation contract shared by the exact oracle and trained models:
// (x, t) -> score vector in R^D.
using ScoreFunction = std::function<VectorXd(const VectorXd&, double)>;

struct ScoreEvaluation {
  VectorXd score;              // grad_x log p_t(x)
  VectorXd posterior_mean;     // E[X_0 | X_t = x]
  VectorXd posterior_weights;  // softmax responsibilities; sum to 1
};

namespace detail {

// Posterior atom responsibilities P(X_0 = a_i | X_t = x), computed in log
// domain so they survive small sigma and large ||x||.
inline VectorXd responsibilities(const DiscreteMeasure& measure, double m, double sigma2,
                                 const VectorXd& x) {
  const int n = measure.size();
  VectorXd lw(n);
  for (int i = 0; i < n; ++i)
    lw(i) = std::log(measure.weights(i)) -
            (x - m * measure.points.row(i).transpose()).squaredNorm() / (2.0 * sigma2);
  const double lse = log_sum_exp(lw);
  return (lw.array() - lse).exp().matrix();
}

}  // namespace detail

// Score of the mixture marginal at time t > 0. The score is the Tweedie
// identity (m_t E[X_0|X_t=x] - x)/sigma_t^2 applied to the exact posterior.
inline ScoreEvaluation score_exact(const DiscreteMeasure& measure, const BetaSchedule& schedule,
                                   double t, const VectorXd& x) {
  if (!(t > 0)) throw std::invalid_argument("score_exact: need t > 0");
  if (x.size() != measure.dim()) throw std::invalid_argument("score_exact: dimension mismatch");
  const auto mp = marginal_params(schedule, t);
  const double sigma2 = std::max(mp.sigma2, 1e-12);
  ScoreEvaluation ev;
  ev.posterior_weights = detail::responsibilities(measure, mp.m, sigma2, x);
  ev.posterior_mean = measure.points.transpose() * ev.posterior_weights;
  ev.score = (mp.m * ev.posterior_mean - x) / sigma2;
  return ev;
}

// Batched form of score_exact: rows of y are evaluation points sharing one
// time t. Same log-domain posterior softmax; the pairwise squared distances
// come from the expanded inner-product form so both passes over the atoms are
// matrix products. Agrees with the scalar oracle up to summation roundoff.
inline MatrixXd score_exact_batch(const DiscreteMeasure& measure, const BetaSchedule& schedule,
                                  double t, const MatrixXd& y) {
  if (!(t > 0)) throw std::invalid_argument("score_exact_batch: need t > 0");
  if (y.cols() != measure.dim())
    throw std::invalid_argument("score_exact_batch: dimension mismatch");
  const auto mp = marginal_params(schedule, t);
  const double sigma2 = std::max(mp.sigma2, 1e-12);
  const VectorXd atom_part = measure.weights.array().log().matrix() -
                             (mp.m * mp.m / (2.0 * sigma2)) *
                                 measure.points.rowwise().squaredNorm();
  MatrixXd logits = (mp.m / sigma2) * (y * measure.points.transpose());
  logits.rowwise() += atom_part.transpose();
  // the -||y||^2/(2 sigma^2) term is constant per row, so the softmax drops it
  const VectorXd row_max = logits.rowwise().maxCoeff();
  logits.colwise() -= row_max;
  MatrixXd resp = logits.array().exp().matrix();
  const VectorXd denom = resp.rowwise().sum();
  resp.array().colwise() /= denom.array();
  return (mp.m * (resp * measure.points) - y) / sigma2;
}

// Hessian of log p_t: (m_t^2/sigma_t^4) Var(X_0 | X_t = x) - I/sigma_t^2.
// Symmetric by construction; eigenvalues >= -1/sigma_t^2 because the
// conditional variance term is positive semi-definite.
inline MatrixXd hessian_exact(const DiscreteMeasure& measure, const BetaSchedule& schedule,
                              double t, const VectorXd& x) {
  if (!(t > 0)) throw std::invalid_argument("hessian_exact: need t > 0");
  if (x.size() != measure.dim()) throw std::invalid_argument("hessian_exact: dimension mismatch");
  const auto mp = marginal_params(schedule, t);
  const double sigma2 = std::max(mp.sigma2, 1e-12);
  const VectorXd w = detail::responsibilities(measure, mp.m, sigma2, x);
  const VectorXd mean = measure.points.transpose() * w;
  const int D = measure.dim();
  // Centered accumulation keeps the variance PSD and exactly symmetric: each
  // outer product c c^T is symmetric entrywise before the scalar weight.
  MatrixXd var = MatrixXd::Zero(D, D);
  for (int i = 0; i < measure.size(); ++i) {
    const VectorXd c = measure.points.row(i).transpose() - mean;
    const MatrixXd outer = c * c.transpose();
    var += w(i) * outer;
  }
  return (mp.m * mp.m / (sigma2 * sigma2)) * var - MatrixXd::Identity(D, D) / sigma2;
}

struct DenoisingCheck {
  double lhs = 0.0;  // E || s(X_t, t) - grad log p_t(X_t) ||^2
  double rhs = 0.0;  // E || s(X_t, t) + Z/sigma_t ||^2 + E || grad log p_t ||^2 - D/sigma_t^2
  double stderr_combined = 0.0;  // standard error of the per-sample lhs-rhs gap
};

// Monte-Carlo estimate of both sides of the denoising identity using a
// shared sample stream (X_0, Z, X_t = m X_0 + sigma Z). The two sides are
// equal in expectation for any score function; callers assert
// |lhs - rhs| <= 3 * stderr_combined.
inline DenoisingCheck verify_denoising_identity(const DiscreteMeasure& measure,
                                                const BetaSchedule& schedule, double t,
                                                const ScoreFunction& score_fn, int mc_samples,
                                                uint64_t rng_seed) {
  if (!(t > 0)) throw std::invalid_argument("verify_denoising_identity: need t > 0");
  if (mc_samples < 10000)
    throw std::invalid_argument("verify_denoising_identity: need mc_samples >= 10000");
  const auto mp = marginal_params(schedule, t);
  const double sigma2 = std::max(mp.sigma2, 1e-12);
  const double sigma = std::sqrt(sigma2);
  const int n = measure.size(), D = measure.dim();
  std::vector<double> cum(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) cum[i] = (acc += measure.weights(i));
  auto rng = rng_stream(rng_seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  MeanStderr lhs, rhs, gap;
  for (int r = 0; r < mc_samples; ++r) {
    const auto it = std::lower_bound(cum.begin(), cum.end(), unif(rng) * acc);
    const int idx = std::min(n - 1, static_cast<int>(it - cum.begin()));
    const VectorXd z = normal_vector(rng, D);
    const VectorXd xt = mp.m * measure.points.row(idx).transpose() + sigma * z;
    const VectorXd grad = score_exact(measure, schedule, t, xt).score;
    const VectorXd s = score_fn(xt, t);
    const double a = (s - grad).squaredNorm();
    const double b = (s + z / sigma).squaredNorm() + grad.squaredNorm() - D / sigma2;
    lhs.add(a);
    rhs.add(b);
    gap.add(a - b);
  }
  DenoisingCheck out;
  out.lhs = lhs.mean;
  out.rhs = rhs.mean;
  out.stderr_combined = gap.stderr_mean();
  return out;
}

}  // namespace scorelab

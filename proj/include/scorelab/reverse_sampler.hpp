#pragma once
// Adaptive time partition, exponential-integrator reverse sampler, box
// truncation operator, and rate-formula hyperparameter selection.

#include <atomic>
#include <mutex>

#include "scorelab/score_oracle.hpp"

namespace scorelab {

// Two-phase time grid: forward knots start at delta0 and grow by
// h'_i = kappa * min(t'_i, 1) (geometric below 1, uniform above) until the
// horizon T; reverse knots are the time reflection t_i = T - t'_{N-i}.
struct Partition {
  std::vector<double> forward_knots;  // t'_0 = delta0 < ... < t'_N = T
  std::vector<double> reverse_knots;  // t_i = T - t'_{N-i}; t_0 = 0
  std::vector<double> steps;          // h_i = t_{i+1} - t_i over reverse knots
  double kappa = 0.0;
  double delta0 = 0.0;
  double horizon_T = 0.0;

  int num_steps() const { return static_cast<int>(steps.size()); }
};

inline Partition build_partition(double T, double delta0, double kappa) {
  if (!(delta0 > 0) || !(delta0 < T))
    throw std::invalid_argument("build_partition: need 0 < delta0 < T");
  if (!(kappa > 0) || !(kappa <= 1))
    throw std::invalid_argument("build_partition: need kappa in (0, 1]");
  Partition p;
  p.kappa = kappa;
  p.delta0 = delta0;
  p.horizon_T = T;
  double t = delta0;
  p.forward_knots.push_back(t);
  while (t < T) {
    double next = t + kappa * std::min(t, 1.0);
    if (!(next > t)) throw std::runtime_error("build_partition: step underflow");
    // clamp the overshooting final step so the reverse grid starts at 0
    if (next >= T || T - next < 1e-12 * std::max(1.0, T)) next = T;
    p.forward_knots.push_back(next);
    t = next;
  }
  const size_t N = p.forward_knots.size() - 1;
  p.reverse_knots.resize(N + 1);
  for (size_t i = 0; i <= N; ++i) p.reverse_knots[i] = T - p.forward_knots[N - i];
  p.steps.resize(N);
  for (size_t i = 0; i < N; ++i) p.steps[i] = p.reverse_knots[i + 1] - p.reverse_knots[i];
  return p;
}

struct DiscretizationError {
  double sum = 0.0;             // sum over forward knots of h'_i^2 / sigma^4(t'_i)
  double bound_constant = 0.0;  // C such that sum <= C * kappa * (log(1/delta0) + T)
};

// Squared-step-over-sigma^4 sum controlling the integrator's discretization
// error. The reported constant comes from sigma_t^2 >= (t ^ 1)(1 - e^{-beta_lower})
// together with the knot-count bound, giving C = (1 + 1/log 2)/(1 - e^{-beta_lower})^2.
inline DiscretizationError discretization_error_sum(const Partition& partition,
                                                    const BetaSchedule& schedule) {
  DiscretizationError out;
  const auto& knots = partition.forward_knots;
  for (size_t i = 0; i + 1 < knots.size(); ++i) {
    const double h = knots[i + 1] - knots[i];
    const double s2 = marginal_params(schedule, knots[i]).sigma2;
    out.sum += h * h / (s2 * s2);
  }
  const double gap = 1.0 - std::exp(-schedule.beta_lower);
  out.bound_constant = (1.0 + 1.0 / std::log(2.0)) / (gap * gap);
  return out;
}

struct SamplerConfig {
  BetaSchedule schedule;
  Partition partition;
  double truncation_R = 1.0;  // must be finite and positive
  std::uint64_t rng_seed = 0;
};

// Coefficients of the exponential-integrator update from reverse knot t_i to
// t_{i+1}: with A the rate integral over [T - t_{i+1}, T - t_i],
//   y' = y + (e^A - 1)(y + 2 s(y, t_score)) + z sqrt(e^{2A} - 1),
// where t_score = T - t_i is the forward time the score is queried at.
struct StepCoeffs {
  double growth = 0.0;   // e^A - 1
  double noise = 0.0;    // sqrt(e^{2A} - 1)
  double t_score = 0.0;  // T - t_i
};

inline StepCoeffs step_coeffs(const SamplerConfig& config, int i) {
  const Partition& part = config.partition;
  const int N = part.num_steps();
  if (i < 0 || i >= N) throw std::invalid_argument("step_coeffs: step index out of range");
  const size_t fwd = static_cast<size_t>(N - i);
  const double A = config.schedule.integral(part.forward_knots[fwd - 1], part.forward_knots[fwd]);
  return {std::expm1(A), std::sqrt(std::expm1(2.0 * A)), part.forward_knots[fwd]};
}

// One exponential-integrator update given the step's Gaussian draw z.
inline VectorXd reverse_step(const VectorXd& y, int i, const ScoreFunction& score_fn,
                             const SamplerConfig& config, const VectorXd& z) {
  const StepCoeffs c = step_coeffs(config, i);
  return y + c.growth * (y + 2.0 * score_fn(y, c.t_score)) + c.noise * z;
}

// Run `count` particles from gamma_D through the reverse chain and return the
// uniform empirical measure of the terminal states. The data measure supplies
// the ambient dimension. Particles are processed in fixed shards of 256 with
// per-shard RNG streams (stream id = shard index), so output is bitwise
// independent of the worker count.
inline DiscreteMeasure sample_reverse(const DiscreteMeasure& measure,
                                      const ScoreFunction& score_fn, const SamplerConfig& config,
                                      int count, int threads = 1) {
  if (count <= 0) throw std::invalid_argument("sample_reverse: need count > 0");
  if (!std::isfinite(config.truncation_R) || !(config.truncation_R > 0))
    throw std::invalid_argument("sample_reverse: truncation_R must be finite and positive");
  const int N = config.partition.num_steps();
  if (N < 1) throw std::invalid_argument("sample_reverse: empty partition");
  const int D = measure.dim();
  constexpr int kShard = 256;
  const int shards = (count + kShard - 1) / kShard;
  MatrixXd out(count, D);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::atomic<bool> failed{false};
  parallel_for(shards, threads, [&](std::int64_t sh) {
    if (failed.load(std::memory_order_relaxed)) return;
    try {
      auto rng = rng_stream(config.rng_seed, static_cast<std::uint64_t>(sh));
      const int lo = static_cast<int>(sh) * kShard;
      const int hi = std::min(count, lo + kShard);
      for (int r = lo; r < hi; ++r) {
        VectorXd y = normal_vector(rng, D);
        for (int i = 0; i < N; ++i) {
          const VectorXd z = normal_vector(rng, D);
          try {
            y = reverse_step(y, i, score_fn, config, z);
          } catch (const std::exception& e) {
            throw std::runtime_error("sample_reverse: score failure at step " +
                                     std::to_string(i) + ": " + e.what());
          }
        }
        out.row(r) = y.transpose();
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      failed.store(true, std::memory_order_relaxed);
    }
  });
  if (failure) std::rethrow_exception(failure);
  return DiscreteMeasure::uniform(std::move(out));
}

// Matrix form of the score contract: rows of y are particles, all queried at
// the same time t.
using BatchScoreFunction = std::function<MatrixXd(const MatrixXd&, double)>;

// Batched variant of sample_reverse: same chain, same shard layout, but each
// shard advances all of its particles through a knot at once so the score can
// amortize over rows (one matrix-product pair per knot for the exact oracle).
// Within a shard the Gaussian draws come as one block per knot instead of one
// run per particle, so the two variants realize different -- but equally
// seed-reproducible -- streams.
inline DiscreteMeasure sample_reverse_batch(const DiscreteMeasure& measure,
                                            const BatchScoreFunction& score_fn,
                                            const SamplerConfig& config, int count,
                                            int threads = 1) {
  if (count <= 0) throw std::invalid_argument("sample_reverse_batch: need count > 0");
  if (!std::isfinite(config.truncation_R) || !(config.truncation_R > 0))
    throw std::invalid_argument("sample_reverse_batch: truncation_R must be finite and positive");
  const int N = config.partition.num_steps();
  if (N < 1) throw std::invalid_argument("sample_reverse_batch: empty partition");
  const int D = measure.dim();
  constexpr int kShard = 256;
  const int shards = (count + kShard - 1) / kShard;
  MatrixXd out(count, D);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::atomic<bool> failed{false};
  parallel_for(shards, threads, [&](std::int64_t sh) {
    if (failed.load(std::memory_order_relaxed)) return;
    try {
      auto rng = rng_stream(config.rng_seed, static_cast<std::uint64_t>(sh));
      const int lo = static_cast<int>(sh) * kShard;
      const int rows = std::min(count, lo + kShard) - lo;
      MatrixXd y(rows, D), z(rows, D);
      for (int r = 0; r < rows; ++r) y.row(r) = normal_vector(rng, D).transpose();
      for (int i = 0; i < N; ++i) {
        for (int r = 0; r < rows; ++r) z.row(r) = normal_vector(rng, D).transpose();
        const StepCoeffs c = step_coeffs(config, i);
        MatrixXd s;
        try {
          s = score_fn(y, c.t_score);
        } catch (const std::exception& e) {
          throw std::runtime_error("sample_reverse_batch: score failure at step " +
                                   std::to_string(i) + ": " + e.what());
        }
        if (s.rows() != rows || s.cols() != D)
          throw std::runtime_error("sample_reverse_batch: score returned a misshaped batch");
        y += c.growth * (y + 2.0 * s) + c.noise * z;
      }
      out.middleRows(lo, rows) = y;
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      failed.store(true, std::memory_order_relaxed);
    }
  });
  if (failure) std::rethrow_exception(failure);
  return DiscreteMeasure::uniform(std::move(out));
}

// Box truncation: every particle with ||y||_inf > R is replaced by the zero
// vector (the indicator multiplies the variable; this is not rejection
// sampling). Weights are unchanged.
inline DiscreteMeasure truncate(const DiscreteMeasure& m, double R) {
  if (!(R > 0)) throw std::invalid_argument("truncate: need R > 0");
  MatrixXd pts = m.points;
  for (int i = 0; i < pts.rows(); ++i)
    if (pts.row(i).cwiseAbs().maxCoeff() > R) pts.row(i).setZero();
  return DiscreteMeasure{std::move(pts), m.weights};
}

// q-th raw moment of the norm of a standard Gaussian in R^D:
// E||Z||^q = 2^{q/2} Gamma((D+q)/2) / Gamma(D/2).
inline double gaussian_norm_moment(int D, double q) {
  if (D < 1 || !(q > 0)) throw std::invalid_argument("gaussian_norm_moment: need D >= 1, q > 0");
  return std::exp(0.5 * q * std::log(2.0) + std::lgamma(0.5 * (D + q)) - std::lgamma(0.5 * D));
}

struct HyperParams {
  double T = 0.0;
  double R = 0.0;
  double delta0 = 0.0;
  double kappa = 0.0;
  double d = 0.0;  // dimension proxy driving the rates (may be fractional)
  double p = 0.0, q = 0.0;
  int n = 0;
};

// Rate-formula hyperparameters for n samples and dimension proxy d:
//   delta0 = n^{-2/d},  kappa = n^{-2(1+p(q-p))/(d p (q-p))}  (constant 1),
//   R = 2^{(q-1)/(q-p)} n^{1/(d p (q-p))} (Mq^q(mu) + Mq^q(gamma_D))^{1/(q-p)},
// and T at its lower bound
//   T = (p/beta_lower) [ (1+p(q-p))/(d p (q-p)) log n + (1/2) log D
//       + (1/(q-p)) log(Mq^q(mu) + Mq^q(gamma_D))
//       + (1/(2p)) log(D + M2^2(mu)) + ((q-1)/(q-p)) log 2 ].
// Needs both the q-th and second moment summaries of the data.
inline HyperParams select_hyperparams(int n, double d, double p, double q,
                                      const MomentSummary& moment_q,
                                      const MomentSummary& moment_2, int D,
                                      const BetaSchedule& schedule) {
  if (n < 2) throw std::invalid_argument("select_hyperparams: need n >= 2");
  if (!(p > 0) || !(p < q)) throw std::invalid_argument("select_hyperparams: need 0 < p < q");
  if (!(d > 2.0 * p))
    throw std::invalid_argument(
        "select_hyperparams: need d > 2p (the (p,q)-dimension is defined through scales s > 2p)");
  if (std::abs(moment_q.q - q) > 1e-9 || std::abs(moment_2.q - 2.0) > 1e-9)
    throw std::invalid_argument("select_hyperparams: moment summaries must have orders q and 2");
  HyperParams h;
  h.n = n;
  h.d = d;
  h.p = p;
  h.q = q;
  const double dn = static_cast<double>(n);
  h.delta0 = std::pow(dn, -2.0 / d);
  h.kappa = std::pow(dn, -2.0 * (1.0 + p * (q - p)) / (d * p * (q - p)));
  const double moment_sum = std::pow(moment_q.value, q) + gaussian_norm_moment(D, q);
  h.R = std::pow(2.0, (q - 1.0) / (q - p)) * std::pow(dn, 1.0 / (d * p * (q - p))) *
        std::pow(moment_sum, 1.0 / (q - p));
  h.T = (p / schedule.beta_lower) *
        ((1.0 + p * (q - p)) / (d * p * (q - p)) * std::log(dn) +
         0.5 * std::log(static_cast<double>(D)) + std::log(moment_sum) / (q - p) +
         std::log(static_cast<double>(D) + sq(moment_2.value)) / (2.0 * p) +
         (q - 1.0) / (q - p) * std::log(2.0));
  return h;
}

}  // namespace scorelab

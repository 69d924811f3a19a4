#pragma once
// Trainable score functions: a shared ReLU MLP fed (x, log sigma_t^2, m_t),
// and per-knot networks combined through the four-ReLU spike gate. Both train
// on the fixed-draw Monte-Carlo score-matching objective with SGD or Adam and
// weight clipping to the bound B.

#include <fstream>
#include <iomanip>

#include "scorelab/reverse_sampler.hpp"

namespace scorelab {

inline double relu(double v) { return v > 0.0 ? v : 0.0; }

// Piecewise-linear bump realized by exactly four ReLU terms: 1 on [-b, b],
// 0 outside [-a, a], linear ramps between.
inline double spike_gate(double a, double b, double x) {
  if (!(a > b) || !(b > 0)) throw std::invalid_argument("spike_gate: need a > b > 0");
  const double s = a - b;
  return relu((x + a) / s) - relu((x + b) / s) - relu((x - b) / s) + relu((x - a) / s);
}

// Fully-connected ReLU network with all parameters clipped to [-B, B].
struct MlpParams {
  std::vector<int> layer_sizes;   // input, hidden..., output widths
  std::vector<MatrixXd> weights;  // layer l: (layer_sizes[l+1] x layer_sizes[l])
  std::vector<VectorXd> biases;
  double weight_bound = 10.0;  // B

  int depth() const { return static_cast<int>(weights.size()); }  // L

  long long weight_count() const {  // W: total trainable parameters
    long long total = 0;
    for (size_t l = 0; l < weights.size(); ++l) total += weights[l].size() + biases[l].size();
    return total;
  }

  double max_abs_param() const {
    double m = 0.0;
    for (size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].size() > 0) m = std::max(m, weights[l].cwiseAbs().maxCoeff());
      if (biases[l].size() > 0) m = std::max(m, biases[l].cwiseAbs().maxCoeff());
    }
    return m;
  }

  void clip() {
    for (size_t l = 0; l < weights.size(); ++l) {
      weights[l] = weights[l].cwiseMax(-weight_bound).cwiseMin(weight_bound);
      biases[l] = biases[l].cwiseMax(-weight_bound).cwiseMin(weight_bound);
    }
  }

  // He-style Gaussian initialization, deterministic in the seed.
  static MlpParams init(const std::vector<int>& sizes, double weight_bound, std::uint64_t seed) {
    if (sizes.size() < 2) throw std::invalid_argument("MlpParams: need at least input and output");
    for (int s : sizes)
      if (s < 1) throw std::invalid_argument("MlpParams: layer sizes must be positive");
    if (!(weight_bound > 0)) throw std::invalid_argument("MlpParams: weight bound must be positive");
    MlpParams p;
    p.layer_sizes = sizes;
    p.weight_bound = weight_bound;
    auto rng = rng_stream(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    for (size_t l = 0; l + 1 < sizes.size(); ++l) {
      const double scale = std::sqrt(2.0 / sizes[l]);
      MatrixXd w(sizes[l + 1], sizes[l]);
      for (int r = 0; r < w.rows(); ++r)
        for (int c = 0; c < w.cols(); ++c) w(r, c) = scale * z(rng);
      p.weights.push_back(std::move(w));
      p.biases.push_back(VectorXd::Zero(sizes[l + 1]));
    }
    p.clip();
    return p;
  }

  VectorXd forward(const VectorXd& input) const {
    if (input.size() != layer_sizes.front())
      throw std::invalid_argument("MlpParams::forward: input size mismatch");
    VectorXd h = input;
    for (size_t l = 0; l < weights.size(); ++l) {
      h = weights[l] * h + biases[l];
      if (l + 1 < weights.size()) h = h.cwiseMax(0.0);
    }
    return h;
  }
};

// Default architecture at desk scale: three hidden layers of width 64.
inline std::vector<int> default_layer_sizes(int input_dim, int output_dim) {
  return {input_dim, 64, 64, 64, output_dim};
}

namespace detail {

// Time features the true score depends on through (m_t, sigma_t^2).
inline VectorXd shared_features(const VectorXd& x, double t, const BetaSchedule& schedule) {
  const auto mp = marginal_params(schedule, t);
  VectorXd in(x.size() + 2);
  in.head(x.size()) = x;
  in(x.size()) = std::log(std::max(mp.sigma2, 1e-12));
  in(x.size() + 1) = mp.m;
  return in;
}

}  // namespace detail

// Shared-network score function: evaluates the MLP on (x, log sigma_t^2, m_t).
inline ScoreFunction make_shared_score(const MlpParams& params, const BetaSchedule& schedule) {
  if (params.layer_sizes.front() != params.layer_sizes.back() + 2)
    throw std::invalid_argument("make_shared_score: need input dim = output dim + 2");
  return [params, schedule](const VectorXd& x, double t) {
    return params.forward(detail::shared_features(x, t, schedule));
  };
}

// Per-knot networks glued along time: s(x, t) = sum_i net_i(x) gate_i(t - t_i)
// with gate_i the spike gate at (delta_i/2, delta_i/4) and delta_i half the
// smallest adjacent knot gap. Gate supports are disjoint, so at most one
// network is active at any t and the i-th network is reproduced exactly at t_i.
inline ScoreFunction build_gated_ensemble(const std::vector<MlpParams>& nets,
                                          const Partition& partition) {
  const std::vector<double>& knots = partition.forward_knots;
  if (nets.size() != knots.size())
    throw std::invalid_argument("build_gated_ensemble: need one network per partition knot");
  std::vector<double> half_width(knots.size());  // a_i = delta_i / 2
  for (size_t i = 0; i < knots.size(); ++i) {
    double gap = std::numeric_limits<double>::infinity();
    if (i > 0) gap = std::min(gap, knots[i] - knots[i - 1]);
    if (i + 1 < knots.size()) gap = std::min(gap, knots[i + 1] - knots[i]);
    if (!(gap > 0) || !std::isfinite(gap))
      throw std::invalid_argument("build_gated_ensemble: knots must be strictly increasing");
    half_width[i] = 0.25 * gap;  // delta_i = gap / 2, gate outer edge at delta_i / 2
  }
  return [nets, knots, half_width](const VectorXd& x, double t) {
    VectorXd out = VectorXd::Zero(nets.front().layer_sizes.back());
    // supports are disjoint; only neighbors of the insertion point can be live
    const auto it = std::lower_bound(knots.begin(), knots.end(), t);
    const long long hi = it - knots.begin();
    for (long long i = hi - 1; i <= hi; ++i) {
      if (i < 0 || i >= static_cast<long long>(knots.size())) continue;
      const double a = half_width[i];
      const double u = t - knots[i];
      if (std::abs(u) >= a) continue;  // gate vanishes outside its support
      out += spike_gate(a, 0.5 * a, u) * nets[i].forward(x);
    }
    return out;
  };
}

// Training knots: partition time values lying in [delta0, T - delta0], read as
// forward marginal times (the t = 0 endpoint has sigma_0 = 0 and is excluded).
// Returns indices into forward_knots; every retained knot also has a forward
// step h'_i giving its loss weight.
inline std::vector<int> training_knot_indices(const Partition& partition) {
  std::vector<int> idx;
  const double lo = partition.delta0 - 1e-12;
  const double hi = partition.horizon_T - partition.delta0 + 1e-12;
  for (size_t i = 0; i + 1 < partition.forward_knots.size(); ++i)
    if (partition.forward_knots[i] >= lo && partition.forward_knots[i] <= hi)
      idx.push_back(static_cast<int>(i));
  return idx;
}

namespace detail {

// One Monte-Carlo draw set for the score-matching objective. Row s holds
// X-hat, its knot time, the noise vector, and the weight h_i / m_i.
struct TrainingBatch {
  MatrixXd inputs;         // samples x D, forward-noised points
  std::vector<double> times;
  MatrixXd noises;         // samples x D
  std::vector<double> sigmas;
  std::vector<double> sample_weights;
  int dim = 0;
};

inline TrainingBatch draw_training_batch(const DiscreteMeasure& measure,
                                         const BetaSchedule& schedule,
                                         const Partition& partition,
                                         const std::vector<int>& m_list, std::uint64_t seed) {
  const auto knots = training_knot_indices(partition);
  if (knots.empty())
    throw std::invalid_argument("score-matching batch: no training knots in [delta0, T - delta0]");
  if (m_list.size() != knots.size())
    throw std::invalid_argument("score-matching batch: need one m_i per retained knot, got " +
                                std::to_string(m_list.size()) + " for " +
                                std::to_string(knots.size()) + " knots");
  for (int m : m_list)
    if (m < 1) throw std::invalid_argument("score-matching batch: every m_i must be >= 1");
  const int D = measure.dim();
  long long total = 0;
  for (int m : m_list) total += m;
  TrainingBatch batch;
  batch.dim = D;
  batch.inputs.resize(total, D);
  batch.noises.resize(total, D);
  batch.times.resize(total);
  batch.sigmas.resize(total);
  batch.sample_weights.resize(total);
  std::vector<double> cum(measure.size());
  double acc = 0.0;
  for (int i = 0; i < measure.size(); ++i) cum[i] = (acc += measure.weights(i));
  long long row = 0;
  for (size_t k = 0; k < knots.size(); ++k) {
    const int knot = knots[k];
    const double t = partition.forward_knots[knot];
    if (!(t > 0)) throw std::invalid_argument("score-matching batch: knot time must be positive");
    const double h = partition.forward_knots[knot + 1] - partition.forward_knots[knot];
    const auto mp = marginal_params(schedule, t);
    const double sigma = std::sqrt(std::max(mp.sigma2, 1e-12));
    auto rng = rng_stream(seed, static_cast<std::uint64_t>(knot));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int j = 0; j < m_list[k]; ++j, ++row) {
      const auto it = std::lower_bound(cum.begin(), cum.end(), unif(rng) * acc);
      const int idx = std::min(measure.size() - 1, static_cast<int>(it - cum.begin()));
      const VectorXd z = normal_vector(rng, D);
      batch.inputs.row(row) = mp.m * measure.points.row(idx) + sigma * z.transpose();
      batch.noises.row(row) = z.transpose();
      batch.times[row] = t;
      batch.sigmas[row] = sigma;
      batch.sample_weights[row] = h / m_list[k];
    }
  }
  return batch;
}

}  // namespace detail

// Weighted empirical score-matching objective on a fixed seeded draw:
//   sum_i sum_j (h_i / m_i) || s(Xhat_ij, t_i) + Z_ij / sigma_i ||^2
// over the retained training knots. Deterministic given the seed.
inline double mc_score_matching_loss(const ScoreFunction& score_fn, const DiscreteMeasure& measure,
                                     const BetaSchedule& schedule, const Partition& partition,
                                     const std::vector<int>& m_list, std::uint64_t seed) {
  const auto batch = detail::draw_training_batch(measure, schedule, partition, m_list, seed);
  double loss = 0.0;
  for (long long s = 0; s < batch.inputs.rows(); ++s) {
    const VectorXd x = batch.inputs.row(s).transpose();
    const VectorXd residual =
        score_fn(x, batch.times[s]) + batch.noises.row(s).transpose() / batch.sigmas[s];
    loss += batch.sample_weights[s] * residual.squaredNorm();
  }
  return loss;
}

struct LossGradients {
  double loss = 0.0;
  std::vector<MatrixXd> weight_grads;
  std::vector<VectorXd> bias_grads;
};

// Loss and analytic parameter gradients of the shared network on the same
// seeded draw as mc_score_matching_loss (plain backprop through the ReLU MLP).
inline LossGradients shared_score_loss_gradients(const MlpParams& params,
                                                 const DiscreteMeasure& measure,
                                                 const BetaSchedule& schedule,
                                                 const Partition& partition,
                                                 const std::vector<int>& m_list,
                                                 std::uint64_t seed) {
  const auto batch = detail::draw_training_batch(measure, schedule, partition, m_list, seed);
  LossGradients g;
  const int L = params.depth();
  g.weight_grads.reserve(L);
  g.bias_grads.reserve(L);
  for (int l = 0; l < L; ++l) {
    g.weight_grads.emplace_back(MatrixXd::Zero(params.weights[l].rows(), params.weights[l].cols()));
    g.bias_grads.emplace_back(VectorXd::Zero(params.biases[l].size()));
  }
  std::vector<VectorXd> act(L + 1), pre(L);
  for (long long s = 0; s < batch.inputs.rows(); ++s) {
    act[0] = detail::shared_features(batch.inputs.row(s).transpose(), batch.times[s], schedule);
    for (int l = 0; l < L; ++l) {
      pre[l] = params.weights[l] * act[l] + params.biases[l];
      act[l + 1] = l + 1 < L ? pre[l].cwiseMax(0.0).eval() : pre[l];
    }
    const VectorXd residual = act[L] + batch.noises.row(s).transpose() / batch.sigmas[s];
    const double w = batch.sample_weights[s];
    g.loss += w * residual.squaredNorm();
    VectorXd delta = 2.0 * w * residual;
    for (int l = L - 1; l >= 0; --l) {
      g.weight_grads[l].noalias() += delta * act[l].transpose();
      g.bias_grads[l] += delta;
      if (l > 0) {
        delta = (params.weights[l].transpose() * delta).eval();
        for (int r = 0; r < delta.size(); ++r)
          if (pre[l - 1](r) <= 0.0) delta(r) = 0.0;
      }
    }
  }
  return g;
}

struct TrainConfig {
  BetaSchedule schedule;
  Partition partition;
  std::vector<int> mc_per_step;  // one m_i per retained training knot
  enum class Optimizer { sgd, adam } optimizer = Optimizer::adam;
  double learning_rate = 1e-3;
  int steps = 2000;
  std::uint64_t rng_seed = 0;
};

struct TrainResult {
  MlpParams params;
  std::vector<double> trace;  // loss on the fixed draw before each update
};

// Full-batch minimization of the fixed-draw objective (the draw happens once;
// the objective is then a deterministic function of the parameters). Every
// update is followed by clipping to the weight bound. Divergence throws with
// the offending step.
inline TrainResult train(const MlpParams& initial, const DiscreteMeasure& measure,
                         const TrainConfig& config) {
  if (config.steps < 0) throw std::invalid_argument("train: need steps >= 0");
  if (!(config.learning_rate >= 0)) throw std::invalid_argument("train: negative learning rate");
  TrainResult result;
  result.params = initial;
  result.trace.reserve(config.steps);
  const int L = result.params.depth();
  std::vector<MatrixXd> mw(L), vw(L);
  std::vector<VectorXd> mb(L), vb(L);
  for (int l = 0; l < L; ++l) {
    mw[l] = MatrixXd::Zero(result.params.weights[l].rows(), result.params.weights[l].cols());
    vw[l] = mw[l];
    mb[l] = VectorXd::Zero(result.params.biases[l].size());
    vb[l] = mb[l];
  }
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  for (int step = 0; step < config.steps; ++step) {
    const auto g = shared_score_loss_gradients(result.params, measure, config.schedule,
                                               config.partition, config.mc_per_step,
                                               config.rng_seed);
    if (!std::isfinite(g.loss))
      throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
    result.trace.push_back(g.loss);
    const double t = static_cast<double>(step + 1);
    for (int l = 0; l < L; ++l) {
      if (config.optimizer == TrainConfig::Optimizer::sgd) {
        result.params.weights[l] -= config.learning_rate * g.weight_grads[l];
        result.params.biases[l] -= config.learning_rate * g.bias_grads[l];
      } else {
        mw[l] = beta1 * mw[l] + (1.0 - beta1) * g.weight_grads[l];
        vw[l] = beta2 * vw[l] + (1.0 - beta2) * g.weight_grads[l].cwiseProduct(g.weight_grads[l]);
        mb[l] = beta1 * mb[l] + (1.0 - beta1) * g.bias_grads[l];
        vb[l] = beta2 * vb[l] + (1.0 - beta2) * g.bias_grads[l].cwiseProduct(g.bias_grads[l]);
        const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
        result.params.weights[l] -=
            (config.learning_rate * (mw[l] / c1).array() / ((vw[l] / c2).array().sqrt() + eps))
                .matrix();
        result.params.biases[l] -=
            (config.learning_rate * (mb[l] / c1).array() / ((vb[l] / c2).array().sqrt() + eps))
                .matrix();
      }
    }
    result.params.clip();
  }
  return result;
}

// Flat text serialization: layer-size header, weight bound, then row-major
// weights and biases per layer at full precision.
inline void save_mlp(const MlpParams& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_mlp: cannot open " + path);
  out << std::setprecision(17);
  out << params.layer_sizes.size();
  for (int s : params.layer_sizes) out << ' ' << s;
  out << '\n' << params.weight_bound << '\n';
  for (size_t l = 0; l < params.weights.size(); ++l) {
    const MatrixXd& w = params.weights[l];
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) out << w(r, c) << (c + 1 < w.cols() ? ' ' : '\n');
    for (int r = 0; r < params.biases[l].size(); ++r)
      out << params.biases[l](r) << (r + 1 < params.biases[l].size() ? ' ' : '\n');
  }
  if (!out) throw std::runtime_error("save_mlp: write failed for " + path);
}

inline MlpParams load_mlp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_mlp: cannot open " + path);
  size_t count = 0;
  if (!(in >> count) || count < 2) throw std::runtime_error("load_mlp: bad header in " + path);
  MlpParams p;
  p.layer_sizes.resize(count);
  for (size_t i = 0; i < count; ++i)
    if (!(in >> p.layer_sizes[i]) || p.layer_sizes[i] < 1)
      throw std::runtime_error("load_mlp: bad layer size in " + path);
  if (!(in >> p.weight_bound) || !(p.weight_bound > 0))
    throw std::runtime_error("load_mlp: bad weight bound in " + path);
  for (size_t l = 0; l + 1 < count; ++l) {
    MatrixXd w(p.layer_sizes[l + 1], p.layer_sizes[l]);
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c)
        if (!(in >> w(r, c))) throw std::runtime_error("load_mlp: truncated weights in " + path);
    VectorXd b(p.layer_sizes[l + 1]);
    for (int r = 0; r < b.size(); ++r)
      if (!(in >> b(r))) throw std::runtime_error("load_mlp: truncated biases in " + path);
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
  }
  return p;
}

inline void save_loss_trace(const std::vector<double>& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_loss_trace: cannot open " + path);
  out << std::setprecision(17) << "step,loss\n";
  for (size_t i = 0; i < trace.size(); ++i) out << i << ',' << trace[i] << '\n';
  if (!out) throw std::runtime_error("save_loss_trace: write failed for " + path);
}

}  // namespace scorelab

#pragma once
// Shared numeric utilities: seeded RNG streams, log-sum-exp, least-squares
// fits, running moment accumulators, CSV tokenization, and a chunked
// parallel-for. Everything is deterministic given explicit seeds.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace scorelab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent generator for (seed, stream id). Every experiment cell, particle
// shard, and MC estimator draws from its own stream so results do not depend
// on worker count or evaluation order.
inline std::mt19937_64 rng_stream(std::uint64_t seed, std::uint64_t stream = 0) {
  const std::uint64_t s = splitmix64(splitmix64(seed) ^ splitmix64(stream ^ 0x5bd1e995u));
  return std::mt19937_64(s);
}

inline VectorXd normal_vector(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> z(0.0, 1.0);
  VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = z(rng);
  return v;
}

inline double log_sum_exp(const VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf (or a nan) propagates
  return m + std::log((v.array() - m).exp().sum());
}

inline double sq(double x) { return x * x; }

// Welford accumulator; stderr_mean() is the MC standard error of the mean.
struct MeanStderr {
  long long n = 0;
  double mean = 0.0, m2 = 0.0;
  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
  double stderr_mean() const { return n > 0 ? std::sqrt(variance() / static_cast<double>(n)) : 0.0; }
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double stderr_slope = 0.0;
  double r_squared = 1.0;
  int n_points = 0;
};

// Ordinary least squares of y against x with the usual slope standard error.
inline LinearFit fit_least_squares(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("fit_least_squares: need >= 2 paired points");
  const int n = static_cast<int>(x.size());
  double mx = 0, my = 0;
  for (int i = 0; i < n; ++i) { mx += x[i]; my += y[i]; }
  mx /= n; my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit f;
  f.n_points = n;
  if (sxx <= 0) { f.slope = 0; f.intercept = my; f.r_squared = 0; return f; }
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ssr = 0;
  for (int i = 0; i < n; ++i) ssr += sq(y[i] - (f.intercept + f.slope * x[i]));
  f.stderr_slope = n > 2 ? std::sqrt(ssr / (n - 2) / sxx) : 0.0;
  f.r_squared = syy > 0 ? std::max(0.0, 1.0 - ssr / syy) : 1.0;
  return f;
}

// Static-chunk parallel for; with threads <= 1 it degrades to a serial loop.
// Work items must be independent (each derives its own RNG stream).
inline void parallel_for(std::int64_t count, int threads, const std::function<void(std::int64_t)>& fn) {
  if (threads <= 1 || count < 2) {
    for (std::int64_t i = 0; i < count; ++i) fn(i);
    return;
  }
  const int workers = static_cast<int>(std::min<std::int64_t>(threads, count));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (std::int64_t i = w; i < count; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) {
    // trim surrounding whitespace
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

}  // namespace scorelab

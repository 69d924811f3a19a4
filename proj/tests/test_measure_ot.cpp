#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "scorelab/measure_ot.hpp"

using namespace scorelab;

namespace {

DiscreteMeasure random_uniform_measure(std::mt19937_64& rng, int n, int D, double span = 1.0) {
  std::uniform_real_distribution<double> unif(0.0, span);
  MatrixXd pts(n, D);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < D; ++d) pts(i, d) = unif(rng);
  return DiscreteMeasure::uniform(std::move(pts));
}

DiscreteMeasure random_weighted_measure(std::mt19937_64& rng, int n, int D, double span = 1.0) {
  std::uniform_real_distribution<double> unif(0.0, span);
  MatrixXd pts(n, D);
  VectorXd w(n);
  for (int i = 0; i < n; ++i) {
    w(i) = 0.05 + unif(rng);
    for (int d = 0; d < D; ++d) pts(i, d) = unif(rng);
  }
  w /= w.sum();
  return DiscreteMeasure(std::move(pts), std::move(w));
}

// Independent exact oracle for tiny weighted instances: enumerate basic
// feasible plans is overkill, but W_p^p is a linear program whose optimum for
// n=1 or m=1 is forced, and 2x2 instances admit a closed form: the optimal
// plan puts t mass on the (0,0) arc with t in [max(0, a0+b0-1), min(a0, b0)]
// and cost linear in t, so the optimum sits at an endpoint.
double wp_2x2_oracle(const DiscreteMeasure& a, const DiscreteMeasure& b, double p) {
  REQUIRE(a.size() == 2);
  REQUIRE(b.size() == 2);
  auto c = [&](int i, int j) {
    return std::pow((a.points.row(i) - b.points.row(j)).norm(), p);
  };
  const double a0 = a.weights(0), b0 = b.weights(0);
  auto cost_at = [&](double t) {
    return t * c(0, 0) + (a0 - t) * c(0, 1) + (b0 - t) * c(1, 0) +
           (1.0 - a0 - b0 + t) * c(1, 1);
  };
  const double lo = std::max(0.0, a0 + b0 - 1.0), hi = std::min(a0, b0);
  return std::pow(std::min(cost_at(lo), cost_at(hi)), 1.0 / p);
}

}  // namespace

TEST_CASE("measure validation") {
  MatrixXd pts(2, 2);
  pts << 0, 0, 1, 1;
  VectorXd w(2);
  w << 0.5, 0.5;
  REQUIRE_NOTHROW(DiscreteMeasure(pts, w));
  w << 0.6, 0.6;
  REQUIRE_THROWS_AS(DiscreteMeasure(pts, w), std::invalid_argument);
  w << -0.1, 1.1;
  REQUIRE_THROWS_AS(DiscreteMeasure(pts, w), std::invalid_argument);
  w << 0.5, 0.5;
  REQUIRE_THROWS_AS(DiscreteMeasure(MatrixXd(0, 2), VectorXd(0)), std::invalid_argument);
  REQUIRE(DiscreteMeasure::uniform(pts).is_uniform());
}

TEST_CASE("csv round trip") {
  auto rng = rng_stream(7);
  auto m = random_weighted_measure(rng, 17, 3);
  const auto path = std::filesystem::temp_directory_path() / "scorelab_measure_roundtrip.csv";
  save_measure_csv(m, path.string());
  const auto back = load_measure_csv(path.string());
  REQUIRE(back.size() == m.size());
  REQUIRE(back.dim() == m.dim());
  REQUIRE((back.points - m.points).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((back.weights - m.weights).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("moments match hand values") {
  MatrixXd pts(2, 2);
  pts << 3, 4, 0, 0;  // norms 5, 0
  VectorXd w(2);
  w << 0.5, 0.5;
  DiscreteMeasure m(pts, w);
  const auto m1 = moments(m, 1.0);
  REQUIRE(m1.value == Catch::Approx(2.5).epsilon(1e-14));
  REQUIRE(m1.sup_norm_max == Catch::Approx(4.0));
  const auto m2 = moments(m, 2.0);
  REQUIRE(m2.value == Catch::Approx(std::sqrt(12.5)).epsilon(1e-14));
  // sup-norm statistic is floored at 1
  MatrixXd small(1, 2);
  small << 0.1, -0.2;
  REQUIRE(moments(DiscreteMeasure::uniform(small), 1.0).sup_norm_max == 1.0);
  REQUIRE_THROWS_AS(moments(m, 0.0), std::invalid_argument);
}

TEST_CASE("two point masses: distance is the norm gap") {
  MatrixXd xa(1, 3), xb(1, 3);
  xa << 1, 2, 2;
  xb << 1, 0, 0;
  const auto a = DiscreteMeasure::uniform(xa), b = DiscreteMeasure::uniform(xb);
  for (double p : {1.0, 1.5, 2.0, 3.0}) {
    const auto [d, plan] = wasserstein_p_exact(a, b, p);
    REQUIRE(d == Catch::Approx(std::sqrt(8.0)).epsilon(1e-12));
    REQUIRE(plan.pairs.size() == 1);
    REQUIRE(plan.feasible(a, b));
  }
}

TEST_CASE("exact solver agrees with permutation oracle (uniform)") {
  auto rng = rng_stream(101);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 2 + int(rng() % 6);  // 2..7
    const int D = 1 + int(rng() % 3);
    const double p = (trial % 3 == 0) ? 1.0 : (trial % 3 == 1 ? 2.0 : 1.7);
    const auto a = random_uniform_measure(rng, n, D);
    const auto b = random_uniform_measure(rng, n, D);
    const auto [d, plan] = wasserstein_p_exact(a, b, p);
    const double oracle = wasserstein_p_bruteforce(a, b, p);
    REQUIRE(d == Catch::Approx(oracle).margin(1e-11));
    REQUIRE(plan.feasible(a, b));
  }
}

TEST_CASE("simplex agrees with closed-form 2x2 weighted oracle") {
  auto rng = rng_stream(102);
  for (int trial = 0; trial < 60; ++trial) {
    const double p = (trial % 2 == 0) ? 1.0 : 2.0;
    const auto a = random_weighted_measure(rng, 2, 2);
    const auto b = random_weighted_measure(rng, 2, 2);
    const auto [d, plan] = wasserstein_p_exact(a, b, p);
    REQUIRE(d == Catch::Approx(wp_2x2_oracle(a, b, p)).margin(1e-11));
    REQUIRE(plan.feasible(a, b));
  }
}

TEST_CASE("weighted simplex agrees with uniform assignment on replicated atoms") {
  // A weighted instance whose atoms are replicated to an equivalent uniform
  // instance must produce the same value through the two independent solvers.
  auto rng = rng_stream(103);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 3 + int(rng() % 3);
    const int D = 2;
    auto base_a = random_uniform_measure(rng, n, D);
    auto base_b = random_uniform_measure(rng, n, D);
    // weights in multiples of 1/8
    std::vector<int> mult_a(n, 1), mult_b(n, 1);
    for (int extra = n; extra < 8; ++extra) {
      mult_a[rng() % n]++;
      mult_b[rng() % n]++;
    }
    VectorXd wa(n), wb(n);
    for (int i = 0; i < n; ++i) {
      wa(i) = mult_a[i] / 8.0;
      wb(i) = mult_b[i] / 8.0;
    }
    DiscreteMeasure a(base_a.points, wa), b(base_b.points, wb);
    MatrixXd ra(8, D), rb(8, D);
    for (int i = 0, k = 0; i < n; ++i)
      for (int c = 0; c < mult_a[i]; ++c) ra.row(k++) = base_a.points.row(i);
    for (int i = 0, k = 0; i < n; ++i)
      for (int c = 0; c < mult_b[i]; ++c) rb.row(k++) = base_b.points.row(i);
    for (double p : {1.0, 2.0}) {
      const double via_simplex = wasserstein_p_exact(a, b, p).first;
      const double via_assignment =
          wasserstein_p_exact(DiscreteMeasure::uniform(ra), DiscreteMeasure::uniform(rb), p).first;
      REQUIRE(via_simplex == Catch::Approx(via_assignment).margin(1e-11));
    }
  }
}

TEST_CASE("metric axioms and p-monotonicity") {
  auto rng = rng_stream(104);
  const auto a = random_uniform_measure(rng, 12, 3);
  const auto b = random_uniform_measure(rng, 12, 3);
  const auto c = random_weighted_measure(rng, 9, 3);

  SECTION("identity of indiscernibles") {
    REQUIRE(wasserstein_p_exact(a, a, 2.0).first == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(wasserstein_p_exact(c, c, 1.0).first == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("symmetry") {
    for (double p : {1.0, 2.0})
      REQUIRE(wasserstein_p_exact(a, b, p).first ==
              Catch::Approx(wasserstein_p_exact(b, a, p).first).margin(1e-11));
  }
  SECTION("triangle inequality") {
    for (double p : {1.0, 2.0}) {
      const double ab = wasserstein_p_exact(a, b, p).first;
      const double ac = wasserstein_p_exact(a, c, p).first;
      const double cb = wasserstein_p_exact(c, b, p).first;
      REQUIRE(ab <= ac + cb + 1e-10);
    }
  }
  SECTION("W_p nondecreasing in p") {
    double prev = 0.0;
    for (double p : {1.0, 1.5, 2.0, 3.0}) {
      const double d = wasserstein_p_exact(a, b, p).first;
      REQUIRE(d >= prev - 1e-10);
      prev = d;
    }
  }
  SECTION("translation invariance") {
    MatrixXd shifted = b.points;
    shifted.rowwise() += Eigen::RowVector3d(0.3, -1.2, 0.7);
    DiscreteMeasure bs = DiscreteMeasure::uniform(shifted);
    MatrixXd ashift = a.points;
    ashift.rowwise() += Eigen::RowVector3d(0.3, -1.2, 0.7);
    DiscreteMeasure as = DiscreteMeasure::uniform(ashift);
    REQUIRE(wasserstein_p_exact(as, bs, 2.0).first ==
            Catch::Approx(wasserstein_p_exact(a, b, 2.0).first).margin(1e-11));
  }
}

TEST_CASE("plan is feasible and cost matches distance") {
  auto rng = rng_stream(105);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_weighted_measure(rng, 5 + int(rng() % 20), 2);
    const auto b = random_weighted_measure(rng, 5 + int(rng() % 20), 2);
    const auto [d, plan] = wasserstein_p_exact(a, b, 2.0);
    REQUIRE(plan.feasible(a, b));
    double cost = 0.0;
    for (const auto& e : plan.pairs)
      cost += e.mass * std::pow((a.points.row(e.source) - b.points.row(e.target)).norm(), 2.0);
    REQUIRE(cost == Catch::Approx(plan.cost_p).margin(1e-12));
    REQUIRE(d == Catch::Approx(std::pow(cost, 0.5)).margin(1e-12));
    // pairs sorted lexicographically
    for (size_t k = 1; k < plan.pairs.size(); ++k) {
      const auto &l = plan.pairs[k - 1], &r = plan.pairs[k];
      REQUIRE((l.source < r.source || (l.source == r.source && l.target < r.target)));
    }
  }
}

TEST_CASE("entropic value approaches the exact one as reg shrinks") {
  auto rng = rng_stream(106);
  const auto a = random_uniform_measure(rng, 24, 2);
  const auto b = random_weighted_measure(rng, 30, 2);
  const double exact = wasserstein_p_exact(a, b, 2.0).first;
  const double ent = wasserstein_p_entropic(a, b, 2.0);  // default reg 1e-3 x median
  REQUIRE(ent == Catch::Approx(exact).epsilon(0.02));
  REQUIRE(ent >= exact - 1e-9);  // entropic plan is feasible, so its cost dominates
}

TEST_CASE("entropic plan cost is nondecreasing in reg") {
  auto rng = rng_stream(107);
  const auto a = random_uniform_measure(rng, 16, 2);
  const auto b = random_uniform_measure(rng, 16, 2);
  const double med = detail::median_pair_cost(a, b, 1.0);
  double prev = -1.0;
  for (double factor : {3e-2, 1e-1, 3e-1, 1.0}) {
    const double v = wasserstein_p_entropic(a, b, 1.0, factor * med, 400000);
    REQUIRE(v >= prev - 1e-7);
    prev = v;
  }
}

TEST_CASE("entropic self-distance stays below reg log n") {
  auto rng = rng_stream(108);
  const auto a = random_uniform_measure(rng, 20, 2);
  const double med = detail::median_pair_cost(a, a, 1.0);
  const double reg = 1e-2 * med;
  const double v = wasserstein_p_entropic(a, a, 1.0, reg);
  REQUIRE(v <= reg * std::log(a.size()) + 1e-9);
}

TEST_CASE("entropic solver reports non-convergence") {
  auto rng = rng_stream(109);
  const auto a = random_uniform_measure(rng, 12, 2);
  const auto b = random_uniform_measure(rng, 12, 2);
  try {
    wasserstein_p_entropic(a, b, 2.0, 1e-7, 3, 1e-12);
    FAIL("expected SinkhornFailure");
  } catch (const SinkhornFailure& e) {
    REQUIRE(e.residual > 1e-12);
  }
}

TEST_CASE("kernel-mode entropic path matches the log-domain path") {
  auto rng = rng_stream(110);
  const auto a = random_uniform_measure(rng, 40, 3);
  const auto b = random_weighted_measure(rng, 55, 3);
  for (double p : {1.0, 2.0}) {
    const double med = detail::median_pair_cost(a, b, p);
    const double reg = 0.1 * med;
    const double log_domain = detail::sinkhorn_log_domain(
        [&] {
          MatrixXd C(a.size(), b.size());
          for (int i = 0; i < a.size(); ++i)
            for (int j = 0; j < b.size(); ++j)
              C(i, j) = detail::lp_cost(a.points.row(i), b.points.row(j), p);
          return C;
        }(),
        a.weights, b.weights, reg, 20000, 1e-10);
    const double kernel = detail::sinkhorn_kernel(a, b, p, reg, 20000, 1e-7);
    REQUIRE(kernel == Catch::Approx(log_domain).epsilon(2e-4));
  }
}

TEST_CASE("debiased divergence: zero on identical samples, tracks W_p across") {
  auto rng = rng_stream(111);
  const auto a = random_uniform_measure(rng, 60, 2);
  auto shifted_pts = a.points;
  shifted_pts.array() += 0.9;
  const auto b = DiscreteMeasure::uniform(shifted_pts);
  const double self = sinkhorn_divergence(a, a, 1.0);
  REQUIRE(self <= 1e-4);
  const double across = sinkhorn_divergence(a, b, 1.0);
  const double exact = wasserstein_p_exact(a, b, 1.0).first;
  REQUIRE(across == Catch::Approx(exact).epsilon(0.2));
  // cached-reference variant matches the one-shot variant up to the reg choice
  const auto ref = make_entropic_reference(b, 1.0);
  const double via_ref = sinkhorn_divergence_to(a, ref);
  REQUIRE(via_ref == Catch::Approx(across).epsilon(0.2));
}

TEST_CASE("multiscale bound dominates exact W_p^p") {
  auto rng = rng_stream(112);
  for (int trial = 0; trial < 30; ++trial) {
    const int D = 1 + int(rng() % 3);
    const double p = (trial % 2 == 0) ? 1.0 : 2.0;
    const auto a = random_uniform_measure(rng, 6 + int(rng() % 10), D);
    const auto b = random_weighted_measure(rng, 6 + int(rng() % 10), D);
    const double exact_pp = std::pow(wasserstein_p_exact(a, b, p).first, p);
    const double bound = multiscale_wp_upper_bound(a, b, p, 0, 5);
    REQUIRE(bound >= exact_pp - 1e-12);
  }
}

TEST_CASE("multiscale bound: identical measures cost at most the finest cell") {
  auto rng = rng_stream(113);
  const auto a = random_uniform_measure(rng, 25, 2);
  for (double p : {1.0, 2.0}) {
    const double bound = multiscale_wp_upper_bound(a, a, p, 0, 4);
    // everything matches in the finest cells: diam <= sqrt(D) 3^{-5} <= 3^{-4}
    REQUIRE(bound <= std::pow(3.0, -4.0 * p) + 1e-15);
  }
}

TEST_CASE("multiscale bound: hand-traced 1d pair") {
  // Atoms at 1/2 and 1/2 + 3^-5: distinct cells at the two finest levels of a
  // 0..4 cascade, same cell from level 2 down, so the match pays (3^-4)^p.
  MatrixXd xa(1, 1), xb(1, 1);
  xa << 0.5;
  xb << 0.5 + std::pow(3.0, -5.0);
  const auto a = DiscreteMeasure::uniform(xa), b = DiscreteMeasure::uniform(xb);
  const double p = 1.0;
  const double bound = multiscale_wp_upper_bound(a, b, p, 0, 4);
  const double direct = std::abs(xa(0, 0) - xb(0, 0));
  REQUIRE(bound >= direct - 1e-15);
  REQUIRE(bound <= std::pow(3.0, -3.0) + 1e-15);
  // boundary handling: the point 1.0 falls in the last cell, not past it
  MatrixXd edge(1, 1);
  edge << 1.0;
  REQUIRE_NOTHROW(multiscale_wp_upper_bound(DiscreteMeasure::uniform(edge),
                                            DiscreteMeasure::uniform(edge), 1.0, 0, 3));
  MatrixXd outside(1, 1);
  outside << 1.5;
  REQUIRE_THROWS_AS(multiscale_wp_upper_bound(DiscreteMeasure::uniform(outside),
                                              DiscreteMeasure::uniform(edge), 1.0, 0, 3),
                    std::invalid_argument);
}

TEST_CASE("input validation errors") {
  MatrixXd x2(2, 2), x3(2, 3);
  x2.setZero();
  x3.setZero();
  const auto a = DiscreteMeasure::uniform(x2);
  const auto b = DiscreteMeasure::uniform(x3);
  REQUIRE_THROWS_AS(wasserstein_p_exact(a, b, 2.0), std::invalid_argument);
  REQUIRE_THROWS_AS(wasserstein_p_exact(a, a, 0.5), std::invalid_argument);
  REQUIRE_THROWS_AS(wasserstein_p_bruteforce(a, b, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(multiscale_wp_upper_bound(a, b, 1.0, 0, 3), std::invalid_argument);
  REQUIRE_THROWS_AS(multiscale_wp_upper_bound(a, a, 1.0, 3, 0), std::invalid_argument);
}

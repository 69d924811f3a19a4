#include "scorelab/diffusion_process.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace scorelab;
using Catch::Approx;

namespace {

DiscreteMeasure point_mass(const VectorXd& x, int copies = 1) {
  MatrixXd pts(copies, x.size());
  for (int i = 0; i < copies; ++i) pts.row(i) = x.transpose();
  return DiscreteMeasure::uniform(std::move(pts));
}

double gaussian_log_density(const VectorXd& x) {
  const double D = static_cast<double>(x.size());
  return -0.5 * x.squaredNorm() - 0.5 * D * std::log(2.0 * M_PI);
}

}  // namespace

TEST_CASE("beta schedules evaluate and integrate in closed form") {
  SECTION("constant") {
    auto s = BetaSchedule::constant(1.5);
    REQUIRE(s.beta(0.0) == 1.5);
    REQUIRE(s.beta(7.3) == 1.5);
    REQUIRE(s.integral(1.0, 3.0) == Approx(3.0));
    REQUIRE(s.beta_lower == 1.5);
    REQUIRE(s.beta_upper == 1.5);
    REQUIRE_THROWS_AS(BetaSchedule::constant(0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(BetaSchedule::constant(-2.0), std::invalid_argument);
  }
  SECTION("affine with held tail") {
    auto s = BetaSchedule::affine(1.0, 0.5, 2.0);
    REQUIRE(s.beta(0.0) == Approx(1.0));
    REQUIRE(s.beta(2.0) == Approx(2.0));
    REQUIRE(s.beta(5.0) == Approx(2.0));  // held constant past the horizon
    REQUIRE(s.integral(0.0, 2.0) == Approx(3.0));
    REQUIRE(s.integral(0.0, 3.0) == Approx(5.0));
    REQUIRE(s.beta_lower == Approx(1.0));
    REQUIRE(s.beta_upper == Approx(2.0));
    // closed form matches quadrature of the evaluator
    auto f = [&](double t) { return s.beta(t); };
    REQUIRE(s.integral(0.3, 2.6) ==
            Approx(detail::adaptive_simpson(f, 0.3, 2.0) + detail::adaptive_simpson(f, 2.0, 2.6))
                .epsilon(1e-10));
    REQUIRE_THROWS_AS(BetaSchedule::affine(1.0, -1.0, 2.0), std::invalid_argument);
    REQUIRE_THROWS_AS(BetaSchedule::affine(1.0, 0.1, 0.0), std::invalid_argument);
  }
  SECTION("tabulated schedule with equal integral matches constant") {
    auto flat = BetaSchedule::tabulated({0.0, 1.0, 2.0}, {1.0, 1.0, 1.0});
    auto base = BetaSchedule::constant(1.0);
    for (double t : {0.2, 0.9, 1.6}) {
      auto a = marginal_params(flat, t);
      auto b = marginal_params(base, t);
      REQUIRE(a.m == Approx(b.m).epsilon(1e-9));
      REQUIRE(a.sigma2 == Approx(b.sigma2).epsilon(1e-9));
    }
    REQUIRE(flat.integral(0.3, 1.7) == Approx(1.4).epsilon(1e-10));
  }
  SECTION("tabulated bounds bracket every evaluation") {
    auto s = BetaSchedule::tabulated({0.0, 0.7, 1.5, 2.0}, {0.5, 1.5, 0.8, 1.2});
    REQUIRE(s.beta_lower <= 0.5);
    REQUIRE(s.beta_upper >= 1.5);
    for (int k = 0; k <= 2000; ++k) {
      const double t = 2.2 * k / 2000.0;
      const double b = s.beta(t);
      REQUIRE(b >= s.beta_lower - 1e-12);
      REQUIRE(b <= s.beta_upper + 1e-12);
    }
  }
  SECTION("tabulated evaluator is continuous") {
    auto s = BetaSchedule::tabulated({0.0, 0.7, 1.5, 2.0}, {0.5, 1.5, 0.8, 1.2});
    for (int k = 0; k < 2000; ++k) {
      const double t = 2.2 * k / 2000.0;
      REQUIRE(std::abs(s.beta(t + 1e-7) - s.beta(t)) < 1e-5);
    }
  }
  SECTION("tabulated validation") {
    REQUIRE_THROWS_AS(BetaSchedule::tabulated({0.0}, {1.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(BetaSchedule::tabulated({0.5, 1.0}, {1.0, 1.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(BetaSchedule::tabulated({0.0, 1.0, 1.0}, {1.0, 1.0, 1.0}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(BetaSchedule::tabulated({0.0, 1.0}, {1.0, -0.5}), std::invalid_argument);
  }
  SECTION("integral additivity across kinds") {
    std::vector<BetaSchedule> schedules{
        BetaSchedule::constant(0.8), BetaSchedule::affine(0.6, 0.3, 2.5),
        BetaSchedule::tabulated({0.0, 0.5, 1.3, 2.4}, {1.1, 0.7, 1.4, 0.9})};
    auto rng = rng_stream(17);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (const auto& s : schedules)
      for (int trial = 0; trial < 20; ++trial) {
        double a = u(rng), b = u(rng), c = u(rng);
        if (a > b) std::swap(a, b);
        if (b > c) std::swap(b, c);
        if (a > b) std::swap(a, b);
        REQUIRE(s.integral(a, b) + s.integral(b, c) ==
                Approx(s.integral(a, c)).margin(1e-10));
      }
    REQUIRE_THROWS_AS(schedules[0].integral(2.0, 1.0), std::invalid_argument);
  }
}

TEST_CASE("forward marginal parameters") {
  auto unit = BetaSchedule::constant(1.0);
  SECTION("endpoints and closed form") {
    auto p0 = marginal_params(unit, 0.7, 0.7);
    REQUIRE(p0.m == 1.0);
    REQUIRE(p0.sigma2 == 0.0);
    auto p = marginal_params(unit, std::log(2.0));
    REQUIRE(p.m == Approx(0.5));
    REQUIRE(p.sigma2 == Approx(0.75));
    REQUIRE_THROWS_AS(marginal_params(unit, 1.0, 0.5), std::invalid_argument);
    REQUIRE_THROWS_AS(marginal_params(unit, -0.1, 0.5), std::invalid_argument);
  }
  SECTION("m^2 + sigma2 = 1 and monotone decay") {
    auto tab = BetaSchedule::tabulated({0.0, 0.8, 2.0}, {1.2, 0.6, 1.0});
    double prev = 1.0;
    for (double t : {0.1, 0.4, 0.9, 1.7, 2.5}) {
      auto p = marginal_params(tab, t);
      REQUIRE(p.m * p.m + p.sigma2 == Approx(1.0).margin(1e-12));
      REQUIRE(p.m < prev);
      prev = p.m;
    }
  }
  SECTION("semigroup composition") {
    auto aff = BetaSchedule::affine(0.9, 0.4, 2.0);
    auto rng = rng_stream(23);
    std::uniform_real_distribution<double> u(0.0, 2.5);
    for (int trial = 0; trial < 25; ++trial) {
      double s = u(rng), t = u(rng), v = u(rng);
      if (s > t) std::swap(s, t);
      if (t > v) std::swap(t, v);
      if (s > t) std::swap(s, t);
      const double lhs = marginal_params(aff, s, t).m * marginal_params(aff, t, v).m;
      REQUIRE(lhs == Approx(marginal_params(aff, s, v).m).margin(1e-10));
    }
  }
}

TEST_CASE("forward sampling") {
  auto unit = BetaSchedule::constant(1.0);
  SECTION("t = 0 resamples the atoms exactly") {
    MatrixXd pts(3, 2);
    pts << 0.0, 1.0, -2.0, 0.5, 3.0, 3.0;
    auto m = DiscreteMeasure::uniform(std::move(pts));
    auto samples = sample_forward(m, unit, 0.0, 64, 5);
    for (int r = 0; r < samples.rows(); ++r) {
      bool hit = false;
      for (int i = 0; i < m.size(); ++i)
        hit = hit || samples.row(r) == m.points.row(i);
      REQUIRE(hit);
    }
  }
  SECTION("point mass diffuses to N(0, sigma_t^2 I)") {
    auto m = point_mass(VectorXd::Zero(3));
    const double t = 0.5;
    const double sigma2 = marginal_params(unit, t).sigma2;
    auto samples = sample_forward(m, unit, t, 4000, 11);
    const int N = static_cast<int>(samples.size());
    const double var = samples.reshaped().squaredNorm() / (N - 1);
    const double stderr5 = 5.0 * sigma2 * std::sqrt(2.0 / (N - 1));
    REQUIRE(std::abs(var - sigma2) < stderr5);
  }
  SECTION("large t matches the stationary Gaussian") {
    auto m = point_mass(VectorXd::Constant(3, 4.0));
    auto samples = sample_forward(m, unit, 20.0, 4000, 13);
    REQUIRE(marginal_params(unit, 20.0).m < 1e-8);
    const VectorXd mean = samples.colwise().mean();
    REQUIRE(mean.norm() < 5.0 * std::sqrt(3.0 / 4000.0));
  }
  SECTION("second moment matches m^2 M2^2 + sigma^2 D") {
    MatrixXd pts(3, 2);
    pts << 1.0, 0.0, -1.0, 2.0, 0.5, 0.5;
    VectorXd w(3);
    w << 0.5, 0.3, 0.2;
    DiscreteMeasure m{std::move(pts), std::move(w)};
    m.validate();
    const double t = 0.8;
    const auto mp = marginal_params(unit, t);
    const double m2sq = sq(moments(m, 2.0).value);
    const double expected = mp.m * mp.m * m2sq + mp.sigma2 * 2.0;
    auto samples = sample_forward(m, unit, t, 5000, 29);
    MeanStderr acc;
    for (int r = 0; r < samples.rows(); ++r) acc.add(samples.row(r).squaredNorm());
    REQUIRE(std::abs(acc.mean - expected) < 5.0 * acc.stderr_mean());
  }
  SECTION("determinism in the seed") {
    auto m = point_mass(VectorXd::Zero(2), 3);
    auto a = sample_forward(m, unit, 0.7, 32, 99);
    auto b = sample_forward(m, unit, 0.7, 32, 99);
    auto c = sample_forward(m, unit, 0.7, 32, 100);
    REQUIRE(a == b);
    REQUIRE(a != c);
  }
  SECTION("validation") {
    auto m = point_mass(VectorXd::Zero(2));
    REQUIRE_THROWS_AS(sample_forward(m, unit, -0.1, 8, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(sample_forward(m, unit, 0.1, 0, 1), std::invalid_argument);
  }
}

TEST_CASE("gaussian KL closed form") {
  REQUIRE(gaussian_kl(VectorXd::Zero(3), 1.0) == 0.0);
  VectorXd e1(1);
  e1 << 1.0;
  REQUIRE(gaussian_kl(e1, 1.0) == Approx(0.5));
  REQUIRE(gaussian_kl(VectorXd::Zero(2), 0.5) == Approx(0.5 - 1.0 - std::log(0.5)));
  REQUIRE_THROWS_AS(gaussian_kl(e1, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(gaussian_kl(e1, -1.0), std::invalid_argument);

  SECTION("matches numerical integration in one dimension") {
    const double mu = 0.3, s2 = 0.6;
    double kl = 0.0;
    const double h = 1e-3;
    for (double x = -8.0; x <= 8.0; x += h) {
      const double logp = -sq(x - mu) / (2 * s2) - 0.5 * std::log(2 * M_PI * s2);
      const double logq = -sq(x) / 2 - 0.5 * std::log(2 * M_PI);
      kl += std::exp(logp) * (logp - logq) * h;
    }
    VectorXd m(1);
    m << mu;
    REQUIRE(gaussian_kl(m, s2) == Approx(kl).epsilon(1e-5));
  }
}

TEST_CASE("forward KL bound to the stationary Gaussian") {
  auto unit = BetaSchedule::constant(1.0);
  SECTION("point mass at the origin evaluates exactly") {
    auto m = point_mass(VectorXd::Zero(2));
    REQUIRE(kl_bound_to_gaussian(m, unit, std::log(2.0)) == Approx(0.5));
  }
  SECTION("monotone decreasing in t and rejected below the window") {
    auto m = point_mass(VectorXd::Constant(2, 1.5), 2);
    double prev = std::numeric_limits<double>::infinity();
    for (double t : {0.7, 1.0, 1.5, 2.5}) {
      const double b = kl_bound_to_gaussian(m, unit, t);
      REQUIRE(b < prev);
      prev = b;
    }
    REQUIRE_THROWS_AS(kl_bound_to_gaussian(m, unit, 0.5), std::invalid_argument);
  }
  SECTION("Monte Carlo KL never exceeds the bound") {
    std::vector<BetaSchedule> schedules{BetaSchedule::constant(1.0), BetaSchedule::constant(0.7),
                                        BetaSchedule::affine(0.8, 0.2, 2.0)};
    int config = 0;
    for (const auto& schedule : schedules) {
      for (uint64_t seed = 1; seed <= 4; ++seed) {
        if (++config > 10) break;
        auto rng = rng_stream(seed, 41);
        const int n = 1 + static_cast<int>(seed % 3), D = 1 + static_cast<int>(config % 3);
        MatrixXd pts(n, D);
        for (int i = 0; i < n; ++i) pts.row(i) = 2.0 * normal_vector(rng, D).transpose();
        auto m = DiscreteMeasure::uniform(std::move(pts));
        const double t = std::log(2.0) / schedule.beta_upper + 0.3 + 0.2 * (config % 2);
        const double bound = kl_bound_to_gaussian(m, schedule, t);
        auto samples = sample_forward(m, schedule, t, 100000, seed + 100);
        MeanStderr kl;
        for (int r = 0; r < samples.rows(); ++r) {
          const VectorXd x = samples.row(r).transpose();
          kl.add(mixture_log_density(m, schedule, t, x) - gaussian_log_density(x));
        }
        REQUIRE(kl.mean <= bound + 3.0 * kl.stderr_mean());
        REQUIRE(kl.mean > -3.0 * kl.stderr_mean());  // KL is nonnegative
      }
    }
  }
}

TEST_CASE("mixture log density of the noised empirical measure") {
  auto unit = BetaSchedule::constant(1.0);
  SECTION("single atom at the origin is an exact Gaussian") {
    auto m = point_mass(VectorXd::Zero(2));
    const double t = 0.7;
    const double sigma2 = marginal_params(unit, t).sigma2;
    VectorXd x(2);
    x << 0.3, -0.4;
    const double expect = -x.squaredNorm() / (2 * sigma2) - std::log(2 * M_PI * sigma2);
    REQUIRE(mixture_log_density(m, unit, t, x) == Approx(expect).epsilon(1e-12));
  }
  SECTION("two symmetric atoms evaluated at the midpoint") {
    const double a = 1.3, t = 0.6;
    MatrixXd pts(2, 2);
    pts << a, 0.0, -a, 0.0;
    auto m = DiscreteMeasure::uniform(std::move(pts));
    const auto mp = marginal_params(unit, t);
    // both mixture components sit at distance m_t * a from the origin
    const double expect = -sq(mp.m * a) / (2 * mp.sigma2) - std::log(2 * M_PI * mp.sigma2);
    REQUIRE(mixture_log_density(m, unit, t, VectorXd::Zero(2)) ==
            Approx(expect).epsilon(1e-12));
  }
  SECTION("density integrates to one") {
    MatrixXd pts(3, 1);
    pts << -1.0, 0.5, 2.0;
    VectorXd w(3);
    w << 0.2, 0.5, 0.3;
    DiscreteMeasure m{std::move(pts), std::move(w)};
    m.validate();
    const double t = 0.8;
    const double s2 = 6.0;  // wide importance proposal N(0, s2)
    auto rng = rng_stream(77);
    std::normal_distribution<double> g;
    MeanStderr acc;
    for (int r = 0; r < 200000; ++r) {
      VectorXd x(1);
      x << std::sqrt(s2) * g(rng);
      const double logq = -x.squaredNorm() / (2 * s2) - 0.5 * std::log(2 * M_PI * s2);
      acc.add(std::exp(mixture_log_density(m, unit, t, x) - logq));
    }
    REQUIRE(std::abs(acc.mean - 1.0) < 3.0 * acc.stderr_mean());
  }
  SECTION("validation") {
    auto m = point_mass(VectorXd::Zero(2));
    REQUIRE_THROWS_AS(mixture_log_density(m, unit, 0.0, VectorXd::Zero(2)),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(mixture_log_density(m, unit, 0.5, VectorXd::Zero(3)),
                      std::invalid_argument);
  }
}

TEST_CASE("sup norm of heavy-tailed samples grows like n^{1/q}") {
  // Pareto tail index 5, finite q-th moment for q = 4: median over seeds of
  // max_i |X_i| should stay below n^{1/q} M_q 2^{1/q}.
  const double alpha = 5.0, q = 4.0;
  const double mq = std::pow(alpha / (alpha - q), 1.0 / q);
  for (int n : {100, 1000, 10000}) {
    std::vector<double> maxima;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      auto rng = rng_stream(seed, 91);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      double mx = 0.0;
      for (int i = 0; i < n; ++i)
        mx = std::max(mx, std::pow(1.0 - u(rng), -1.0 / alpha));
      maxima.push_back(mx);
    }
    std::nth_element(maxima.begin(), maxima.begin() + 10, maxima.end());
    const double median = maxima[10];
    REQUIRE(median <= std::pow(static_cast<double>(n), 1.0 / q) * mq * std::pow(2.0, 1.0 / q));
  }
}

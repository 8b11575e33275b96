#include "saetm/ctm.hpp"

#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace saetm;
using namespace saetm::ctm;

namespace {

MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

struct Moments {
  double mean = 0, var = 0, se = 0;
};

template <typename Vec>
Moments moments(const Vec& xs) {
  Moments m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  for (double x : xs) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(xs.size() - 1);
  m.se = std::sqrt(m.var / static_cast<double>(xs.size()));
  return m;
}

}  // namespace

TEST(CtmParams, RejectsEmptyAndInvalid) {
  auto p = CtmParams::isotropic(MatrixXd::Identity(2, 2), 1.0, 1.0, 1.0, 3.0, 0.0);
  EXPECT_NO_THROW(p.validate());

  auto empty = p;
  empty.alpha.resize(0);
  empty.mu.resize(0, 2);
  EXPECT_THROW(sample_document(empty, 1), Error);

  auto zero_dim = p;
  zero_dim.mu.resize(2, 0);
  EXPECT_THROW(sample_document(zero_dim, 1), Error);

  auto bad = p;
  bad.gamma_rate = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = p;
  bad.alpha[1] = -1.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = p;
  bad.noise_var = -1e-3;
  EXPECT_THROW(bad.validate(), Error);
  bad = p;
  bad.direction_cov = {MatrixXd::Identity(2, 2), (MatrixXd(2, 2) << 1, 0, 0, -1).finished()};
  EXPECT_THROW(bad.validate(), Error);
}

TEST(CtmSampler, DeterministicPerSeed) {
  auto p = CtmParams::isotropic(random_matrix(4, 5, 3), 0.5, 2.0, 1.5, 20.0, 0.1);
  p.direction_var.setConstant(0.05);
  const auto a = sample_document(p, 99);
  const auto b = sample_document(p, 99);
  EXPECT_EQ(a.num_contributions, b.num_contributions);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.strengths, b.strengths);
  EXPECT_TRUE(a.embedding == b.embedding);
  EXPECT_TRUE(a.directions == b.directions);
  const auto c = sample_document(p, 100);
  EXPECT_FALSE(a.embedding == c.embedding);
}

TEST(CtmSampler, SampleInvariants) {
  auto p = CtmParams::isotropic(random_matrix(5, 3, 4), 0.3, 1.5, 2.0, 15.0, 0.2);
  p.direction_var.setConstant(0.1);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = sample_document(p, seed);
    EXPECT_NEAR(s.theta.sum(), 1.0, 1e-9);
    EXPECT_TRUE((s.theta.array() >= 0.0).all());
    ASSERT_EQ(static_cast<std::int64_t>(s.assignments.size()), s.num_contributions);
    ASSERT_EQ(s.directions.rows(), s.num_contributions);
    VectorXd d = s.noise;
    for (std::int64_t n = 0; n < s.num_contributions; ++n) {
      EXPECT_GT(s.strengths[n], 0.0);
      d += s.strengths[n] * s.directions.row(n).transpose();
    }
    EXPECT_LT((d - s.embedding).norm(), 1e-12);
  }
}

TEST(CtmSampler, EmptyDocumentIsNoise) {
  auto p = CtmParams::isotropic(MatrixXd::Identity(2, 2), 1.0, 1.0, 1.0, 1.0, 0.5);
  p.rho_d = 0.0;
  // rho_d = 0 is only meaningful as a degenerate empty document.
  const auto s = sample_document(p, 5);
  EXPECT_EQ(s.num_contributions, 0);
  EXPECT_TRUE(s.embedding == s.noise);
}

TEST(CtmSampler, SingleTopicCollinear) {
  auto p = CtmParams::isotropic((MatrixXd(3, 2) << 0.6, 0.8, 1, 0, 0, 1).finished(), 1e-9, 1.0, 1.0, 1.0,
                                0.0);
  p.alpha[0] = 1e9;
  int seen = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = sample_document(p, seed);
    if (s.num_contributions == 0) continue;
    ++seen;
    const double sum = std::accumulate(s.strengths.begin(), s.strengths.end(), 0.0);
    EXPECT_LT((s.embedding - sum * p.mu.row(0).transpose()).norm(), 1e-12);
  }
  EXPECT_GT(seen, 10);
}

TEST(CtmSampler, MonteCarloMeanMatchesExpectedEmbedding) {
  // Fix theta by a huge concentration so the conditional mean applies.
  auto p = CtmParams::isotropic(MatrixXd::Identity(2, 2), 1.0, 2.0, 4.0, 6.0, 0.0);
  p.alpha << 3e8, 1e8;
  const VectorXd theta = (VectorXd(2) << 0.75, 0.25).finished();
  const VectorXd expected = expected_embedding(p, theta);
  // rho * shape / rate * theta_k
  EXPECT_NEAR(expected[0], 6.0 * 0.5 * 0.75, 1e-12);
  EXPECT_NEAR(expected[1], 6.0 * 0.5 * 0.25, 1e-12);

  const int n = 100000;
  std::vector<double> x0(n), x1(n);
  for (int i = 0; i < n; ++i) {
    const auto s = sample_document(p, 1000 + static_cast<std::uint64_t>(i));
    x0[i] = s.embedding[0];
    x1[i] = s.embedding[1];
  }
  const auto m0 = moments(x0), m1 = moments(x1);
  EXPECT_LT(std::abs(m0.mean - expected[0]), 3 * m0.se);
  EXPECT_LT(std::abs(m1.mean - expected[1]), 3 * m1.se);
}

TEST(CtmSampler, RandomThetaMeanK3) {
  const MatrixXd mu = random_matrix(3, 4, 11);
  auto p = CtmParams::isotropic(mu, 1.0, 1.5, 2.0, 8.0, 0.01);
  std::mt19937_64 rng(12);
  const VectorXd theta = sample_dirichlet(VectorXd::Ones(3), rng);
  p.alpha = theta * 1e9;
  const VectorXd expected = expected_embedding(p, theta);
  const int n = 50000;
  std::vector<std::vector<double>> cols(4, std::vector<double>(n));
  for (int i = 0; i < n; ++i) {
    const auto s = sample_document(p, 7'000'000 + static_cast<std::uint64_t>(i));
    for (int j = 0; j < 4; ++j) cols[j][i] = s.embedding[j];
  }
  for (int j = 0; j < 4; ++j) {
    const auto m = moments(cols[j]);
    EXPECT_LT(std::abs(m.mean - expected[j]), 3.5 * m.se) << "coordinate " << j;
  }
}

TEST(CtmSampler, FixedSupportHasExactSupport) {
  auto p = CtmParams::isotropic(random_matrix(6, 4, 5), 1.0, 1.0, 1.0, 1.0, 0.0);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = sample_fixed_support_document(p, 2, seed);
    EXPECT_EQ(s.num_contributions, 2);
    EXPECT_NE(s.assignments[0], s.assignments[1]);
    EXPECT_EQ((s.theta.array() > 0).count(), 2);
    EXPECT_NEAR(s.theta.sum(), 1.0, 1e-12);
  }
  EXPECT_THROW(sample_fixed_support_document(p, 7, 0), Error);
}

TEST(ExpectedEmbedding, OneHotAndZero) {
  const MatrixXd mu = random_matrix(3, 2, 8);
  auto p = CtmParams::isotropic(mu, 1.0, 1.0, 2.0, 5.0, 0.0);
  p.gamma_shape << 1.0, 3.0, 0.5;
  for (int k = 0; k < 3; ++k) {
    const VectorXd e = expected_embedding(p, VectorXd::Unit(3, k));
    EXPECT_LT((e - 5.0 * p.gamma_shape[k] / 2.0 * mu.row(k).transpose()).norm(), 1e-12);
  }
  p.mu.setZero();
  EXPECT_EQ(expected_embedding(p, VectorXd::Constant(3, 1.0 / 3)).norm(), 0.0);
}

TEST(AggregatedStrength, SmallRateIsMostlyZero) {
  const double rho = 0.01;
  const int n = 200000;
  const auto xs = sample_aggregated_strength(rho, 1.0, 1.0, n, 3);
  const double zeros = static_cast<double>(std::count(xs.begin(), xs.end(), 0.0)) / n;
  const double p = std::exp(-rho);
  const double half = 3.0 * std::sqrt(p * (1 - p) / n);
  EXPECT_NEAR(zeros, p, half);
  for (double x : xs) EXPECT_GE(x, 0.0);
}

TEST(AggregatedStrength, CompoundPoissonMean) {
  const double rho = 4.0, shape = 1.5, rate = 2.0;
  const auto xs = sample_aggregated_strength(rho, shape, rate, 200000, 17);
  const auto m = moments(xs);
  EXPECT_LT(std::abs(m.mean - rho * shape / rate), 3 * m.se);
  // Var = rho * E[lambda^2] = rho * shape (shape + 1) / rate^2
  EXPECT_NEAR(m.var, rho * shape * (shape + 1) / (rate * rate), 0.02 * m.var);
}

TEST(AggregatedStrength, HighActivityLimitIsGamma) {
  // rho_d = 1e4, alpha_0 = 1e-4 kappa, kappa = 2, theta_k = 0.5: Ga(1, 1).
  const double rho_d = 1e4, kappa = 2.0, theta = 0.5;
  const double shape = kappa / rho_d;
  const auto xs = sample_aggregated_strength(rho_d * theta, shape, 1.0, 1000000, 2024);
  const auto m = moments(xs);
  EXPECT_NEAR(m.mean, 1.0, 0.01);
  EXPECT_NEAR(m.var, 1.0, 0.01);
}

TEST(AggregatedStrength, DirichletConcentrationGrowsWithKappa) {
  // theta_tilde_1 = S_1 / (S_1 + S_2) with theta = (0.3, 0.7); its spread
  // shrinks as kappa grows.
  const double rho_d = 1e5;
  auto spread = [&](double kappa) {
    const double shape = kappa / rho_d;
    const auto s1 = sample_aggregated_strength(rho_d * 0.3, shape, 1.0, 20000, 1);
    const auto s2 = sample_aggregated_strength(rho_d * 0.7, shape, 1.0, 20000, 2);
    std::vector<double> t;
    for (std::size_t i = 0; i < s1.size(); ++i)
      if (s1[i] + s2[i] > 0) t.push_back(s1[i] / (s1[i] + s2[i]));
    return moments(t).var;
  };
  const double v10 = spread(10.0), v1000 = spread(1000.0);
  EXPECT_LT(v1000, v10);
  // Beta(kappa theta_1, kappa theta_2) variance
  EXPECT_NEAR(v10, 0.3 * 0.7 / 11.0, 0.1 * 0.3 * 0.7 / 11.0);
}

TEST(Bessel, MatchesStandardLibrary) {
  for (double x : {1e-8, 0.1, 0.5, 1.0, 3.0, 7.5, 12.0, 19.9, 20.0, 20.1, 25.0, 40.0, 80.0, 300.0}) {
    const double ref = std::cyl_bessel_i(1.0, x);
    EXPECT_NEAR(special::bessel_i1(x) / ref, 1.0, 1e-12) << "x=" << x;
    EXPECT_NEAR(special::bessel_i1_scaled(x) / (ref * std::exp(-x)), 1.0, 1e-12) << "x=" << x;
  }
  EXPECT_EQ(special::bessel_i1(0.0), 0.0);
  EXPECT_TRUE(std::isfinite(special::bessel_i1_scaled(1e6)));
}

TEST(CompoundGamma, ZeroMassAndDomain) {
  EXPECT_NEAR(compound_gamma_zero_mass(std::log(2.0)), 0.5, 1e-15);
  EXPECT_THROW(compound_gamma_pdf(0.0, 1.0, 1.0), Error);
  EXPECT_THROW(compound_gamma_pdf(-1.0, 1.0, 1.0), Error);
}

TEST(CompoundGamma, MatchesSeriesDensity) {
  // Density of a Poisson number of unit-shape Gammas, summed over N.
  for (double rho : {0.3, 2.0, 15.0})
    for (double rate : {0.5, 1.0, 3.0})
      for (double a : {0.01, 0.5, 2.0, 10.0}) {
        double series = 0.0, log_pois = -rho;
        for (int n = 1; n < 300; ++n) {
          log_pois += std::log(rho / n);
          series += std::exp(log_pois + n * std::log(rate) + (n - 1) * std::log(a) - rate * a - std::lgamma(n));
        }
        EXPECT_NEAR(compound_gamma_pdf(a, rho, rate), series, 1e-12 * std::max(1.0, series))
            << rho << " " << rate << " " << a;
      }
}

TEST(CompoundGamma, NormalizesWithAtom) {
  using boost::math::quadrature::gauss_kronrod;
  for (double rho : {0.5, 2.0, 10.0}) {
    for (double rate : {1.0, 2.5}) {
      const double integral = gauss_kronrod<double, 61>::integrate(
          [&](double a) { return compound_gamma_pdf(a, rho, rate); }, 0.0,
          std::numeric_limits<double>::infinity(), 15, 1e-12);
      EXPECT_NEAR(integral + compound_gamma_zero_mass(rho), 1.0, 1e-6) << rho << " " << rate;
    }
  }
}

TEST(MapObjective, EqualsSaeObjectiveAtUnitPrior) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 1 + trial % 6, K = 1 + trial % 5;
    MapHyper<double> h;
    h.kappa = 1;
    h.beta = u(rng) + 0.1;
    h.alpha = VectorXd::Ones(K);
    h.noise_var = u(rng) + 0.05;
    h.decoder = random_matrix(d, K, 1000 + trial);
    VectorXd a(K), doc = random_matrix(d, 1, 5000 + trial);
    for (int k = 0; k < K; ++k) a[k] = u(rng);
    a[0] += 0.01;
    EXPECT_EQ(map_objective(a, doc, h), sae_l1_objective(a, doc, h.decoder, h.noise_var, h.beta));
  }
}

TEST(MapObjective, PurePenalty) {
  MapHyper<double> h;
  h.kappa = 1;
  h.beta = 2;
  h.alpha = VectorXd::Ones(2);
  h.noise_var = 1;
  h.decoder = MatrixXd::Zero(3, 2);
  EXPECT_DOUBLE_EQ(map_objective<double>(VectorXd::Constant(2, 0.5), VectorXd::Zero(3), h), 2.0);
}

TEST(MapObjective, PriorTerms) {
  MapHyper<double> h;
  h.kappa = 3;
  h.beta = 0.5;
  h.alpha = (VectorXd(2) << 2.0, 0.5).finished();
  h.noise_var = 1;
  h.decoder = MatrixXd::Zero(1, 2);
  const VectorXd a = (VectorXd(2) << 1.0, 3.0).finished();
  const double expected = 0.5 * 4 + (1 - 3) * std::log(4.0) + (1 - 2.0) * std::log(0.25) + (1 - 0.5) * std::log(0.75);
  EXPECT_NEAR(map_objective<double>(a, VectorXd::Zero(1), h), expected, 1e-14);
}

TEST(MapObjective, DomainErrors) {
  MapHyper<double> h;
  h.alpha = (VectorXd(2) << 2.0, 1.0).finished();
  h.decoder = MatrixXd::Identity(2, 2);
  const VectorXd doc = VectorXd::Zero(2);
  try {
    map_objective(VectorXd::Zero(2).eval(), doc, h);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DomainError);
  }
  // theta_0 = 0 with alpha_0 = 2 hits log 0.
  EXPECT_THROW(map_objective((VectorXd(2) << 0.0, 1.0).finished(), doc, h), Error);
  // theta_1 = 0 is fine when alpha_1 = 1.
  EXPECT_NO_THROW(map_objective((VectorXd(2) << 1.0, 0.0).finished(), doc, h));
  EXPECT_THROW(map_objective((VectorXd(2) << -1.0, 2.0).finished(), doc, h), Error);
  h.noise_var = 0;
  EXPECT_THROW(map_objective((VectorXd(2) << 1.0, 1.0).finished(), doc, h), Error);
}

TEST(SaeL1Objective, Examples) {
  const MatrixXd w = random_matrix(3, 2, 2);
  const VectorXd a = (VectorXd(2) << 1.0, 0.0).finished();
  EXPECT_DOUBLE_EQ(sae_l1_objective<double>(a, w * a, w, 1.0, 0.5), 0.5);
  const VectorXd doc = (VectorXd(3) << 1.0, -2.0, 2.0).finished();
  EXPECT_DOUBLE_EQ(sae_l1_objective<double>(VectorXd::Zero(2), doc, w, 0.5, 3.0), 9.0);
}

TEST(SaeL1Objective, GradientMatchesFiniteDifferences) {
  for (int trial = 0; trial < 20; ++trial) {
    const MatrixXd w = random_matrix(5, 4, 100 + trial);
    const VectorXd doc = random_matrix(5, 1, 200 + trial);
    VectorXd a = random_matrix(4, 1, 300 + trial).cwiseAbs().array() + 0.5;
    const double s2 = 0.7, beta = 0.3;
    const VectorXd g = sae_l1_gradient(a, doc, w, s2, beta);
    for (int k = 0; k < 4; ++k) {
      const double h = 1e-5;
      VectorXd ap = a, am = a;
      ap[k] += h;
      am[k] -= h;
      const double fd = (sae_l1_objective(ap, doc, w, s2, beta) - sae_l1_objective(am, doc, w, s2, beta)) / (2 * h);
      EXPECT_NEAR(g[k], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(SaeL1Objective, MapMinimizerAgrees) {
  // Two independent optimizers: projected gradient on the SAE objective and
  // coordinate descent with closed-form updates on the MAP objective.
  const MatrixXd w = random_matrix(6, 3, 41);
  const VectorXd doc = w * (VectorXd(3) << 1.0, 0.0, 2.0).finished() + 0.1 * random_matrix(6, 1, 42);
  const double s2 = 1.0, beta = 0.2;
  MapHyper<double> h{1.0, beta, VectorXd::Ones(3), s2, w};

  VectorXd a = VectorXd::Constant(3, 0.5);
  const double lr = 1.0 / (w.transpose() * w).eigenvalues().real().maxCoeff();
  for (int it = 0; it < 20000; ++it) a = (a - lr * sae_l1_gradient(a, doc, w, s2, beta)).cwiseMax(0.0);

  VectorXd b = VectorXd::Constant(3, 0.5);
  for (int sweep = 0; sweep < 2000; ++sweep)
    for (int k = 0; k < 3; ++k) {
      const VectorXd r = doc - w * b + w.col(k) * b[k];
      b[k] = std::max(0.0, (w.col(k).dot(r) - beta * s2) / w.col(k).squaredNorm());
    }
  EXPECT_NEAR(map_objective(b, doc, h), sae_l1_objective(a, doc, w, s2, beta), 1e-4);
}

TEST(FixedSparsity, ObjectiveExamples) {
  const MatrixXd w = random_matrix(4, 6, 9);
  VectorXd a = VectorXd::Zero(6);
  a[1] = 2.0;
  a[4] = 0.5;
  EXPECT_NEAR(fixed_sparsity_map_objective<double>(a, 2, w * a, w, 0.3), 0.0, 1e-24);
  EXPECT_THROW(fixed_sparsity_map_objective<double>(a, 1, w * a, w, 0.3), Error);
  const VectorXd full = VectorXd::Constant(6, 1.0);
  const VectorXd doc = random_matrix(4, 1, 10);
  EXPECT_DOUBLE_EQ(fixed_sparsity_map_objective<double>(full, 6, doc, w, 0.3),
                   (doc - w * full).squaredNorm() / 0.6);
}

TEST(FixedSparsity, BruteForceMatchesSupportEnumeration) {
  // Enumerate the C(6, 2) = 15 two-element supports plus singletons with
  // nonnegative least squares solved by normal equations.
  for (int trial = 0; trial < 25; ++trial) {
    const MatrixXd w = random_matrix(4, 6, 500 + trial);
    const VectorXd doc = random_matrix(4, 1, 600 + trial);
    double best = doc.squaredNorm() / 2.0;
    for (int i = 0; i < 6; ++i) {
      const double c = w.col(i).dot(doc) / w.col(i).squaredNorm();
      if (c >= 0) best = std::min(best, (doc - c * w.col(i)).squaredNorm() / 2.0);
      for (int j = i + 1; j < 6; ++j) {
        Eigen::Matrix2d g;
        g << w.col(i).dot(w.col(i)), w.col(i).dot(w.col(j)), w.col(j).dot(w.col(i)), w.col(j).dot(w.col(j));
        const Eigen::Vector2d rhs(w.col(i).dot(doc), w.col(j).dot(doc));
        const Eigen::Vector2d c2 = g.inverse() * rhs;
        if (c2.minCoeff() < 0) continue;
        best = std::min(best, (doc - c2[0] * w.col(i) - c2[1] * w.col(j)).squaredNorm() / 2.0);
      }
    }
    const auto sol = fixed_sparsity_map_bruteforce<double>(doc, w, 2, 1.0);
    EXPECT_NEAR(sol.objective, best, 1e-10);
    EXPECT_LE((sol.a.array() != 0).count(), 2);
    EXPECT_NEAR(fixed_sparsity_map_objective<double>(sol.a, 2, doc, w, 1.0), sol.objective, 1e-12);
  }
}

TEST(MapObjective, FloatInstantiation) {
  MapHyper<float> h;
  h.alpha = Vector<float>::Ones(2);
  h.decoder = Matrix<float>::Identity(2, 2);
  const Vector<float> a = (Vector<float>(2) << 1.f, 2.f).finished();
  const Vector<float> doc = (Vector<float>(2) << 1.f, 2.f).finished();
  EXPECT_FLOAT_EQ(map_objective(a, doc, h), 3.f);
}

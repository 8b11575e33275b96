#pragma once

// Continuous topic model: generative sampler, compound Poisson-Gamma prior,
// and the MAP objectives whose special cases are the SAE training losses.

#include "saetm/common.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace saetm::ctm {

/// Generative parameters of the continuous topic model.
///
/// `direction_var` holds isotropic covariances (Sigma_k = v_k * I). When
/// `direction_cov` is non-empty it takes precedence and must hold K PSD
/// d x d matrices.
struct CtmParams {
  VectorXd alpha;            // Dirichlet concentration, K
  MatrixXd mu;               // topic directions, K x d
  VectorXd direction_var;    // isotropic Sigma_k, K (may be zero)
  std::vector<MatrixXd> direction_cov;
  VectorXd gamma_shape;      // per-topic strength shape, K
  double gamma_rate = 1.0;   // shared strength rate
  double rho_d = 1.0;        // Poisson rate of contributions per document
  double noise_var = 0.0;    // sigma^2 of the additive noise

  Eigen::Index num_topics() const { return alpha.size(); }
  Eigen::Index dim() const { return mu.cols(); }

  /// Throws saetm::Error when any invariant is violated.
  void validate() const;

  /// Isotropic parameters with a shared shape and zero covariance.
  static CtmParams isotropic(const MatrixXd& directions, double alpha, double shape, double rate,
                             double rho_d, double noise_var);
};

struct CtmSample {
  VectorXd theta;
  std::int64_t num_contributions = 0;
  std::vector<int> assignments;
  std::vector<double> strengths;
  MatrixXd directions;  // N x d
  VectorXd noise;
  VectorXd embedding;
};

/// Draws one document following the four generative steps: topic mix,
/// contribution count, per-contribution topic/direction/strength, and the
/// noisy sum. Deterministic given the seed.
CtmSample sample_document(const CtmParams& params, std::uint64_t seed);

/// Document with a fixed active-topic support: `support_size` distinct topics
/// chosen uniformly, one Gamma strength each. This is the deterministic-support
/// counterpart used for fixed-sparsity (TopK) models.
CtmSample sample_fixed_support_document(const CtmParams& params, int support_size,
                                        std::uint64_t seed);

/// E[D | theta] = sum_k theta_k * rho_d * (shape_k / rate) * mu_k.
VectorXd expected_embedding(const CtmParams& params, const VectorXd& theta);

/// Samples of S = sum_{i<=N} lambda_i with N ~ Pois(rho_topic) and
/// lambda_i ~ Ga(shape, rate); S = 0 when N = 0.
///
/// Uses inverse-transform sampling on two uniform streams (one for N, one for
/// the conditional Gamma), so calls with the same seed but different rates are
/// coupled. Conditional on N, S ~ Ga(N * shape, rate).
std::vector<double> sample_aggregated_strength(double rho_topic, double shape, double rate,
                                               std::int64_t n_samples, std::uint64_t seed);

/// Dirichlet draw computed in log space so that tiny concentrations do not
/// underflow to an all-zero vector.
template <typename Rng>
VectorXd sample_dirichlet(const VectorXd& alpha, Rng& rng);

// Compound Poisson-Gamma with unit shape. Point mass exp(-rho) at zero and
// the density below on a > 0.
double compound_gamma_zero_mass(double rho);
double compound_gamma_pdf(double a, double rho, double rate);

namespace special {
/// Modified Bessel function I_1. Series below 20, asymptotic expansion above.
double bessel_i1(double x);
/// exp(-x) * I_1(x), finite for all x >= 0.
double bessel_i1_scaled(double x);
}  // namespace special

/// Hyperparameters of the collapsed model s ~ Ga(kappa, beta),
/// theta ~ Dir(alpha), D = W a + eps.
template <typename Scalar>
struct MapHyper {
  Scalar kappa = 1;
  Scalar beta = 1;
  Vector<Scalar> alpha;
  Scalar noise_var = 1;
  Matrix<Scalar> decoder;  // d x K, columns are topic directions
};

template <typename Scalar>
Scalar reconstruction_term(const Vector<Scalar>& a, const Vector<Scalar>& doc,
                           const Matrix<Scalar>& decoder, Scalar noise_var) {
  require(decoder.cols() == a.size() && decoder.rows() == doc.size(), ErrorCode::DimensionMismatch,
          "decoder must be d x K");
  const Vector<Scalar> residual = doc - decoder * a;
  return residual.squaredNorm() / (Scalar(2) * noise_var);
}

/// (1/2 sigma^2) ||D - W a||^2 + beta ||a||_1 for a >= 0.
template <typename Scalar>
Scalar sae_l1_objective(const Vector<Scalar>& a, const Vector<Scalar>& doc,
                        const Matrix<Scalar>& decoder, Scalar noise_var, Scalar beta) {
  require((a.array() >= Scalar(0)).all(), ErrorCode::DomainError, "activations must be >= 0");
  Scalar value = reconstruction_term(a, doc, decoder, noise_var);
  value += beta * a.sum();
  return value;
}

template <typename Scalar>
Vector<Scalar> sae_l1_gradient(const Vector<Scalar>& a, const Vector<Scalar>& doc,
                               const Matrix<Scalar>& decoder, Scalar noise_var, Scalar beta) {
  const Vector<Scalar> residual = doc - decoder * a;
  Vector<Scalar> grad = -(decoder.transpose() * residual) / noise_var;
  grad.array() += beta;
  return grad;
}

/// Negative log-posterior of the collapsed model in the a-parameterization
/// (s = ||a||_1, theta = a / s), constant dropped. The accumulation order
/// matches sae_l1_objective so that kappa = 1, alpha = 1 reproduces it exactly.
template <typename Scalar>
Scalar map_objective(const Vector<Scalar>& a, const Vector<Scalar>& doc, const MapHyper<Scalar>& h) {
  require(h.noise_var > Scalar(0), ErrorCode::InvalidArgument, "noise_var must be > 0");
  require(h.alpha.size() == a.size(), ErrorCode::DimensionMismatch, "alpha must have K entries");
  require((a.array() >= Scalar(0)).all(), ErrorCode::DomainError, "activations must be >= 0");
  const Scalar s = a.sum();
  require(s > Scalar(0), ErrorCode::DomainError, "theta undefined at s = 0");

  Scalar value = reconstruction_term(a, doc, h.decoder, h.noise_var);
  value += h.beta * s;
  value += (Scalar(1) - h.kappa) * std::log(s);
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const Scalar coef = Scalar(1) - h.alpha[k];
    if (coef == Scalar(0)) continue;
    const Scalar theta_k = a[k] / s;
    require(theta_k > Scalar(0), ErrorCode::DomainError, "log(theta_k) at theta_k = 0 with alpha_k != 1");
    value += coef * std::log(theta_k);
  }
  return value;
}

/// Reconstruction-only objective under a hard support constraint; the prior
/// is constant on the feasible set.
template <typename Scalar>
Scalar fixed_sparsity_map_objective(const Vector<Scalar>& a, int support_size,
                                    const Vector<Scalar>& doc, const Matrix<Scalar>& decoder,
                                    Scalar noise_var) {
  require((a.array() >= Scalar(0)).all(), ErrorCode::DomainError, "activations must be >= 0");
  const auto active = (a.array() != Scalar(0)).count();
  require(active <= support_size, ErrorCode::DomainError,
          "activation has " + std::to_string(active) + " nonzeros, support size is " +
              std::to_string(support_size));
  return reconstruction_term(a, doc, decoder, noise_var);
}

template <typename Scalar>
struct SparseMapSolution {
  Vector<Scalar> a;
  Scalar objective;
};

/// Exact nonnegative MAP under |support| <= support_size by enumerating every
/// support and keeping least-squares fits that are nonnegative. Exponential in
/// K; intended for small instances and as a reference.
template <typename Scalar>
SparseMapSolution<Scalar> fixed_sparsity_map_bruteforce(const Vector<Scalar>& doc,
                                                        const Matrix<Scalar>& decoder,
                                                        int support_size, Scalar noise_var) {
  const auto num_features = static_cast<int>(decoder.cols());
  require(support_size >= 0, ErrorCode::InvalidArgument, "support size must be >= 0");
  require(num_features <= 24, ErrorCode::InvalidArgument, "brute force limited to K <= 24");

  SparseMapSolution<Scalar> best{Vector<Scalar>::Zero(num_features),
                                 reconstruction_term<Scalar>(Vector<Scalar>::Zero(num_features),
                                                             doc, decoder, noise_var)};
  const std::uint32_t limit = 1u << num_features;
  std::vector<int> cols;
  for (std::uint32_t mask = 1; mask < limit; ++mask) {
    if (std::popcount(mask) > support_size) continue;
    cols.clear();
    for (int k = 0; k < num_features; ++k)
      if (mask & (1u << k)) cols.push_back(k);
    Matrix<Scalar> sub(decoder.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) sub.col(j) = decoder.col(cols[j]);
    const Vector<Scalar> coef = sub.colPivHouseholderQr().solve(doc);
    if ((coef.array() < Scalar(0)).any()) continue;
    Vector<Scalar> a = Vector<Scalar>::Zero(num_features);
    for (std::size_t j = 0; j < cols.size(); ++j) a[cols[j]] = coef[j];
    const Scalar value = reconstruction_term(a, doc, decoder, noise_var);
    if (value < best.objective) best = {a, value};
  }
  return best;
}

template <typename Rng>
VectorXd sample_dirichlet(const VectorXd& alpha, Rng& rng) {
  // log G(a) = log G(a + 1) + log(U) / a
  VectorXd log_g(alpha.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Eigen::Index k = 0; k < alpha.size(); ++k) {
    std::gamma_distribution<double> gamma(alpha[k] + 1.0, 1.0);
    double u = unif(rng);
    while (u <= 0.0) u = unif(rng);
    log_g[k] = std::log(gamma(rng)) + std::log(u) / alpha[k];
  }
  const double top = log_g.maxCoeff();
  VectorXd theta = (log_g.array() - top).exp();
  theta /= theta.sum();
  return theta;
}

}  // namespace saetm::ctm

#include "saetm/ctm.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <limits>
#include <numbers>
#include <random>

namespace saetm::ctm {

namespace {

// Cumulative Poisson table for inverse-transform draws: the smallest n with
// cdf[n] >= u. Covers mass up to 1 - 1e-16; the tail beyond is clamped.
class PoissonInverse {
 public:
  explicit PoissonInverse(double rate) {
    const double upper = rate + 40.0 * std::sqrt(rate) + 60.0;
    const auto n_max = static_cast<std::size_t>(std::ceil(upper));
    cdf_.reserve(n_max + 1);
    double total = 0.0;
    for (std::size_t n = 0; n <= n_max; ++n) {
      const double nd = static_cast<double>(n);
      total += std::exp(nd * std::log(rate) - rate - std::lgamma(nd + 1.0));
      cdf_.push_back(total);
    }
  }

  std::int64_t operator()(double u) const {
    const auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) return static_cast<std::int64_t>(cdf_.size()) - 1;
    return static_cast<std::int64_t>(it - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

VectorXd sample_gaussian_direction(const CtmParams& params, int topic, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = params.dim();
  VectorXd z(d);
  for (Eigen::Index i = 0; i < d; ++i) z[i] = normal(rng);
  VectorXd w = params.mu.row(topic).transpose();
  if (!params.direction_cov.empty()) {
    const MatrixXd& cov = params.direction_cov[static_cast<std::size_t>(topic)];
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
    const VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    w += eig.eigenvectors() * root.asDiagonal() * z;
  } else if (params.direction_var.size() > 0 && params.direction_var[topic] > 0.0) {
    w += std::sqrt(params.direction_var[topic]) * z;
  }
  return w;
}

VectorXd sample_noise(const CtmParams& params, std::mt19937_64& rng) {
  VectorXd eps = VectorXd::Zero(params.dim());
  if (params.noise_var > 0.0) {
    std::normal_distribution<double> normal(0.0, std::sqrt(params.noise_var));
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = normal(rng);
  }
  return eps;
}

double sample_strength(double shape, double rate, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(shape, 1.0 / rate);
  double value = gamma(rng);
  // Guard against an exact zero from underflow; strengths are strictly positive.
  while (value <= 0.0) value = gamma(rng);
  return value;
}

}  // namespace

void CtmParams::validate() const {
  const auto k = num_topics();
  require(k > 0, ErrorCode::InvalidArgument, "number of topics must be > 0");
  require(dim() > 0, ErrorCode::InvalidArgument, "embedding dimension must be > 0");
  require(mu.rows() == k, ErrorCode::DimensionMismatch, "mu must have K rows");
  require(gamma_shape.size() == k, ErrorCode::DimensionMismatch, "gamma_shape must have K entries");
  require((alpha.array() > 0.0).all(), ErrorCode::InvalidArgument, "alpha_k must be > 0");
  require((gamma_shape.array() > 0.0).all(), ErrorCode::InvalidArgument, "gamma shapes must be > 0");
  require(gamma_rate > 0.0, ErrorCode::InvalidArgument, "gamma_rate must be > 0");
  require(rho_d >= 0.0, ErrorCode::InvalidArgument, "rho_d must be >= 0");
  require(noise_var >= 0.0, ErrorCode::InvalidArgument, "noise_var must be >= 0");
  if (direction_var.size() > 0) {
    require(direction_var.size() == k, ErrorCode::DimensionMismatch, "direction_var must have K entries");
    require((direction_var.array() >= 0.0).all(), ErrorCode::InvalidArgument,
            "direction variances must be >= 0");
  }
  if (!direction_cov.empty()) {
    require(static_cast<Eigen::Index>(direction_cov.size()) == k, ErrorCode::DimensionMismatch,
            "direction_cov must hold K matrices");
    for (const auto& cov : direction_cov) {
      require(cov.rows() == dim() && cov.cols() == dim(), ErrorCode::DimensionMismatch,
              "covariances must be d x d");
      require(cov.isApprox(cov.transpose()), ErrorCode::InvalidArgument, "covariance must be symmetric");
      Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
      require(eig.eigenvalues().minCoeff() >= -1e-10 * std::max(1.0, cov.norm()),
              ErrorCode::InvalidArgument, "covariance must be PSD");
    }
  }
}

CtmParams CtmParams::isotropic(const MatrixXd& directions, double alpha, double shape, double rate,
                               double rho_d, double noise_var) {
  CtmParams p;
  const auto k = directions.rows();
  p.alpha = VectorXd::Constant(k, alpha);
  p.mu = directions;
  p.direction_var = VectorXd::Zero(k);
  p.gamma_shape = VectorXd::Constant(k, shape);
  p.gamma_rate = rate;
  p.rho_d = rho_d;
  p.noise_var = noise_var;
  return p;
}

CtmSample sample_document(const CtmParams& params, std::uint64_t seed) {
  params.validate();
  std::mt19937_64 rng(seed);
  CtmSample out;
  out.theta = sample_dirichlet(params.alpha, rng);

  if (params.rho_d > 0.0) {
    std::poisson_distribution<std::int64_t> poisson(params.rho_d);
    out.num_contributions = poisson(rng);
  }
  const auto n = out.num_contributions;
  std::discrete_distribution<int> topic(out.theta.data(), out.theta.data() + out.theta.size());
  out.directions.resize(n, params.dim());
  out.embedding = VectorXd::Zero(params.dim());
  for (std::int64_t i = 0; i < n; ++i) {
    const int z = topic(rng);
    const VectorXd w = sample_gaussian_direction(params, z, rng);
    const double lambda = sample_strength(params.gamma_shape[z], params.gamma_rate, rng);
    out.assignments.push_back(z);
    out.strengths.push_back(lambda);
    out.directions.row(i) = w.transpose();
    out.embedding += lambda * w;
  }
  out.noise = sample_noise(params, rng);
  out.embedding += out.noise;
  return out;
}

CtmSample sample_fixed_support_document(const CtmParams& params, int support_size,
                                        std::uint64_t seed) {
  params.validate();
  const auto k = static_cast<int>(params.num_topics());
  require(support_size >= 1 && support_size <= k, ErrorCode::InvalidArgument,
          "support size must lie in [1, K]");
  std::mt19937_64 rng(seed);
  std::vector<int> topics(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) topics[static_cast<std::size_t>(i)] = i;
  // Partial Fisher-Yates over the first support_size slots.
  for (int i = 0; i < support_size; ++i) {
    std::uniform_int_distribution<int> pick(i, k - 1);
    std::swap(topics[static_cast<std::size_t>(i)], topics[static_cast<std::size_t>(pick(rng))]);
  }

  CtmSample out;
  out.num_contributions = support_size;
  out.directions.resize(support_size, params.dim());
  out.embedding = VectorXd::Zero(params.dim());
  out.theta = VectorXd::Zero(k);
  for (int i = 0; i < support_size; ++i) {
    const int z = topics[static_cast<std::size_t>(i)];
    const VectorXd w = sample_gaussian_direction(params, z, rng);
    const double lambda = sample_strength(params.gamma_shape[z], params.gamma_rate, rng);
    out.assignments.push_back(z);
    out.strengths.push_back(lambda);
    out.directions.row(i) = w.transpose();
    out.embedding += lambda * w;
    out.theta[z] += lambda;
  }
  out.theta /= out.theta.sum();
  out.noise = sample_noise(params, rng);
  out.embedding += out.noise;
  return out;
}

VectorXd expected_embedding(const CtmParams& params, const VectorXd& theta) {
  require(theta.size() == params.num_topics(), ErrorCode::DimensionMismatch, "theta must have K entries");
  VectorXd mean = VectorXd::Zero(params.dim());
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    const double m_k = params.gamma_shape[k] / params.gamma_rate;
    mean += theta[k] * params.rho_d * m_k * params.mu.row(k).transpose();
  }
  return mean;
}

std::vector<double> sample_aggregated_strength(double rho_topic, double shape, double rate,
                                               std::int64_t n_samples, std::uint64_t seed) {
  require(rho_topic > 0.0 && shape > 0.0 && rate > 0.0, ErrorCode::InvalidArgument,
          "rho, shape and rate must be > 0");
  require(n_samples >= 1, ErrorCode::InvalidArgument, "n_samples must be >= 1");
  std::mt19937_64 count_stream(seed);
  std::mt19937_64 size_stream(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const PoissonInverse poisson(rho_topic);

  std::vector<double> out(static_cast<std::size_t>(n_samples));
  for (auto& value : out) {
    const double u_count = unif(count_stream);
    const double u_size = unif(size_stream);
    const std::int64_t n = poisson(u_count);
    if (n == 0) {
      value = 0.0;
      continue;
    }
    // u_size lies in [0, 1); nudge away from 0 so the quantile stays finite.
    const double u = u_size > 0.0 ? u_size : std::numeric_limits<double>::min();
    value = boost::math::gamma_p_inv(static_cast<double>(n) * shape, u) / rate;
  }
  return out;
}

double compound_gamma_zero_mass(double rho) {
  require(rho > 0.0, ErrorCode::InvalidArgument, "rho must be > 0");
  return std::exp(-rho);
}

double compound_gamma_pdf(double a, double rho, double rate) {
  require(a > 0.0, ErrorCode::DomainError, "density defined only for a > 0");
  require(rho > 0.0 && rate > 0.0, ErrorCode::InvalidArgument, "rho and rate must be > 0");
  const double x = 2.0 * std::sqrt(rho * rate * a);
  return std::exp(-(rho + rate * a) + x) * std::sqrt(rho * rate / a) * special::bessel_i1_scaled(x);
}

namespace special {

namespace {

constexpr double kSwitch = 20.0;

double i1_series(double x) {
  const double half = 0.5 * x;
  const double q = half * half;
  double term = half;
  double sum = term;
  for (int m = 1; m < 500; ++m) {
    term *= q / (static_cast<double>(m) * static_cast<double>(m + 1));
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

// Hankel expansion of exp(-x) I_1(x) for large x.
double i1_asymptotic_scaled(double x) {
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 200; ++k) {
    const double odd = 2.0 * k - 1.0;
    const double next = term * -(4.0 - odd * odd) / (8.0 * k * x);
    if (std::abs(next) >= std::abs(term)) break;
    term = next;
    sum += term;
    if (std::abs(term) < 1e-17 * std::abs(sum)) break;
  }
  return sum / std::sqrt(2.0 * std::numbers::pi * x);
}

}  // namespace

double bessel_i1(double x) {
  if (x < 0.0) return -bessel_i1(-x);
  if (x < kSwitch) return i1_series(x);
  return std::exp(x) * i1_asymptotic_scaled(x);
}

double bessel_i1_scaled(double x) {
  if (x < 0.0) return -bessel_i1_scaled(-x);
  if (x < kSwitch) return std::exp(-x) * i1_series(x);
  return i1_asymptotic_scaled(x);
}

}  // namespace special

}  // namespace saetm::ctm

#include "eft/gmm_prior.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "container.hpp"
#include "eft/digest.hpp"
#include "eft/errors.hpp"

namespace eft {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// log(w_k) + log N(x; mu_k, diag(var_k)) for every component.
Eigen::VectorXd component_log_densities(const GmmPrior& prior, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const int k_count = prior.num_components();
  Eigen::VectorXd out(k_count);
  for (int k = 0; k < k_count; ++k) {
    const auto var = prior.variances.col(k).array();
    const double maha = ((x - prior.means.col(k)).array().square() / var).sum();
    const double log_det = var.log().sum();
    out[k] = std::log(prior.weights[k]) - 0.5 * (maha + log_det + prior.dim() * kLog2Pi);
  }
  return out;
}

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

// k-means++ seeding on squared Euclidean distance.
Eigen::MatrixXd seed_means(const Eigen::MatrixXd& samples, int k_count, std::mt19937_64& rng) {
  const Eigen::Index n = samples.cols();
  Eigen::MatrixXd means(samples.rows(), k_count);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  means.col(0) = samples.col(first(rng));
  Eigen::VectorXd dist = (samples.colwise() - means.col(0)).colwise().squaredNorm().transpose();
  for (int k = 1; k < k_count; ++k) {
    const double total = dist.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        target -= dist[pick];
        if (target <= 0.0) break;
      }
    } else {
      pick = first(rng);
    }
    means.col(k) = samples.col(pick);
    dist = dist.cwiseMin((samples.colwise() - means.col(k)).colwise().squaredNorm().transpose());
  }
  return means;
}

}  // namespace

void GmmPrior::validate() const {
  const int k = num_components();
  if (k < 1 || means.cols() != k || variances.cols() != k || variances.rows() != means.rows())
    throw ParameterError("GMM tables disagree in size");
  if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-12)
    throw ParameterError("GMM weights must lie on the simplex");
  if ((variances.array() < kGmmVarianceFloor).any()) throw ParameterError("GMM variance below floor");
}

GmmFit fit_gmm_prior(const Eigen::MatrixXd& samples, int num_components, std::uint64_t seed, int max_em_iters) {
  const Eigen::Index n = samples.cols();
  const Eigen::Index dim = samples.rows();
  if (num_components < 1) throw ParameterError("GMM needs at least one component");
  if (n < num_components) throw ParameterError("fewer samples than mixture components");
  if (dim < 1) throw ParameterError("empty pose vectors");
  if (max_em_iters < 1) throw ParameterError("max_em_iters must be >= 1");

  std::mt19937_64 rng(seed);
  GmmFit fit;
  GmmPrior& prior = fit.prior;
  prior.means = seed_means(samples, num_components, rng);
  const Eigen::VectorXd global_mean = samples.rowwise().mean();
  const Eigen::VectorXd global_var =
      ((samples.colwise() - global_mean).array().square().rowwise().sum() / static_cast<double>(n))
          .max(kGmmVarianceFloor);
  prior.variances = global_var.replicate(1, num_components);
  prior.weights = Eigen::VectorXd::Constant(num_components, 1.0 / num_components);

  Eigen::MatrixXd resp(num_components, n);
  double previous = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_em_iters; ++iter) {
    // E-step
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd logs = component_log_densities(prior, samples.col(i));
      resp.col(i) = (logs.array() - log_sum_exp(logs)).exp();
    }
    // M-step
    const Eigen::VectorXd nk = resp.rowwise().sum();
    for (int k = 0; k < num_components; ++k) {
      if (nk[k] <= 0.0) continue;  // empty component keeps its parameters
      const Eigen::VectorXd mean = samples * resp.row(k).transpose() / nk[k];
      const Eigen::ArrayXd var =
          ((samples.colwise() - mean).array().square().matrix() * resp.row(k).transpose()).array() / nk[k];
      prior.means.col(k) = mean;
      prior.variances.col(k) = var.max(kGmmVarianceFloor).matrix();
    }
    prior.weights = nk / nk.sum();

    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) ll += log_sum_exp(component_log_densities(prior, samples.col(i)));
    fit.log_likelihood.push_back(ll);
    if (ll - previous <= 1e-10 * std::abs(ll)) break;
    previous = ll;
  }
  prior.weights /= prior.weights.sum();
  return fit;
}

double loss_gmm_prior(const GmmPrior& prior, const Eigen::Ref<const Eigen::VectorXd>& pose,
                      Eigen::Ref<Eigen::VectorXd> grad, double scale) {
  if (pose.size() != prior.dim()) throw ParameterError("pose dimension does not match prior");
  const Eigen::VectorXd logs = component_log_densities(prior, pose);
  const double lse = log_sum_exp(logs);
  if (grad.size() == pose.size()) {
    for (int k = 0; k < prior.num_components(); ++k) {
      const double r = std::exp(logs[k] - lse);
      if (r == 0.0) continue;
      grad += (scale * r) * ((pose - prior.means.col(k)).array() / prior.variances.col(k).array()).matrix();
    }
  }
  return -lse;
}

double loss_gmm_prior(const GmmPrior& prior, const Eigen::Ref<const Eigen::VectorXd>& pose) {
  Eigen::VectorXd none;
  return loss_gmm_prior(prior, pose, none);
}

double component_peak_nll(const GmmPrior& prior, int k) {
  const double log_det = prior.variances.col(k).array().log().sum();
  return -std::log(prior.weights[k]) + 0.5 * (log_det + prior.dim() * kLog2Pi);
}

void save_gmm_prior(const GmmPrior& prior, const std::string& path) {
  prior.validate();
  detail::Container c;
  c.sizes = {static_cast<std::uint32_t>(prior.num_components()), static_cast<std::uint32_t>(prior.dim())};
  c.tag = detail::kTagGmmDiagonal;
  c.values.assign(prior.weights.data(), prior.weights.data() + prior.weights.size());
  c.values.insert(c.values.end(), prior.means.data(), prior.means.data() + prior.means.size());
  c.values.insert(c.values.end(), prior.variances.data(), prior.variances.data() + prior.variances.size());
  write_file(path, detail::encode_container(c));
}

GmmPrior load_gmm_prior(const std::string& path) {
  const auto c = detail::decode_container(read_file(path));
  if (c.tag != detail::kTagGmmDiagonal || c.sizes.size() != 2) throw FormatError("not a GMM prior container");
  const Eigen::Index k = c.sizes[0];
  const Eigen::Index dim = c.sizes[1];
  if (static_cast<Eigen::Index>(c.values.size()) != k + 2 * k * dim) throw FormatError("GMM container size mismatch");
  GmmPrior prior;
  prior.weights = Eigen::Map<const Eigen::VectorXd>(c.values.data(), k);
  prior.means = Eigen::Map<const Eigen::MatrixXd>(c.values.data() + k, dim, k);
  prior.variances = Eigen::Map<const Eigen::MatrixXd>(c.values.data() + k + k * dim, dim, k);
  try {
    prior.validate();
  } catch (const ParameterError& e) {
    throw FormatError(e.what());
  }
  return prior;
}

}  // namespace eft

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

namespace eft {

inline constexpr double kGmmVarianceFloor = 1e-6;

/// Diagonal-covariance Gaussian mixture over pose vectors.
struct GmmPrior {
  Eigen::VectorXd weights;    // K, sums to one
  Eigen::MatrixXd means;      // dim x K
  Eigen::MatrixXd variances;  // dim x K, each entry >= kGmmVarianceFloor

  int num_components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.rows()); }
  void validate() const;
};

struct GmmFit {
  GmmPrior prior;
  std::vector<double> log_likelihood;  // total data log-likelihood after each EM iteration
};

/// EM with k-means++ seeding. `samples` holds one pose vector per column.
GmmFit fit_gmm_prior(const Eigen::MatrixXd& samples, int num_components, std::uint64_t seed,
                     int max_em_iters = 200);

/// Negative log mixture density; accumulates `scale * gradient` into `grad` when given.
double loss_gmm_prior(const GmmPrior& prior, const Eigen::Ref<const Eigen::VectorXd>& pose,
                      Eigen::Ref<Eigen::VectorXd> grad, double scale = 1.0);
double loss_gmm_prior(const GmmPrior& prior, const Eigen::Ref<const Eigen::VectorXd>& pose);

/// NLL at the density peak of component k alone, i.e. -log(w_k N(mu_k; mu_k, Sigma_k)).
double component_peak_nll(const GmmPrior& prior, int k);

void save_gmm_prior(const GmmPrior& prior, const std::string& path);
GmmPrior load_gmm_prior(const std::string& path);

}  // namespace eft

#pragma once

#include <Eigen/Core>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace eft {

/// Named slice of a flat parameter vector.
struct Segment {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
};

/// Flat real vector with a named segment layout.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<Segment> layout);

  /// Appends a zero-initialized segment and returns its index.
  Eigen::Index add_segment(const std::string& name, Eigen::Index size);

  const std::vector<Segment>& layout() const { return layout_; }
  const Segment& segment(const std::string& name) const;
  bool has_segment(const std::string& name) const;

  Eigen::VectorXd& values() { return values_; }
  const Eigen::VectorXd& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }

  Eigen::VectorBlock<Eigen::VectorXd> slice(const std::string& name);
  Eigen::VectorBlock<const Eigen::VectorXd> slice(const std::string& name) const;

  /// Zero-filled vector with the same layout.
  ParamVector zeros_like() const;
  bool same_layout(const ParamVector& other) const;
  bool finite() const { return values_.allFinite(); }

 private:
  std::vector<Segment> layout_;
  Eigen::VectorXd values_;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  long step = 0;
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;

  static AdamState for_params(const ParamVector& params, AdamHyper hyper);
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads);
void adam_step(AdamState& state, ParamVector& params, const ParamVector& grads);

/// Scalar objective with an exact analytic gradient.
class DifferentiableObjective {
 public:
  virtual ~DifferentiableObjective() = default;

  /// Loss at `x`; when `grad` is non-empty it is overwritten with dLoss/dx.
  virtual double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> grad) const = 0;

  double value(const Eigen::Ref<const Eigen::VectorXd>& x) const;
};

/// Gradient of `loss` at `at`; throws EvaluationError on a non-finite loss.
ParamVector gradient(const DifferentiableObjective& loss, const ParamVector& at);

using ScalarFunction = std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)>;

/// Central-difference gradient, one coordinate at a time.
Eigen::VectorXd finite_diff_gradient(const ScalarFunction& loss, const Eigen::VectorXd& at, double h);

inline constexpr double kRelativeErrorFloor = 1e-6;

/// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, f),
/// f = kRelativeErrorFloor * max(1, max |analytic|).
double finite_diff_check(const DifferentiableObjective& loss, const ParamVector& at, double h = 1e-5);
double max_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric);

}  // namespace eft

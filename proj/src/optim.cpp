#include "eft/optim.hpp"

#include <algorithm>
#include <cmath>

#include "eft/errors.hpp"

namespace eft {

ParamVector::ParamVector(std::vector<Segment> layout) : layout_(std::move(layout)) {
  Eigen::Index total = 0;
  for (const auto& s : layout_) {
    if (s.offset != total || s.size < 0) throw ParameterError("segments must be contiguous");
    total += s.size;
  }
  values_ = Eigen::VectorXd::Zero(total);
}

Eigen::Index ParamVector::add_segment(const std::string& name, Eigen::Index size) {
  if (size < 0) throw ParameterError("negative segment size");
  if (has_segment(name)) throw ParameterError("duplicate segment " + name);
  const Eigen::Index offset = values_.size();
  layout_.push_back({name, offset, size});
  values_.conservativeResize(offset + size);
  values_.tail(size).setZero();
  return static_cast<Eigen::Index>(layout_.size()) - 1;
}

const Segment& ParamVector::segment(const std::string& name) const {
  for (const auto& s : layout_)
    if (s.name == name) return s;
  throw ParameterError("unknown segment " + name);
}

bool ParamVector::has_segment(const std::string& name) const {
  return std::any_of(layout_.begin(), layout_.end(), [&](const Segment& s) { return s.name == name; });
}

Eigen::VectorBlock<Eigen::VectorXd> ParamVector::slice(const std::string& name) {
  const auto& s = segment(name);
  return values_.segment(s.offset, s.size);
}

Eigen::VectorBlock<const Eigen::VectorXd> ParamVector::slice(const std::string& name) const {
  const auto& s = segment(name);
  return values_.segment(s.offset, s.size);
}

ParamVector ParamVector::zeros_like() const { return ParamVector(layout_); }

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layout_.size() != other.layout_.size()) return false;
  for (size_t i = 0; i < layout_.size(); ++i)
    if (layout_[i].name != other.layout_[i].name || layout_[i].size != other.layout_[i].size) return false;
  return true;
}

AdamState AdamState::for_params(const ParamVector& params, AdamHyper hyper) {
  return {hyper, 0, Eigen::VectorXd::Zero(params.size()), Eigen::VectorXd::Zero(params.size())};
}

void adam_step(AdamState& state, Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads) {
  if (params.size() != grads.size()) throw ParameterError("parameter and gradient sizes differ");
  if (state.first_moment.size() == 0 && state.step == 0) {
    state.first_moment = Eigen::VectorXd::Zero(params.size());
    state.second_moment = Eigen::VectorXd::Zero(params.size());
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
    throw ParameterError("Adam state does not match parameter size");
  const auto& h = state.hyper;
  ++state.step;
  state.first_moment = h.beta1 * state.first_moment + (1.0 - h.beta1) * grads;
  state.second_moment = h.beta2 * state.second_moment + (1.0 - h.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  params.array() -= h.lr * (state.first_moment.array() / c1) / ((state.second_moment.array() / c2).sqrt() + h.epsilon);
}

void adam_step(AdamState& state, ParamVector& params, const ParamVector& grads) {
  if (!params.same_layout(grads)) throw ParameterError("parameter and gradient layouts differ");
  adam_step(state, params.values(), grads.values());
}

double DifferentiableObjective::value(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  Eigen::VectorXd none;
  return evaluate(x, none);
}

ParamVector gradient(const DifferentiableObjective& loss, const ParamVector& at) {
  ParamVector grad = at.zeros_like();
  const double v = loss.evaluate(at.values(), grad.values());
  if (!std::isfinite(v)) throw EvaluationError("loss is not finite at the evaluation point");
  return grad;
}

Eigen::VectorXd finite_diff_gradient(const ScalarFunction& loss, const Eigen::VectorXd& at, double h) {
  if (!(h > 0.0)) throw ParameterError("finite-difference step must be positive");
  Eigen::VectorXd x = at;
  Eigen::VectorXd out(at.size());
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = loss(x);
    x[i] = orig - h;
    const double down = loss(x);
    x[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

double max_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  // Components far below the gradient's scale are compared against that scale,
  // where central differences can only resolve them to rounding error.
  const double floor = kRelativeErrorFloor * std::max(1.0, analytic.size() ? analytic.cwiseAbs().maxCoeff() : 0.0);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

double finite_diff_check(const DifferentiableObjective& loss, const ParamVector& at, double h) {
  const ParamVector analytic = gradient(loss, at);
  const Eigen::VectorXd numeric =
      finite_diff_gradient([&](const Eigen::Ref<const Eigen::VectorXd>& x) { return loss.value(x); }, at.values(), h);
  return max_relative_error(analytic.values(), numeric);
}

}  // namespace eft

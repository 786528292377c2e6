#include <cmath>

#include "doctest.h"
#include "eft/body_objective.hpp"
#include "eft/errors.hpp"
#include "eft/fitters.hpp"
#include "eft/optim.hpp"
#include "test_support.hpp"

using namespace eft;
using eft::test::max_abs;

namespace {

class Quadratic : public DifferentiableObjective {
 public:
  double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> grad) const override {
    if (grad.size()) grad = 2.0 * x;
    return x.squaredNorm();
  }
};

class Constant : public DifferentiableObjective {
 public:
  double evaluate(const Eigen::Ref<const Eigen::VectorXd>&, Eigen::Ref<Eigen::VectorXd> grad) const override {
    if (grad.size()) grad.setZero();
    return 3.0;
  }
};

class Explodes : public DifferentiableObjective {
 public:
  double evaluate(const Eigen::Ref<const Eigen::VectorXd>&, Eigen::Ref<Eigen::VectorXd> grad) const override {
    if (grad.size()) grad.setZero();
    return std::numeric_limits<double>::infinity();
  }
};

/// sum_i sin(a_i x_i) * x_{i+1}: curved enough for large steps to show.
class Wavy : public DifferentiableObjective {
 public:
  double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Ref<Eigen::VectorXd> grad) const override {
    double v = 0.0;
    if (grad.size()) grad.setZero();
    for (Eigen::Index i = 0; i + 1 < x.size(); ++i) {
      const double a = 1.0 + static_cast<double>(i);
      v += std::sin(a * x[i]) * x[i + 1];
      if (grad.size()) {
        grad[i] += a * std::cos(a * x[i]) * x[i + 1];
        grad[i + 1] += std::sin(a * x[i]);
      }
    }
    return v;
  }
};

ParamVector flat(const Eigen::VectorXd& v) {
  ParamVector p;
  p.add_segment("x", v.size());
  p.values() = v;
  return p;
}

}  // namespace

TEST_CASE("param vector layout") {
  ParamVector p;
  CHECK(p.add_segment("pose", 72) == 0);
  CHECK(p.add_segment("shape", 10) == 1);
  CHECK(p.add_segment("camera", 3) == 2);
  CHECK(p.size() == 85);
  CHECK(p.segment("camera").offset == 82);
  p.slice("shape").setConstant(2.0);
  CHECK(p.values().segment(72, 10).sum() == 20.0);
  CHECK(p.has_segment("pose"));
  CHECK_FALSE(p.has_segment("other"));
  CHECK_THROWS_AS(p.segment("other"), ParameterError);
  CHECK_THROWS_AS(p.add_segment("pose", 2), ParameterError);
  const ParamVector z = p.zeros_like();
  CHECK(z.same_layout(p));
  CHECK(z.values().isZero());
}

TEST_CASE("gradient examples") {
  const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(7, -1.0, 2.0);
  const ParamVector g = gradient(Quadratic{}, flat(x));
  CHECK(max_abs(g.values() - 2.0 * x) == 0.0);
  CHECK(g.same_layout(flat(x)));
  CHECK(gradient(Constant{}, flat(x)).values().isZero());
  CHECK_THROWS_AS(gradient(Explodes{}, flat(x)), EvaluationError);
}

TEST_CASE("finite difference checker") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd x(6);
  for (auto& v : x) v = n(rng);
  CHECK(finite_diff_check(Quadratic{}, flat(x)) < 1e-9);
  const double fine = finite_diff_check(Wavy{}, flat(x), 1e-5);
  const double coarse = finite_diff_check(Wavy{}, flat(x), 0.1);
  CHECK(fine < 1e-6);
  CHECK(coarse > 100 * fine);
  CHECK_THROWS_AS(finite_diff_check(Quadratic{}, flat(x), 0.0), ParameterError);

  // a rotation pushed through kinematics
  const Skeleton sk = make_template(24, 10, 0);
  Observation obs{Keypoints2D::Constant(2, 24, 112.0), Eigen::VectorXd::Ones(24)};
  for (int j = 0; j < 24; ++j) obs.keypoints.col(j) += test::random_vec3(rng, 30.0).head<2>();
  BodyLossTerms terms;
  terms.skeleton = &sk;
  terms.observation = &obs;
  const BodyFitObjective objective(terms);
  const BodyParams p = test::random_params(sk, rng, 0.5);
  CHECK(finite_diff_check(objective, body_param_vector(sk, p, Eigen::Vector3d(std::log(100.0), 0.0, 0.0))) < 1e-4);
}

TEST_CASE("max relative error floor") {
  CHECK(max_relative_error(Eigen::Vector2d(0.0, 1.0), Eigen::Vector2d(1e-12, 1.0)) < 1e-3);
  CHECK(max_relative_error(Eigen::Vector2d(1.0, 1.0), Eigen::Vector2d(1.1, 1.0)) == doctest::Approx(0.1 / 1.1));
  // tiny components are judged against the largest one
  CHECK(max_relative_error(Eigen::Vector2d(1e3, 1e-6), Eigen::Vector2d(1e3, 2e-6)) == doctest::Approx(1e-6 / 1e-3));
  CHECK(max_relative_error(Eigen::Vector2d(1e3, 1.0), Eigen::Vector2d(1e3, 2.0)) == doctest::Approx(0.5));
}

TEST_CASE("adam first steps") {
  ParamVector p = flat(Eigen::Vector3d(1.0, -2.0, 0.5));
  AdamState s = AdamState::for_params(p, {0.01});
  const Eigen::VectorXd before = p.values();
  adam_step(s, p, p.zeros_like());
  CHECK(s.step == 1);
  CHECK(p.values() == before);

  ParamVector q = flat(Eigen::Vector3d(1.0, -2.0, 0.5));
  AdamState t = AdamState::for_params(q, {0.01});
  ParamVector g = flat(Eigen::Vector3d(4.0, -0.001, 100.0));
  adam_step(t, q, g);
  const Eigen::Vector3d step = q.values() - Eigen::Vector3d(1.0, -2.0, 0.5);
  CHECK(std::abs(step[0] + 0.01) < 1e-8);
  CHECK(std::abs(step[1] - 0.01) < 1e-7);
  CHECK(std::abs(step[2] + 0.01) < 1e-8);

  ParamVector wrong = flat(Eigen::Vector2d::Zero());
  CHECK_THROWS_AS(adam_step(t, q, wrong), ParameterError);
}

TEST_CASE("adam trajectory matches a second implementation") {
  // reference: scalar textbook Adam on f(x) = x^2
  double x_ref = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParamVector p = flat(Eigen::VectorXd::Ones(1));
  AdamState s = AdamState::for_params(p, {lr, b1, b2, eps});
  for (int k = 1; k <= 100; ++k) {
    const double g = 2.0 * x_ref;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, k));
    const double vh = v / (1 - std::pow(b2, k));
    x_ref -= lr * mh / (std::sqrt(vh) + eps);

    adam_step(s, p, gradient(Quadratic{}, p));
    CHECK(std::abs(p.values()[0] - x_ref) < 1e-12);
  }
  CHECK(s.step == 100);
}

TEST_CASE("adam is deterministic") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd x(50), g(50);
  for (int i = 0; i < 50; ++i) {
    x[i] = n(rng);
    g[i] = n(rng);
  }
  ParamVector a = flat(x), b = flat(x);
  AdamState sa = AdamState::for_params(a, {}), sb = AdamState::for_params(b, {});
  for (int k = 0; k < 10; ++k) {
    adam_step(sa, a, flat(g * (k + 1)));
    adam_step(sb, b, flat(g * (k + 1)));
  }
  CHECK(a.values() == b.values());
  CHECK(sa.first_moment == sb.first_moment);
  CHECK(sa.second_moment == sb.second_moment);
}

TEST_CASE("adam on the camera reaches the least-squares camera") {
  const Skeleton sk = make_template(24, 10, 0);
  std::mt19937_64 rng(5);
  const BodyParams body = test::random_params(sk, rng, 0.3);
  const Joints3D joints = forward_kinematics(sk, body);
  const CameraParams truth{100.0, Eigen::Vector2d(110.0, 115.0)};
  Observation obs{project_weak_perspective(truth, joints), Eigen::VectorXd::Ones(24)};
  for (int j = 0; j < 24; ++j) obs.keypoints.col(j) += test::random_vec3(rng, 2.0).head<2>();

  BodyLossTerms terms;
  terms.skeleton = &sk;
  terms.observation = &obs;
  const BodyFitObjective objective(terms);
  ParamVector x = body_param_vector(sk, body, camera_to_code({80.0, Eigen::Vector2d(100.0, 100.0)}));
  AdamState state = AdamState::for_params(x, {1e-2});
  for (int k = 0; k < 2000; ++k) {
    ParamVector g = gradient(objective, x);
    g.slice("pose").setZero();
    g.slice("shape").setZero();
    adam_step(state, x, g);
  }
  const CameraParams fitted = camera_from_code(camera_code_from(x));
  const CameraParams closed = fit_camera_closed_form(joints, obs);
  const Keypoints2D a = project_weak_perspective(fitted, joints);
  const Keypoints2D b = project_weak_perspective(closed, joints);
  CHECK(max_abs(a - b) < 1e-3);
}

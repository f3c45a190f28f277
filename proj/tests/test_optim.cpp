#include <doctest.h>

#include <cmath>
#include <vector>

#include "latentflow/optim.hpp"
#include "latentflow/rng.hpp"
#include "latentflow/tape.hpp"
#include "test_util.hpp"

using namespace latentflow;

TEST_CASE("sgd: fixed point, arithmetic, linearity") {
  Tensor theta = Tensor::vector({1.0});
  Optimizer opt({OptimizerKind::kSgd, 0.1}, {&theta});

  std::vector<Tensor> zero{Tensor::vector({0.0})};
  opt.step(zero);
  CHECK(theta(0) == 1.0);

  std::vector<Tensor> g{Tensor::vector({2.0})};
  opt.step(g);
  CHECK(theta(0) == doctest::Approx(1.2).epsilon(1e-15));

  // Plain SGD is linear in the gradients: two steps equal one summed step.
  Tensor a = Tensor::vector({0.5});
  Tensor b = Tensor::vector({0.5});
  Optimizer oa({OptimizerKind::kSgd, 0.1}, {&a});
  Optimizer ob({OptimizerKind::kSgd, 0.1}, {&b});
  std::vector<Tensor> g1{Tensor::vector({1.0})}, g2{Tensor::vector({-3.0})},
      gsum{Tensor::vector({-2.0})};
  oa.step(g1);
  oa.step(g2);
  ob.step(gsum);
  CHECK(a(0) == doctest::Approx(b(0)).epsilon(1e-15));

  // Adam does not have this property.
  Tensor c = Tensor::vector({0.5});
  Tensor d = Tensor::vector({0.5});
  Optimizer oc({OptimizerKind::kAdam, 0.1}, {&c});
  Optimizer od({OptimizerKind::kAdam, 0.1}, {&d});
  oc.step(g1);
  oc.step(g2);
  od.step(gsum);
  CHECK(c(0) != d(0));
}

TEST_CASE("adam: first step is roughly sign ascent") {
  for (double g0 : {0.3, -1.7, 42.0}) {
    Tensor theta = Tensor::vector({0.0});
    Optimizer opt({OptimizerKind::kAdam, 0.01}, {&theta});
    std::vector<Tensor> g{Tensor::vector({g0})};
    opt.step(g);
    CHECK(theta(0) == doctest::Approx(0.01 * (g0 > 0 ? 1.0 : -1.0))
                          .epsilon(1e-6));
  }
}

TEST_CASE("adam: first-step update invariant to gradient rescaling") {
  Tensor a = Tensor::vector({0.0, 0.0});
  Tensor b = Tensor::vector({0.0, 0.0});
  Optimizer oa({OptimizerKind::kAdam, 0.05}, {&a});
  Optimizer ob({OptimizerKind::kAdam, 0.05}, {&b});
  std::vector<Tensor> g{Tensor::vector({0.2, -0.9})};
  std::vector<Tensor> g10{Tensor::vector({2.0, -9.0})};
  oa.step(g);
  ob.step(g10);
  CHECK(std::abs(a(0) - b(0)) < 1e-6);
  CHECK(std::abs(a(1) - b(1)) < 1e-6);
}

TEST_CASE("adam and adamax: zero gradients leave parameters fixed") {
  for (OptimizerKind kind : {OptimizerKind::kAdam, OptimizerKind::kAdamax}) {
    Tensor theta = Tensor::vector({0.7, -0.2});
    Optimizer opt({kind, 0.1}, {&theta});
    std::vector<Tensor> zero{Tensor::zeros({2})};
    for (int i = 0; i < 5; ++i) opt.step(zero);
    CHECK(theta(0) == 0.7);
    CHECK(theta(1) == -0.2);
  }
}

TEST_CASE("quadratic bowl: sgd converges monotonically, adam to 1e-6") {
  // Maximize -0.5 ||theta - c||^2; ascent gradient is (c - theta).
  const Tensor target = Tensor::vector({1.0, -2.0, 0.5});
  auto grad_of = [&](const Tensor& th) {
    Tensor g({3});
    for (std::size_t i = 0; i < 3; ++i) g(i) = target(i) - th(i);
    return g;
  };
  auto dist = [&](const Tensor& th) {
    double acc = 0;
    for (std::size_t i = 0; i < 3; ++i)
      acc += (th(i) - target(i)) * (th(i) - target(i));
    return std::sqrt(acc);
  };
  {
    Tensor theta = Tensor::zeros({3});
    Optimizer opt({OptimizerKind::kSgd, 0.1}, {&theta});
    double prev = dist(theta);
    for (int i = 0; i < 200; ++i) {
      std::vector<Tensor> g{grad_of(theta)};
      opt.step(g);
      const double cur = dist(theta);
      CHECK(cur <= prev + 1e-15);
      prev = cur;
    }
    CHECK(prev < 1e-6);
  }
  for (OptimizerKind kind : {OptimizerKind::kAdam, OptimizerKind::kAdamax}) {
    Tensor theta = Tensor::zeros({3});
    Optimizer opt({kind, 0.05}, {&theta});
    for (int i = 0; i < 4000; ++i) {
      std::vector<Tensor> g{grad_of(theta)};
      opt.step(g);
    }
    CHECK(dist(theta) < 1e-6);
  }
}

TEST_CASE("optimizer steps are deterministic functions of state and grads") {
  Tensor a = Tensor::vector({0.1});
  Tensor b = Tensor::vector({0.1});
  Optimizer oa({OptimizerKind::kAdam, 0.02}, {&a});
  Optimizer ob({OptimizerKind::kAdam, 0.02}, {&b});
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    std::vector<Tensor> g{rng.normal_tensor({1})};
    oa.step(g);
    ob.step(g);
    CHECK(a(0) == b(0));
  }
}

TEST_CASE("early stopping") {
  // Strictly improving history: keep going.
  std::vector<double> improving{-10, -9, -8, -7};
  CHECK_FALSE(early_stop_check(improving, 2));
  // Flat for longer than the patience: stop.
  std::vector<double> flat{-5, -5, -5, -5, -5};
  CHECK(early_stop_check(flat, 3));
  // An improvement at the last entry resets the counter.
  std::vector<double> reset{-5, -5, -5, -5, -4};
  CHECK_FALSE(early_stop_check(reset, 3));
}

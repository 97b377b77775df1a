#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "deop/mlp.hpp"
#include "deop/rng.hpp"

using namespace deop;

TEST_CASE("mlp_init shapes, bounds and determinism") {
  MlpParams p = mlp_init({4, 200, 200, 2}, 1);
  REQUIRE(p.layers.size() == 3);
  CHECK(p.layers[0].W.rows() == 200);
  CHECK(p.layers[0].W.cols() == 4);
  CHECK(p.layers[2].W.rows() == 2);
  CHECK(p.layer_sizes() == std::vector<int>{4, 200, 200, 2});
  double bound = 1.0 / std::sqrt(4.0);
  CHECK(p.layers[0].W.cwiseAbs().maxCoeff() <= bound);
  CHECK(p.layers[0].b.cwiseAbs().maxCoeff() == 0.0);

  MlpParams q = mlp_init({4, 200, 200, 2}, 1);
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    CHECK(p.layers[k].W == q.layers[k].W);
    CHECK(p.layers[k].b == q.layers[k].b);
  }
  MlpParams r = mlp_init({4, 200, 200, 2}, 2);
  CHECK(p.layers[0].W != r.layers[0].W);

  CHECK_THROWS(mlp_init({5}, 1));
  CHECK_THROWS(mlp_init({4, 0, 2}, 1));
}

TEST_CASE("five-hidden-layer proxy architecture initializes") {
  MlpParams p = mlp_init({9, 200, 200, 200, 200, 200, 18}, 7);
  CHECK(p.layers.size() == 6);
  CHECK(p.in_dim() == 9);
  CHECK(p.out_dim() == 18);
}

TEST_CASE("mlp_forward basics") {
  MlpParams zero = mlp_init({3, 5, 2}, 1);
  for (auto& l : zero.layers) {
    l.W.setZero();
    l.b.setZero();
  }
  Vector x(3);
  x << 1, -2, 3;
  CHECK(mlp_forward(zero, x).cwiseAbs().maxCoeff() == 0.0);

  MlpParams ident;
  ident.layers.push_back({Matrix::Identity(3, 3), Vector::Zero(3)});
  CHECK(mlp_forward(ident, x) == x);

  CHECK_THROWS(mlp_forward(ident, Vector::Zero(4)));
}

TEST_CASE("taped and plain forward agree bitwise") {
  MlpParams p = mlp_init({6, 37, 19, 4}, 42);
  Rng rng(5);
  Matrix x(6, 8);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-2.0, 2.0);

  Matrix plain = mlp_forward_batch(p, x);

  Tape tape;
  TapedMlp tm = TapedMlp::attach(tape, p);
  Var out = tm.forward(tape, tape.constant(x));
  const Matrix& taped = tape.value(out);
  REQUIRE(taped.rows() == plain.rows());
  REQUIRE(taped.cols() == plain.cols());
  for (int i = 0; i < plain.size(); ++i)
    CHECK(plain.data()[i] == taped.data()[i]);
}

TEST_CASE("optimizer_step sgd and adam") {
  MlpParams p;
  p.layers.push_back({Matrix::Zero(1, 1), Vector::Zero(1)});
  MlpGrads g;
  g.layers.push_back({Matrix::Constant(1, 1, 1.0), Vector::Zero(1)});

  OptimizerState sgd = OptimizerState::sgd(0.1);
  optimizer_step(p, g, sgd);
  CHECK(p.layers[0].W(0, 0) == doctest::Approx(-0.1));

  // adam first step moves by ~lr regardless of gradient magnitude
  for (double gv : {0.5, 3.0, 200.0}) {
    MlpParams q;
    q.layers.push_back({Matrix::Zero(1, 1), Vector::Zero(1)});
    MlpGrads gg;
    gg.layers.push_back({Matrix::Constant(1, 1, gv), Vector::Zero(1)});
    OptimizerState adam = OptimizerState::adam(1e-3);
    optimizer_step(q, gg, adam);
    CHECK(std::abs(q.layers[0].W(0, 0)) ==
          doctest::Approx(1e-3).epsilon(0.01));
    CHECK(q.layers[0].W(0, 0) < 0.0);
  }

  // zero gradient leaves parameters unchanged
  MlpParams z;
  z.layers.push_back({Matrix::Constant(1, 1, 0.7), Vector::Zero(1)});
  MlpGrads zg;
  zg.layers.push_back({Matrix::Zero(1, 1), Vector::Zero(1)});
  OptimizerState s2 = OptimizerState::sgd(0.1);
  optimizer_step(z, zg, s2);
  CHECK(z.layers[0].W(0, 0) == 0.7);

  // non-finite gradients abort
  MlpGrads bad;
  bad.layers.push_back(
      {Matrix::Constant(1, 1, std::nan("")), Vector::Zero(1)});
  CHECK_THROWS(optimizer_step(z, bad, s2));
}

TEST_CASE("optimizer_step is deterministic") {
  auto run = [] {
    MlpParams p = mlp_init({2, 8, 1}, 3);
    OptimizerState st = OptimizerState::adam(1e-3);
    MlpGrads g = mlp_init({2, 8, 1}, 4);  // arbitrary fixed buffers
    for (int i = 0; i < 5; ++i) optimizer_step(p, g, st);
    return p;
  };
  MlpParams a = run(), b = run();
  for (std::size_t k = 0; k < a.layers.size(); ++k)
    CHECK(a.layers[k].W == b.layers[k].W);
}

TEST_CASE("smoke: fits y = 2x + 1 to MSE < 1e-3") {
  const int n = 50;
  Matrix xs(1, n);
  Matrix ys(1, n);
  Rng rng(11);
  for (int i = 0; i < n; ++i) {
    double x = rng.uniform(-1.0, 1.0);
    xs(0, i) = x;
    ys(0, i) = 2.0 * x + 1.0;
  }

  MlpParams p = mlp_init({1, 16, 1}, 0);
  OptimizerState opt = OptimizerState::adam(1e-3);
  double mse = 1e9;
  for (int step = 0; step < 2000; ++step) {
    Tape tape;
    TapedMlp tm = TapedMlp::attach(tape, p);
    Var pred = tm.forward(tape, tape.constant(xs));
    Var diff = tape.sub(pred, tape.constant(ys));
    Var loss = tape.mean(tape.square(diff));
    mse = tape.value(loss)(0, 0);
    Gradients g = tape.backward(loss);
    MlpGrads grads = tm.grads(g, p);
    optimizer_step(p, grads, opt);
  }
  CHECK(mse < 1e-3);
}

TEST_CASE("checkpoint json round trip is exact") {
  MlpParams p = mlp_init({3, 7, 2}, 123);
  p.layers[0].W(0, 0) = 0.1 + 0.2;  // an awkward double
  std::string js = mlp_to_json(p, 123, {{"role", "unit-test"}});
  std::uint64_t seed = 0;
  std::map<std::string, std::string> meta;
  MlpParams q = mlp_from_json(js, &seed, &meta);
  CHECK(seed == 123);
  CHECK(meta.at("role") == "unit-test");
  REQUIRE(q.layers.size() == p.layers.size());
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    CHECK(p.layers[k].W == q.layers[k].W);
    CHECK(p.layers[k].b == q.layers[k].b);
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sswm/numkit/check.hpp"
#include "sswm/numkit/complex.hpp"
#include "sswm/numkit/graph.hpp"
#include "sswm/numkit/optim.hpp"
#include "sswm/numkit/rng.hpp"
#include "sswm/numkit/tensor.hpp"

using namespace sswm::numkit;

TEST_CASE("matmul shape rule and values") {
  Graph g;
  Rng rng(7);
  Var a = g.constant(rng.normal_tensor({2, 3}, 0, 1, Dtype::F64));
  Var b = g.constant(rng.normal_tensor({3, 4}, 0, 1, Dtype::F64));
  Var c = forward_op(g, "matmul", std::vector<Var>{a, b});
  CHECK(g.shape(c) == Shape{2, 4});
  // against a hand loop
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += g.value(a).at(i * 3 + k) * g.value(b).at(k * 4 + j);
      CHECK(g.value(c).at(i * 4 + j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("matmul rejects mismatched shapes with a diagnostic") {
  Graph g;
  Var a = g.constant(Tensor::zeros({2, 3}, Dtype::F64));
  Var b = g.constant(Tensor::zeros({4, 2}, Dtype::F64));
  try {
    g.matmul(a, b);
    FAIL("expected rejection");
  } catch (const std::exception& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("softmax of equal logits is uniform") {
  Graph g;
  Var x = g.constant(Tensor::full({4}, 1.7, Dtype::F64));
  Var s = forward_op(g, "softmax", std::vector<Var>{x});
  for (int i = 0; i < 4; ++i) CHECK(g.value(s).at(i) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to 1") {
  Graph g;
  Rng rng(3);
  Var x = g.constant(rng.normal_tensor({17, 11}, 0, 3, Dtype::F32));
  Var s = g.softmax(x);
  for (int r = 0; r < 17; ++r) {
    double sum = 0;
    for (int c = 0; c < 11; ++c) sum += g.value(s).at(r * 11 + c);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layernorm normalizes rows before affine") {
  Graph g;
  Rng rng(5);
  Var x = g.constant(rng.normal_tensor({9, 32}, 2.0, 1.5, Dtype::F64));
  Var y = g.layer_norm(x, 1e-6);
  for (int r = 0; r < 9; ++r) {
    double mu = 0, var = 0;
    for (int c = 0; c < 32; ++c) mu += g.value(y).at(r * 32 + c);
    mu /= 32;
    for (int c = 0; c < 32; ++c) {
      const double d = g.value(y).at(r * 32 + c) - mu;
      var += d * d;
    }
    var /= 32;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("complex-mul scalar closed form") {
  // (1+2i)(3+4i) = (3-8) + (4+6)i = -5 + 10i
  Graph g;
  Var ar = g.constant(Tensor::scalar(1, Dtype::F64));
  Var ai = g.constant(Tensor::scalar(2, Dtype::F64));
  Var br = g.constant(Tensor::scalar(3, Dtype::F64));
  Var bi = g.constant(Tensor::scalar(4, Dtype::F64));
  Var packed = forward_op(g, "complex-mul", std::vector<Var>{ar, ai, br, bi});
  Var re = forward_op(g, "take-real", std::vector<Var>{packed});
  CHECK(g.value(re).item() == doctest::Approx(-5.0).epsilon(1e-12));
  CHECK(g.value(packed).at(1) == doctest::Approx(10.0).epsilon(1e-12));
}

TEST_CASE("complex-mul distributes over addition") {
  Rng rng(11);
  Graph g;
  auto cp = [&](Shape s) {
    return ComplexPair{g.constant(rng.normal_tensor(s, 0, 1, Dtype::F64)),
                       g.constant(rng.normal_tensor(s, 0, 1, Dtype::F64))};
  };
  ComplexPair a = cp({64}), b = cp({64}), c = cp({64});
  ComplexPair lhs = cmul(g, cadd(g, a, b), c);
  ComplexPair rhs = cadd(g, cmul(g, a, c), cmul(g, b, c));
  for (int i = 0; i < 64; ++i) {
    CHECK(g.value(lhs.re).at(i) == doctest::Approx(g.value(rhs.re).at(i)).epsilon(1e-6));
    CHECK(g.value(lhs.im).at(i) == doctest::Approx(g.value(rhs.im).at(i)).epsilon(1e-6));
  }
}

TEST_CASE("backward of sum is ones; sum of squares doubles") {
  ParamStore ps;
  ParamId pid = ps.add("p", Tensor::from({2}, {1.0, 2.0}));
  {
    Graph g;
    Var p = g.param(ps, pid);
    g.backward(g.sum(p));
    GradRecord r = g.grads_for(ps);
    CHECK(r.grads[0].at(0) == 1.0);
    CHECK(r.grads[0].at(1) == 1.0);
  }
  {
    Graph g;
    Var p = g.param(ps, pid);
    g.backward(g.sum(g.mul(p, p)));
    GradRecord r = g.grads_for(ps);
    CHECK(r.grads[0].at(0) == doctest::Approx(2.0));
    CHECK(r.grads[0].at(1) == doctest::Approx(4.0));
  }
}

TEST_CASE("non-scalar loss is rejected") {
  ParamStore ps;
  ParamId pid = ps.add("p", Tensor::from({3}, {1.0, 2.0, 3.0}));
  Graph g;
  Var p = g.param(ps, pid);
  CHECK_THROWS(g.backward(p));
}

TEST_CASE("gradients of unused parameters are exactly zero") {
  ParamStore ps;
  ParamId a = ps.add("a", Tensor::from({2}, {1.0, 2.0}));
  ParamId b = ps.add("b", Tensor::from({2}, {5.0, 6.0}));
  Graph g;
  Var va = g.param(ps, a);
  (void)b;
  g.backward(g.sum(va));
  GradRecord r = g.grads_for(ps);
  CHECK(r.grads[1].at(0) == 0.0);
  CHECK(r.grads[1].at(1) == 0.0);
}

TEST_CASE("finite_diff_check oracle self-tests") {
  // sum of squares
  double err = finite_diff_check(
      [](Graph& g, Var p) { return g.sum(g.mul(p, p)); }, Tensor::from({3}, {1.0, 2.0, 3.0}), 1e-5);
  CHECK(err < 1e-6);
  // constant function: analytic 0, numeric 0
  err = finite_diff_check([](Graph& g, Var p) { return g.mul(g.constant_like(0.0, p), g.sum(p)); },
                          Tensor::from({3}, {1.0, 2.0, 3.0}), 1e-5);
  CHECK(err == 0.0);
}

TEST_CASE("finite_diff_check rejects non-deterministic functions") {
  int calls = 0;
  auto fn = [&calls](Graph& g, Var p) {
    ++calls;
    return g.add(g.sum(p), g.constant(Tensor::scalar(static_cast<double>(calls), Dtype::F64)));
  };
  CHECK_THROWS(finite_diff_check(fn, Tensor::from({2}, {1.0, 2.0}), 1e-5));
}

TEST_CASE("gradient fidelity across the op vocabulary") {
  Rng rng(17);
  auto check_fn = [&](const ScalarFn& fn, Shape shape, double lo, double hi, double tol = 1e-6) {
    Tensor at = rng.uniform_tensor(shape, lo, hi, Dtype::F64);
    const double err = finite_diff_check(fn, at, 1e-5);
    CHECK(err < tol);
  };

  check_fn([](Graph& g, Var p) { return g.sum(g.exp(p)); }, {4, 3}, -1, 1);
  check_fn([](Graph& g, Var p) { return g.sum(g.log(p)); }, {5}, 0.5, 2.0);
  check_fn([](Graph& g, Var p) { return g.sum(g.tanh(p)); }, {6}, -2, 2);
  check_fn([](Graph& g, Var p) { return g.sum(g.sigmoid(p)); }, {6}, -2, 2);
  check_fn([](Graph& g, Var p) { return g.sum(g.silu(p)); }, {6}, -2, 2);
  check_fn([](Graph& g, Var p) { return g.sum(g.gelu(p)); }, {6}, -2, 2);
  check_fn([](Graph& g, Var p) { return g.sum(g.softplus(p)); }, {6}, -2, 2);
  check_fn([](Graph& g, Var p) { return g.sum(g.mul(g.softmax(p), p)); }, {3, 5}, -1, 1);
  check_fn([](Graph& g, Var p) { return g.sum(g.mul(g.log_softmax(p), p)); }, {3, 5}, -1, 1, 1e-5);
  check_fn([](Graph& g, Var p) { return g.sum(g.mul(g.layer_norm(p), p)); }, {3, 7}, -2, 2, 1e-5);
  check_fn([](Graph& g, Var p) { return g.mean(g.mul(p, p)); }, {4, 4}, -1, 1);
  check_fn([](Graph& g, Var p) { return g.sum(g.clamp_min(p, 0.3)); }, {8}, -1, 1);
  check_fn([](Graph& g, Var p) { return g.sum(g.div(g.constant_like(1.0, p), p)); }, {5}, 1.0, 2.0);
  check_fn(
      [](Graph& g, Var p) {
        Var t = g.transpose2d(p);
        return g.sum(g.matmul(p, t));
      },
      {3, 4}, -1, 1);
  check_fn(
      [](Graph& g, Var p) {
        Var a = g.slice(p, 1, 0, 2);
        Var b = g.slice(p, 1, 2, 2);
        std::vector<Var> parts{b, a};
        return g.sum(g.mul(g.concat(parts, 1), p));
      },
      {2, 4}, -1, 1);
  check_fn(
      [](Graph& g, Var p) {
        Var r = g.reshape(p, {6});
        return g.sum(g.mul(r, r));
      },
      {2, 3}, -1, 1);
  check_fn([](Graph& g, Var p) { return g.sum(g.mul(g.sum_axis(p, 1), g.sum_axis(p, 1))); },
           {3, 4}, -1, 1);
  // broadcast paths
  check_fn(
      [](Graph& g, Var p) {
        Var row = g.slice(p, 0, 0, 1);
        return g.sum(g.mul(p, row));
      },
      {3, 4}, -1, 1);
}

TEST_CASE("composite graph matches finite differences at 64-bit") {
  Rng rng(23);
  auto fn = [](Graph& g, Var p) {
    Var h = g.tanh(g.matmul(p, g.transpose2d(p)));
    Var s = g.softmax(h);
    Var ln = g.layer_norm(g.gelu(g.matmul(s, p)));
    return g.mean(g.mul(ln, ln));
  };
  for (int i = 0; i < 5; ++i) {
    Tensor at = rng.normal_tensor({4, 4}, 0, 1, Dtype::F64);
    CHECK(finite_diff_check(fn, at, 1e-5) < 1e-4);
  }
}

TEST_CASE("layernorm-then-sum passes the gradient oracle") {
  // The raw composition has an identically-zero gradient, so the oracle compares
  // noise against noise; weighting the sum keeps the example meaningful.
  Rng rng(29);
  Tensor w = rng.normal_tensor({4, 6}, 0, 1, Dtype::F64);
  auto fn = [&](Graph& g, Var p) { return g.sum(g.mul(g.layer_norm(p), g.constant(w))); };
  CHECK(finite_diff_check(fn, rng.normal_tensor({4, 6}, 0, 2, Dtype::F64), 1e-5) < 1e-4);
}

TEST_CASE("straight-through keeps exact one-hots and passes gradients") {
  ParamStore ps;
  ParamId pid = ps.add("logits", Tensor::from({4}, {0.1, 0.2, 0.3, 0.4}));
  Graph g;
  Var probs = g.softmax(g.param(ps, pid));
  Tensor sample = Tensor::from({4}, {0.0, 0.0, 1.0, 0.0});
  Var z = g.straight_through(probs, sample);
  CHECK(g.value(z).at(0) == 0.0);
  CHECK(g.value(z).at(2) == 1.0);
  // gradient of sum(z * w) w.r.t. logits equals gradient of sum(probs * w)
  Tensor w = Tensor::from({4}, {1.0, -2.0, 3.0, 0.5});
  g.backward(g.sum(g.mul(z, g.constant(w))));
  GradRecord r1 = g.grads_for(ps);
  Graph g2;
  Var probs2 = g2.softmax(g2.param(ps, pid));
  g2.backward(g2.sum(g2.mul(probs2, g2.constant(w))));
  GradRecord r2 = g2.grads_for(ps);
  for (int i = 0; i < 4; ++i) CHECK(r1.grads[0].at(i) == doctest::Approx(r2.grads[0].at(i)));
}

TEST_CASE("stop_grad blocks gradients") {
  ParamStore ps;
  ParamId pid = ps.add("p", Tensor::from({2}, {1.0, 2.0}));
  Graph g;
  Var p = g.param(ps, pid);
  g.backward(g.sum(g.mul(g.stop_grad(p), p)));
  GradRecord r = g.grads_for(ps);
  // only the non-stopped path contributes: d/dp sum(sg(p) * p) = sg(p)
  CHECK(r.grads[0].at(0) == doctest::Approx(1.0));
  CHECK(r.grads[0].at(1) == doctest::Approx(2.0));
}

TEST_CASE("forward ops keep values finite on finite inputs") {
  Rng rng(31);
  Graph g;
  Var x = g.constant(rng.normal_tensor({64}, 0, 30, Dtype::F32));
  CHECK(g.value(g.sigmoid(x)).all_finite());
  CHECK(g.value(g.softplus(x)).all_finite());
  CHECK(g.value(g.tanh(x)).all_finite());
  CHECK(g.value(g.softmax(x)).all_finite());
  CHECK(g.value(g.log_softmax(x)).all_finite());
}

TEST_CASE("adam applies clipped updates deterministically") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    ParamStore ps;
    ParamId pid = ps.add("w", rng.normal_tensor({8}, 0, 1, Dtype::F32));
    Adam opt(ps, {.lr = 1e-2, .clip = 1.0});
    double last_norm = 0;
    for (int i = 0; i < 10; ++i) {
      Graph g;
      Var w = g.param(ps, pid);
      g.backward(g.sum(g.mul(w, w)));
      last_norm = opt.step(g.grads_for(ps));
    }
    return std::pair<double, double>(last_norm, ps.value(pid).at(0));
  };
  auto [n1, p1] = run(42);
  auto [n2, p2] = run(42);
  CHECK(n1 == n2);
  CHECK(p1 == p2);
}

TEST_CASE("matmul is bit-deterministic across repeated runs") {
  Rng rng(77);
  Tensor a = rng.normal_tensor({64, 128}, 0, 1, Dtype::F32);
  Tensor b = rng.normal_tensor({128, 96}, 0, 1, Dtype::F32);
  Graph g;
  Var v1 = g.matmul(g.constant(a), g.constant(b));
  Var v2 = g.matmul(g.constant(a), g.constant(b));
  auto d1 = g.value(v1).data<float>();
  auto d2 = g.value(v2).data<float>();
  for (size_t i = 0; i < d1.size(); ++i) REQUIRE(d1[i] == d2[i]);
}

// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include "cfer/ndiff.hpp"
#include "oracles.hpp"

using namespace cfer;
using namespace cfer::nd;
using Catch::Matchers::WithinAbs;

namespace {

Tensor random_tensor(Rng &rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double &x : t.values()) x = rng.uniform(lo, hi);
  return t;
}

/// Gradient check of `f` over freshly drawn inputs of the given shapes.
GradReport check(const std::vector<Shape> &shapes, const Objective &f, std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<Tensor> values;
  for (const auto &s : shapes) values.push_back(random_tensor(rng, s));
  std::vector<CheckedParam> params;
  for (std::size_t i = 0; i < values.size(); ++i) params.push_back({"p" + std::to_string(i), &values[i]});
  return grad_check(f, params);
}

} // namespace

TEST_CASE("tensor construction and shapes") {
  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  REQUIRE(m.rank() == 2);
  REQUIRE(m.at(1, 2) == 6.0);
  REQUIRE(shape_str(m.shape()) == "[2x3]");
  REQUIRE(Tensor::scalar(3.5).item() == 3.5);
  REQUIRE_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
  Tensor r = m.reshaped({3, 2});
  REQUIRE(r.at(2, 1) == 6.0);
}

TEST_CASE("matmul and linear forward values") {
  Tape t;
  Var a = t.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = t.leaf(Tensor::matrix(2, 2, {5, 6, 7, 8}));
  Var c = matmul(a, b);
  REQUIRE(c.value().values() == std::vector<double>{19, 22, 43, 50});
  Var x = t.leaf(Tensor::vector({1, -1}));
  Var y = linear(x, a, t.leaf(Tensor::vector({0.5, 0.5})));
  REQUIRE(y.value().values() == std::vector<double>{-0.5, -0.5});
}

TEST_CASE("every op passes a finite-difference check") {
  const double tol = 1e-6;
  SECTION("matmul") {
    auto r = check({{3, 4}, {4, 2}}, [](Tape &, std::span<const Var> p) { return sum(matmul(p[0], p[1])); });
    REQUIRE(r.global_max < tol);
  }
  SECTION("linear on a matrix input") {
    auto r = check({{3, 4}, {5, 4}, {5}}, [](Tape &, std::span<const Var> p) {
      Var y = linear(p[0], p[1], p[2]);
      return sum(mul(y, y));
    });
    REQUIRE(r.global_max < tol);
  }
  SECTION("bilinear") {
    auto r = check({{3}, {3, 2, 4}, {4}, {2}}, [](Tape &, std::span<const Var> p) {
      Var y = bilinear(p[0], p[1], p[2], p[3]);
      return sum(mul(y, y));
    });
    REQUIRE(r.global_max < tol);
  }
  SECTION("concat, stack, row, gather") {
    auto r = check({{2, 3}, {2, 2}, {3}}, [](Tape &, std::span<const Var> p) {
      Var c = concat({p[0], p[1]}, 1);
      Var s = stack_rows(std::vector<Var>{p[2], row(p[0], 1)});
      Var g = gather_rows(c, {1, 0, 1});
      return add(sum(mul(g, g)), sum(mul(s, s)));
    });
    REQUIRE(r.global_max < tol);
  }
  SECTION("combine_rows and weighted_sum") {
    auto r = check({{4, 3}, {4}}, [](Tape &, std::span<const Var> p) {
      Var c = combine_rows(p[0], {{0, 0.5}, {2, 0.25}, {0, 0.25}});
      Var w = weighted_sum(p[1], p[0]);
      return sum(mul(c, w));
    });
    REQUIRE(r.global_max < tol);
  }
  SECTION("aggregate") {
    const std::vector<std::vector<int>> adj{{0, 1}, {0, 1, 2}, {1, 2}};
    auto r = check({{3, 2}}, [&](Tape &, std::span<const Var> p) {
      Var y = aggregate(p[0], adj);
      return sum(mul(y, y));
    });
    REQUIRE(r.global_max < tol);
  }
  SECTION("sigmoid, tanh and softmax") {
    auto r = check({{5}, {2, 3}}, [](Tape &, std::span<const Var> p) {
      Var a = mul(sigmoid(p[0]), tanh(p[0]));
      Var s = softmax(p[1], 1);
      Var s0 = softmax(p[1], 0);
      return add_n(std::vector<Var>{sum(mul(a, a)), sum(mul(s, s)), sum(mul(s0, p[1]))});
    });
    REQUIRE(r.global_max < tol);
  }
  SECTION("relu away from the kink") {
    Rng rng(3);
    Tensor x({6});
    for (double &v : x.values()) v = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 1.0);
    std::vector<CheckedParam> params{{"x", &x}};
    auto r = grad_check([](Tape &, std::span<const Var> p) { return sum(mul(relu(p[0]), p[0])); }, params);
    REQUIRE(r.global_max < tol);
  }
  SECTION("bce over sigmoid outputs") {
    const std::vector<std::uint8_t> labels{1, 0, 1, 0};
    auto r = check({{4}}, [&](Tape &, std::span<const Var> p) { return bce_loss(sigmoid(p[0]), labels); });
    REQUIRE(r.global_max < tol);
  }
  SECTION("gru cell") {
    auto r = check({{3}, {2}, {6, 3}, {6, 2}, {6}}, [](Tape &, std::span<const Var> p) {
      Var h = gru_cell(p[0], p[1], {p[2], p[3], p[4]});
      Var h2 = gru_cell(p[0], h, {p[2], p[3], p[4]});
      return sum(mul(h2, h2));
    });
    REQUIRE(r.global_max < tol);
  }
}

TEST_CASE("gru cell matches a scalar reference") {
  Rng rng(11);
  const std::size_t D = 3, H = 4;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {D}), h = random_tensor(rng, {H});
    Tensor wx = random_tensor(rng, {3 * H, D}), wh = random_tensor(rng, {3 * H, H}), b = random_tensor(rng, {3 * H});
    Tape t;
    Var out = gru_cell(t.leaf(x), t.leaf(h), {t.leaf(wx), t.leaf(wh), t.leaf(b)});
    const auto ref = oracle::gru_step(x.values(), h.values(), wx.values(), wh.values(), b.values());
    for (std::size_t i = 0; i < H; ++i) REQUIRE_THAT(out.value()[i], WithinAbs(ref[i], 1e-14));
  }
}

TEST_CASE("gru cell rejects mismatched shapes") {
  Tape t;
  Var x = t.leaf(Tensor({3})), h = t.leaf(Tensor({2}));
  REQUIRE_THROWS_AS(gru_cell(x, h, {t.leaf(Tensor({6, 4})), t.leaf(Tensor({6, 2})), t.leaf(Tensor({6}))}), ShapeError);
  REQUIRE_THROWS_AS(gru_cell(x, h, {t.leaf(Tensor({6, 3})), t.leaf(Tensor({6, 2})), t.leaf(Tensor({5}))}), ShapeError);
}

TEST_CASE("a corrupted backward rule is caught") {
  // Doubles x, but reports the gradient of tripling.
  auto wrong_double = [](Var x) {
    Tensor out = x.value();
    out.scale_(2.0);
    return x.tape->push(std::move(out), {x}, [x](Tape &t, std::size_t self) {
      const Tensor &g = t.grad(self);
      Tensor &gx = t.grad(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 3.0 * g[i];
    });
  };
  auto r = check({{4}}, [&](Tape &, std::span<const Var> p) { return sum(mul(wrong_double(p[0]), p[0])); });
  REQUIRE_FALSE(r.passes(1e-4));
  REQUIRE(r.global_max > 0.1);
}

TEST_CASE("gradients have the shape of their values") {
  Tape t;
  Var a = t.leaf(Tensor({3, 2}, 0.5)), b = t.leaf(Tensor({2, 4}, 0.25)), c = t.leaf(Tensor({5}, 1.0));
  Var loss = sum(linear(matmul(a, b), t.leaf(Tensor({5, 4}, 0.1)), c));
  t.backward(loss);
  REQUIRE(t.grad_or_zero(a).shape() == a.shape());
  REQUIRE(t.grad_or_zero(b).shape() == b.shape());
  REQUIRE(t.grad_or_zero(c).shape() == c.shape());
}

TEST_CASE("constants receive no gradient") {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  Var k = t.constant(Tensor::vector({3, 4}));
  t.backward(sum(mul(x, k)));
  REQUIRE(t.grad_or_zero(x).values() == std::vector<double>{3, 4});
  REQUIRE_FALSE(t.has_grad(k.id));
}

TEST_CASE("softmax is shift invariant and normalized") {
  Tape t;
  Var s = softmax(t.leaf(Tensor::vector({1000.0, 1001.0, 999.0})));
  double total = 0;
  for (double v : s.value().values()) total += v;
  REQUIRE_THAT(total, WithinAbs(1.0, 1e-15));
  REQUIRE(s.value()[1] > s.value()[0]);
}

TEST_CASE("bce clamps saturated probabilities") {
  Tape t;
  Var p = t.leaf(Tensor::vector({0.0, 1.0}));
  const std::vector<std::uint8_t> labels{1, 0};
  Var l = bce_loss(p, labels);
  REQUIRE(std::isfinite(l.value().item()));
  REQUIRE(l.value().item() == -std::log(1e-12) - std::log(1.0 - (1.0 - 1e-12)));
  t.backward(l);
  REQUIRE(t.grad_or_zero(p).values() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("dropout modes") {
  Tape t;
  Var x = t.leaf(Tensor({1000}, 1.0));
  Rng rng(5);
  REQUIRE(dropout(x, 0.5, Mode::Eval, rng).id == x.id);
  REQUIRE(dropout(x, 0.0, Mode::Train, rng).id == x.id);
  Var y = dropout(x, 0.25, Mode::Train, rng);
  std::size_t kept = 0;
  for (double v : y.value().values()) {
    REQUIRE((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15));
    kept += v != 0.0;
  }
  REQUIRE(kept > 650);
  REQUIRE(kept < 850);
  REQUIRE_THROWS(dropout(x, 1.0, Mode::Train, rng));
}

TEST_CASE("shape errors name the operands") {
  Tape t;
  Var a = t.leaf(Tensor({2, 3})), b = t.leaf(Tensor({2, 3}));
  REQUIRE_THROWS_AS(matmul(a, b), ShapeError);
  REQUIRE_THROWS_WITH(linear(t.leaf(Tensor({4})), a), Catch::Matchers::ContainsSubstring("[2x3]"));
}

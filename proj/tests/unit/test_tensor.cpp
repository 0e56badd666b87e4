#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ontraffic/tensor.hpp"

using namespace ontraffic::ad;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Values bounded away from zero so kinks and poles stay out of FD stencils.
std::vector<double> away_from_zero(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> mag(0.2, 1.5);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(n);
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return v;
}

}  // namespace

TEST_CASE("tensor construction validates shape") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  CHECK(t.size() == 6);
  CHECK(t.at(1, 2) == 6.0);
  CHECK(t.requires_grad());
  CHECK_FALSE(t.grad().has_value());
  CHECK_THROWS_AS(t.set_grad(std::vector<double>(5)), ShapeError);
}

TEST_CASE("matmul with identity returns the operand") {
  Tape tape;
  Var eye = tape.constant(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  std::vector<double> a{1.5, -2, 3, 4, 5.25, -6, 7, 8, 9};
  Var m = tape.constant(3, 3, a);
  auto out = matmul(eye, m).value();
  for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == a[i]);
}

TEST_CASE("softmax of a constant row is uniform") {
  for (double c : {-50.0, 0.0, 3.7, 800.0}) {
    Tape tape;
    Var x = tape.constant(1, 3, {c, c, c});
    auto s = softmax(x, 1).value();
    for (double v : s) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
}

TEST_CASE("softmax rows are in (0,1) and sum to one") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng() % 6, c = 1 + rng() % 9;
    Tape tape;
    Var x = tape.constant(r, c, random_values(rng, r * c, -30, 30));
    for (int axis : {0, 1}) {
      auto s = softmax(x, axis).value();
      const std::size_t outer = axis == 1 ? r : c, inner = axis == 1 ? c : r;
      for (std::size_t o = 0; o < outer; ++o) {
        double total = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          const double v = axis == 1 ? s[o * c + i] : s[i * c + o];
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("gradient of sum(square(x)) at 3 is 6") {
  Tensor x = Tensor::scalar(3.0, true);
  Tape tape;
  Var v = tape.watch(x);
  tape.backward(sum(square(v), 0));
  REQUIRE(x.grad().has_value());
  CHECK((*x.grad())[0] == 6.0);
}

TEST_CASE("least-squares gradient matches the closed form") {
  std::mt19937_64 rng(11);
  const std::size_t n = 17, d = 5;
  const auto xs = random_values(rng, n * d, -1, 1);
  const auto ys = random_values(rng, n, -1, 1);
  Tensor w = Tensor::matrix(d, 1, random_values(rng, d, -1, 1), true);
  Tape tape;
  Var X = tape.constant(n, d, xs);
  Var y = tape.constant(n, 1, ys);
  Var wv = tape.watch(w);
  tape.backward(mean(square(matmul(X, wv) - y)));

  std::vector<double> resid(n, 0.0), expected(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double p = 0.0;
    for (std::size_t j = 0; j < d; ++j) p += xs[i * d + j] * w[j];
    resid[i] = p - ys[i];
  }
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) expected[j] += 2.0 * xs[i * d + j] * resid[i] / static_cast<double>(n);
  }
  for (std::size_t j = 0; j < d; ++j) CHECK(std::abs((*w.grad())[j] - expected[j]) <= 1e-12);
}

TEST_CASE("sum(tanh(x)) at zero has unit gradient") {
  Tensor x = Tensor::zeros({4}, true);
  Tape tape;
  Var v = tape.watch(x);
  tape.backward(sum_all(tanh(v)));
  for (double g : *x.grad()) CHECK(g == 1.0);
}

TEST_CASE("output detached from leaves gives zero gradients") {
  Tensor x = Tensor::filled({2, 2}, 1.5, true);
  Tape tape;
  Var v = tape.watch(x);
  (void)square(v);
  Var c = tape.constant(1, 1, {2.0});
  tape.backward(sum_all(square(c)));
  REQUIRE(x.grad().has_value());
  for (double g : *x.grad()) CHECK(g == 0.0);
  for (double g : tape.grad(v)) CHECK(g == 0.0);
}

TEST_CASE("backward errors") {
  SUBCASE("non-scalar output") {
    Tape tape;
    Var x = tape.constant(2, 2, {1, 2, 3, 4});
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
  }
  SUBCASE("empty tape") {
    Tape tape;
    CHECK_THROWS(tape.backward(Var{&tape, 0}));
  }
  SUBCASE("second backward without reset") {
    Tensor x = Tensor::scalar(2.0, true);
    Tape tape;
    Var v = tape.watch(x);
    Var out = square(v);
    tape.backward(out);
    CHECK_THROWS_AS(tape.backward(out), std::logic_error);
    tape.reset_grads();
    x.zero_grad();
    tape.backward(out);
    CHECK((*x.grad())[0] == 4.0);
  }
  SUBCASE("stale grad on a watched tensor") {
    Tensor x = Tensor::scalar(2.0, true);
    {
      Tape tape;
      tape.backward(square(tape.watch(x)));
    }
    Tape tape;
    CHECK_THROWS_AS(tape.backward(square(tape.watch(x))), std::logic_error);
  }
}

TEST_CASE("shape and domain errors name the op") {
  Tape tape;
  Var a = tape.constant(2, 3, std::vector<double>(6, 1.0));
  Var b = tape.constant(4, 2, std::vector<double>(8, 1.0));
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(log(tape.constant(1, 2, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(log(tape.constant(1, 1, {-2.0})), DomainError);
  CHECK_THROWS_AS(div(a, tape.constant(1, 1, {0.0})), DomainError);
}

TEST_CASE("gradient_check on simple functions") {
  std::mt19937_64 rng(3);
  Tensor x = Tensor::matrix(3, 4, random_values(rng, 12, -2, 2));
  CHECK(gradient_check([](Tape&, Var v) { return sum_all(square(v)); }, x, 1e-5) <= 1e-6);
  CHECK(gradient_check([](Tape& t, Var) { return t.constant(1, 1, {4.2}); }, x, 1e-5) == 0.0);
}

TEST_CASE("every primitive agrees with central differences on random shapes") {
  std::mt19937_64 rng(2024);
  using Fn = std::function<Var(Tape&, Var)>;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = 1 + rng() % 4, c = 1 + rng() % 5;
    Tensor x = Tensor::matrix(r, c, away_from_zero(rng, r * c));
    const auto w = random_values(rng, r * c, -1, 1);
    const auto other = away_from_zero(rng, r * c);
    const auto right = random_values(rng, c * 3, -1, 1);
    const auto col = away_from_zero(rng, r);
    const auto bias2 = random_values(rng, 2 * r * c, -1, 1);
    const auto wide = random_values(rng, 3 * c, -1, 1);
    // Weighted sum makes every coordinate's gradient distinct.
    auto weighted = [=](Tape& t, Var y) { return sum_all(mul(y, t.constant(y.rows(), y.cols(), w))); };
    std::vector<std::pair<const char*, Fn>> cases = {
        {"matmul", [=](Tape& t, Var v) { return sum_all(square(matmul(v, t.constant(c, 3, right)))); }},
        {"transpose", [=](Tape& t, Var v) { return sum_all(mul(transpose(transpose(v)), t.constant(r, c, w))); }},
        {"add", [=](Tape& t, Var v) { return weighted(t, square(add(v, t.constant(r, c, other)))); }},
        {"sub", [=](Tape& t, Var v) { return weighted(t, square(sub(t.constant(r, c, other), v))); }},
        {"mul", [=](Tape& t, Var v) { return weighted(t, mul(v, mul(v, t.constant(r, c, other)))); }},
        {"div", [=](Tape& t, Var v) { return weighted(t, div(t.constant(r, c, other), v)); }},
        {"div-bcast", [=](Tape& t, Var v) { return weighted(t, div(v, t.constant(r, 1, col))); }},
        {"exp", [=](Tape& t, Var v) { return weighted(t, exp(v)); }},
        {"log", [=](Tape& t, Var v) { return weighted(t, log(square(v))); }},
        {"tanh", [=](Tape& t, Var v) { return weighted(t, tanh(v)); }},
        {"relu", [=](Tape& t, Var v) { return weighted(t, relu(v)); }},
        {"softplus", [=](Tape& t, Var v) { return weighted(t, softplus(scale(v, 3.0))); }},
        {"abs", [=](Tape& t, Var v) { return weighted(t, abs(v)); }},
        {"scale/add_scalar", [=](Tape& t, Var v) { return weighted(t, square(add_scalar(scale(v, -1.7), 0.3))); }},
        {"sum0", [=](Tape&, Var v) { return sum_all(square(sum(square(v), 0))); }},
        {"sum1", [=](Tape&, Var v) { return sum_all(square(sum(square(v), 1))); }},
        {"mean", [=](Tape&, Var v) { return square(mean(exp(v))); }},
        {"concat0", [=](Tape& t, Var v) {
           std::vector<Var> parts{v, square(v)};
           return sum_all(square(add(concat(parts, 0), t.constant(2 * r, c, bias2))));
         }},
        {"concat1", [=](Tape& t, Var v) {
           std::vector<Var> parts{exp(v), v};
           return weighted(t, slice_cols(square(concat(parts, 1)), c, 2 * c)) + sum_all(slice_cols(exp(concat(parts, 1)), 0, c));
         }},
        {"broadcast", [=](Tape& t, Var v) {
           Var row = sum(v, 0);
           return sum_all(mul(square(broadcast_to(row, 3, c)), t.constant(3, c, wide)));
         }},
        {"softmax1", [=](Tape& t, Var v) { return weighted(t, softmax(v, 1)); }},
        {"softmax0", [=](Tape& t, Var v) { return weighted(t, softmax(v, 0)); }},
    };
    for (auto& [name, fn] : cases) {
      const double err = gradient_check(fn, x, 1e-5);
      INFO("op=" << name << " shape=" << r << "x" << c << " trial=" << trial);
      CHECK(err <= 1e-4);
    }
  }
}

TEST_CASE("forward evaluation is bit-identical across runs") {
  std::mt19937_64 rng(5);
  const auto a = random_values(rng, 40, -3, 3);
  const auto b = random_values(rng, 40, -3, 3);
  auto run = [&] {
    Tape tape;
    Var x = tape.constant(8, 5, a);
    Var y = tape.constant(5, 8, b);
    const auto v = softmax(tanh(matmul(x, y)), 1).value();
    return std::vector<double>(v.begin(), v.end());
  };
  const auto first = run();
  for (int i = 0; i < 3; ++i) {
    auto again = run();
    for (std::size_t k = 0; k < first.size(); ++k) CHECK(first[k] == again[k]);
  }
}

TEST_CASE("vectorised tanh matches std::tanh") {
  std::vector<double> xs;
  for (double x = -25.0; x <= 25.0; x += 0.01237) xs.push_back(x);
  xs.push_back(0.0);
  xs.push_back(1e-12);
  xs.push_back(-1e-12);
  std::vector<double> d = xs;
  std::vector<float> f(xs.begin(), xs.end());
  tanh_inplace(std::span<double>(d));
  tanh_inplace(std::span<float>(f));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(std::abs(d[i] - std::tanh(xs[i])) <= 1e-15);
    CHECK(std::abs(f[i] - std::tanh(static_cast<float>(xs[i]))) <= 2e-6);
  }
}

#include <cmath>
#include <vector>

#include "doctest.h"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

using namespace polydet;
using nn::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = false) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return requires_grad ? Tensor::variable(shape, v) : Tensor::constant(shape, v);
}

// Independent triple-loop product used as the matmul oracle.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
  int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      out[static_cast<size_t>(i) * n + j] = acc;
    }
  return out;
}

// Central finite differences on a scalar-valued graph builder, perturbing a
// single leaf tensor.
std::vector<double> fd_gradient(const std::function<Tensor()>& f, Tensor& leaf,
                                double h = 1e-5) {
  std::vector<double> grad(leaf.numel());
  for (size_t i = 0; i < leaf.numel(); ++i) {
    double orig = leaf.values_mut()[i];
    leaf.values_mut()[i] = orig + h;
    double up = f().scalar();
    leaf.values_mut()[i] = orig - h;
    double down = f().scalar();
    leaf.values_mut()[i] = orig;
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

double max_rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double diff = std::abs(a[i] - b[i]);
    if (diff < 1e-9) continue;
    worst = std::max(worst, diff / std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul identity and orthogonal cases") {
  Tensor eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor r = nn::matmul(eye, m);
  CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

  Tensor a = Tensor::constant({1, 2}, {1, 0});
  Tensor b = Tensor::constant({2, 1}, {0, 1});
  CHECK(nn::matmul(a, b).scalar() == 0.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor r = nn::matmul(a, b);
  auto expect = matmul_oracle(a, b);
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(r.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH_AS(nn::matmul(a, b),
                       doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("elementwise basics") {
  CHECK(nn::sigmoid(Tensor::scalar_of(0.0)).scalar() == 0.5);
  CHECK(nn::relu(Tensor::scalar_of(-3.2)).scalar() == 0.0);
  Tensor s = nn::add(Tensor::constant({2}, {1, 2}), Tensor::constant({2}, {3, 4}));
  CHECK(s.values() == std::vector<double>{4, 6});
  CHECK_THROWS_AS(nn::add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("sigmoid stays strictly inside (0,1)") {
  Tensor big = Tensor::constant({3}, {1e4, -1e4, 800.0});
  Tensor s = nn::sigmoid(big);
  for (double v : s.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("trailing bias broadcast") {
  Tensor a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::constant({3}, {10, 20, 30});
  Tensor r = nn::add(a, b);
  CHECK(r.values() == std::vector<double>{11, 22, 33, 14, 25, 36});
  // bias gradient is the column sum
  Tensor bias = Tensor::variable({3}, {0, 0, 0});
  Tensor loss = nn::sum(nn::add(a, bias));
  nn::backward(loss);
  CHECK(bias.grad() == std::vector<double>{2, 2, 2});
}

TEST_CASE("softmax trivial and stability cases") {
  Tensor u = nn::softmax(Tensor::constant({2}, {0, 0}), 0);
  CHECK(u.values()[0] == doctest::Approx(0.5));
  CHECK(u.values()[1] == doctest::Approx(0.5));

  Tensor big = nn::softmax(Tensor::constant({2}, {1000, 0}), 0);
  CHECK(big.values()[0] == doctest::Approx(1.0));
  CHECK(big.values()[1] < 1e-300);
  CHECK(std::isfinite(big.values()[0]));
}

#if defined(__SIZEOF_FLOAT128__)
using wide = __float128;
#else
using wide = long double;
#endif

// exp in extended precision: range reduction by ln2 plus a Taylor series.
// Keeps the oracle independent of libm rounding.
static wide exp_wide(wide x) {
  const wide ln2 = static_cast<wide>(0.6931471805599453) +
                   static_cast<wide>(2.3190468138462996e-17);
  int k = static_cast<int>(std::llround(static_cast<double>(x / ln2)));
  wide r = x - static_cast<wide>(k) * ln2;
  wide term = 1, s = 1;
  for (int i = 1; i <= 40; ++i) {
    term *= r / static_cast<wide>(i);
    s += term;
  }
  for (; k > 0; --k) s *= 2;
  for (; k < 0; ++k) s /= 2;
  return s;
}

TEST_CASE("softmax matches high-precision oracle") {
  Rng rng(11);
  std::vector<double> x(5);
  for (auto& v : x) v = rng.uniform(-4.0, 4.0);
  Tensor r = nn::softmax(Tensor::constant({5}, x), 0);
  wide total = 0;
  std::vector<wide> e(5);
  for (size_t i = 0; i < 5; ++i) {
    e[i] = exp_wide(static_cast<wide>(x[i]));
    total += e[i];
  }
  for (size_t i = 0; i < 5; ++i)
    CHECK(r.values()[i] == doctest::Approx(static_cast<double>(e[i] / total)).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one and masked entries are exactly zero") {
  Rng rng(3);
  Tensor x = random_tensor({6, 8}, rng);
  std::vector<double> mask_v(48, 1.0);
  mask_v[3] = 0.0;
  mask_v[10] = 0.0;
  mask_v[11] = 0.0;
  Tensor mask = Tensor::constant({6, 8}, mask_v);
  Tensor s = nn::softmax(x, 1, mask);
  for (int i = 0; i < 6; ++i) {
    double total = 0.0;
    for (int j = 0; j < 8; ++j) total += s.at(i, j);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(s.values()[3] == 0.0);
  CHECK(s.values()[10] == 0.0);
  CHECK(s.values()[11] == 0.0);
}

TEST_CASE("fully masked softmax slice is all zeros") {
  Tensor x = Tensor::constant({1, 3}, {1, 2, 3});
  Tensor mask = Tensor::zeros({1, 3});
  Tensor s = nn::softmax(x, 1, mask);
  for (double v : s.values()) CHECK(v == 0.0);
}

TEST_CASE("layer_norm examples and formula oracle") {
  Tensor gamma = Tensor::constant({2}, {1, 1});
  Tensor beta = Tensor::constant({2}, {0, 0});
  Tensor r = nn::layer_norm(Tensor::constant({2}, {1, -1}), gamma, beta);
  CHECK(r.values()[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(r.values()[1] == doctest::Approx(-1.0).epsilon(1e-5));

  Tensor g3 = Tensor::constant({3}, {1, 1, 1});
  Tensor b3 = Tensor::constant({3}, {0, 0, 0});
  Tensor c = nn::layer_norm(Tensor::constant({3}, {5, 5, 5}), g3, b3);
  for (double v : c.values()) CHECK(v == doctest::Approx(0.0));

  Rng rng(5);
  std::vector<double> x(7), gv(7), bv(7);
  for (auto& v : x) v = rng.normal(0, 2);
  for (auto& v : gv) v = rng.uniform(0.5, 1.5);
  for (auto& v : bv) v = rng.normal();
  double eps = 1e-5;
  Tensor out = nn::layer_norm(Tensor::constant({7}, x), Tensor::constant({7}, gv),
                              Tensor::constant({7}, bv), eps);
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= 7;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= 7;
  for (int j = 0; j < 7; ++j) {
    double expect = (x[j] - mu) / std::sqrt(var + eps) * gv[j] + bv[j];
    CHECK(out.values()[j] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("layer_norm output moments") {
  Rng rng(17);
  Tensor x = random_tensor({4, 16}, rng);
  Tensor gamma = Tensor::full({16}, 1.0);
  Tensor beta = Tensor::zeros({16});
  Tensor out = nn::layer_norm(x, gamma, beta, 1e-9);
  for (int i = 0; i < 4; ++i) {
    double mu = 0, var = 0;
    for (int j = 0; j < 16; ++j) mu += out.at(i, j);
    mu /= 16;
    for (int j = 0; j < 16; ++j) var += (out.at(i, j) - mu) * (out.at(i, j) - mu);
    var /= 16;
    CHECK(std::abs(mu) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("concat along both axes") {
  Tensor a = Tensor::constant({1, 1}, {1});
  Tensor b = Tensor::constant({1, 1}, {2});
  Tensor rows = nn::concat({a, b}, 0);
  CHECK(rows.shape() == std::vector<int>{2, 1});
  CHECK(rows.values() == std::vector<double>{1, 2});
  Tensor cols = nn::concat({a, b}, 1);
  CHECK(cols.shape() == std::vector<int>{1, 2});
  CHECK(cols.values() == std::vector<double>{1, 2});

  Rng rng(9);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor stacked = nn::concat({x, x, x}, 0);
  CHECK(stacked.shape() == std::vector<int>{12, 3});
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::variable({3}, {1, 2, 3});
  nn::backward(nn::sum(x));
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  Tensor y = Tensor::variable({1}, {2});
  nn::backward(nn::sum(nn::mul(y, y)));
  CHECK(y.grad() == std::vector<double>{4});
}

TEST_CASE("backward twice accumulates to exactly 2x") {
  Rng rng(23);
  Tensor x = random_tensor({4}, rng, true);
  Tensor w = random_tensor({4}, rng, true);
  Tensor loss = nn::sum(nn::mul(nn::sigmoid(x), w));
  nn::backward(loss);
  std::vector<double> once = x.grad();
  nn::backward(loss);
  for (size_t i = 0; i < once.size(); ++i)
    CHECK(x.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::variable({2}, {1, 2});
  CHECK_THROWS_AS(nn::backward(x), NumericError);
}

TEST_CASE("composite graph gradients match finite differences over 50 seeds") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed + 100);
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor b = random_tensor({4, 2}, rng, true);
    Tensor bias = random_tensor({2}, rng, true);
    Tensor gamma = random_tensor({2}, rng, true);
    Tensor beta = random_tensor({2}, rng, true);

    auto build = [&]() {
      Tensor h = nn::add(nn::matmul(a, b), bias);
      Tensor n = nn::layer_norm(nn::relu(h), gamma, beta);
      Tensor s = nn::softmax(nn::sigmoid(n), 1);
      return nn::sum(nn::mul(s, s));
    };
    a.zero_grad();
    b.zero_grad();
    bias.zero_grad();
    gamma.zero_grad();
    beta.zero_grad();
    nn::backward(build());

    CHECK(max_rel_error(a.grad(), fd_gradient(build, a)) < 1e-4);
    CHECK(max_rel_error(b.grad(), fd_gradient(build, b)) < 1e-4);
    CHECK(max_rel_error(gamma.grad(), fd_gradient(build, gamma)) < 1e-4);
  }
}

TEST_CASE("gradients of slicing and gathering ops match finite differences") {
  Rng rng(321);
  Tensor x = random_tensor({5, 6}, rng, true);
  auto build = [&]() {
    Tensor s = nn::slice(x, 1, 2, 3);
    Tensor g = nn::gather_rows(s, {0, 0, 4, 2});
    Tensor t = nn::transpose(g);
    Tensor c = nn::concat({t, t}, 1);
    return nn::sum(nn::mul(c, c));
  };
  x.zero_grad();
  nn::backward(build());
  CHECK(max_rel_error(x.grad(), fd_gradient(build, x)) < 1e-4);
}

TEST_CASE("gradients of scalar ops match finite differences") {
  Rng rng(55);
  Tensor x = random_tensor({6}, rng, true);
  // shift values away from kinks of abs/clamp
  for (auto& v : x.values_mut()) v += (v >= 0 ? 0.5 : -0.5);
  auto build = [&]() {
    Tensor p = nn::pow_scalar(nn::abs(x), 1.7);
    Tensor c = nn::clamp(p, 0.05, 50.0);
    Tensor l = nn::log(nn::add_scalar(c, 1.0));
    Tensor trig = nn::add(nn::sin(x), nn::cos(nn::scale(x, 0.7)));
    return nn::sum(nn::add(nn::div(l, nn::add_scalar(nn::abs(x), 1.0)),
                           nn::mul(trig, nn::minimum(x, nn::cos(x)))));
  };
  x.zero_grad();
  nn::backward(build());
  CHECK(max_rel_error(x.grad(), fd_gradient(build, x)) < 1e-4);
}

TEST_CASE("deterministic values with fixed seed") {
  auto run = [] {
    Rng rng(77);
    Tensor a = random_tensor({8, 8}, rng);
    Tensor b = random_tensor({8, 8}, rng);
    return nn::sum(nn::matmul(nn::softmax(a, 1), b)).scalar();
  };
  CHECK(run() == run());
}

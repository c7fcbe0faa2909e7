#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mofme/ops.hpp"
#include "mofme/rng.hpp"
#include "mofme/tensor.hpp"
#include "oracles.hpp"

using namespace mofme;

TEST_CASE("rng streams are deterministic and independent") {
  RngStream a(42, streams::kData);
  RngStream b(42, streams::kData);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream c(42, streams::kDropout);
  c.seek(7);
  RngStream d(42, streams::kDropout);
  for (int i = 0; i < 7; ++i) d.next_u64();
  CHECK(c.next_u64() == d.next_u64());

  RngStream e(42, streams::kData);
  RngStream f(43, streams::kData);
  CHECK(e.next_u64() != f.next_u64());
}

TEST_CASE("rng uniform stays in range and normal has sane moments") {
  RngStream rng(7, streams::kData);
  double sum = 0, sumsq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
    sumsq += u * u;
  }
  CHECK(std::fabs(sum / n - 0.5) < 0.01);

  double ns = 0, ns2 = 0;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    ns += z;
    ns2 += z * z;
  }
  CHECK(std::fabs(ns / n) < 0.03);
  CHECK(std::fabs(ns2 / n - 1.0) < 0.05);
}

TEST_CASE("matmul identity and closed-form cases") {
  auto id = Tensor64::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor64::from({2, 2}, {2, 3, 4, 5});
  auto out = matmul(id, m);
  CHECK(out.value() == std::vector<double>{2, 3, 4, 5});

  auto a = Tensor64::from({1, 2}, {1, 2});
  auto b = Tensor64::from({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul matches the triple-loop oracle exactly") {
  RngStream rng(3, streams::kData);
  auto av = oracle::random_vec(4 * 5, rng);
  auto bv = oracle::random_vec(5 * 3, rng);
  auto a = Tensor64::from({4, 5}, av);
  auto b = Tensor64::from({5, 3}, bv);
  auto expect = oracle::matmul(av, bv, 4, 5, 3);
  auto got = matmul(a, b).value();
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(got[i] == expect[i]);
}

TEST_CASE("matmul rejects mismatched shapes with both in the message") {
  auto a = Tensor64::zeros({2, 3});
  auto b = Tensor64::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string m = e.what();
    CHECK(m.find("[2x3]") != std::string::npos);
    CHECK(m.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax symmetry, closed form, and overflow safety") {
  auto a = softmax_lastdim(Tensor64::from({1, 4}, {0, 0, 0, 0}));
  for (double v : a.value()) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));

  auto b = softmax_lastdim(Tensor64::from({1, 2}, {0.0, std::log(3.0)}));
  CHECK(b.value()[0] == doctest::Approx(0.25).epsilon(1e-13));
  CHECK(b.value()[1] == doctest::Approx(0.75).epsilon(1e-13));

  auto c = softmax_lastdim(Tensor64::from({1, 2}, {1000.0, 1000.0}));
  CHECK(c.value()[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(c.value()[1] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one") {
  RngStream rng(11, streams::kData);
  auto x = Tensor64::from({20, 7}, oracle::random_vec(140, rng, -30, 30));
  auto y = softmax_lastdim(x);
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      double v = y.value()[i * 7 + j];
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("dropout degenerate and eval modes are the identity") {
  RngStream rng(5, streams::kDropout);
  auto x = Tensor64::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(dropout(x, 0.0, rng, true).value() == x.value());
  CHECK(dropout(x, 0.5, rng, false).value() == x.value());
  CHECK_THROWS_AS(dropout(x, 1.0, rng, true), ConfigError);
}

TEST_CASE("dropout statistics follow the inverted-dropout law") {
  RngStream rng(9, streams::kDropout);
  const std::size_t n = 100000;
  auto x = Tensor64::full({n}, 1.0);
  auto y = dropout(x, 0.5, rng, true);
  double sum = 0;
  std::size_t zeros = 0;
  for (double v : y.value()) {
    sum += v;
    if (v == 0.0) ++zeros;
  }
  CHECK(std::fabs(sum / double(n) - 1.0) < 0.02);
  CHECK(std::fabs(double(zeros) / double(n) - 0.5) < 0.02);
}

TEST_CASE("backward of sum gives all-ones and of sum of squares gives 2x") {
  TapeScope<double> scope;
  auto x = Tensor64::from({4}, {1, -2, 3, 0.5}).set_requires_grad();
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(x.grad()[i] == doctest::Approx(2 * x.value()[i]).epsilon(1e-15));
}

TEST_CASE("backward rejects non-scalar losses") {
  TapeScope<double> scope;
  auto x = Tensor64::from({2}, {1, 2}).set_requires_grad();
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("a value consumed twice accumulates both gradients") {
  TapeScope<double> scope;
  auto x = Tensor64::from({3}, {1, 2, 3}).set_requires_grad();
  backward(sum(add(x, x)));
  for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("no recording happens outside a tape scope") {
  auto x = Tensor64::from({2}, {1, 2}).set_requires_grad();
  auto y = mul(x, x);
  CHECK(y.node_id() == -1);
  CHECK_FALSE(y.requires_grad());
}

namespace {

// Composite graph exercising most ops; returns the scalar objective.
Tensor64 composite(const Tensor64& x, const Tensor64& w, const Tensor64& b,
                   const Tensor64& g, const Tensor64& be) {
  auto h = gelu(add_rowvec(matmul(x, w), b));
  auto ln = layer_norm(h, g, be);
  auto sm = softmax_lastdim(ln);
  auto t = transpose(sm);
  auto r = relu(sub(t, Tensor64::full(t.shape(), 0.1)));
  auto q = sqrt_el(add_scalar(mul(r, r), 0.3));
  return mean(mul(q, q));
}

}  // namespace

TEST_CASE("finite differences validate gradients through a composite graph") {
  RngStream rng(17, streams::kData);
  for (int trial = 0; trial < 5; ++trial) {
    auto xv = oracle::random_vec(4 * 6, rng);
    auto wv = oracle::random_vec(6 * 5, rng);
    auto bv = oracle::random_vec(5, rng);
    auto gv = oracle::random_vec(5, rng, 0.5, 1.5);
    auto ev = oracle::random_vec(5, rng);

    auto x = Tensor64::from({4, 6}, xv).set_requires_grad();
    auto w = Tensor64::from({6, 5}, wv).set_requires_grad();
    auto b = Tensor64::from({5}, bv).set_requires_grad();
    auto g = Tensor64::from({5}, gv).set_requires_grad();
    auto be = Tensor64::from({5}, ev).set_requires_grad();

    {
      TapeScope<double> scope;
      backward(composite(x, w, b, g, be));
    }
    auto eval = [&] { return composite(x, w, b, g, be).item(); };
    for (auto* leaf : {&x, &w, &b, &g, &be}) {
      auto rep = oracle::fd_check(*leaf, leaf->grad(), eval);
      CHECK(rep.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("finite differences validate conv, bmm, permute and gathers") {
  RngStream rng(23, streams::kData);
  auto xv = oracle::random_vec(2 * 2 * 5 * 5, rng);
  auto wv = oracle::random_vec(3 * 2 * 9, rng);
  auto bv = oracle::random_vec(3, rng);
  auto x = Tensor64::from({2, 2, 5, 5}, xv).set_requires_grad();
  auto w = Tensor64::from({3, 2, 3, 3}, wv).set_requires_grad();
  auto b = Tensor64::from({3}, bv).set_requires_grad();

  auto f = [&] {
    auto y = conv2d_3x3(x, w, b);
    auto r = reshape(y, {6, 25});
    auto g3 = reshape(gather_rows(r, {0, 2, 4, 1}), {2, 2, 25});
    auto p = permute(g3, {1, 0, 2});
    auto z = bmm_nt(p, p);
    return sum(mul_rows(reshape(z, {4, 2}), Tensor64::from({4}, {1, -2, 0.5, 3})));
  };
  {
    TapeScope<double> scope;
    backward(f());
  }
  auto eval = [&] { return f().item(); };
  for (auto* leaf : {&x, &w, &b}) {
    auto rep = oracle::fd_check(*leaf, leaf->grad(), eval);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("forward results are bit-identical for identical seeds") {
  auto run = [] {
    RngStream rng(99, streams::kDropout);
    auto x = Tensor64::from({8, 8}, oracle::random_vec(64, rng));
    auto y = dropout(gelu(x), 0.3, rng, true);
    return softmax_lastdim(y).value();
  };
  CHECK(run() == run());
}

TEST_CASE("scatter_rows_sum merges groups and routes gradients back") {
  TapeScope<double> scope;
  auto a = Tensor64::from({2, 2}, {1, 2, 3, 4}).set_requires_grad();
  auto b = Tensor64::from({1, 2}, {10, 20}).set_requires_grad();
  auto out = scatter_rows_sum<double>({a, b}, {{0, 2}, {0}}, 3);
  CHECK(out.value() == std::vector<double>{11, 22, 0, 0, 3, 4});
  backward(sum(mul_rows(out, Tensor64::from({3}, {1, 2, 3}))));
  CHECK(a.grad() == std::vector<double>{1, 1, 3, 3});
  CHECK(b.grad() == std::vector<double>{1, 1});
}

TEST_CASE("clamp_min floors values and blocks gradient at floored entries") {
  TapeScope<double> scope;
  auto x = Tensor64::from({3}, {0.5, 2.0, -1.0}).set_requires_grad();
  auto y = clamp_min(x, 1.0);
  CHECK(y.value() == std::vector<double>{1.0, 2.0, 1.0});
  backward(sum(y));
  CHECK(x.grad() == std::vector<double>{0.0, 1.0, 0.0});
}

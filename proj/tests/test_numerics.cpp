#include <cmath>
#include <random>

#include "doctest.h"

#include "ambs/autograd.hpp"
#include "ambs/error.hpp"
#include "ambs/gradcheck.hpp"
#include "ambs/optim.hpp"
#include "ambs/tensor.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

using namespace ambs;
using namespace ambs::testing;

TEST_CASE("tensor construction checks payload size") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
  const Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  const Tensor v = Tensor::vector({1, 2, 3});
  CHECK(v.rows() == 1);
  CHECK(v.cols() == 3);
}

TEST_CASE("checksum tracks payload and shape") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor b = a;
  CHECK(a.checksum() == b.checksum());
  b[3] = 4.0001f;
  CHECK(a.checksum() != b.checksum());
  const Tensor c({4}, {1, 2, 3, 4});
  CHECK(a.checksum() != c.checksum());
}

TEST_CASE("matmul hand cases") {
  const Tensor id = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::matrix({{3, 4}, {5, 6}});
  CHECK(matmul(id, b) == b);
  const Tensor r = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  CHECK(r.shape() == std::vector<int>{1, 1});
  CHECK(r[0] == 11.0f);
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST_CASE("matmul variants agree with a triple loop") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = random_int(rng, 1, 6), k = random_int(rng, 1, 6), n = random_int(rng, 1, 6);
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    Tensor ref({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += static_cast<double>(a.at(i, p)) * b.at(p, j);
        ref.at(i, j) = static_cast<float>(s);
      }
    CHECK(relative_error(matmul(a, b), ref) < 1e-6);
    CHECK(relative_error(matmul_nt(a, transpose(b)), ref) < 1e-6);
    CHECK(relative_error(matmul_tn(transpose(a), b), ref) < 1e-6);
  }
}

TEST_CASE("softmax rows") {
  const Tensor s = softmax_rows(Tensor::matrix({{0, 0}, {1000, 1000}}));
  CHECK(s.at(0, 0) == doctest::Approx(0.5));
  CHECK(s.at(1, 1) == doctest::Approx(0.5));
  const Tensor big = softmax_rows(Tensor::matrix({{1000, 1000, 1000}}));
  for (float x : big.data()) CHECK(x == doctest::Approx(1.0 / 3.0));
  const Tensor l3 = softmax_rows(Tensor::matrix({{0.0f, std::log(3.0f)}}));
  CHECK(l3[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(l3[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one and ignore per-row shifts") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const int m = random_int(rng, 1, 5), n = random_int(rng, 1, 8);
    Tensor x = random_tensor({m, n}, rng, 3.0f);
    const Tensor s = softmax_rows(x);
    for (int i = 0; i < m; ++i) {
      double sum = 0.0;
      for (float v : s.row(i)) sum += v;
      CHECK(std::abs(sum - 1.0) < 1e-6);
      const float shift = random_uniform({1}, rng, -50.0f, 50.0f)[0];
      for (auto& v : x.row(i)) v += shift;
    }
    CHECK(max_abs_diff(softmax_rows(x), s) < 1e-6);
  }
}

TEST_CASE("cosine similarity") {
  CHECK(cosine_similarity(Tensor::vector({1, 2, 3}), Tensor::vector({1, 2, 3})) == doctest::Approx(1.0));
  CHECK(cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({0, 1})) == doctest::Approx(0.0));
  CHECK(cosine_similarity(Tensor::vector({1, 1}), Tensor::vector({1, 0})) == doctest::Approx(0.7071).epsilon(1e-4));
  CHECK_THROWS_AS(cosine_similarity(Tensor::vector({0, 0}), Tensor::vector({1, 0})), DegenerateInputError);
  CHECK_THROWS_AS(cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({1, 0, 0})), DimensionError);
}

TEST_CASE("cosine similarity is scale invariant and symmetric") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = random_int(rng, 1, 16);
    const Tensor a = random_tensor({k}, rng), b = random_tensor({k}, rng);
    Tensor ca = a;
    const float c = random_uniform({1}, rng, 0.01f, 100.0f)[0];
    for (auto& x : ca.data()) x *= c;
    CHECK(std::abs(cosine_similarity(a, ca) - 1.0f) < 1e-6);
    CHECK(std::abs(cosine_similarity(a, b) - cosine_similarity(b, a)) < 1e-6);
  }
}

TEST_CASE("mean pool rows") {
  CHECK(mean_pool_rows(Tensor::matrix({{2, 4}, {4, 8}})) == Tensor::vector({3, 6}));
  CHECK(mean_pool_rows(Tensor::matrix({{7, 7, 7}})) == Tensor::vector({7, 7, 7}));
  std::mt19937_64 rng(5);
  const Tensor h = random_tensor({5, 3}, rng);
  const Tensor p = mean_pool_rows(h);
  for (int c = 0; c < 3; ++c) {
    double s = 0.0;
    for (int r = 0; r < 5; ++r) s += h.at(r, c);
    CHECK(std::abs(p[c] - s / 5.0) < 1e-6);
  }
}

TEST_CASE("backward of sum gives ones") {
  ag::Var x = ag::Var::leaf(Tensor::matrix({{1, -2, 3}, {4, 5, -6}}));
  ag::backward(ag::sum(x));
  for (float g : x.grad().data()) CHECK(g == 1.0f);
}

TEST_CASE("cosine loss has zero gradient at its minimum") {
  ag::Var y = ag::Var::leaf(Tensor::vector({0.3f, -1.2f, 2.0f}));
  const ag::Var loss = ag::cosine_loss(y, y);
  CHECK(loss.value()[0] == doctest::Approx(0.0).epsilon(1e-6));
  ag::backward(loss);
  for (float g : y.grad().data()) CHECK(std::abs(g) < 1e-6);
}

TEST_CASE("backward requires a scalar root") {
  ag::Var x = ag::Var::leaf(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(ag::backward(x), ContractError);
}

TEST_CASE("leaf gradients accumulate until zero_grad") {
  ag::Var x = ag::Var::leaf(Tensor::vector({1, 2}));
  ag::backward(ag::sum(x));
  ag::backward(ag::sum(ag::scale(x, 2.0f)));
  CHECK(x.grad() == Tensor::vector({3, 3}));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("dropout is the identity in eval mode and seeded in train mode") {
  std::mt19937_64 rng(9);
  const Tensor t = random_tensor({4, 8}, rng);
  const ag::Var x = ag::Var::constant(t);
  CHECK(ag::dropout(x, 0.5f, 1, false).value() == t);
  CHECK(ag::dropout(x, 0.5f, 1, true).value() == ag::dropout(x, 0.5f, 1, true).value());
  CHECK_FALSE(ag::dropout(x, 0.5f, 1, true).value() == ag::dropout(x, 0.5f, 2, true).value());
}

TEST_CASE("finite differences of simple functions") {
  const Tensor g = finite_difference_grad(
      [](const Tensor& x) { return static_cast<double>(x[0]) * x[0] + static_cast<double>(x[1]) * x[1]; },
      Tensor::vector({1, 2}));
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-3));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-3));
  const Tensor z = finite_difference_grad([](const Tensor&) { return 5.0; }, Tensor::vector({1, 2, 3}));
  for (float x : z.data()) CHECK(x == 0.0f);
  CHECK(relative_error(Tensor::vector({0, 0}), Tensor::vector({0, 0})) == 0.0);
}

TEST_CASE("every op passes a short gradient check") {
  std::mt19937_64 rng(2024);
  for (const auto& c : op_grad_cases()) {
    for (int i = 0; i < 3; ++i) {
      const GradResult res = check_instance(c.make(rng), rng);
      INFO(c.name << " instance " << i << " grad err " << res.grad_err << " forward err " << res.forward_err);
      CHECK(res.grad_err < 1e-4);
      CHECK(res.forward_err < 1e-5);
    }
  }
}

TEST_CASE("adamw") {
  SUBCASE("zero gradient without decay leaves the parameter alone") {
    Tensor p = Tensor::vector({1, -2});
    AdamWState s = AdamWState::for_param(p, 0.1f);
    adamw_update(p, Tensor::vector({0, 0}), s);
    CHECK(p == Tensor::vector({1, -2}));
    CHECK(s.step == 1);
  }
  SUBCASE("first step moves by about lr against the gradient") {
    Tensor p = Tensor::vector({0});
    AdamWState s = AdamWState::for_param(p, 0.1f);
    adamw_update(p, Tensor::vector({1}), s);
    // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
    CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-6));
  }
  SUBCASE("converges on a quadratic") {
    Tensor w = Tensor::vector({0});
    AdamWState s = AdamWState::for_param(w, 0.1f);
    for (int i = 0; i < 200; ++i) adamw_update(w, Tensor::vector({2.0f * (w[0] - 3.0f)}), s);
    CHECK(std::abs(w[0] - 3.0f) < 0.1f);
    CHECK(s.step == 200);
    CHECK(s.m.shape() == w.shape());
  }
  SUBCASE("shape mismatch throws") {
    Tensor p = Tensor::vector({0, 0});
    AdamWState s = AdamWState::for_param(p, 0.1f);
    CHECK_THROWS_AS(adamw_update(p, Tensor::vector({1}), s), DimensionError);
  }
}

TEST_CASE("sgd update") {
  std::mt19937_64 rng(1);
  Tensor p = random_tensor({5}, rng);
  const Tensor g = random_tensor({5}, rng), before = p;
  sgd_update(p, g, 0.05f);
  for (int i = 0; i < 5; ++i) CHECK(p[i] == before[i] - 0.05f * g[i]);
}

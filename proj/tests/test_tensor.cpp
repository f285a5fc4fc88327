#include <doctest.h>

#include <cmath>

#include "tinydistill/gradcheck.hpp"
#include "tinydistill/ops.hpp"
#include "tinydistill/rng.hpp"
#include "tinydistill/tensor.hpp"

using namespace tinydistill;

namespace {

Tensor<double> random_tensor(Shape shape, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul identity, hand arithmetic and zero cases") {
  auto I = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<double>::from_data({2, 2}, {3, 4, 5, 6});
  auto r = matmul(I, m);
  CHECK(r.data()[0] == 3);
  CHECK(r.data()[1] == 4);
  CHECK(r.data()[2] == 5);
  CHECK(r.data()[3] == 6);

  auto a = Tensor<double>::from_data({1, 2}, {1, 2});
  auto b = Tensor<double>::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == 11);

  auto z = Tensor<double>::zeros({2, 3});
  auto o = Tensor<double>::full({3, 2}, 1.0);
  auto zz = matmul(z, o);
  for (int i = 0; i < 4; ++i) CHECK(zz.data()[i] == 0);
}

TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), shape_error);
}

TEST_CASE("matmul associativity is exact on small integer tensors") {
  RngStream rng(kStreamTest, {1});
  auto randint = [&](Shape s) {
    auto t = Tensor<double>::zeros(std::move(s));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.data()[i] = static_cast<double>(static_cast<std::int64_t>(rng.next_below(7)) - 3);
    return t;
  };
  auto a = randint({3, 4});
  auto b = randint({4, 2});
  auto c = randint({2, 5});
  auto l = matmul(matmul(a, b), c);
  auto r = matmul(a, matmul(b, c));
  for (std::int64_t i = 0; i < l.numel(); ++i) CHECK(l.data()[i] == r.data()[i]);
}

TEST_CASE("conv2d identity 1x1 kernel is bit-exact identity") {
  RngStream rng(kStreamTest, {2});
  auto x = random_tensor({1, 1, 4, 4}, rng);
  auto k = Tensor<double>::from_data({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, k, 1, 0);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d all-ones 3x3 window sums, stride shape arithmetic, errors") {
  auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, k, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0));

  auto x2 = Tensor<double>::zeros({1, 1, 4, 4});
  auto k2 = Tensor<double>::zeros({1, 1, 2, 2});
  CHECK(conv2d(x2, k2, 2, 0).shape() == Shape{1, 1, 2, 2});

  auto k3 = Tensor<double>::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d(x2, k3, 1, 0), shape_error);
}

TEST_CASE("l2_normalize examples") {
  auto v = Tensor<double>::from_data({2}, {3, 4});
  auto n = l2_normalize(v, 0, 1e-12);
  CHECK(n.data()[0] == doctest::Approx(0.6));
  CHECK(n.data()[1] == doctest::Approx(0.8));

  auto z = Tensor<double>::from_data({2}, {0, 0});
  auto nz = l2_normalize(z, 0, 1e-12);
  CHECK(nz.data()[0] == 0);
  CHECK(nz.data()[1] == 0);

  auto u = Tensor<double>::from_data({2}, {1, 0});
  auto nu = l2_normalize(u, 0, 1e-12);
  CHECK(nu.data()[0] == doctest::Approx(1.0));
  CHECK(nu.data()[1] == doctest::Approx(0.0));
}

TEST_CASE("l2_normalize slices have unit norm whenever input norm > eps") {
  RngStream rng(kStreamTest, {3});
  auto x = random_tensor({3, 5, 2}, rng);
  auto n = l2_normalize(x, 1, 1e-12);
  for (int b = 0; b < 3; ++b)
    for (int i = 0; i < 2; ++i) {
      double s = 0;
      for (int c = 0; c < 5; ++c) {
        double v = n.data()[b * 10 + c * 2 + i];
        s += v * v;
      }
      CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("backward on sum gives ones; repeated backward accumulates") {
  auto x = Tensor<double>::full({3}, 1.0, true);
  Tape<double> tape;
  auto loss = sum_all(x, &tape);
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
  x.zero_grad();
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward of x^2 at 3 gives 6") {
  auto x = Tensor<double>::scalar(3.0, true);
  Tape<double> tape;
  auto y = mul(x, x, &tape);
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor<double>::full({3}, 1.0, true);
  Tape<double> tape;
  auto y = scale(x, 2.0, &tape);
  CHECK_THROWS_AS(tape.backward(y), contract_error);
}

TEST_CASE("grad_check on quadratic form is nearly exact") {
  RngStream rng(kStreamTest, {4});
  auto x = random_tensor({6}, rng);
  double err = grad_check(
      [](const Tensor<double>& v, Tape<double>* t) {
        auto d = rowwise_dot(reshape(v, {1, 6}, t), reshape(v, {1, 6}, t), t);
        return sum_all(d, t);
      },
      x, 1e-5);
  CHECK(err < 1e-9);
}

TEST_CASE("grad_check rejects h = 0 and non-scalar functions") {
  auto x = Tensor<double>::full({2}, 1.0);
  CHECK_THROWS_AS(grad_check([](const Tensor<double>& v, Tape<double>* t) { return sum_all(v, t); },
                             x, 0.0),
                  contract_error);
  CHECK_THROWS_AS(grad_check([](const Tensor<double>& v, Tape<double>* t) { return scale(v, 2.0, t); },
                             x, 1e-5),
                  contract_error);
}

TEST_CASE("normalized distance loss gradient matches finite differences") {
  RngStream rng(kStreamTest, {5});
  auto x = random_tensor({4}, rng, 0.2, 1.0);
  auto target = random_tensor({4}, rng);
  double err = grad_check(
      [&target](const Tensor<double>& v, Tape<double>* t) {
        auto n = l2_normalize(v, 0, 1e-12, t);
        auto d = sub(n, target, t);
        return sum_all(mul(d, d, t), t);
      },
      x, 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("kernel gradient suite on randomized shapes") {
  RngStream rng(kStreamTest, {6});
  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t B = 1 + static_cast<std::int64_t>(rng.next_below(2));
    const std::int64_t C = 1 + static_cast<std::int64_t>(rng.next_below(3));
    const std::int64_t H = 3 + static_cast<std::int64_t>(rng.next_below(3));
    const std::int64_t O = 1 + static_cast<std::int64_t>(rng.next_below(3));

    auto x = random_tensor({B, C, H, H}, rng);
    auto w = random_tensor({O, C, 3, 3}, rng);
    double err = grad_check(
        [&w](const Tensor<double>& v, Tape<double>* t) {
          return sum_all(conv2d(v, w, 1, 1, t), t);
        },
        x, 1e-6);
    CHECK_MESSAGE(err < 1e-6, "conv2d input grad, trial ", trial);

    auto wv = w.clone();
    err = grad_check(
        [&x](const Tensor<double>& v, Tape<double>* t) {
          auto y = conv2d(x, v, 2, 0, t);
          return mean_all(mul(y, y, t), t);
        },
        wv, 1e-6);
    CHECK_MESSAGE(err < 1e-6, "conv2d weight grad, trial ", trial);

    auto dw = random_tensor({C, 1, 3, 3}, rng);
    err = grad_check(
        [&dw](const Tensor<double>& v, Tape<double>* t) {
          return sum_all(depthwise_conv2d(v, dw, 1, 1, t), t);
        },
        x, 1e-6);
    CHECK_MESSAGE(err < 1e-6, "depthwise input grad, trial ", trial);
  }
}

TEST_CASE("batchnorm2d gradients (train and eval) match finite differences") {
  RngStream rng(kStreamTest, {7});
  auto x = random_tensor({3, 2, 2, 2}, rng);
  auto gamma = random_tensor({2}, rng, 0.5, 1.5);
  auto beta = random_tensor({2}, rng);
  for (bool training : {true, false}) {
    auto rm = Tensor<double>::zeros({2});
    auto rv = Tensor<double>::full({2}, 1.0);
    double err = grad_check(
        [&](const Tensor<double>& v, Tape<double>* t) {
          auto rmc = rm.clone();
          auto rvc = rv.clone();
          auto y = batchnorm2d(v, gamma, beta, rmc, rvc, training, 0.1, 1e-5, t);
          return mean_all(mul(y, y, t), t);
        },
        x, 1e-6);
    CHECK_MESSAGE(err < 1e-6, "bn input grad, training=", training);
  }
  auto rm = Tensor<double>::zeros({2});
  auto rv = Tensor<double>::full({2}, 1.0);
  double err = grad_check(
      [&](const Tensor<double>& v, Tape<double>* t) {
        auto rmc = rm.clone();
        auto rvc = rv.clone();
        auto y = batchnorm2d(x, v, beta, rmc, rvc, true, 0.1, 1e-5, t);
        return mean_all(mul(y, y, t), t);
      },
      gamma, 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("batchnorm2d running stats update with momentum") {
  auto x = Tensor<double>::full({2, 1, 1, 1}, 2.0);
  x.data()[1] = 4.0;  // batch mean 3, biased var 1, unbiased 2
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::zeros({1});
  auto rm = Tensor<double>::zeros({1});
  auto rv = Tensor<double>::full({1}, 1.0);
  (void)batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
  CHECK(rm.data()[0] == doctest::Approx(0.3));
  CHECK(rv.data()[0] == doctest::Approx(0.9 + 0.1 * 2.0));
}

TEST_CASE("softmax cross entropy: uniform logits give ln C, labels validated") {
  auto logits = Tensor<double>::zeros({2, 4});
  auto loss = softmax_cross_entropy(logits, {0, 3});
  CHECK(loss.item() == doctest::Approx(std::log(4.0)));
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 4}), contract_error);
}

TEST_CASE("elementwise broadcast over leading axes only") {
  auto a = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from_data({2}, {10, 20});
  auto s = add(a, b);
  CHECK(s.data()[0] == 11);
  CHECK(s.data()[1] == 22);
  CHECK(s.data()[2] == 13);
  CHECK(s.data()[3] == 24);

  auto bad = Tensor<double>::from_data({3}, {1, 2, 3});
  CHECK_THROWS_AS(add(a, bad), shape_error);
}

TEST_CASE("detach blocks gradient flow") {
  auto x = Tensor<double>::scalar(2.0, true);
  Tape<double> tape;
  auto y = mul(x.detach(), x, &tape);
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(2.0));  // only the live branch contributes
}

TEST_CASE("global_avg_pool and gap gradient") {
  RngStream rng(kStreamTest, {8});
  auto x = random_tensor({2, 3, 2, 2}, rng);
  auto p = global_avg_pool(x);
  CHECK(p.shape() == Shape{2, 3});
  double err = grad_check(
      [](const Tensor<double>& v, Tape<double>* t) {
        auto p2 = global_avg_pool(v, t);
        return sum_all(mul(p2, p2, t), t);
      },
      x, 1e-6);
  CHECK(err < 1e-6);
}

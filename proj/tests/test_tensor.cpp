#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "overlap/tensor.hpp"
#include "test_support.hpp"

using overlap::Rng;
using overlap::Tape;
using overlap::Tensor;
using test_support::max_grad_error;
using test_support::random_tensor;

TEST_CASE("matmul identity and hand arithmetic") {
  Tape tape;
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_values({2, 2}, {3, 4, 5, 6});
  Tensor out = tape.matmul(eye, m);
  REQUIRE(out.values() == std::vector<float>{3, 4, 5, 6});

  Tensor a = Tensor::from_values({1, 2}, {1, 2});
  Tensor b = Tensor::from_values({2, 1}, {3, 4});
  REQUIRE(tape.matmul(a, b).item() == 11.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Tensor a({2, 3});
  Tensor b({4, 2});
  REQUIRE_THROWS_WITH(tape.matmul(a, b),
                      Catch::Matchers::ContainsSubstring("[2, 3]") &&
                          Catch::Matchers::ContainsSubstring("[4, 2]"));
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({4, 3}, rng, -2.0f, 2.0f, true);
    Tensor b = random_tensor({3, 2}, rng, -2.0f, 2.0f, true);
    Tensor w = random_tensor({4, 2}, rng);  // fixed weights decorrelate the reduction
    auto loss_fn = [&]() {
      Tape t;
      Tensor loss = t.mean(t.mul(t.matmul(a, b), w));
      return loss.item();
    };
    Tape t;
    Tensor loss = t.mean(t.mul(t.matmul(a, b), w));
    t.backward(loss);
    REQUIRE(max_grad_error(loss_fn, a) < 1e-3);
    REQUIRE(max_grad_error(loss_fn, b) < 1e-3);
  }
}

TEST_CASE("conv2d all-ones and identity kernels") {
  Tape tape;
  Tensor x = Tensor::from_values({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  Tensor k = Tensor::from_values({1, 1, 3, 3}, std::vector<float>(9, 1.0f));
  Tensor out = tape.conv2d(x, k, 1, 0);
  REQUIRE(out.shape() == std::vector<std::size_t>{1, 1, 1, 1});
  REQUIRE(out.item() == 9.0f);

  Rng rng(3);
  Tensor img = random_tensor({1, 1, 5, 4}, rng, 0.0f, 1.0f);
  std::vector<float> delta(9, 0.0f);
  delta[4] = 1.0f;  // center tap
  Tensor dk = Tensor::from_values({1, 1, 3, 3}, delta);
  Tensor same = tape.conv2d(img, dk, 1, 1);
  REQUIRE(same.shape() == img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) REQUIRE(same.at(i) == img.at(i));
}

// independent oracle: direct six-nested-loop cross-correlation
static std::vector<float> conv_oracle(const Tensor& x, const Tensor& k, std::size_t stride,
                                      std::size_t padding) {
  const auto& xs = x.shape();
  const auto& ks = k.shape();
  const std::size_t oh = (xs[2] + 2 * padding - ks[2]) / stride + 1;
  const std::size_t ow = (xs[3] + 2 * padding - ks[3]) / stride + 1;
  std::vector<float> out(xs[0] * ks[0] * oh * ow, 0.0f);
  for (std::size_t b = 0; b < xs[0]; ++b)
    for (std::size_t oc = 0; oc < ks[0]; ++oc)
      for (std::size_t oi = 0; oi < oh; ++oi)
        for (std::size_t oj = 0; oj < ow; ++oj) {
          float acc = 0.0f;
          for (std::size_t ic = 0; ic < xs[1]; ++ic)
            for (std::size_t ki = 0; ki < ks[2]; ++ki)
              for (std::size_t kj = 0; kj < ks[3]; ++kj) {
                const long ii = static_cast<long>(oi * stride + ki) - static_cast<long>(padding);
                const long jj = static_cast<long>(oj * stride + kj) - static_cast<long>(padding);
                if (ii < 0 || jj < 0 || ii >= static_cast<long>(xs[2]) ||
                    jj >= static_cast<long>(xs[3]))
                  continue;
                acc += x.at(((b * xs[1] + ic) * xs[2] + ii) * xs[3] + jj) *
                       k.at(((oc * xs[1] + ic) * ks[2] + ki) * ks[3] + kj);
              }
          out[((b * ks[0] + oc) * oh + oi) * ow + oj] = acc;
        }
  return out;
}

TEST_CASE("conv2d matches the naive oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 8; ++trial) {
    Tensor x = random_tensor({2, 3, 6, 5}, rng);
    Tensor k = random_tensor({4, 3, 3, 3}, rng);
    const std::size_t stride = 1 + trial % 2;
    const std::size_t padding = trial % 3;
    Tape tape;
    Tensor out = tape.conv2d(x, k, stride, padding);
    const std::vector<float> expected = conv_oracle(x, k, stride, padding);
    REQUIRE(out.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      REQUIRE(out.at(i) == Catch::Approx(expected[i]).margin(1e-5));
    }
  }
}

TEST_CASE("conv2d rejects bad stride and oversized kernels") {
  Tape tape;
  Tensor x({1, 1, 3, 3});
  Tensor k({1, 1, 3, 3});
  REQUIRE_THROWS_AS(tape.conv2d(x, k, 0, 0), overlap::ShapeError);
  Tensor big({1, 1, 5, 5});
  REQUIRE_THROWS_AS(tape.conv2d(x, big, 1, 0), overlap::ShapeError);
}

TEST_CASE("conv2d gradient matches finite differences") {
  Rng rng(19);
  for (int trial = 0; trial < 6; ++trial) {
    Tensor x = random_tensor({1, 2, 4, 4}, rng, -2.0f, 2.0f, true);
    Tensor k = random_tensor({2, 2, 3, 3}, rng, -1.0f, 1.0f, true);
    Tensor w = random_tensor({1, 2, 2, 2}, rng);
    auto loss_fn = [&]() {
      Tape t;
      return t.mean(t.mul(t.conv2d(x, k, 1, 0), w)).item();
    };
    Tape t;
    Tensor loss = t.mean(t.mul(t.conv2d(x, k, 1, 0), w));
    t.backward(loss);
    REQUIRE(max_grad_error(loss_fn, x) < 1e-3);
    REQUIRE(max_grad_error(loss_fn, k) < 1e-3);
  }
}

TEST_CASE("avg_pool2d forward and gradient") {
  Tape tape;
  Tensor x = Tensor::from_values({1, 1, 2, 2}, {1, 3, 5, 7});
  REQUIRE(tape.avg_pool2d(x, 2).item() == 4.0f);

  Rng rng(23);
  Tensor y = random_tensor({2, 3, 4, 4}, rng, -2.0f, 2.0f, true);
  Tensor w = random_tensor({2, 3, 2, 2}, rng);
  auto loss_fn = [&]() {
    Tape t;
    return t.mean(t.mul(t.avg_pool2d(y, 2), w)).item();
  };
  Tape t;
  Tensor loss = t.mean(t.mul(t.avg_pool2d(y, 2), w));
  t.backward(loss);
  REQUIRE(max_grad_error(loss_fn, y) < 1e-3);
}

TEST_CASE("relu semantics") {
  Tape tape;
  Tensor x = Tensor::from_values({3}, {-1, 0, 2}, true);
  Tensor out = tape.relu(x);
  REQUIRE(out.values() == std::vector<float>{0, 0, 2});
  Tensor loss = tape.mean(out);
  tape.backward(loss);
  // subgradient at exactly 0 is 0
  REQUIRE(x.grad_view() == std::vector<float>{0.0f, 0.0f, 1.0f / 3.0f});
}

TEST_CASE("add broadcasts over the leading batch dim") {
  Tape tape;
  Tensor a = Tensor::from_values({2, 3}, {0, 1, 2, 3, 4, 5}, true);
  Tensor b = Tensor::from_values({3}, {10, 20, 30}, true);
  Tensor out = tape.add(a, b);
  REQUIRE(out.values() == std::vector<float>{10, 21, 32, 13, 24, 35});
  Tensor loss = tape.mean(out);
  tape.backward(loss);
  for (float g : a.grad_view()) REQUIRE(g == Catch::Approx(1.0f / 6.0f));
  for (float g : b.grad_view()) REQUIRE(g == Catch::Approx(2.0f / 6.0f));

  Tensor c({4});
  REQUIRE_THROWS_AS(tape.add(a, c), overlap::ShapeError);
}

TEST_CASE("add gradient matches finite differences") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = random_tensor({3, 4}, rng, -2.0f, 2.0f, true);
    Tensor b = random_tensor({4}, rng, -2.0f, 2.0f, true);
    Tensor w = random_tensor({3, 4}, rng);
    auto loss_fn = [&]() {
      Tape t;
      return t.mean(t.mul(t.add(a, b), w)).item();
    };
    Tape t;
    Tensor loss = t.mean(t.mul(t.add(a, b), w));
    t.backward(loss);
    REQUIRE(max_grad_error(loss_fn, a) < 1e-3);
    REQUIRE(max_grad_error(loss_fn, b) < 1e-3);
  }
}

TEST_CASE("mean and scale basics") {
  Tape tape;
  REQUIRE(tape.mean(Tensor::from_values({2}, {2, 4})).item() == 3.0f);
  Tensor x = Tensor::from_values({2}, {1, -2});
  REQUIRE(tape.scale(x, -3.0f).values() == std::vector<float>{-3, 6});
}

TEST_CASE("softmax cross entropy values") {
  Tape tape;
  Tensor equal = Tensor::from_values({1, 4}, {0.5f, 0.5f, 0.5f, 0.5f});
  REQUIRE(tape.softmax_cross_entropy(equal, {2}).item() ==
          Catch::Approx(std::log(4.0)).epsilon(1e-6));

  Tensor saturated = Tensor::from_values({1, 2}, {10.0f, -10.0f});
  const float loss = tape.softmax_cross_entropy(saturated, {0}).item();
  REQUIRE(loss == Catch::Approx(2.061154e-9).epsilon(1e-3));

  REQUIRE_THROWS_AS(tape.softmax_cross_entropy(equal, {4}), overlap::ShapeError);
  REQUIRE_THROWS_AS(tape.softmax_cross_entropy(equal, {-1}), overlap::ShapeError);
}

TEST_CASE("softmax cross entropy is non-negative, ln C only on constant rows") {
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 2 + static_cast<std::size_t>(rng.next_below(6));
    Tensor logits = random_tensor({1, c}, rng, -3.0f, 3.0f);
    Tape tape;
    const float loss = tape.softmax_cross_entropy(logits, {static_cast<int>(rng.next_below(c))}).item();
    REQUIRE(loss >= 0.0f);
  }
  for (std::size_t c = 2; c <= 8; ++c) {
    Tensor constant = Tensor::from_values({1, c}, std::vector<float>(c, 0.7f));
    Tape tape;
    REQUIRE(tape.softmax_cross_entropy(constant, {0}).item() ==
            Catch::Approx(std::log(static_cast<double>(c))).epsilon(1e-6));
  }
}

TEST_CASE("softmax cross entropy gradient matches finite differences") {
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor({3, 5}, rng, -2.0f, 2.0f, true);
    std::vector<int> labels = {static_cast<int>(rng.next_below(5)),
                               static_cast<int>(rng.next_below(5)),
                               static_cast<int>(rng.next_below(5))};
    auto loss_fn = [&]() {
      Tape t;
      return t.softmax_cross_entropy(logits, labels).item();
    };
    Tape t;
    Tensor loss = t.softmax_cross_entropy(logits, labels);
    t.backward(loss);
    REQUIRE(max_grad_error(loss_fn, logits) < 1e-3);
  }
}

TEST_CASE("backward populates grads and enforces its contract") {
  Tape tape;
  Tensor x = Tensor::from_values({4}, {1, 2, 3, 4}, true);
  Tensor loss = tape.mean(x);
  tape.backward(loss);
  REQUIRE(x.grad_view() == std::vector<float>(4, 0.25f));
  REQUIRE_THROWS_AS(tape.backward(loss), std::logic_error);

  Tape other;
  Tensor nonscalar = other.relu(x);
  REQUIRE_THROWS_AS(other.backward(nonscalar), overlap::ShapeError);
}

TEST_CASE("forward results are bit-identical across runs") {
  Rng rng(53);
  Tensor a = random_tensor({8, 8}, rng);
  Tensor b = random_tensor({8, 8}, rng);
  Tape t1, t2;
  Tensor r1 = t1.softmax_cross_entropy(t1.relu(t1.matmul(a, b)), std::vector<int>(8, 3));
  Tensor r2 = t2.softmax_cross_entropy(t2.relu(t2.matmul(a, b)), std::vector<int>(8, 3));
  REQUIRE(r1.values() == r2.values());
}

TEST_CASE("non-finite forward results surface as numeric errors") {
  Tape tape;
  Tensor huge = Tensor::from_values({2}, {3e38f, 3e38f});
  REQUIRE_THROWS_AS(tape.add(huge, huge), overlap::NumericError);
  REQUIRE_THROWS_AS(tape.scale(huge, 2.0f), overlap::NumericError);
}

TEST_CASE("reshape keeps values and routes gradients") {
  Tape tape;
  Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor r = tape.reshape(x, {3, 2});
  REQUIRE(r.values() == x.values());
  REQUIRE_THROWS_AS(tape.reshape(x, {4, 2}), overlap::ShapeError);
  Tensor loss = tape.mean(r);
  tape.backward(loss);
  REQUIRE(x.grad_view() == std::vector<float>(6, 1.0f / 6.0f));
}

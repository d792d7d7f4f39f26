#include "doctest.h"
#include "gradcheck.hpp"
#include "stemdiff/core/nn.hpp"

using namespace stemdiff;
using ag::Var;

namespace {

Var<double> random_var(const Shape& shape, Rng& rng, bool requires_grad = true) {
  return Var<double>(rng.normal_tensor<double>(shape), requires_grad);
}

// Projects an arbitrary output onto a fixed random direction so every output entry matters.
Var<double> project(const Var<double>& y, const Tensor<double>& direction) {
  return ag::sum(ag::mul(y, Var<double>(direction)));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  auto a = random_var({2, 3, 4}, rng);
  auto b = random_var({2, 3, 4}, rng);
  const auto dir = rng.normal_tensor<double>({2, 3, 4});
  auto loss = [&] {
    auto y = ag::add(ag::mul(ag::silu(a), ag::exp(ag::scale(b, 0.3))), ag::sub(a, b));
    return project(y, dir);
  };
  auto r = testing::grad_check({&a, &b}, loss, 48, rng);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("conv3d gradients with stride and padding") {
  Rng rng(2);
  auto x = random_var({2, 3, 4, 5, 6}, rng);
  auto w = random_var({4, 3, 3, 3, 3}, rng);
  auto bias = random_var({4}, rng);
  SUBCASE("stride 1 pad 1") {
    auto probe = ag::conv3d(x, w, bias, {1, 1, 1}, {1, 1, 1});
    CHECK(probe.shape() == Shape{2, 4, 4, 5, 6});
    const auto dir = rng.normal_tensor<double>(probe.shape());
    auto loss = [&] { return project(ag::conv3d(x, w, bias, {1, 1, 1}, {1, 1, 1}), dir); };
    CHECK(testing::grad_check({&x, &w, &bias}, loss, 60, rng).max_rel_error < 1e-6);
  }
  SUBCASE("stride 2 pad 1") {
    auto probe = ag::conv3d(x, w, bias, {2, 2, 2}, {1, 1, 1});
    CHECK(probe.shape() == Shape{2, 4, 2, 3, 3});
    const auto dir = rng.normal_tensor<double>(probe.shape());
    auto loss = [&] { return project(ag::conv3d(x, w, bias, {2, 2, 2}, {1, 1, 1}), dir); };
    CHECK(testing::grad_check({&x, &w, &bias}, loss, 60, rng).max_rel_error < 1e-6);
  }
  SUBCASE("pointwise") {
    auto w1 = random_var({5, 3, 1, 1, 1}, rng);
    auto b1 = random_var({5}, rng);
    const auto dir = rng.normal_tensor<double>({2, 5, 4, 5, 6});
    auto loss = [&] { return project(ag::conv3d(x, w1, b1, {1, 1, 1}, {0, 0, 0}), dir); };
    CHECK(testing::grad_check({&x, &w1, &b1}, loss, 40, rng).max_rel_error < 1e-6);
  }
}

TEST_CASE("conv3d matches a direct convolution sum") {
  Rng rng(3);
  auto x = random_var({1, 2, 3, 4, 5}, rng, false);
  auto w = random_var({3, 2, 3, 3, 3}, rng, false);
  auto bias = random_var({3}, rng, false);
  auto y = ag::conv3d(x, w, bias, {1, 2, 1}, {1, 1, 0});
  const auto& xv = x.value();
  const auto& wv = w.value();
  const int Ho = (4 + 2 - 3) / 2 + 1;
  const int Wo = 5 - 3 + 1;
  REQUIRE(y.shape() == Shape{1, 3, 3, Ho, Wo});
  for (int co = 0; co < 3; ++co) {
    for (int od = 0; od < 3; ++od) {
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = bias.value()[co];
          for (int ci = 0; ci < 2; ++ci) {
            for (int a = 0; a < 3; ++a) {
              for (int b = 0; b < 3; ++b) {
                for (int c = 0; c < 3; ++c) {
                  const int id = od - 1 + a, ih = oh * 2 - 1 + b, iw = ow + c;
                  if (id < 0 || id >= 3 || ih < 0 || ih >= 4 || iw < 0 || iw >= 5) continue;
                  acc += xv[((ci * 3 + id) * 4 + ih) * 5 + iw] * wv[(((co * 2 + ci) * 3 + a) * 3 + b) * 3 + c];
                }
              }
            }
          }
          CHECK(y.value()[((co * 3 + od) * Ho + oh) * Wo + ow] == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("pooling, upsampling and channel plumbing gradients") {
  Rng rng(4);
  auto x = random_var({2, 4, 2, 4, 6}, rng);
  auto bias = random_var({2, 4}, rng);
  auto other = random_var({2, 3, 2, 4, 6}, rng);
  const auto dir = rng.normal_tensor<double>({2, 3, 2, 4, 6});
  auto loss = [&] {
    auto pooled = ag::avg_pool(x, {1, 2, 2});
    auto up = ag::upsample_nearest(pooled, {1, 2, 2});
    auto biased = ag::add_channel_bias(up, bias);
    auto cat = ag::concat_channels(biased, other);
    return project(ag::slice_channels(cat, 3, 3), dir);
  };
  CHECK(testing::grad_check({&x, &bias, &other}, loss, 60, rng).max_rel_error < 1e-6);
}

TEST_CASE("group norm, linear, softmax, bmm gradients") {
  Rng rng(5);
  SUBCASE("group norm") {
    auto x = random_var({2, 6, 3, 2, 2}, rng);
    auto gamma = random_var({6}, rng);
    auto beta = random_var({6}, rng);
    const auto dir = rng.normal_tensor<double>(x.shape());
    auto loss = [&] { return project(ag::group_norm(x, gamma, beta, 3, 1e-5), dir); };
    CHECK(testing::grad_check({&x, &gamma, &beta}, loss, 60, rng).max_rel_error < 1e-5);
  }
  SUBCASE("linear") {
    auto x = random_var({3, 5}, rng);
    auto w = random_var({4, 5}, rng);
    auto b = random_var({4}, rng);
    const auto dir = rng.normal_tensor<double>({3, 4});
    auto loss = [&] { return project(ag::linear(x, w, b), dir); };
    CHECK(testing::grad_check({&x, &w, &b}, loss, 40, rng).max_rel_error < 1e-6);
  }
  SUBCASE("bmm in every transpose combination, then softmax") {
    for (int ta = 0; ta < 2; ++ta) {
      for (int tb = 0; tb < 2; ++tb) {
        auto a = random_var(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng);
        auto b = random_var(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng);
        const auto dir = rng.normal_tensor<double>({2, 3, 5});
        auto loss = [&] { return project(ag::softmax_last(ag::bmm(a, b, ta, tb)), dir); };
        CHECK(testing::grad_check({&a, &b}, loss, 30, rng).max_rel_error < 1e-5);
      }
    }
  }
}

TEST_CASE("loss terms") {
  Rng rng(6);
  auto p = random_var({10}, rng);
  auto t = random_var({10}, rng);
  auto mu = random_var({10}, rng);
  auto lv = random_var({10}, rng);
  auto loss = [&] { return ag::add(ag::mse(p, t), ag::gaussian_kl(mu, lv)); };
  CHECK(testing::grad_check({&p, &t, &mu, &lv}, loss, 40, rng).max_rel_error < 1e-6);

  Var<double> zeros(Tensor<double>({8}, 0.0));
  CHECK(ag::gaussian_kl(zeros, zeros).value()[0] == 0.0);
  CHECK(ag::mse(p, p).value()[0] == 0.0);
}

TEST_CASE("no-grad mode records nothing") {
  Rng rng(7);
  auto a = random_var({3}, rng);
  ag::NoGradGuard guard;
  auto y = ag::silu(a);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}

TEST_CASE("residual block and attention gradients") {
  Rng rng(8);
  nn::ResBlock<double> block(4, 6, 5, {3, 3, 3}, {1, 1, 1}, rng);
  nn::SelfAttention<double> attn(6, rng);
  auto x = random_var({2, 4, 2, 3, 2}, rng);
  auto temb = random_var({2, 5}, rng);
  const auto dir = rng.normal_tensor<double>({2, 6, 2, 3, 2});
  nn::ParamList<double> params;
  block.collect("block", params);
  attn.collect("attn", params);
  std::vector<Var<double>*> vars{&x, &temb};
  for (auto& p : params) vars.push_back(p.var);
  nn::ForwardContext ctx;
  auto loss = [&] { return project(attn(block(x, &temb, ctx)), dir); };
  CHECK(testing::grad_check(vars, loss, 80, rng).max_rel_error < 1e-3);
}

TEST_CASE("adam moves a quadratic toward its minimum") {
  Var<float> w(Tensor<float>({2}, 3.0f), true);
  nn::ParamList<float> params{{"w", &w}};
  nn::Adam<float> adam({.learning_rate = 0.1});
  for (int i = 0; i < 200; ++i) {
    nn::zero_grad(params);
    ag::backward(ag::sum(ag::mul(w, w)));
    adam.step(params);
  }
  CHECK(std::abs(w.value()[0]) < 0.05);
  CHECK(adam.steps() == 200);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "biomass/grad_check.hpp"
#include "biomass/ops.hpp"
#include "biomass/rng.hpp"
#include "biomass/tensor.hpp"

using biomass::Mode;
using biomass::RngStream;
using biomass::Shape;
using biomass::Tensor;
using biomass::grad_check;
namespace ops = biomass::ops;

namespace {

Tensor<double> rand_tensor(Shape shape, RngStream& rng, bool requires_grad = true,
                           double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(std::move(shape), lo, hi, rng, requires_grad);
}

}  // namespace

TEST_CASE("tensor construction enforces invariants") {
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1.0, 2.0, 3.0}), biomass::ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 0}, {}), biomass::ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2}, {1.0, std::nan("")}), biomass::NumericError);
  CHECK_THROWS_AS(Tensor<double>({1}, {INFINITY}), biomass::NumericError);
  Tensor<double> t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.last_dim() == 3);
}

TEST_CASE("rng streams are reproducible and children independent") {
  RngStream a(17, 3), b(17, 3);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  RngStream c = RngStream(17).child("init").child(2);
  RngStream d = RngStream(17).child("init").child(2);
  CHECK(c.next_u64() == d.next_u64());
  // distinct substreams diverge immediately
  RngStream e = RngStream(17).child("init").child(3);
  CHECK(c.next_u64() != e.next_u64());
}

TEST_CASE("linear fixtures") {
  Tensor<double> x({1, 2}, {1, 2});
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  auto y = ops::linear(x, eye, Tensor<double>({2}, {0, 0}));
  CHECK(y.data()[0] == doctest::Approx(1.0));
  CHECK(y.data()[1] == doctest::Approx(2.0));

  Tensor<double> x2({1, 2}, {1, 1});
  Tensor<double> w2({2, 1}, {2, 3});
  auto y2 = ops::linear(x2, w2, Tensor<double>({1}, {1}));
  CHECK(y2.data()[0] == doctest::Approx(6.0));

  CHECK_THROWS_AS(ops::linear(x, Tensor<double>({3, 1}, {1, 2, 3})), biomass::ShapeError);
}

TEST_CASE("linear gradient matches central finite differences") {
  RngStream rng(42);
  auto x = rand_tensor({3, 4}, rng);
  auto w = rand_tensor({4, 2}, rng);
  auto b = rand_tensor({2}, rng);
  auto f = [&] { return ops::sum(ops::linear(x, w, b)); };
  auto report = grad_check<double>(f, {x, w, b}, 1e-5, 1e-6);
  CHECK(report.passed);
  CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("layer_norm fixtures and row statistics") {
  Tensor<double> gamma({3}, {1, 1, 1});
  Tensor<double> beta({3}, {0, 0, 0});
  auto y = ops::layer_norm(Tensor<double>({1, 3}, {5, 5, 5}), gamma, beta, 1e-5);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.0));

  Tensor<double> g2({2}, {1, 1}), b2({2}, {0, 0});
  auto y2 = ops::layer_norm(Tensor<double>({1, 2}, {-1, 1}), g2, b2, 1e-5);
  CHECK(y2.data()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y2.data()[1] == doctest::Approx(1.0).epsilon(1e-4));

  CHECK_THROWS_AS(ops::layer_norm(Tensor<double>({1, 2}, {0, 1}), g2, b2, 0.0),
                  biomass::ConfigError);

  // pre-affine rows standardized; direct statistic oracle
  RngStream rng(7);
  auto x = rand_tensor({4, 8}, rng, false);
  Tensor<double> g8 = Tensor<double>::full({8}, 1.0);
  Tensor<double> b8 = Tensor<double>::zeros({8});
  auto out = ops::layer_norm(x, g8, b8, 1e-10);
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 8; ++c) mean += out.at(r, c);
    mean /= 8;
    for (std::size_t c = 0; c < 8; ++c) var += (out.at(r, c) - mean) * (out.at(r, c) - mean);
    var /= 8;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-5);
  }
}

TEST_CASE("layer_norm gradient") {
  RngStream rng(3);
  auto x = rand_tensor({3, 5}, rng);
  auto gamma = rand_tensor({5}, rng, true, 0.5, 1.5);
  auto beta = rand_tensor({5}, rng);
  // a non-symmetric functional so every input direction matters
  auto probe = rand_tensor({3, 5}, rng, false);
  auto f = [&] { return ops::sum(ops::mul(ops::layer_norm(x, gamma, beta, 1e-5), probe)); };
  auto report = grad_check<double>(f, {x, gamma, beta}, 1e-5, 1e-4);
  CHECK(report.passed);
}

TEST_CASE("depthwise conv fixtures") {
  // delta kernel reproduces the input
  RngStream rng(5);
  auto x = rand_tensor({6, 3}, rng, false);
  Tensor<double> delta({3, 5}, {0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0});
  Tensor<double> zero_b = Tensor<double>::zeros({3});
  auto y = ops::depthwise_conv1d(x, delta, zero_b);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

  // hand convolution, L=3 d=1 kernel [1,1,1] on [1,0,0] -> [1,1,0]
  Tensor<double> x2({3, 1}, {1, 0, 0});
  Tensor<double> k2({1, 3}, {1, 1, 1});
  auto y2 = ops::depthwise_conv1d(x2, k2, Tensor<double>::zeros({1}));
  CHECK(y2.data()[0] == doctest::Approx(1.0));
  CHECK(y2.data()[1] == doctest::Approx(1.0));
  CHECK(y2.data()[2] == doctest::Approx(0.0));

  CHECK_THROWS_AS(
      ops::depthwise_conv1d(x2, Tensor<double>({1, 4}, {1, 1, 1, 1}), Tensor<double>::zeros({1})),
      biomass::ConfigError);
}

TEST_CASE("depthwise conv gradient wrt input and kernels") {
  RngStream rng(11);
  auto x = rand_tensor({16, 4}, rng);
  auto k = rand_tensor({4, 5}, rng);
  auto b = rand_tensor({4}, rng);
  auto probe = rand_tensor({16, 4}, rng, false);
  auto f = [&] { return ops::sum(ops::mul(ops::depthwise_conv1d(x, k, b), probe)); };
  auto report = grad_check<double>(f, {x, k, b}, 1e-5, 1e-6);
  CHECK(report.passed);
}

TEST_CASE("activation fixtures") {
  auto s = ops::sigmoid(Tensor<double>({1}, {0.0}));
  CHECK(s.item() == doctest::Approx(0.5));
  auto sp = ops::softplus(Tensor<double>({1}, {0.0}));
  CHECK(sp.item() == doctest::Approx(std::log(2.0)));
  // softplus strictly positive, sigmoid in (0,1) far into the tails
  auto sp2 = ops::softplus(Tensor<double>({1}, {-40.0}));
  CHECK(sp2.item() > 0.0);
  auto s2 = ops::sigmoid(Tensor<double>({1}, {30.0}));
  CHECK(s2.item() < 1.0);
  CHECK(s2.item() > 0.0);
}

TEST_CASE("activation gradients") {
  RngStream rng(13);
  for (auto kind : {ops::Activation::sigmoid, ops::Activation::gelu, ops::Activation::softplus}) {
    auto x = rand_tensor({2, 7}, rng, true, -2.0, 2.0);
    auto probe = rand_tensor({2, 7}, rng, false);
    auto f = [&] { return ops::sum(ops::mul(ops::activation(kind, x), probe)); };
    auto report = grad_check<double>(f, {x}, 1e-5, 1e-5);
    CHECK(report.passed);
  }
}

TEST_CASE("dropout semantics") {
  RngStream rng(99);
  auto x = rand_tensor({4, 4}, rng, false);
  RngStream r1(1);
  auto y_eval = ops::dropout(x, 0.5, Mode::eval, r1);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y_eval.data()[i] == x.data()[i]);

  auto y_p0 = ops::dropout(x, 0.0, Mode::train, r1);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y_p0.data()[i] == x.data()[i]);

  CHECK_THROWS_AS(ops::dropout(x, 1.0, Mode::train, r1), biomass::ConfigError);

  // empirical zero fraction at p = 0.2 over 10,000 elements
  auto big = Tensor<double>::full({10000}, 1.0);
  RngStream r2(1234);
  auto y = ops::dropout(big, 0.2, Mode::train, r2);
  int zeros = 0;
  for (double v : y.data()) {
    if (v == 0.0) ++zeros;
  }
  double frac = zeros / 10000.0;
  CHECK(frac > 0.18);
  CHECK(frac < 0.22);

  // bit-identical given identical stream state
  RngStream r3(777, 5), r4(777, 5);
  auto m1 = ops::dropout(big, 0.3, Mode::train, r3);
  auto m2 = ops::dropout(big, 0.3, Mode::train, r4);
  for (std::size_t i = 0; i < m1.numel(); ++i) CHECK(m1.data()[i] == m2.data()[i]);
}

TEST_CASE("softmax rows sum to one") {
  RngStream rng(21);
  auto x = rand_tensor({4, 6}, rng, false, -3.0, 3.0);
  auto y = ops::softmax_rows(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += y.at(r, c);
    CHECK(std::abs(s - 1.0) <= 1e-9);
  }
}

TEST_CASE("multihead attention single-token key/value") {
  RngStream rng(31);
  const std::size_t d = 6, heads = 2, dh = 3;
  ops::AttentionParams<double> p;
  p.wq = rand_tensor({d, d}, rng);
  p.bq = rand_tensor({d}, rng);
  p.wk = rand_tensor({d, d}, rng);
  p.bk = rand_tensor({d}, rng);
  p.wv = rand_tensor({d, d}, rng);
  p.bv = rand_tensor({d}, rng);
  p.wo = rand_tensor({d, d}, rng);
  p.bo = rand_tensor({d}, rng);

  auto q = rand_tensor({3, d}, rng, false);
  auto kv = rand_tensor({1, d}, rng, false);
  auto out = ops::multihead_attention(q, kv, kv, p, heads, dh);
  // independent oracle: with one key the softmax weight is 1, so every row is
  // the value token pushed through the value and output projections
  auto expect = ops::linear(ops::linear(kv, p.wv, p.bv), p.wo, p.bo);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < d; ++c)
      CHECK(out.at(r, c) == doctest::Approx(expect.at(0, c)).epsilon(1e-12));

  // identical query rows give identical output rows
  Tensor<double> qsame({2, d}, {0.3, -0.2, 0.9, 0.1, -0.5, 0.7, 0.3, -0.2, 0.9, 0.1, -0.5, 0.7});
  auto kv4 = rand_tensor({4, d}, rng, false);
  auto out2 = ops::multihead_attention(qsame, kv4, kv4, p, heads, dh);
  for (std::size_t c = 0; c < d; ++c) CHECK(out2.at(0, c) == doctest::Approx(out2.at(1, c)));

  CHECK_THROWS_AS(ops::multihead_attention(q, kv, kv, p, 4, 2), biomass::ConfigError);
}

TEST_CASE("multihead attention rows sum to one and gradients check out") {
  RngStream rng(37);
  const std::size_t d = 4, heads = 2, dh = 2;
  ops::AttentionParams<double> p;
  p.wq = rand_tensor({d, d}, rng);
  p.bq = rand_tensor({d}, rng);
  p.wk = rand_tensor({d, d}, rng);
  p.bk = rand_tensor({d}, rng);
  p.wv = rand_tensor({d, d}, rng);
  p.bv = rand_tensor({d}, rng);
  p.wo = rand_tensor({d, d}, rng);
  p.bo = rand_tensor({d}, rng);
  auto q = rand_tensor({4, d}, rng);
  auto k = rand_tensor({4, d}, rng);
  auto v = rand_tensor({4, d}, rng);

  auto weights = ops::multihead_attention_weights(q, k, p, heads, dh);
  REQUIRE(weights.size() == heads);
  for (auto& w : weights) {
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += w.at(r, c);
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }

  auto probe = rand_tensor({4, d}, rng, false);
  auto f = [&] {
    return ops::sum(ops::mul(ops::multihead_attention(q, k, v, p, heads, dh), probe));
  };
  std::vector<Tensor<double>> params = {q, k, v};
  for (auto& t : p.parameters()) params.push_back(t);
  auto report = grad_check<double>(f, params, 1e-5, 1e-5);
  CHECK(report.passed);
}

TEST_CASE("mean pool fixtures and oracle") {
  auto one = Tensor<double>({1, 3}, {4, 5, 6});
  auto p1 = ops::mean_pool(one);
  CHECK(p1.data()[0] == doctest::Approx(4));
  CHECK(p1.data()[2] == doctest::Approx(6));

  auto two = Tensor<double>({2, 1}, {0, 2});
  CHECK(ops::mean_pool(two).data()[0] == doctest::Approx(1.0));

  RngStream rng(41);
  auto x = rand_tensor({8, 3}, rng, false);
  auto pooled = ops::mean_pool(x);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;  // independent summation oracle
    for (std::size_t t = 0; t < 8; ++t) s += x.at(t, c);
    CHECK(pooled.data()[c] == doctest::Approx(s / 8.0).epsilon(1e-12));
  }
}

TEST_CASE("grad_check harness on quadratic and negative control") {
  auto theta = Tensor<double>::scalar(3.0, true);
  auto f = [&] { return ops::mul(theta, theta); };
  auto report = grad_check<double>(f, {theta}, 1e-5, 1e-6);
  CHECK(report.passed);  // analytic 6 vs central-difference 6

  // deliberately corrupted backward (claims d(x^2)/dx = 4x) must fail
  auto bad = [&] {
    return ops::unary_custom<double>(
        theta, [](double v) { return v * v; }, [](double v) { return 4.0 * v; });
  };
  auto bad_report = grad_check<double>(bad, {theta}, 1e-5, 1e-6);
  CHECK_FALSE(bad_report.passed);

  CHECK_THROWS_AS(grad_check<double>(f, {theta}, 0.0, 1e-6), biomass::ConfigError);
}

TEST_CASE("selective scan matches explicit loop oracle") {
  // zeroed state path: A = B = 0 reduces to the skip connection
  const std::size_t L = 5, di = 2, ds = 3;
  RngStream rng(51);
  auto x = rand_tensor({L, di}, rng, false);
  auto a0 = Tensor<double>::zeros({di, ds});
  auto b0 = Tensor<double>::zeros({L, ds});
  auto c0 = rand_tensor({L, ds}, rng, false);
  auto dl = Tensor<double>::full({L, di}, 0.7);
  auto dv = rand_tensor({di}, rng, false);
  auto y0 = ops::selective_scan(x, a0, b0, c0, dl, dv, ops::ScanDirection::forward);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < di; ++c)
      CHECK(y0.at(t, c) == doctest::Approx(dv.data()[c] * x.at(t, c)));

  // geometric recurrence h_t = e^{-1} h_{t-1} + 1 with unit drive
  const std::size_t n = 6;
  auto x1 = Tensor<double>::full({n, 1}, 1.0);
  auto a1 = Tensor<double>::full({1, 1}, -1.0);
  auto b1 = Tensor<double>::full({n, 1}, 1.0);
  auto c1 = Tensor<double>::full({n, 1}, 1.0);
  auto d1 = Tensor<double>::full({n, 1}, 1.0);
  auto skip0 = Tensor<double>::zeros({1});
  auto y1 = ops::selective_scan(x1, a1, b1, c1, d1, skip0, ops::ScanDirection::forward);
  double h = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    h = std::exp(-1.0) * h + 1.0;  // explicit loop oracle
    CHECK(y1.at(t, 0) == doctest::Approx(h).epsilon(1e-12));
  }

  // direction symmetry: forward on reversed inputs, reversed, equals backward
  auto xr = rand_tensor({L, di}, rng, false);
  auto ar = rand_tensor({di, ds}, rng, false, -2.0, -0.1);
  auto br = rand_tensor({L, ds}, rng, false);
  auto cr = rand_tensor({L, ds}, rng, false);
  auto dr = rand_tensor({L, di}, rng, false, 0.05, 1.0);
  auto skip = rand_tensor({di}, rng, false);
  auto flip_rows = [](const Tensor<double>& t) {
    const std::size_t R = t.shape()[0], C = t.shape()[1];
    std::vector<double> v(R * C);
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) v[i * C + j] = t.at(R - 1 - i, j);
    return Tensor<double>(Shape{R, C}, std::move(v));
  };
  auto bwd = ops::selective_scan(xr, ar, br, cr, dr, skip, ops::ScanDirection::backward);
  auto fwd_on_rev = ops::selective_scan(flip_rows(xr), ar, flip_rows(br), flip_rows(cr),
                                        flip_rows(dr), skip, ops::ScanDirection::forward);
  auto expect = flip_rows(fwd_on_rev);
  for (std::size_t i = 0; i < bwd.numel(); ++i)
    CHECK(bwd.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));

  // non-positive delta is rejected
  auto dz = Tensor<double>::zeros({L, di});
  CHECK_THROWS_AS(ops::selective_scan(xr, ar, br, cr, dz, skip, ops::ScanDirection::forward),
                  biomass::NumericError);
}

TEST_CASE("selective scan gradient") {
  RngStream rng(61);
  const std::size_t L = 6, di = 3, ds = 2;
  auto x = rand_tensor({L, di}, rng);
  auto a = rand_tensor({di, ds}, rng, true, -2.0, -0.2);
  auto b = rand_tensor({L, ds}, rng);
  auto c = rand_tensor({L, ds}, rng);
  auto dl = rand_tensor({L, di}, rng, true, 0.1, 1.2);
  auto dv = rand_tensor({di}, rng);
  auto probe = rand_tensor({L, di}, rng, false);
  for (auto dir : {ops::ScanDirection::forward, ops::ScanDirection::backward}) {
    auto f = [&] {
      return ops::sum(ops::mul(ops::selective_scan(x, a, b, c, dl, dv, dir), probe));
    };
    auto report = grad_check<double>(f, {x, a, b, c, dl, dv}, 1e-6, 1e-4);
    CHECK(report.passed);
  }
}

TEST_CASE("huber loss fixtures") {
  auto z = Tensor<double>::zeros({3});
  CHECK(ops::huber_loss(z, z, 5.0).item() == doctest::Approx(0.0));
  auto p = Tensor<double>({1}, {5.0});
  auto t = Tensor<double>::zeros({1});
  CHECK(ops::huber_loss(p, t, 5.0).item() == doctest::Approx(12.5));
  auto p2 = Tensor<double>({1}, {10.0});
  CHECK(ops::huber_loss(p2, t, 5.0).item() == doctest::Approx(37.5));
  CHECK_THROWS_AS(ops::huber_loss(p, Tensor<double>::zeros({2}), 5.0), biomass::ShapeError);
}

TEST_CASE("every differentiable op passes grad_check on three random shapes") {
  RngStream seed_rng(1001);
  const std::vector<std::pair<std::size_t, std::size_t>> shapes = {{2, 3}, {4, 5}, {7, 2}};
  for (auto [r, c] : shapes) {
    RngStream rng = seed_rng.child(r * 100 + c);
    auto x = rand_tensor({r, c}, rng);
    auto y = rand_tensor({r, c}, rng);
    auto probe = rand_tensor({r, c}, rng, false);

    auto check = [&](auto f, std::vector<Tensor<double>> params, const char* what) {
      auto report = grad_check<double>(f, std::move(params), 1e-5, 1e-4);
      INFO(what, " shape ", r, "x", c, " rel err ", report.max_rel_err);
      CHECK(report.passed);
    };

    check([&] { return ops::sum(ops::mul(ops::add(x, y), probe)); }, {x, y}, "add");
    check([&] { return ops::sum(ops::mul(ops::sub(x, y), probe)); }, {x, y}, "sub");
    check([&] { return ops::sum(ops::mul(ops::mul(x, y), probe)); }, {x, y}, "mul");
    check([&] { return ops::sum(ops::mul(ops::neg(x), probe)); }, {x}, "neg");
    check([&] { return ops::sum(ops::mul(ops::scale(x, 1.7), probe)); }, {x}, "scale");
    check([&] { return ops::sum(ops::mul(ops::softmax_rows(x), probe)); }, {x}, "softmax");
    check([&] { return ops::mean(ops::mul(x, probe)); }, {x}, "mean");
    check([&] { return ops::sum(ops::mul(ops::exp(ops::scale(x, 0.5)), probe)); }, {x}, "exp");
    check([&] {
      return ops::sum(ops::mul(ops::log1p(ops::add_scalar(ops::mul(x, x), 0.5)), probe));
    },
          {x}, "log1p");
    check([&] { return ops::sum(ops::mul(ops::silu(x), probe)); }, {x}, "silu");
    check([&] { return ops::huber_loss(x, y, 0.5); }, {x, y}, "huber");

    auto w = rand_tensor({c, 3}, rng);
    check([&] { return ops::sum(ops::matmul(x, w)); }, {x, w}, "matmul");
    auto w2 = rand_tensor({4, c}, rng);
    check([&] { return ops::sum(ops::matmul_nt(x, w2)); }, {x, w2}, "matmul_nt");

    if (r >= 2) {
      check([&] { return ops::sum(ops::mul(ops::slice_rows(x, 1, r - 1),
                                           ops::slice_rows(probe, 1, r - 1))); },
            {x}, "slice_rows");
    }
    if (c >= 2) {
      check([&] { return ops::sum(ops::mul(ops::slice_cols(x, 1, c - 1),
                                           ops::slice_cols(probe, 1, c - 1))); },
            {x}, "slice_cols");
    }
    check([&] { return ops::sum(ops::mul(ops::concat_rows(x, y),
                                         ops::concat_rows(probe, probe))); },
          {x, y}, "concat_rows");
    check([&] { return ops::sum(ops::mul(ops::concat_cols(x, y),
                                         ops::concat_cols(probe, probe))); },
          {x, y}, "concat_cols");
    check([&] { return ops::sum(ops::mean_pool(x)); }, {x}, "mean_pool");
  }
}

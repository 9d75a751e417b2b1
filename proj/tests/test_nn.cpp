#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "lcae/nn.hpp"
#include "lcae/rng.hpp"
#include "oracles.hpp"

using namespace lcae;
using nn::FeatureMap;
using nn::GradStore;
using nn::ParamStore;
using nn::Tape;

namespace {

double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-10});
  return std::abs(a - b) / denom;
}

// Central finite differences on selected parameter entries against an
// analytic gradient already accumulated in `grads`.
void check_param_fd(ParamStore<double>& params, const GradStore<double>& grads, int handle,
                    const std::function<double()>& loss, Rng& rng, double tol,
                    int max_entries = 8, double h = 1e-6) {
  auto& p = params[handle];
  const int n = static_cast<int>(p.size());
  for (int s = 0; s < std::min(n, max_entries); ++s) {
    const int i = n <= max_entries ? s : rng.uniform_int(0, n - 1);
    const double saved = p.value[i];
    p.value[i] = saved + h;
    const double up = loss();
    p.value[i] = saved - h;
    const double down = loss();
    p.value[i] = saved;
    const double fd = (up - down) / (2.0 * h);
    INFO("param ", p.name, " entry ", i, " fd=", fd, " analytic=", grads.g[handle][i]);
    CHECK(rel_err(fd, grads.g[handle][i]) < tol);
  }
}

// Finite differences on an input tensor against tape-reported input grads.
void check_input_fd(FeatureMap<double>& x, const FeatureMap<double>& gin,
                    const std::function<double()>& loss, Rng& rng, double tol,
                    int max_entries = 10, double h = 1e-6) {
  const int n = static_cast<int>(x.size());
  for (int s = 0; s < std::min(n, max_entries); ++s) {
    const int i = n <= max_entries ? s : rng.uniform_int(0, n - 1);
    const double saved = x.data[i];
    x.data[i] = saved + h;
    const double up = loss();
    x.data[i] = saved - h;
    const double down = loss();
    x.data[i] = saved;
    const double fd = (up - down) / (2.0 * h);
    CHECK(rel_err(fd, gin.data[i]) < tol);
  }
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity weight passes the input through") {
  ParamStore<double> ps;
  const int w = ps.add("w", {1, 1, 1, 1});
  const int b = ps.add("b", {1});
  ps[w].value[0] = 1.0;
  Rng rng(1);
  auto x = oracles::random_feature_map<double>(rng, 1, 5, 7);
  GradStore<double> gs;
  gs.init(ps);
  Tape<double> t(ps, &gs, false);
  const auto y = t.value(t.conv2d(t.input(x), w, b, 1, 0));
  CHECK((y.data - x.data).abs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d: all-ones 3x3 on all-ones 3x3 input sums to 9") {
  ParamStore<double> ps;
  const int w = ps.add("w", {1, 1, 3, 3});
  ps[w].value.setConstant(1.0);
  FeatureMap<double> x(1, 3, 3);
  x.data.setConstant(1.0);
  GradStore<double> gs;
  gs.init(ps);
  Tape<double> t(ps, &gs, false);
  const auto y = t.value(t.conv2d(t.input(x), w, -1, 1, 0));
  CHECK(y.height == 1);
  CHECK(y.width == 1);
  CHECK(y.data[0] == 9.0);
}

TEST_CASE("conv2d matches the naive six-loop oracle") {
  Rng rng(2);
  for (auto [stride, pad] : std::vector<std::pair<int, int>>{{1, 0}, {1, 1}, {2, 1}}) {
    ParamStore<double> ps;
    const int cout = 3, cin = 2, k = 3;
    const int w = ps.add("w", {cout, cin, k, k});
    const int b = ps.add("b", {cout});
    for (Index i = 0; i < ps[w].size(); ++i) ps[w].value[i] = rng.normal();
    for (Index i = 0; i < ps[b].size(); ++i) ps[b].value[i] = rng.normal();
    auto x = oracles::random_feature_map<double>(rng, cin, 5, 5);
    GradStore<double> gs;
    gs.init(ps);
    Tape<double> t(ps, &gs, false);
    const auto got = t.value(t.conv2d(t.input(x), w, b, stride, pad));
    std::vector<double> wv(ps[w].value.data(), ps[w].value.data() + ps[w].size());
    std::vector<double> bv(ps[b].value.data(), ps[b].value.data() + ps[b].size());
    const auto want = oracles::conv2d_naive<double>(x, wv, bv, cout, k, stride, pad);
    REQUIRE(got.height == want.height);
    REQUIRE(got.width == want.width);
    CHECK((got.data - want.data).abs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("conv2d: output shape formula and error paths") {
  ParamStore<double> ps;
  const int w = ps.add("w", {1, 2, 3, 3});
  GradStore<double> gs;
  gs.init(ps);
  Tape<double> t(ps, &gs, false);
  Rng rng(3);
  auto x = oracles::random_feature_map<double>(rng, 2, 5, 6);
  const auto y = t.value(t.conv2d(t.input(x), w, -1, 2, 0));
  CHECK(y.height == 2);  // floor((5-3)/2)+1
  CHECK(y.width == 2);   // floor((6-3)/2)+1

  auto bad = oracles::random_feature_map<double>(rng, 3, 5, 5);
  Tape<double> t2(ps, &gs, false);
  CHECK_THROWS_AS(t2.conv2d(t2.input(bad), w, -1, 1, 0), DimensionError);
  Tape<double> t3(ps, &gs, false);
  CHECK_THROWS_AS(t3.conv2d(t3.input(x), w, -1, 0, 0), ConfigError);
}

TEST_CASE("depthwise: identity and zeroed kernels") {
  ParamStore<double> ps;
  const int w = ps.add("w", {2, 3, 3});
  ps[w].value.setZero();
  ps[w].value[1 * 9 + 4] = 1.0;  // channel 1 center tap
  Rng rng(4);
  auto x = oracles::random_feature_map<double>(rng, 2, 6, 6);
  GradStore<double> gs;
  gs.init(ps);
  Tape<double> t(ps, &gs, false);
  const auto y = t.value(t.depthwise(t.input(x), w, 1));
  for (int i = 0; i < 36; ++i) {
    CHECK(y.data[i] == 0.0);            // zeroed kernel -> zero channel
    CHECK(y.data[36 + i] == x.data[36 + i]);  // identity kernel
  }

  ParamStore<double> bad;
  const int w3 = bad.add("w", {3, 3, 3});
  GradStore<double> gs2;
  gs2.init(bad);
  Tape<double> t2(bad, &gs2, false);
  CHECK_THROWS_AS(t2.depthwise(t2.input(x), w3, 1), DimensionError);
}

TEST_CASE("depthwise matches a per-channel loop oracle") {
  Rng rng(5);
  ParamStore<double> ps;
  const int c = 3, k = 3;
  const int w = ps.add("w", {c, k, k});
  for (Index i = 0; i < ps[w].size(); ++i) ps[w].value[i] = rng.normal();
  auto x = oracles::random_feature_map<double>(rng, c, 7, 5);
  GradStore<double> gs;
  gs.init(ps);
  Tape<double> t(ps, &gs, false);
  const auto got = t.value(t.depthwise(t.input(x), w, 1));
  for (int ch = 0; ch < c; ++ch) {
    FeatureMap<double> one(1, 7, 5);
    for (Index i = 0; i < one.size(); ++i) one.data[i] = x(ch, static_cast<int>(i) / 5,
                                                           static_cast<int>(i) % 5);
    std::vector<double> wk(9);
    for (int i = 0; i < 9; ++i) wk[i] = ps[w].value[ch * 9 + i];
    const auto want = oracles::conv2d_naive<double>(one, wk, {}, 1, 3, 1, 1);
    for (Index i = 0; i < want.size(); ++i)
      CHECK(got(ch, static_cast<int>(i) / 5, static_cast<int>(i) % 5) ==
            doctest::Approx(want.data[i]).epsilon(1e-12));
  }
}

namespace {

struct BnFixture {
  ParamStore<double> ps;
  int gamma, beta, rmean, rvar;
  BnFixture(int c) {
    gamma = ps.add("gamma", {c});
    beta = ps.add("beta", {c});
    rmean = ps.add("rmean", {c}, false);
    rvar = ps.add("rvar", {c}, false);
    ps[gamma].value.setConstant(1.0);
    ps[rvar].value.setConstant(1.0);
  }
};

}  // namespace

TEST_CASE("batch_norm: eval with unit running stats is identity up to epsilon") {
  BnFixture f(2);
  Rng rng(6);
  auto x = oracles::random_feature_map<double>(rng, 2, 4, 4);
  GradStore<double> gs;
  gs.init(f.ps);
  Tape<double> t(f.ps, &gs, false);
  const auto y = t.value(t.batch_norm(t.input(x), f.gamma, f.beta, f.rmean, f.rvar));
  CHECK((y.data - x.data).abs().maxCoeff() < 1e-4);
}

TEST_CASE("batch_norm: constant channel normalizes to the shift in train mode") {
  BnFixture f(1);
  f.ps[f.beta].value[0] = 0.7;
  FeatureMap<double> x(1, 3, 3);
  x.data.setConstant(5.0);
  GradStore<double> gs;
  gs.init(f.ps);
  Tape<double> t(f.ps, &gs, true);
  const auto y = t.value(t.batch_norm(t.input(x), f.gamma, f.beta, f.rmean, f.rvar));
  CHECK((y.data - 0.7).abs().maxCoeff() == 0.0);
}

TEST_CASE("batch_norm: train output statistics match scale and shift") {
  BnFixture f(3);
  f.ps[f.gamma].value << 1.0, 2.0, 0.5;
  f.ps[f.beta].value << 0.0, -1.0, 3.0;
  Rng rng(7);
  auto x = oracles::random_feature_map<double>(rng, 3, 16, 16, 2.0);
  GradStore<double> gs;
  gs.init(f.ps);
  Tape<double> t(f.ps, &gs, true);
  const auto y = t.value(t.batch_norm(t.input(x), f.gamma, f.beta, f.rmean, f.rvar));
  const Index n = y.plane_size();
  for (int c = 0; c < 3; ++c) {
    auto yc = y.data.segment(c * n, n);
    const double mean = yc.mean();
    const double sd = std::sqrt((yc - mean).square().sum() / n);
    CHECK(std::abs(mean - f.ps[f.beta].value[c]) < 1e-6);
    CHECK(std::abs(sd - f.ps[f.gamma].value[c]) < 1e-5 * std::max(1.0, f.ps[f.gamma].value[c]));
  }
}

TEST_CASE("batch_norm: train mode needs more than one spatial element") {
  BnFixture f(1);
  FeatureMap<double> x(1, 1, 1);
  GradStore<double> gs;
  gs.init(f.ps);
  Tape<double> t(f.ps, &gs, true);
  CHECK_THROWS_AS(t.batch_norm(t.input(x), f.gamma, f.beta, f.rmean, f.rvar), DimensionError);
}

TEST_CASE("batch_norm records running-stat updates for deferred application") {
  BnFixture f(1);
  FeatureMap<double> x(1, 2, 2);
  x.data << 1.0, 2.0, 3.0, 4.0;
  GradStore<double> gs;
  gs.init(f.ps);
  Tape<double> t(f.ps, &gs, true);
  t.batch_norm(t.input(x), f.gamma, f.beta, f.rmean, f.rvar);
  REQUIRE(t.bn_updates().size() == 1);
  nn::apply_bn_updates(f.ps, t.bn_updates(), 0.1);
  CHECK(f.ps[f.rmean].value[0] == doctest::Approx(0.1 * 2.5));
  // unbiased variance of {1,2,3,4} is 5/3
  CHECK(f.ps[f.rvar].value[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
}

TEST_CASE("activations: pinned values") {
  ParamStore<double> ps;
  const int slope = ps.add("slope", {1});
  ps[slope].value[0] = 0.25;
  FeatureMap<double> x(1, 1, 3);
  x.data << -2.0, 0.0, 3.0;
  GradStore<double> gs;
  gs.init(ps);
  Tape<double> t(ps, &gs, false);
  const auto pre = t.value(t.prelu(t.input(x), slope));
  CHECK(pre.data[0] == -0.5);
  CHECK(pre.data[1] == 0.0);
  CHECK(pre.data[2] == 3.0);
  Tape<double> t2(ps, &gs, false);
  const auto sig = t2.value(t2.sigmoid(t2.input(x)));
  CHECK(sig.data[1] == 0.5);
  Tape<double> t3(ps, &gs, false);
  const auto rel = t3.value(t3.relu(t3.input(x)));
  CHECK(rel.data[0] == 0.0);
  CHECK(rel.data[2] == 3.0);
}

TEST_CASE("activation gradients match finite differences at random points") {
  Rng rng(8);
  ParamStore<double> ps;
  const int slope = ps.add("slope", {1});
  ps[slope].value[0] = 0.25;
  for (int trial = 0; trial < 10; ++trial) {
    auto x = oracles::random_feature_map<double>(rng, 1, 2, 5);
    for (int which = 0; which < 3; ++which) {
      auto loss = [&]() {
        Tape<double> t(ps, nullptr, false, false);
        const auto xn = t.input(x);
        nn::NodeId y = which == 0 ? t.prelu(xn, slope) : which == 1 ? t.sigmoid(xn) : t.relu(xn);
        return t.value(t.sum(y)).data[0];
      };
      GradStore<double> gs;
      gs.init(ps);
      Tape<double> t(ps, &gs, false);
      const auto xn = t.input(x, true);
      nn::NodeId y = which == 0 ? t.prelu(xn, slope) : which == 1 ? t.sigmoid(xn) : t.relu(xn);
      t.backward(t.sum(y));
      check_input_fd(x, t.grad(xn), loss, rng, 1e-6);
    }
  }
}

TEST_CASE("global_avg_pool: pinned values and oracle") {
  ParamStore<double> ps;
  GradStore<double> gs;
  gs.init(ps);
  FeatureMap<double> x(1, 2, 2);
  x.data << 0.0, 2.0, 4.0, 6.0;
  Tape<double> t(ps, &gs, false);
  CHECK(t.value(t.global_avg_pool(t.input(x))).data[0] == 3.0);

  Rng rng(9);
  auto r = oracles::random_feature_map<double>(rng, 4, 6, 6);
  Tape<double> t2(ps, &gs, false);
  const auto got = t2.value(t2.global_avg_pool(t2.input(r)));
  for (int c = 0; c < 4; ++c) {
    double s = 0.0;
    for (int y = 0; y < 6; ++y)
      for (int x2 = 0; x2 < 6; ++x2) s += r(c, y, x2);
    CHECK(std::abs(got.data[c] - s / 36.0) < 1e-12);
  }
}

TEST_CASE("conv1d_channels: identity, pinned case, oracle") {
  ParamStore<double> ps;
  const int k = ps.add("k", {3});
  GradStore<double> gs;
  gs.init(ps);

  ps[k].value << 0.0, 1.0, 0.0;
  FeatureMap<double> x(3, 1, 1);
  x.data << 1.0, 2.0, 3.0;
  Tape<double> t(ps, &gs, false);
  const auto ident = t.value(t.conv1d_channels(t.input(x), k));
  CHECK((ident.data - x.data).abs().maxCoeff() == 0.0);

  ps[k].value << 1.0, 1.0, 1.0;
  Tape<double> t2(ps, &gs, false);
  const auto y = t2.value(t2.conv1d_channels(t2.input(x), k));
  CHECK(y.data[0] == 3.0);
  CHECK(y.data[1] == 6.0);
  CHECK(y.data[2] == 5.0);

  Rng rng(10);
  ps[k].value << rng.normal(), rng.normal(), rng.normal();
  auto v = oracles::random_feature_map<double>(rng, 9, 1, 1);
  Tape<double> t3(ps, &gs, false);
  const auto got = t3.value(t3.conv1d_channels(t3.input(v), k));
  for (int c = 0; c < 9; ++c) {
    double want = ps[k].value[1] * v.data[c];
    if (c > 0) want += ps[k].value[0] * v.data[c - 1];
    if (c < 8) want += ps[k].value[2] * v.data[c + 1];
    CHECK(std::abs(got.data[c] - want) < 1e-12);
  }
}

TEST_CASE("upsample2x: pinned cases") {
  ParamStore<double> ps;
  GradStore<double> gs;
  gs.init(ps);

  FeatureMap<double> c(2, 3, 3);
  c.data.setConstant(1.25);
  Tape<double> t(ps, &gs, false);
  const auto yc = t.value(t.upsample2x(t.input(c)));
  CHECK(yc.height == 6);
  CHECK((yc.data - 1.25).abs().maxCoeff() == 0.0);

  FeatureMap<double> one(1, 1, 1);
  one.data[0] = 7.0;
  Tape<double> t2(ps, &gs, false);
  const auto y1 = t2.value(t2.upsample2x(t2.input(one)));
  CHECK(y1.height == 2);
  CHECK((y1.data - 7.0).abs().maxCoeff() == 0.0);

  FeatureMap<double> row(1, 1, 2);
  row.data << 0.0, 1.0;
  Tape<double> t3(ps, &gs, false);
  const auto yr = t3.value(t3.upsample2x(t3.input(row)));
  CHECK(yr.data[0] == doctest::Approx(0.0));
  CHECK(yr.data[1] == doctest::Approx(0.25));
  CHECK(yr.data[2] == doctest::Approx(0.75));
  CHECK(yr.data[3] == doctest::Approx(1.0));
}

TEST_CASE("upsample2x preserves the global mean") {
  Rng rng(11);
  ParamStore<double> ps;
  GradStore<double> gs;
  gs.init(ps);
  auto x = oracles::random_feature_map<double>(rng, 2, 8, 8);
  Tape<double> t(ps, &gs, false);
  const auto y = t.value(t.upsample2x(t.input(x)));
  CHECK(std::abs(y.data.mean() - x.data.mean()) < 1e-6);
}

TEST_CASE("backward: sum over identity chain yields all-ones input gradient") {
  ParamStore<double> ps;
  GradStore<double> gs;
  gs.init(ps);
  Rng rng(12);
  auto x = oracles::random_feature_map<double>(rng, 2, 3, 3);
  Tape<double> t(ps, &gs, false);
  const auto xn = t.input(x, true);
  t.backward(t.sum(xn));
  CHECK((t.grad(xn).data - 1.0).abs().maxCoeff() == 0.0);
}

TEST_CASE("backward: conv2d kernel gradient equals correlation with ones") {
  ParamStore<double> ps;
  const int w = ps.add("w", {1, 1, 3, 3});
  Rng rng(13);
  for (Index i = 0; i < 9; ++i) ps[w].value[i] = rng.normal();
  auto x = oracles::random_feature_map<double>(rng, 1, 5, 5);
  GradStore<double> gs;
  gs.init(ps);
  Tape<double> t(ps, &gs, false);
  t.backward(t.sum(t.conv2d(t.input(x), w, -1, 1, 0)));
  for (int ky = 0; ky < 3; ++ky) {
    for (int kx = 0; kx < 3; ++kx) {
      double want = 0.0;
      for (int oy = 0; oy < 3; ++oy)
        for (int ox = 0; ox < 3; ++ox) want += x(0, oy + ky, ox + kx);
      CHECK(gs.g[w][ky * 3 + kx] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("finite differences validate every op's parameter and input grads") {
  Rng rng(14);
  ParamStore<double> ps;
  const int w = ps.add("w", {3, 2, 3, 3});
  const int b = ps.add("b", {3});
  const int dw = ps.add("dw", {2, 3, 3});
  const int gamma = ps.add("gamma", {2});
  const int beta = ps.add("beta", {2});
  const int rmean = ps.add("rmean", {2}, false);
  const int rvar = ps.add("rvar", {2}, false);
  const int slope = ps.add("slope", {1});
  const int k1d = ps.add("k1d", {3});
  for (int h : {w, b, dw, k1d})
    for (Index i = 0; i < ps[h].size(); ++i) ps[h].value[i] = rng.normal() * 0.5;
  ps[gamma].value.setConstant(1.2);
  ps[beta].value << 0.1, -0.2;
  ps[rmean].value << 0.3, -0.1;
  ps[rvar].value << 1.5, 0.8;
  ps[slope].value[0] = 0.25;

  auto x = oracles::random_feature_map<double>(rng, 2, 6, 6);
  Mask target = oracles::random_mask(rng, 12, 12, 0.2);

  // Composite network touching every op once; loss is soft-iou over a sigmoid
  // map plus a reduced scalar from the strided conv branch.
  const int head = ps.add("head", {1, 2, 1, 1});
  ps[head].value << 0.7, -0.4;

  auto forward = [&](Tape<double>& t, nn::NodeId xn) {
    auto c = t.conv2d(xn, w, b, 2, 1);                    // stride path
    auto d = t.depthwise(xn, dw, 1);
    auto bn = t.batch_norm(d, gamma, beta, rmean, rvar);
    auto p = t.prelu(bn, slope);
    auto gapped = t.global_avg_pool(p);
    auto gate = t.sigmoid(t.conv1d_channels(gapped, k1d));
    auto scaled = t.scale_channels(p, gate);
    auto up = t.upsample2x(scaled);                       // 2×12×12
    auto prob = t.sigmoid(t.conv2d(up, head, -1, 1, 0));  // 1×12×12
    auto l1 = t.soft_iou(prob, target, 1e-6);
    // pooled reduction keeps this branch's scale O(1); a bare
    // sigmoid(sum(...)) saturates and its ~1e-8 gradients drown in
    // finite-difference cancellation noise
    auto l2 = t.sum(t.sigmoid(t.conv1d_channels(t.global_avg_pool(t.relu(c)), k1d)));
    return t.add(l1, l2);
  };

  for (bool train : {false, true}) {
    auto loss = [&]() {
      Tape<double> t(ps, nullptr, train, false);
      return t.value(forward(t, t.input(x))).data[0];
    };
    GradStore<double> gs;
    gs.init(ps);
    Tape<double> t(ps, &gs, train);
    const auto xn = t.input(x, true);
    t.backward(forward(t, xn));
    Rng pick(15);
    for (int h : {w, b, dw, gamma, beta, slope, k1d, head})
      check_param_fd(ps, gs, h, loss, pick, 1e-4);
    check_input_fd(x, t.grad(xn), loss, pick, 1e-4);
  }
}

TEST_CASE("soft_iou gradient matches finite differences tightly") {
  Rng rng(16);
  ParamStore<double> ps;
  GradStore<double> gs;
  gs.init(ps);
  FeatureMap<double> p(1, 6, 6);
  for (Index i = 0; i < p.size(); ++i) p.data[i] = rng.uniform(0.01, 0.99);
  const Mask target = oracles::random_mask(rng, 6, 6, 0.3);
  auto loss = [&]() {
    Tape<double> t(ps, nullptr, false, false);
    return t.value(t.soft_iou(t.input(p), target, 1e-6)).data[0];
  };
  Tape<double> t(ps, &gs, false);
  const auto pn = t.input(p, true);
  t.backward(t.soft_iou(pn, target, 1e-6));
  check_input_fd(p, t.grad(pn), loss, rng, 1e-5, 20);
}

TEST_CASE("forward is bit-deterministic") {
  Rng rng(17);
  ParamStore<double> ps;
  const int w = ps.add("w", {4, 3, 3, 3});
  for (Index i = 0; i < ps[w].size(); ++i) ps[w].value[i] = rng.normal();
  auto x = oracles::random_feature_map<double>(rng, 3, 9, 9);
  GradStore<double> gs;
  gs.init(ps);
  auto run = [&]() {
    Tape<double> t(ps, &gs, false);
    return t.value(t.conv2d(t.input(x), w, -1, 1, 1)).data;
  };
  const auto a = run();
  const auto b = run();
  CHECK((a == b).all());
}

TEST_CASE("replaying a consumed tape is a state error") {
  ParamStore<double> ps;
  GradStore<double> gs;
  gs.init(ps);
  FeatureMap<double> x(1, 2, 2);
  x.data.setConstant(1.0);
  Tape<double> t(ps, &gs, false);
  const auto xn = t.input(x, true);
  const auto s = t.sum(xn);
  t.backward(s);
  CHECK_THROWS_AS(t.backward(s), StateError);
  CHECK_THROWS_AS(t.sum(xn), StateError);
}

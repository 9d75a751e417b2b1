#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "lcae/core.hpp"

namespace lcae::nn {

/// C×H×W activation volume. Flat storage is channel-major:
/// index = (c*H + y)*W + x, so a channel is a contiguous H×W row-major plane
/// and the whole tensor maps onto an (H*W)×C column-major matrix for GEMM.
template <class Scalar>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w) {
    data.setZero(static_cast<Index>(c) * h * w);
  }

  static FeatureMap zeros(int c, int h, int w) { return FeatureMap(c, h, w); }

  static FeatureMap from_plane(const Plane<Scalar>& p) {
    FeatureMap f(1, static_cast<int>(p.rows()), static_cast<int>(p.cols()));
    for (Index y = 0; y < p.rows(); ++y)
      for (Index x = 0; x < p.cols(); ++x) f.data[y * p.cols() + x] = p(y, x);
    return f;
  }

  Index size() const { return data.size(); }
  Index plane_size() const { return static_cast<Index>(height) * width; }

  Scalar& operator()(int c, int y, int x) {
    return data[(static_cast<Index>(c) * height + y) * width + x];
  }
  Scalar operator()(int c, int y, int x) const {
    return data[(static_cast<Index>(c) * height + y) * width + x];
  }

  bool same_shape(const FeatureMap& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  Plane<Scalar> plane(int c) const {
    Plane<Scalar> p(height, width);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) p(y, x) = (*this)(c, y, x);
    return p;
  }

  using PixMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;  // col-major

  /// (H*W)×C view of the flat storage.
  Eigen::Map<PixMat> as_pixmat() { return {data.data(), plane_size(), channels}; }
  Eigen::Map<const PixMat> as_pixmat() const { return {data.data(), plane_size(), channels}; }
};

/// One named learnable array (or non-learnable buffer, e.g. running stats).
template <class Scalar>
struct Param {
  std::string name;
  std::vector<int> shape;
  bool learnable = true;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> value;

  Index size() const { return value.size(); }
};

template <class Scalar>
class ParamStore {
 public:
  int add(std::string name, std::vector<int> shape, bool learnable = true) {
    Index n = 1;
    for (int d : shape) n *= d;
    Param<Scalar> p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.learnable = learnable;
    p.value.setZero(n);
    items_.push_back(std::move(p));
    return static_cast<int>(items_.size()) - 1;
  }

  Param<Scalar>& operator[](int h) { return items_[h]; }
  const Param<Scalar>& operator[](int h) const { return items_[h]; }
  int count() const { return static_cast<int>(items_.size()); }

  std::int64_t learnable_scalars() const {
    std::int64_t n = 0;
    for (const auto& p : items_)
      if (p.learnable) n += p.size();
    return n;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<Param<Scalar>> items_;
};

/// Per-parameter gradient buffers, index-aligned with a ParamStore.
/// Each forward/backward owns one; accumulation across samples happens in a
/// caller-fixed order so results do not depend on thread scheduling.
template <class Scalar>
struct GradStore {
  std::vector<Eigen::Array<Scalar, Eigen::Dynamic, 1>> g;

  void init(const ParamStore<Scalar>& params) {
    g.assign(params.count(), {});
    for (int i = 0; i < params.count(); ++i)
      if (params[i].learnable) g[i].setZero(params[i].size());
  }

  void reset() {
    for (auto& a : g)
      if (a.size() > 0) a.setZero();
  }

  void add(const GradStore& other) {
    for (size_t i = 0; i < g.size(); ++i)
      if (g[i].size() > 0) g[i] += other.g[i];
  }
};

/// Pending running-statistics update recorded by a train-mode batch norm.
/// Updates are applied explicitly (and in a deterministic order) rather than
/// mutating shared state inside the forward pass.
template <class Scalar>
struct BnUpdate {
  int running_mean = -1;
  int running_var = -1;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> var;  // unbiased
};

template <class Scalar>
void apply_bn_updates(ParamStore<Scalar>& params, const std::vector<BnUpdate<Scalar>>& updates,
                      Scalar momentum) {
  for (const auto& u : updates) {
    params[u.running_mean].value = (Scalar(1) - momentum) * params[u.running_mean].value +
                                   momentum * u.mean;
    params[u.running_var].value = (Scalar(1) - momentum) * params[u.running_var].value +
                                  momentum * u.var;
  }
}

using NodeId = int;

/// Records a forward pass as a sequence of operations; replaying it backward
/// yields reverse-mode gradients for every learnable parameter the ops
/// touched and for any input created with requires_grad.
///
/// A tape is single-use: after backward() it is consumed and further ops or
/// replays raise StateError. Construct with recording=false for plain
/// inference; that skips saving adjoint state.
template <class Scalar>
class Tape {
 public:
  static constexpr Scalar kBnEpsilon = Scalar(1e-5);

  Tape(const ParamStore<Scalar>& params, GradStore<Scalar>* grads, bool train,
       bool recording = true)
      : params_(params), grads_(grads), train_(train), recording_(recording) {
    if (recording_ && grads_ == nullptr)
      throw ConfigError("tape: recording requires a gradient store");
  }

  bool train_mode() const { return train_; }
  bool recording() const { return recording_; }

  const FeatureMap<Scalar>& value(NodeId id) const { return nodes_[id].value; }
  const FeatureMap<Scalar>& grad(NodeId id) const { return nodes_[id].grad; }
  std::vector<BnUpdate<Scalar>>& bn_updates() { return bn_updates_; }

  NodeId input(FeatureMap<Scalar> x, bool requires_grad = false) {
    ensure_active();
    return push(std::move(x), requires_grad, nullptr);
  }

  /// Cross-correlation with kernel param {cout,cin,k,k}, optional bias {cout}.
  NodeId conv2d(NodeId x, int kernel, int bias, int stride, int padding) {
    ensure_active();
    const auto& in = nodes_[x].value;
    const auto& wshape = params_[kernel].shape;
    if (wshape.size() != 4) throw ConfigError("conv2d: kernel must be rank 4");
    const int cout = wshape[0], cin = wshape[1], k = wshape[2];
    if (wshape[3] != k) throw ConfigError("conv2d: kernel must be square");
    if (cin != in.channels)
      throw DimensionError("conv2d: kernel expects " + std::to_string(cin) + " channels, input has " +
                           std::to_string(in.channels));
    if (stride <= 0) throw ConfigError("conv2d: stride must be positive");
    const int ho = (in.height + 2 * padding - k) / stride + 1;
    const int wo = (in.width + 2 * padding - k) / stride + 1;
    if (ho <= 0 || wo <= 0 || in.height + 2 * padding < k || in.width + 2 * padding < k)
      throw DimensionError("conv2d: kernel does not fit padded input");

    using Mat = typename FeatureMap<Scalar>::PixMat;
    using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> wmat(params_[kernel].value.data(), cout,
                                  static_cast<Index>(cin) * k * k);

    FeatureMap<Scalar> out(cout, ho, wo);
    auto out_mat = out.as_pixmat();
    const bool pointwise = (k == 1 && stride == 1 && padding == 0);

    if (pointwise) {
      out_mat.noalias() = in.as_pixmat() * wmat.transpose();
    } else {
      const Mat cols = im2col(in, k, stride, padding, ho, wo);
      out_mat.noalias() = cols.transpose() * wmat.transpose();
    }
    if (bias >= 0)
      for (int c = 0; c < cout; ++c) out_mat.col(c).array() += params_[bias].value[c];

    NodeId id = push(std::move(out), nodes_[x].requires_grad || has_learnable(kernel, bias),
                     nullptr);
    if (recording_) {
      // The patch matrix is rebuilt from the saved input during replay
      // instead of being stored per node.
      nodes_[id].back = [x, kernel, bias, stride, padding, k, cin, cout, pointwise](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        auto gmat = g.as_pixmat();
        Eigen::Map<const RowMat> w(t.params_[kernel].value.data(), cout,
                                   static_cast<Index>(cin) * k * k);
        if (bias >= 0 && t.param_learnable(bias))
          for (int c = 0; c < cout; ++c) t.grads_->g[bias][c] += gmat.col(c).sum();
        if (pointwise) {
          if (t.param_learnable(kernel)) {
            Eigen::Map<RowMat> gw(t.grads_->g[kernel].data(), cout,
                                  static_cast<Index>(cin) * k * k);
            gw.noalias() += gmat.transpose() * t.nodes_[x].value.as_pixmat();
          }
          if (t.nodes_[x].requires_grad)
            t.ensure_grad(x).as_pixmat().noalias() += gmat * w;
          return;
        }
        const Mat cols =
            t.im2col(t.nodes_[x].value, k, stride, padding, g.height, g.width);
        if (t.param_learnable(kernel)) {
          Eigen::Map<RowMat> gw(t.grads_->g[kernel].data(), cout, static_cast<Index>(cin) * k * k);
          gw.noalias() += gmat.transpose() * cols.transpose();
        }
        if (t.nodes_[x].requires_grad) {
          auto& gin = t.ensure_grad(x);
          Mat dcols(cols.rows(), cols.cols());
          dcols.noalias() = w.transpose() * gmat.transpose();
          col2im(dcols, gin, k, stride, padding, g.height, g.width);
        }
      };
    }
    return id;
  }

  /// Per-channel K×K cross-correlation, kernel param {c,k,k}, stride 1.
  NodeId depthwise(NodeId x, int kernel, int padding) {
    ensure_active();
    const auto& in = nodes_[x].value;
    const auto& wshape = params_[kernel].shape;
    if (wshape.size() != 3 || wshape[1] != wshape[2])
      throw ConfigError("depthwise: kernel must be rank 3 and square");
    const int c = wshape[0], k = wshape[1];
    if (c != in.channels)
      throw DimensionError("depthwise: kernel count " + std::to_string(c) +
                           " != channel count " + std::to_string(in.channels));
    const int ho = in.height + 2 * padding - k + 1;
    const int wo = in.width + 2 * padding - k + 1;
    if (ho <= 0 || wo <= 0) throw DimensionError("depthwise: kernel does not fit padded input");

    FeatureMap<Scalar> out(c, ho, wo);
    const Scalar* w = params_[kernel].value.data();
    for (int ch = 0; ch < c; ++ch) {
      const Scalar* wk = w + static_cast<Index>(ch) * k * k;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          Scalar acc = 0;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy - padding + ky;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox - padding + kx;
              if (ix < 0 || ix >= in.width) continue;
              acc += wk[ky * k + kx] * in(ch, iy, ix);
            }
          }
          out(ch, oy, ox) = acc;
        }
      }
    }

    NodeId id = push(std::move(out), nodes_[x].requires_grad || param_learnable(kernel), nullptr);
    if (recording_) {
      nodes_[id].back = [x, kernel, padding, c, k](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        const auto& in_val = t.nodes_[x].value;
        const bool want_w = t.param_learnable(kernel);
        const bool want_x = t.nodes_[x].requires_grad;
        FeatureMap<Scalar>* gin = want_x ? &t.ensure_grad(x) : nullptr;
        for (int ch = 0; ch < c; ++ch) {
          const Scalar* wk = t.params_[kernel].value.data() + static_cast<Index>(ch) * k * k;
          Scalar* gw = want_w ? t.grads_->g[kernel].data() + static_cast<Index>(ch) * k * k
                              : nullptr;
          for (int oy = 0; oy < g.height; ++oy) {
            for (int ox = 0; ox < g.width; ++ox) {
              const Scalar gv = g(ch, oy, ox);
              if (gv == Scalar(0)) continue;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy - padding + ky;
                if (iy < 0 || iy >= in_val.height) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox - padding + kx;
                  if (ix < 0 || ix >= in_val.width) continue;
                  if (gw) gw[ky * k + kx] += gv * in_val(ch, iy, ix);
                  if (gin) (*gin)(ch, iy, ix) += gv * wk[ky * k + kx];
                }
              }
            }
          }
        }
      };
    }
    return id;
  }

  /// Per-channel normalization. Train mode normalizes by this tensor's own
  /// spatial statistics and records a pending running-stat update; eval mode
  /// uses the stored running statistics.
  NodeId batch_norm(NodeId x, int gamma, int beta, int running_mean, int running_var) {
    ensure_active();
    const auto& in = nodes_[x].value;
    const int c = in.channels;
    const Index n = in.plane_size();
    if (params_[gamma].size() != c || params_[beta].size() != c)
      throw DimensionError("batch_norm: affine parameter size mismatch");
    if (train_ && n < 2)
      throw DimensionError("batch_norm: train mode needs more than one spatial element");

    FeatureMap<Scalar> out(c, in.height, in.width);
    Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std(c);
    Eigen::Array<Scalar, Eigen::Dynamic, 1> means(c);

    if (train_) {
      BnUpdate<Scalar> up;
      up.running_mean = running_mean;
      up.running_var = running_var;
      up.mean.resize(c);
      up.var.resize(c);
      for (int ch = 0; ch < c; ++ch) {
        auto xc = in.data.segment(static_cast<Index>(ch) * n, n);
        const Scalar mu = xc.mean();
        const Scalar var = (xc - mu).square().sum() / Scalar(n);
        means[ch] = mu;
        inv_std[ch] = Scalar(1) / std::sqrt(var + kBnEpsilon);
        out.data.segment(static_cast<Index>(ch) * n, n) =
            (xc - mu) * inv_std[ch] * params_[gamma].value[ch] + params_[beta].value[ch];
        up.mean[ch] = mu;
        up.var[ch] = var * Scalar(n) / Scalar(n - 1);  // unbiased running estimate
      }
      bn_updates_.push_back(std::move(up));
    } else {
      for (int ch = 0; ch < c; ++ch) {
        means[ch] = params_[running_mean].value[ch];
        inv_std[ch] = Scalar(1) / std::sqrt(params_[running_var].value[ch] + kBnEpsilon);
        auto xc = in.data.segment(static_cast<Index>(ch) * n, n);
        out.data.segment(static_cast<Index>(ch) * n, n) =
            (xc - means[ch]) * inv_std[ch] * params_[gamma].value[ch] + params_[beta].value[ch];
      }
    }

    NodeId id = push(std::move(out), nodes_[x].requires_grad || has_learnable(gamma, beta),
                     nullptr);
    if (recording_) {
      const bool train = train_;
      // xhat is recomputed from the saved input; only the per-channel
      // statistics are kept.
      nodes_[id].back = [x, gamma, beta, means, inv_std, train, n](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        const auto& in_val = t.nodes_[x].value;
        const int c = g.channels;
        Eigen::Array<Scalar, Eigen::Dynamic, 1> xh(n);
        for (int ch = 0; ch < c; ++ch) {
          auto gc = g.data.segment(static_cast<Index>(ch) * n, n);
          xh = (in_val.data.segment(static_cast<Index>(ch) * n, n) - means[ch]) * inv_std[ch];
          if (t.param_learnable(gamma)) t.grads_->g[gamma][ch] += (gc * xh).sum();
          if (t.param_learnable(beta)) t.grads_->g[beta][ch] += gc.sum();
          if (t.nodes_[x].requires_grad) {
            auto gi = t.ensure_grad(x).data.segment(static_cast<Index>(ch) * n, n);
            const Scalar gam = t.params_[gamma].value[ch];
            if (train) {
              const Scalar sum_g = gc.sum();
              const Scalar sum_gx = (gc * xh).sum();
              gi += gam * inv_std[ch] * (gc - (sum_g + xh * sum_gx) / Scalar(n));
            } else {
              gi += gam * inv_std[ch] * gc;
            }
          }
        }
      };
    }
    return id;
  }

  /// max(0,x) + slope*min(0,x) with one learnable slope per layer.
  NodeId prelu(NodeId x, int slope) {
    ensure_active();
    const Scalar a = params_[slope].value[0];
    const auto& in = nodes_[x].value;
    FeatureMap<Scalar> out(in.channels, in.height, in.width);
    out.data = in.data.max(Scalar(0)) + a * in.data.min(Scalar(0));
    NodeId id = push(std::move(out), nodes_[x].requires_grad || param_learnable(slope), nullptr);
    if (recording_) {
      nodes_[id].back = [x, slope, a](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        const auto& in_val = t.nodes_[x].value;
        if (t.param_learnable(slope))
          t.grads_->g[slope][0] += (g.data * in_val.data.min(Scalar(0))).sum();
        if (t.nodes_[x].requires_grad)
          t.ensure_grad(x).data +=
              g.data * (in_val.data > Scalar(0)).template cast<Scalar>() +
              a * g.data * (in_val.data <= Scalar(0)).template cast<Scalar>();
      };
    }
    return id;
  }

  NodeId relu(NodeId x) {
    ensure_active();
    const auto& in = nodes_[x].value;
    FeatureMap<Scalar> out(in.channels, in.height, in.width);
    out.data = in.data.max(Scalar(0));
    NodeId id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    if (recording_ && nodes_[x].requires_grad) {
      nodes_[id].back = [x](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        t.ensure_grad(x).data +=
            g.data * (t.nodes_[x].value.data > Scalar(0)).template cast<Scalar>();
      };
    }
    return id;
  }

  NodeId sigmoid(NodeId x) {
    ensure_active();
    const auto& in = nodes_[x].value;
    FeatureMap<Scalar> out(in.channels, in.height, in.width);
    out.data = Scalar(1) / (Scalar(1) + (-in.data).exp());
    NodeId id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    if (recording_ && nodes_[x].requires_grad) {
      nodes_[id].back = [x](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        const auto& y = t.nodes_[t.current_].value;
        t.ensure_grad(x).data += g.data * y.data * (Scalar(1) - y.data);
      };
    }
    return id;
  }

  /// C×H×W -> C×1×1 spatial mean per channel.
  NodeId global_avg_pool(NodeId x) {
    ensure_active();
    const auto& in = nodes_[x].value;
    const Index n = in.plane_size();
    FeatureMap<Scalar> out(in.channels, 1, 1);
    for (int c = 0; c < in.channels; ++c)
      out.data[c] = in.data.segment(static_cast<Index>(c) * n, n).mean();
    NodeId id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    if (recording_ && nodes_[x].requires_grad) {
      nodes_[id].back = [x, n](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        auto& gin = t.ensure_grad(x);
        for (int c = 0; c < gin.channels; ++c)
          gin.data.segment(static_cast<Index>(c) * n, n) += g.data[c] / Scalar(n);
      };
    }
    return id;
  }

  /// 1-D cross-correlation along the channel axis of a C×1×1 vector with a
  /// 3-tap kernel, zero padded at both ends.
  NodeId conv1d_channels(NodeId x, int kernel) {
    ensure_active();
    const auto& in = nodes_[x].value;
    if (in.height != 1 || in.width != 1)
      throw DimensionError("conv1d_channels: expects a C×1×1 vector");
    if (params_[kernel].size() != 3) throw ConfigError("conv1d_channels: kernel must have 3 taps");
    const int c = in.channels;
    const Scalar* k = params_[kernel].value.data();
    FeatureMap<Scalar> out(c, 1, 1);
    for (int i = 0; i < c; ++i) {
      Scalar acc = k[1] * in.data[i];
      if (i - 1 >= 0) acc += k[0] * in.data[i - 1];
      if (i + 1 < c) acc += k[2] * in.data[i + 1];
      out.data[i] = acc;
    }
    NodeId id = push(std::move(out), nodes_[x].requires_grad || param_learnable(kernel), nullptr);
    if (recording_) {
      nodes_[id].back = [x, kernel, c](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        const auto& in_val = t.nodes_[x].value;
        const Scalar* k = t.params_[kernel].value.data();
        if (t.param_learnable(kernel)) {
          auto& gk = t.grads_->g[kernel];
          for (int i = 0; i < c; ++i) {
            if (i - 1 >= 0) gk[0] += g.data[i] * in_val.data[i - 1];
            gk[1] += g.data[i] * in_val.data[i];
            if (i + 1 < c) gk[2] += g.data[i] * in_val.data[i + 1];
          }
        }
        if (t.nodes_[x].requires_grad) {
          auto& gin = t.ensure_grad(x);
          for (int i = 0; i < c; ++i) {
            gin.data[i] += k[1] * g.data[i];
            if (i + 1 < c) gin.data[i] += k[0] * g.data[i + 1];
            if (i - 1 >= 0) gin.data[i] += k[2] * g.data[i - 1];
          }
        }
      };
    }
    return id;
  }

  /// Doubles both spatial dimensions with half-pixel-aligned bilinear
  /// interpolation (edge clamped).
  NodeId upsample2x(NodeId x) {
    ensure_active();
    const auto& in = nodes_[x].value;
    const int ho = in.height * 2, wo = in.width * 2;
    auto make_table = [](int n_out, int n_in) {
      std::vector<std::tuple<int, int, Scalar>> t(n_out);  // (i0, i1, weight of i1)
      for (int o = 0; o < n_out; ++o) {
        const double src = 0.5 * (o + 0.5) - 0.5;
        const int i0f = static_cast<int>(std::floor(src));
        const Scalar w1 = static_cast<Scalar>(src - i0f);
        const int i0 = std::clamp(i0f, 0, n_in - 1);
        const int i1 = std::clamp(i0f + 1, 0, n_in - 1);
        t[o] = {i0, i1, w1};
      }
      return t;
    };
    const auto ty = make_table(ho, in.height);
    const auto tx = make_table(wo, in.width);

    FeatureMap<Scalar> out(in.channels, ho, wo);
    for (int c = 0; c < in.channels; ++c) {
      for (int y = 0; y < ho; ++y) {
        const auto [y0, y1, wy] = ty[y];
        for (int x2 = 0; x2 < wo; ++x2) {
          const auto [x0, x1, wx] = tx[x2];
          out(c, y, x2) = (Scalar(1) - wy) * ((Scalar(1) - wx) * in(c, y0, x0) + wx * in(c, y0, x1)) +
                          wy * ((Scalar(1) - wx) * in(c, y1, x0) + wx * in(c, y1, x1));
        }
      }
    }
    NodeId id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    if (recording_ && nodes_[x].requires_grad) {
      nodes_[id].back = [x, ty, tx, ho, wo](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        auto& gin = t.ensure_grad(x);
        for (int c = 0; c < gin.channels; ++c) {
          for (int y = 0; y < ho; ++y) {
            const auto [y0, y1, wy] = ty[y];
            for (int x2 = 0; x2 < wo; ++x2) {
              const auto [x0, x1, wx] = tx[x2];
              const Scalar gv = g(c, y, x2);
              gin(c, y0, x0) += (Scalar(1) - wy) * (Scalar(1) - wx) * gv;
              gin(c, y0, x1) += (Scalar(1) - wy) * wx * gv;
              gin(c, y1, x0) += wy * (Scalar(1) - wx) * gv;
              gin(c, y1, x1) += wy * wx * gv;
            }
          }
        }
      };
    }
    return id;
  }

  NodeId add(NodeId a, NodeId b) {
    ensure_active();
    const auto& va = nodes_[a].value;
    const auto& vb = nodes_[b].value;
    if (!va.same_shape(vb)) throw DimensionError("add: shape mismatch");
    FeatureMap<Scalar> out(va.channels, va.height, va.width);
    out.data = va.data + vb.data;
    NodeId id = push(std::move(out), nodes_[a].requires_grad || nodes_[b].requires_grad, nullptr);
    if (recording_ && nodes_[id].requires_grad) {
      nodes_[id].back = [a, b](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        if (t.nodes_[a].requires_grad) t.ensure_grad(a).data += g.data;
        if (t.nodes_[b].requires_grad) t.ensure_grad(b).data += g.data;
      };
    }
    return id;
  }

  NodeId sub(NodeId a, NodeId b) {
    ensure_active();
    const auto& va = nodes_[a].value;
    const auto& vb = nodes_[b].value;
    if (!va.same_shape(vb)) throw DimensionError("sub: shape mismatch");
    FeatureMap<Scalar> out(va.channels, va.height, va.width);
    out.data = va.data - vb.data;
    NodeId id = push(std::move(out), nodes_[a].requires_grad || nodes_[b].requires_grad, nullptr);
    if (recording_ && nodes_[id].requires_grad) {
      nodes_[id].back = [a, b](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        if (t.nodes_[a].requires_grad) t.ensure_grad(a).data += g.data;
        if (t.nodes_[b].requires_grad) t.ensure_grad(b).data -= g.data;
      };
    }
    return id;
  }

  /// Multiplies every channel elementwise by a fixed H×W plane (an attention
  /// map treated as a constant, not a differentiated input).
  NodeId mul_plane(NodeId x, const Plane<Scalar>& plane) {
    ensure_active();
    const auto& in = nodes_[x].value;
    if (plane.rows() != in.height || plane.cols() != in.width)
      throw DimensionError("mul_plane: plane shape mismatch");
    auto flat = std::make_shared<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(in.plane_size());
    for (int y = 0; y < in.height; ++y)
      for (int x2 = 0; x2 < in.width; ++x2) (*flat)[y * in.width + x2] = plane(y, x2);
    FeatureMap<Scalar> out(in.channels, in.height, in.width);
    const Index n = in.plane_size();
    for (int c = 0; c < in.channels; ++c)
      out.data.segment(static_cast<Index>(c) * n, n) =
          in.data.segment(static_cast<Index>(c) * n, n) * (*flat);
    NodeId id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    if (recording_ && nodes_[x].requires_grad) {
      nodes_[id].back = [x, flat, n](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        auto& gin = t.ensure_grad(x);
        for (int c = 0; c < gin.channels; ++c)
          gin.data.segment(static_cast<Index>(c) * n, n) +=
              g.data.segment(static_cast<Index>(c) * n, n) * (*flat);
      };
    }
    return id;
  }

  /// out_c = x_c * w_c with w a C×1×1 node (per-channel gate).
  NodeId scale_channels(NodeId x, NodeId w) {
    ensure_active();
    const auto& in = nodes_[x].value;
    const auto& wv = nodes_[w].value;
    if (wv.channels != in.channels || wv.height != 1 || wv.width != 1)
      throw DimensionError("scale_channels: gate must be C×1×1");
    FeatureMap<Scalar> out(in.channels, in.height, in.width);
    const Index n = in.plane_size();
    for (int c = 0; c < in.channels; ++c)
      out.data.segment(static_cast<Index>(c) * n, n) =
          in.data.segment(static_cast<Index>(c) * n, n) * wv.data[c];
    NodeId id = push(std::move(out), nodes_[x].requires_grad || nodes_[w].requires_grad, nullptr);
    if (recording_ && nodes_[id].requires_grad) {
      nodes_[id].back = [x, w, n](Tape& t) {
        const auto& g = t.nodes_[t.current_].grad;
        const auto& in_val = t.nodes_[x].value;
        const auto& wv = t.nodes_[w].value;
        if (t.nodes_[x].requires_grad) {
          auto& gin = t.ensure_grad(x);
          for (int c = 0; c < gin.channels; ++c)
            gin.data.segment(static_cast<Index>(c) * n, n) +=
                g.data.segment(static_cast<Index>(c) * n, n) * wv.data[c];
        }
        if (t.nodes_[w].requires_grad) {
          auto& gw = t.ensure_grad(w);
          for (int c = 0; c < in_val.channels; ++c)
            gw.data[c] += (g.data.segment(static_cast<Index>(c) * n, n) *
                           in_val.data.segment(static_cast<Index>(c) * n, n))
                              .sum();
        }
      };
    }
    return id;
  }

  /// Reduces to a 1×1×1 scalar node.
  NodeId sum(NodeId x) {
    ensure_active();
    FeatureMap<Scalar> out(1, 1, 1);
    out.data[0] = nodes_[x].value.data.sum();
    NodeId id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    if (recording_ && nodes_[x].requires_grad) {
      nodes_[id].back = [x](Tape& t) {
        t.ensure_grad(x).data += t.nodes_[t.current_].grad.data[0];
      };
    }
    return id;
  }

  /// Soft-IoU loss of a probability map against a binary target:
  /// 1 - (sum(p*t)+eps) / (sum(p)+sum(t)-sum(p*t)+eps). Scalar node.
  NodeId soft_iou(NodeId x, const Mask& target, Scalar eps) {
    ensure_active();
    const auto& p = nodes_[x].value;
    if (p.channels != 1 || p.height != target.rows() || p.width != target.cols())
      throw DimensionError("soft_iou: probability/target shape mismatch");
    auto t = std::make_shared<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(p.size());
    for (int y = 0; y < p.height; ++y)
      for (int x2 = 0; x2 < p.width; ++x2)
        (*t)[y * p.width + x2] = target(y, x2) ? Scalar(1) : Scalar(0);
    const Scalar inter = (p.data * (*t)).sum() + eps;
    const Scalar uni = p.data.sum() + t->sum() - (p.data * (*t)).sum() + eps;
    FeatureMap<Scalar> out(1, 1, 1);
    out.data[0] = Scalar(1) - inter / uni;
    NodeId id = push(std::move(out), nodes_[x].requires_grad, nullptr);
    if (recording_ && nodes_[x].requires_grad) {
      nodes_[id].back = [x, t, inter, uni](Tape& tp) {
        const Scalar g = tp.nodes_[tp.current_].grad.data[0];
        // d/dp [1 - I/U] with dI/dp = t, dU/dp = 1 - t.
        tp.ensure_grad(x).data +=
            g * (-(*t) * uni + inter * (Scalar(1) - (*t))) / (uni * uni);
      };
    }
    return id;
  }

  /// Reverse replay from a scalar loss node, seeding d(loss)/d(loss) = 1.
  void backward(NodeId root) {
    if (!recording_) throw StateError("backward: tape was not recording");
    if (consumed_) throw StateError("backward: tape already replayed");
    if (nodes_[root].value.size() != 1)
      throw DimensionError("backward: root node is not a scalar");
    FeatureMap<Scalar> seed(1, 1, 1);
    seed.data[0] = Scalar(1);
    backward(root, seed);
  }

  /// Reverse replay seeding an explicit cotangent on any node.
  void backward(NodeId root, const FeatureMap<Scalar>& seed) {
    if (!recording_) throw StateError("backward: tape was not recording");
    if (consumed_) throw StateError("backward: tape already replayed");
    if (!seed.same_shape(nodes_[root].value))
      throw DimensionError("backward: seed shape mismatch");
    consumed_ = true;
    ensure_grad(root).data += seed.data;
    for (int i = root; i >= 0; --i) {
      if (nodes_[i].grad.size() == 0 || !nodes_[i].back) continue;
      current_ = i;
      nodes_[i].back(*this);
      // Nothing before node i can reference its storage anymore; release it
      // so the replay's peak memory stays near one layer's working set.
      nodes_[i].value = {};
      nodes_[i].grad = {};
      nodes_[i].back = nullptr;
    }
  }

 private:
  struct Node {
    FeatureMap<Scalar> value;
    FeatureMap<Scalar> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
  };

  void ensure_active() const {
    if (consumed_) throw StateError("tape: already replayed, record a fresh forward pass");
  }

  bool param_learnable(int h) const { return h >= 0 && params_[h].learnable; }
  bool has_learnable(int a, int b) const { return param_learnable(a) || param_learnable(b); }

  FeatureMap<Scalar>& ensure_grad(NodeId id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0)
      n.grad = FeatureMap<Scalar>::zeros(n.value.channels, n.value.height, n.value.width);
    return n.grad;
  }

  NodeId push(FeatureMap<Scalar> value, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  typename FeatureMap<Scalar>::PixMat im2col(const FeatureMap<Scalar>& in, int k, int stride,
                                             int padding, int ho, int wo) const {
    using Mat = typename FeatureMap<Scalar>::PixMat;
    Mat cols = Mat::Zero(static_cast<Index>(in.channels) * k * k,
                         static_cast<Index>(ho) * wo);
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Index col = static_cast<Index>(oy) * wo + ox;
        Scalar* dst = cols.data() + col * cols.rows();
        for (int c = 0; c < in.channels; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - padding + ky;
            const Index base = (static_cast<Index>(c) * k + ky) * k;
            if (iy < 0 || iy >= in.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= in.width) continue;
              dst[base + kx] = in(c, iy, ix);
            }
          }
        }
      }
    }
    return cols;
  }

  static void col2im(const typename FeatureMap<Scalar>::PixMat& dcols, FeatureMap<Scalar>& gin,
                     int k, int stride, int padding, int ho, int wo) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Index col = static_cast<Index>(oy) * wo + ox;
        const Scalar* src = dcols.data() + col * dcols.rows();
        for (int c = 0; c < gin.channels; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= gin.height) continue;
            const Index base = (static_cast<Index>(c) * k + ky) * k;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= gin.width) continue;
              gin(c, iy, ix) += src[base + kx];
            }
          }
        }
      }
    }
  }

  const ParamStore<Scalar>& params_;
  GradStore<Scalar>* grads_ = nullptr;
  bool train_ = false;
  bool recording_ = true;
  bool consumed_ = false;
  NodeId current_ = -1;
  std::vector<Node> nodes_;
  std::vector<BnUpdate<Scalar>> bn_updates_;
};

}  // namespace lcae::nn

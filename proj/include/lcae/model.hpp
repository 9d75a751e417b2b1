#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lcae/core.hpp"
#include "lcae/lca.hpp"
#include "lcae/nn.hpp"
#include "lcae/rng.hpp"

namespace lcae::model {

struct ModelConfig {
  int base_channels = 16;
  std::array<int, 4> blocks{1, 2, 4, 8};
  lca::LcaParams lca_params{};
  int input_height = 256;
  int input_width = 256;
  bool lce_enabled = true;   // false replaces the attention map by identity (ablation)
  bool lca_on_raw = false;   // compute attention from raw intensities instead of standardized

  void validate() const {
    if (base_channels < 1) throw ConfigError("model: base_channels must be >= 1");
    for (int n : blocks)
      if (n < 1) throw ConfigError("model: blocks per layer must be >= 1");
    if (input_height < 16 || input_width < 16 || input_height % 8 || input_width % 8)
      throw ConfigError("model: input size must be >= 16 and divisible by 8");
    lca_params.validate();
  }
};

inline std::int64_t conv2d_params(int cin, int cout, int k, bool bias) {
  return static_cast<std::int64_t>(cout) * cin * k * k + (bias ? cout : 0);
}

/// FLOPs for one cross-correlation, counted as 2 per multiply-accumulate
/// plus one add per output element when a bias is present.
inline std::int64_t conv2d_flops(int cin, int cout, int k, int ho, int wo, bool bias) {
  const std::int64_t px = static_cast<std::int64_t>(ho) * wo;
  return 2 * static_cast<std::int64_t>(k) * k * cin * cout * px + (bias ? cout * px : 0);
}

/// The full detector: contrast-enhanced stem, four residual stages with
/// split-attention blocks, per-stage channel-attention enhancers, three
/// up-fusion layers and a pixel prediction head.
template <class Scalar>
class LcaeNet {
 public:
  static constexpr Scalar kBnMomentum = Scalar(0.1);

  LcaeNet(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng(seed).stream(0x6c636165u);  // init stream
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore<Scalar>& params() { return params_; }
  const nn::ParamStore<Scalar>& params() const { return params_; }

  /// Contrast-enhanced stem on the network input. `raw` is consulted only
  /// when the config asks for raw-intensity attention.
  nn::NodeId ce_forward(nn::Tape<Scalar>& tape, const Image<Scalar>& image,
                        const Image<Scalar>* raw = nullptr) const {
    if (image.rows() != cfg_.input_height || image.cols() != cfg_.input_width)
      throw DimensionError("model: input is " + std::to_string(image.rows()) + "x" +
                           std::to_string(image.cols()) + ", configured for " +
                           std::to_string(cfg_.input_height) + "x" +
                           std::to_string(cfg_.input_width));
    nn::NodeId x = tape.input(nn::FeatureMap<Scalar>::from_plane(image));
    nn::NodeId f0 = tape.conv2d(x, ce_expand_.w, ce_expand_.b, 1, 0);
    nn::NodeId branch = f0;
    if (cfg_.lce_enabled) {
      const Image<Scalar>& src = (cfg_.lca_on_raw && raw != nullptr) ? *raw : image;
      branch = tape.mul_plane(f0, lca::lca_map(src, cfg_.lca_params));
    }
    nn::NodeId f0e2 = tape.batch_norm(tape.depthwise(branch, ce_dw_, 1), ce_bn_.gamma,
                                      ce_bn_.beta, ce_bn_.rmean, ce_bn_.rvar);
    return tape.prelu(tape.add(f0, f0e2), ce_slope_);
  }

  /// Runs the four residual stages; returns the channel-attention-enhanced
  /// output of each stage (the tensors the decoder consumes).
  std::array<nn::NodeId, 4> encoder_forward(nn::Tape<Scalar>& tape, nn::NodeId f0e) const {
    std::array<nn::NodeId, 4> enhanced{};
    nn::NodeId f = f0e;
    for (int s = 0; s < 4; ++s) {
      for (const Block& b : stages_[s].blocks) f = block_forward(tape, f, b);
      enhanced[s] = cae_forward(tape, f, s);
    }
    return enhanced;
  }

  /// Channel attention enhancement: pooled descriptor -> 3-tap channel
  /// interaction -> sigmoid gate, applied multiplicatively with a residual add.
  nn::NodeId cae_forward(nn::Tape<Scalar>& tape, nn::NodeId x, int stage) const {
    nn::NodeId w = tape.sigmoid(tape.conv1d_channels(tape.global_avg_pool(x),
                                                     stages_[stage].cae_kernel));
    return tape.add(tape.scale_channels(x, w), x);
  }

  /// Three up-fusion layers (reduce -> norm -> relu -> 2x upsample -> add skip)
  /// followed by the prediction head; output is a 1×H×W probability map node.
  nn::NodeId decoder_forward(nn::Tape<Scalar>& tape,
                             const std::array<nn::NodeId, 4>& enhanced) const {
    nn::NodeId g = enhanced[3];
    for (int i = 0; i < 3; ++i) {
      g = tape.conv2d(g, ups_[i].reduce.w, -1, 1, 0);
      g = tape.batch_norm(g, ups_[i].bn.gamma, ups_[i].bn.beta, ups_[i].bn.rmean, ups_[i].bn.rvar);
      g = tape.relu(g);
      g = tape.upsample2x(g);
      g = tape.add(g, enhanced[2 - i]);
    }
    g = tape.conv2d(g, head_conv3_.w, -1, 1, 1);
    g = tape.batch_norm(g, head_bn_.gamma, head_bn_.beta, head_bn_.rmean, head_bn_.rvar);
    g = tape.relu(g);
    return tape.sigmoid(tape.conv2d(g, head_conv1_.w, head_conv1_.b, 1, 0));
  }

  nn::NodeId forward(nn::Tape<Scalar>& tape, const Image<Scalar>& image,
                     const Image<Scalar>* raw = nullptr) const {
    return decoder_forward(tape, encoder_forward(tape, ce_forward(tape, image, raw)));
  }

  /// Eval-mode forward without gradient recording.
  Plane<Scalar> infer(const Image<Scalar>& image, const Image<Scalar>* raw = nullptr) const {
    nn::Tape<Scalar> tape(params_, nullptr, /*train=*/false, /*recording=*/false);
    const nn::NodeId p = forward(tape, image, raw);
    const auto& v = tape.value(p);
    return v.plane(0);
  }

  std::int64_t count_params() const { return params_.learnable_scalars(); }

  /// Inference FLOPs for one forward pass at the given resolution; see the
  /// README for the per-op accounting convention.
  std::int64_t count_flops(int h, int w) const {
    const std::int64_t px = static_cast<std::int64_t>(h) * w;
    const int c0 = cfg_.base_channels;
    std::int64_t f = 0;
    // stem
    f += conv2d_flops(1, c0, 1, h, w, true);
    if (cfg_.lce_enabled) {
      const int l = 2 * cfg_.lca_params.dilation + 1;
      f += px * (4 * 2 * l * l + 3 + 4);  // four dense stencils, pairing, sigmoid
      f += px * c0;                        // attention multiply
    }
    f += 2 * 9 * c0 * px;        // depthwise 3x3
    f += 2 * c0 * px;            // batch norm
    f += c0 * px;                // residual add
    f += 2 * c0 * px;            // prelu
    // stages
    int ch = c0, hh = h, ww = w;
    for (int s = 0; s < 4; ++s) {
      const int cout = c0 << s;
      const int stride = s == 0 ? 1 : 2;
      int cin = ch;
      for (size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        const int st = b == 0 ? stride : 1;
        const int ho = hh / st, wo = ww / st;
        const std::int64_t opx = static_cast<std::int64_t>(ho) * wo;
        f += conv2d_flops(cin, cout, 3, ho, wo, false) + 2 * cout * opx + cout * opx;  // conv1+bn+relu
        f += 2 * (conv2d_flops(cout, cout, 3, ho, wo, false) + 2 * cout * opx);        // branches+bn
        f += cout * opx;  // branch sum
        f += cout * (opx + 1);  // pooled descriptor
        const int mid = sa_mid(cout);
        f += conv2d_flops(cout, mid, 1, 1, 1, true) + mid;           // fc1 + relu
        f += 2 * conv2d_flops(mid, cout, 1, 1, 1, true) + 2 * cout;  // logits
        f += 2 * 4 * cout;      // two sigmoid gates
        f += 3 * cout * opx;    // two channel scalings + fusion add
        if (st != 1 || cin != cout)
          f += conv2d_flops(cin, cout, 1, ho, wo, false) + 2 * cout * opx;  // projection + bn
        f += 2 * cout * opx;    // residual add + relu
        cin = cout;
        hh = ho;
        ww = wo;
      }
      ch = cout;
      // channel attention enhancer
      const std::int64_t opx = static_cast<std::int64_t>(hh) * ww;
      f += ch * (opx + 1) + 2 * 3 * ch + 4 * ch + ch * opx + ch * opx;
    }
    // decoder
    for (int i = 0; i < 3; ++i) {
      const int cin = c0 << (3 - i);
      const int cout = cin / 2;
      std::int64_t opx = static_cast<std::int64_t>(hh) * ww;
      f += conv2d_flops(cin, cout, 1, hh, ww, false) + 2 * cout * opx + cout * opx;
      hh *= 2;
      ww *= 2;
      opx = static_cast<std::int64_t>(hh) * ww;
      f += 8 * cout * opx;  // bilinear upsample
      f += cout * opx;      // skip add
    }
    f += conv2d_flops(c0, c0, 3, h, w, false) + 2 * c0 * px + c0 * px;
    f += conv2d_flops(c0, 1, 1, h, w, true) + 4 * px;  // final conv + sigmoid
    return f;
  }

 private:
  struct Conv {
    int w = -1, b = -1;
    int cin = 0, cout = 0, k = 0;
  };
  struct Bn {
    int gamma = -1, beta = -1, rmean = -1, rvar = -1;
  };
  struct Block {
    Conv conv1;
    Bn bn1;
    Conv br1, br2;
    Bn bnb1, bnb2;
    Conv fc1, fc2a, fc2b;
    bool proj = false;
    Conv sc;
    Bn bnsc;
    int stride = 1;
  };
  struct Stage {
    std::vector<Block> blocks;
    int cae_kernel = -1;
  };

  static int sa_mid(int cout) { return std::max(cout / 4, 4); }

  Conv add_conv(Rng& rng, const std::string& name, int cin, int cout, int k, bool bias) {
    Conv c;
    c.cin = cin;
    c.cout = cout;
    c.k = k;
    c.w = params_.add(name + ".w", {cout, cin, k, k});
    kaiming_init(rng, params_[c.w].value, cin * k * k);
    if (bias) c.b = params_.add(name + ".b", {cout});
    return c;
  }

  Bn add_bn(const std::string& name, int c) {
    Bn b;
    b.gamma = params_.add(name + ".gamma", {c});
    b.beta = params_.add(name + ".beta", {c});
    b.rmean = params_.add(name + ".running_mean", {c}, /*learnable=*/false);
    b.rvar = params_.add(name + ".running_var", {c}, /*learnable=*/false);
    params_[b.gamma].value.setConstant(Scalar(1));
    params_[b.rvar].value.setConstant(Scalar(1));
    return b;
  }

  void kaiming_init(Rng& rng, Eigen::Array<Scalar, Eigen::Dynamic, 1>& v, int fan_in) {
    const double std = std::sqrt(2.0 / fan_in);
    for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(rng.normal() * std);
  }

  void build(Rng& rng) {
    const int c0 = cfg_.base_channels;
    ce_expand_ = add_conv(rng, "ce.expand", 1, c0, 1, true);
    ce_dw_ = params_.add("ce.dw.w", {c0, 3, 3});
    kaiming_init(rng, params_[ce_dw_].value, 9);
    ce_bn_ = add_bn("ce.bn", c0);
    ce_slope_ = params_.add("ce.prelu", {1});
    params_[ce_slope_].value.setConstant(Scalar(0.25));

    int cin = c0;
    for (int s = 0; s < 4; ++s) {
      const int cout = c0 << s;
      const int stride = s == 0 ? 1 : 2;
      Stage stage;
      for (int b = 0; b < cfg_.blocks[s]; ++b) {
        const std::string base = "enc" + std::to_string(s + 1) + ".block" + std::to_string(b);
        Block blk;
        blk.stride = b == 0 ? stride : 1;
        blk.conv1 = add_conv(rng, base + ".conv1", cin, cout, 3, false);
        blk.bn1 = add_bn(base + ".bn1", cout);
        blk.br1 = add_conv(rng, base + ".br1", cout, cout, 3, false);
        blk.bnb1 = add_bn(base + ".bnb1", cout);
        blk.br2 = add_conv(rng, base + ".br2", cout, cout, 3, false);
        blk.bnb2 = add_bn(base + ".bnb2", cout);
        const int mid = sa_mid(cout);
        blk.fc1 = add_conv(rng, base + ".fc1", cout, mid, 1, true);
        blk.fc2a = add_conv(rng, base + ".fc2a", mid, cout, 1, true);
        blk.fc2b = add_conv(rng, base + ".fc2b", mid, cout, 1, true);
        if (blk.stride != 1 || cin != cout) {
          blk.proj = true;
          blk.sc = add_conv(rng, base + ".shortcut", cin, cout, 1, false);
          blk.bnsc = add_bn(base + ".bnsc", cout);
        }
        stage.blocks.push_back(blk);
        cin = cout;
      }
      stage.cae_kernel = params_.add("cae" + std::to_string(s + 1) + ".w", {3});
      kaiming_init(rng, params_[stage.cae_kernel].value, 3);
      stages_[s] = std::move(stage);
    }

    for (int i = 0; i < 3; ++i) {
      const int cu = c0 << (3 - i);
      ups_[i].reduce = add_conv(rng, "up" + std::to_string(i + 1) + ".reduce", cu, cu / 2, 1, false);
      ups_[i].bn = add_bn("up" + std::to_string(i + 1) + ".bn", cu / 2);
    }
    head_conv3_ = add_conv(rng, "head.conv3", c0, c0, 3, false);
    head_bn_ = add_bn("head.bn", c0);
    head_conv1_ = add_conv(rng, "head.conv1", c0, 1, 1, true);
  }

  nn::NodeId block_forward(nn::Tape<Scalar>& t, nn::NodeId x, const Block& b) const {
    nn::NodeId y = t.conv2d(x, b.conv1.w, -1, b.stride, 1);
    y = t.batch_norm(y, b.bn1.gamma, b.bn1.beta, b.bn1.rmean, b.bn1.rvar);
    y = t.relu(y);
    nn::NodeId u1 = t.batch_norm(t.conv2d(y, b.br1.w, -1, 1, 1), b.bnb1.gamma, b.bnb1.beta,
                                 b.bnb1.rmean, b.bnb1.rvar);
    nn::NodeId u2 = t.batch_norm(t.conv2d(y, b.br2.w, -1, 1, 1), b.bnb2.gamma, b.bnb2.beta,
                                 b.bnb2.rmean, b.bnb2.rvar);
    nn::NodeId desc = t.global_avg_pool(t.add(u1, u2));
    nn::NodeId z = t.relu(t.conv2d(desc, b.fc1.w, b.fc1.b, 1, 0));
    nn::NodeId a1 = t.conv2d(z, b.fc2a.w, b.fc2a.b, 1, 0);
    nn::NodeId a2 = t.conv2d(z, b.fc2b.w, b.fc2b.b, 1, 0);
    // radix-2 softmax over the two branches, per channel
    nn::NodeId g1 = t.sigmoid(t.sub(a1, a2));
    nn::NodeId g2 = t.sigmoid(t.sub(a2, a1));
    nn::NodeId fused = t.add(t.scale_channels(u1, g1), t.scale_channels(u2, g2));
    nn::NodeId shortcut = x;
    if (b.proj) {
      shortcut = t.conv2d(x, b.sc.w, -1, b.stride, 0);
      shortcut = t.batch_norm(shortcut, b.bnsc.gamma, b.bnsc.beta, b.bnsc.rmean, b.bnsc.rvar);
    }
    return t.relu(t.add(fused, shortcut));
  }

  ModelConfig cfg_;
  nn::ParamStore<Scalar> params_;
  Conv ce_expand_;
  int ce_dw_ = -1;
  Bn ce_bn_;
  int ce_slope_ = -1;
  std::array<Stage, 4> stages_;
  struct UpFusion {
    Conv reduce;
    Bn bn;
  };
  std::array<UpFusion, 3> ups_;
  Conv head_conv3_;
  Bn head_bn_;
  Conv head_conv1_;
};

/// Strictly-greater thresholding of a probability map.
template <class Scalar>
Mask predict(const Plane<Scalar>& prob, double threshold = 0.5) {
  if (threshold < 0.0 || threshold > 1.0)
    throw ConfigError("predict: threshold must lie in [0,1]");
  Mask m(prob.rows(), prob.cols());
  for (Index y = 0; y < prob.rows(); ++y)
    for (Index x = 0; x < prob.cols(); ++x)
      m(y, x) = static_cast<double>(prob(y, x)) > threshold ? 1 : 0;
  return m;
}

// -- checkpoint format --------------------------------------------------------
//
//   line 1:  LCAE-CKPT 1
//   lines:   key value   (model config)
//   line:    params <count>
//   lines:   <name> <rank> <dim...>
//   line:    DATA
//   payload: raw little-endian float64 values, parameters in header order
//
// Values are stored as doubles regardless of the in-memory scalar type.

template <class Scalar>
void save_checkpoint(const LcaeNet<Scalar>& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  const ModelConfig& c = net.config();
  out << "LCAE-CKPT 1\n";
  out << "base_channels " << c.base_channels << "\n";
  out << "blocks " << c.blocks[0] << " " << c.blocks[1] << " " << c.blocks[2] << " "
      << c.blocks[3] << "\n";
  out << "alpha " << c.lca_params.alpha << "\n";
  out << "beta " << c.lca_params.beta << "\n";
  out << "dilation " << c.lca_params.dilation << "\n";
  out << "lce_enabled " << (c.lce_enabled ? 1 : 0) << "\n";
  out << "lca_on_raw " << (c.lca_on_raw ? 1 : 0) << "\n";
  out << "input " << c.input_height << " " << c.input_width << "\n";
  out << "params " << net.params().count() << "\n";
  for (const auto& p : net.params()) {
    out << p.name << " " << p.shape.size();
    for (int d : p.shape) out << " " << d;
    out << "\n";
  }
  out << "DATA\n";
  for (const auto& p : net.params()) {
    for (Index i = 0; i < p.size(); ++i) {
      const double v = static_cast<double>(p.value[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
  }
  if (!out) throw IoError("checkpoint: write failure on " + path);
}

template <class Scalar>
LcaeNet<Scalar> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "LCAE-CKPT" || version != 1)
    throw InputError("checkpoint: unrecognized format in " + path);

  ModelConfig cfg;
  std::string key;
  int param_count = -1;
  while (in >> key) {
    if (key == "base_channels") in >> cfg.base_channels;
    else if (key == "blocks") in >> cfg.blocks[0] >> cfg.blocks[1] >> cfg.blocks[2] >> cfg.blocks[3];
    else if (key == "alpha") in >> cfg.lca_params.alpha;
    else if (key == "beta") in >> cfg.lca_params.beta;
    else if (key == "dilation") in >> cfg.lca_params.dilation;
    else if (key == "lce_enabled") { int v; in >> v; cfg.lce_enabled = v != 0; }
    else if (key == "lca_on_raw") { int v; in >> v; cfg.lca_on_raw = v != 0; }
    else if (key == "input") in >> cfg.input_height >> cfg.input_width;
    else if (key == "params") { in >> param_count; break; }
    else throw InputError("checkpoint: unexpected key '" + key + "' in " + path);
  }
  if (param_count < 0) throw InputError("checkpoint: missing parameter table in " + path);

  LcaeNet<Scalar> net(cfg, /*seed=*/0);
  if (net.params().count() != param_count)
    throw InputError("checkpoint: parameter count mismatch (file " + std::to_string(param_count) +
                     ", model " + std::to_string(net.params().count()) + ")");
  for (int i = 0; i < param_count; ++i) {
    std::string name;
    int rank = 0;
    in >> name >> rank;
    std::vector<int> dims(rank);
    for (int& d : dims) in >> d;
    const auto& p = net.params()[i];
    if (name != p.name || dims != p.shape)
      throw InputError("checkpoint: parameter '" + name + "' does not match model layout");
  }
  std::string data_tag;
  in >> data_tag;
  if (data_tag != "DATA") throw InputError("checkpoint: missing DATA section in " + path);
  in.get();  // newline before payload
  for (int i = 0; i < param_count; ++i) {
    auto& p = net.params()[i];
    for (Index j = 0; j < p.size(); ++j) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof(double));
      if (!in) throw InputError("checkpoint: truncated payload in " + path);
      p.value[j] = static_cast<Scalar>(v);
    }
  }
  return net;
}

}  // namespace lcae::model

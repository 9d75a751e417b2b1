#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "lcae/core.hpp"
#include "lcae/data.hpp"
#include "lcae/metrics.hpp"
#include "lcae/model.hpp"
#include "lcae/nn.hpp"
#include "lcae/rng.hpp"

namespace lcae::train {

struct TrainConfig {
  int epochs = 400;
  int batch_size = 16;
  double lr0 = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double decay_factor = 0.1;
  std::vector<int> milestones{200, 300};
  std::uint64_t seed = 0;
  double loss_eps = 1e-6;
  double adam_eps = 1e-8;
  enum class LrMode { step, poly };
  LrMode lr_mode = LrMode::step;   // poly available behind a flag
  double poly_power = 0.9;
  int crop = 256;                  // training crop size (matches model input)
  bool augment = true;             // random crop + flips; eval always center-crops
  int threads = 0;                 // 0 -> hardware concurrency

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch size must be >= 1");
    // lr0 == 0 is allowed: a zero-rate run must leave parameters untouched
    if (lr0 < 0.0) throw ConfigError("train: lr0 must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("train: beta1/beta2 must lie in [0,1)");
    for (size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] >= epochs) throw ConfigError("train: milestones must be < epochs");
      if (i > 0 && milestones[i] <= milestones[i - 1])
        throw ConfigError("train: milestones must be ascending");
    }
  }
};

/// Step decay: lr0 scaled by decay_factor once per milestone reached.
/// Poly mode: lr0 * (1 - epoch/epochs)^power.
inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (cfg.lr_mode == TrainConfig::LrMode::poly)
    return cfg.lr0 * std::pow(1.0 - static_cast<double>(epoch) / cfg.epochs, cfg.poly_power);
  int hits = 0;
  for (int m : cfg.milestones)
    if (m <= epoch) ++hits;
  return cfg.lr0 * std::pow(cfg.decay_factor, hits);
}

/// Soft-IoU loss over one probability map (or any co-shaped pair):
/// 1 - (sum(p*t)+eps)/(sum(p)+sum(t)-sum(p*t)+eps).
template <class Scalar>
double soft_iou_loss(const Plane<Scalar>& prob, const Mask& target, double eps) {
  if (prob.rows() != target.rows() || prob.cols() != target.cols())
    throw DimensionError("soft_iou_loss: shape mismatch");
  double pt = 0.0, p = 0.0, t = 0.0;
  for (Index y = 0; y < prob.rows(); ++y) {
    for (Index x = 0; x < prob.cols(); ++x) {
      const double pv = prob(y, x);
      const double tv = target(y, x) ? 1.0 : 0.0;
      pt += pv * tv;
      p += pv;
      t += tv;
    }
  }
  return 1.0 - (pt + eps) / (p + t - pt + eps);
}

/// Adam first/second moment estimates, index-aligned with the parameter store.
template <class Scalar>
struct AdamState {
  std::vector<Eigen::Array<Scalar, Eigen::Dynamic, 1>> m, v;
  std::int64_t step = 0;

  void init(const nn::ParamStore<Scalar>& params) {
    m.assign(params.count(), {});
    v.assign(params.count(), {});
    for (int i = 0; i < params.count(); ++i) {
      if (!params[i].learnable) continue;
      m[i].setZero(params[i].size());
      v[i].setZero(params[i].size());
    }
    step = 0;
  }
};

/// One bias-corrected Adam update over every learnable parameter.
template <class Scalar>
void adam_step(nn::ParamStore<Scalar>& params, const nn::GradStore<Scalar>& grads,
               AdamState<Scalar>& state, double lr, const TrainConfig& cfg) {
  ++state.step;
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  const auto eps = static_cast<Scalar>(cfg.adam_eps);
  const auto bc1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const auto bc2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const auto rate = static_cast<Scalar>(lr);
  for (int i = 0; i < params.count(); ++i) {
    if (!params[i].learnable) continue;
    const auto& g = grads.g[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    params[i].value -= rate * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double iou = 0.0;
  double pd = 0.0;
  double fa = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_iou = -1.0;
};

namespace detail {

/// Index-parallel loop; results must be written to per-index slots by the
/// caller so the outcome does not depend on scheduling.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int nw = std::min(threads, n);
  pool.reserve(nw);
  for (int i = 0; i < nw; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace detail

/// Evaluates the network on a sample list (eval-mode statistics, center crop,
/// no flips) and returns the aggregated report.
template <class Scalar>
metrics::EvalReport evaluate_model(const model::LcaeNet<Scalar>& net,
                                   const std::vector<data::Sample>& samples, int threads = 0) {
  if (samples.empty()) throw InputError("evaluate_model: empty sample list");
  const int n = static_cast<int>(samples.size());
  std::vector<Mask> preds(n), gts(n);
  const int crop_h = net.config().input_height;
  const int crop_w = net.config().input_width;
  detail::parallel_for(n, detail::resolve_threads(threads), [&](int i) {
    // Standardize first, then deterministic center crop; the raw-intensity
    // copy gets the identical geometry.
    data::Sample std_s = samples[i];
    std_s.image = data::standardize(std_s.image);
    std_s = data::pad_crop(std_s, crop_h, crop_w, nullptr);
    const data::Sample raw_s = data::pad_crop(samples[i], crop_h, crop_w, nullptr);
    const Image<Scalar> img = std_s.image.template cast<Scalar>();
    const Image<Scalar> raw = raw_s.image.template cast<Scalar>();
    const Plane<Scalar> prob = net.infer(img, &raw);
    preds[i] = model::predict(prob, 0.5);
    gts[i] = std::move(std_s.mask);
  });
  return metrics::evaluate(preds, gts);
}

/// Trains with shuffled seeded mini-batches, micro-aggregated Soft-IoU loss
/// over each batch's pixels, and Adam updates. Per-epoch metrics come from the
/// held-out list; the network is left at (and the result reports) the
/// best-held-out-IoU parameters seen. Deterministic for a fixed (seed, data,
/// config) regardless of thread count.
template <class Scalar>
TrainResult train_loop(model::LcaeNet<Scalar>& net, const std::vector<data::Sample>& train_set,
                       const std::vector<data::Sample>& test_set, const TrainConfig& cfg,
                       const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw InputError("train_loop: empty training set");
  const int threads = detail::resolve_threads(cfg.threads);
  const Rng root(cfg.seed);

  auto& params = net.params();
  AdamState<Scalar> opt;
  opt.init(params);

  const int n_train = static_cast<int>(train_set.size());
  const int batch = std::min(cfg.batch_size, n_train);
  std::vector<int> order(n_train);
  for (int i = 0; i < n_train; ++i) order[i] = i;

  std::vector<nn::GradStore<Scalar>> sample_grads(batch);
  for (auto& g : sample_grads) g.init(params);
  nn::GradStore<Scalar> total;
  total.init(params);

  TrainResult result;
  nn::ParamStore<Scalar> best_params = params;

  // The crop target is the configured network input.
  const int crop_h = net.config().input_height;
  const int crop_w = net.config().input_width;
  if (cfg.crop != crop_h || cfg.crop != crop_w)
    throw ConfigError("train: crop size " + std::to_string(cfg.crop) +
                      " does not match the model input " + std::to_string(crop_h) + "x" +
                      std::to_string(crop_w));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    Rng shuffle_rng = root.stream(0x9e3779b9u, static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    int batch_count = 0;

    for (int start = 0; start < n_train; start += batch) {
      const int bsz = std::min(batch, n_train - start);
      std::vector<std::unique_ptr<nn::Tape<Scalar>>> tapes(bsz);
      std::vector<nn::NodeId> prob_nodes(bsz);
      std::vector<Mask> targets(bsz);

      // Forward every batch member (parallel; per-sample state only).
      detail::parallel_for(bsz, threads, [&](int k) {
        const int idx = order[start + k];
        // Standardize before the geometric transforms; the raw copy replays
        // the same augmentation stream so both views stay aligned.
        Rng aug = root.stream(static_cast<std::uint64_t>(epoch) + 1,
                              static_cast<std::uint64_t>(idx));
        Rng aug_raw = aug;
        data::Sample std_s = train_set[idx];
        std_s.image = data::standardize(std_s.image);
        data::Sample raw_s = train_set[idx];
        if (cfg.augment) {
          std_s = data::random_flip(data::pad_crop(std_s, crop_h, crop_w, &aug), aug);
          raw_s = data::random_flip(data::pad_crop(raw_s, crop_h, crop_w, &aug_raw), aug_raw);
        } else {
          std_s = data::pad_crop(std_s, crop_h, crop_w, nullptr);
          raw_s = data::pad_crop(raw_s, crop_h, crop_w, nullptr);
        }
        const Image<Scalar> img = std_s.image.template cast<Scalar>();
        const Image<Scalar> raw = raw_s.image.template cast<Scalar>();
        sample_grads[k].reset();
        tapes[k] = std::make_unique<nn::Tape<Scalar>>(params, &sample_grads[k], /*train=*/true);
        prob_nodes[k] = net.forward(*tapes[k], img, &raw);
        targets[k] = std::move(std_s.mask);
      });

      // Batch-micro Soft-IoU terms, accumulated in sample order.
      double sum_pt = 0.0, sum_p = 0.0, sum_t = 0.0;
      for (int k = 0; k < bsz; ++k) {
        const auto& p = tapes[k]->value(prob_nodes[k]);
        const Mask& t = targets[k];
        double pt = 0.0, ps = 0.0, ts = 0.0;
        for (int y = 0; y < p.height; ++y) {
          for (int x = 0; x < p.width; ++x) {
            const double pv = p.data[static_cast<Index>(y) * p.width + x];
            const double tv = t(y, x) ? 1.0 : 0.0;
            pt += pv * tv;
            ps += pv;
            ts += tv;
          }
        }
        sum_pt += pt;
        sum_p += ps;
        sum_t += ts;
      }
      const double inter = sum_pt + cfg.loss_eps;
      const double uni = sum_p + sum_t - sum_pt + cfg.loss_eps;
      const double loss = 1.0 - inter / uni;
      if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch_count));
      loss_sum += loss;
      ++batch_count;

      // Backward with the batch-coupled cotangent on each probability map.
      const auto a = static_cast<Scalar>(inter / (uni * uni));
      const auto b = static_cast<Scalar>(1.0 / uni + inter / (uni * uni));
      detail::parallel_for(bsz, threads, [&](int k) {
        const auto& p = tapes[k]->value(prob_nodes[k]);
        nn::FeatureMap<Scalar> seed(1, p.height, p.width);
        const Mask& t = targets[k];
        // d/dp [1 - I/U]: a on background pixels, a - b on target pixels.
        for (int y = 0; y < p.height; ++y)
          for (int x = 0; x < p.width; ++x)
            seed.data[static_cast<Index>(y) * p.width + x] = t(y, x) ? a - b : a;
        tapes[k]->backward(prob_nodes[k], seed);
      });

      // Deterministic reductions: strict sample order for gradients and
      // running statistics, then one optimizer step.
      for (int k = 0; k < bsz; ++k) total.add(sample_grads[k]);
      for (int k = 0; k < bsz; ++k)
        nn::apply_bn_updates(params, tapes[k]->bn_updates(),
                             model::LcaeNet<Scalar>::kBnMomentum);
      adam_step(params, total, opt, lr, cfg);
      total.reset();
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.loss = loss_sum / batch_count;
    if (!test_set.empty()) {
      const metrics::EvalReport rep = evaluate_model(net, test_set, threads);
      entry.iou = rep.iou;
      entry.pd = rep.pd;
      entry.fa = rep.fa;
      if (rep.iou > result.best_iou) {
        result.best_iou = rep.iou;
        result.best_epoch = epoch;
        best_params = params;
      }
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }

  if (result.best_epoch >= 0) {
    params = best_params;
  } else {
    result.best_epoch = cfg.epochs - 1;
  }
  return result;
}

struct AblationRow {
  int seed = 0;
  double iou_on = 0.0;
  double iou_off = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  double median_delta = 0.0;  // median over seeds of (iou_on - iou_off)
};

/// Trains matched pairs of networks (contrast attention enabled vs replaced
/// by identity) across several seeds and reports held-out IoU per arm.
template <class Scalar>
AblationReport lce_ablation(const model::ModelConfig& base, const TrainConfig& tcfg,
                            const std::vector<data::Sample>& train_set,
                            const std::vector<data::Sample>& test_set, int seeds) {
  if (seeds < 1) throw ConfigError("ablation: need at least one seed");
  AblationReport report;
  std::vector<double> deltas;
  for (int s = 0; s < seeds; ++s) {
    AblationRow row;
    row.seed = s;
    for (bool lce : {true, false}) {
      model::ModelConfig m = base;
      m.lce_enabled = lce;
      TrainConfig t = tcfg;
      t.seed = tcfg.seed + static_cast<std::uint64_t>(s);
      model::LcaeNet<Scalar> net(m, t.seed);
      train_loop(net, train_set, test_set, t);
      const metrics::EvalReport rep = evaluate_model(net, test_set, t.threads);
      (lce ? row.iou_on : row.iou_off) = rep.iou;
    }
    deltas.push_back(row.iou_on - row.iou_off);
    report.rows.push_back(row);
  }
  std::sort(deltas.begin(), deltas.end());
  const size_t n = deltas.size();
  report.median_delta =
      n % 2 == 1 ? deltas[n / 2] : 0.5 * (deltas[n / 2 - 1] + deltas[n / 2]);
  return report;
}

/// Writes the per-epoch log as append-friendly delimited text.
inline void write_train_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("train: cannot write log to " + path);
  out << "epoch\tlr\tloss\tiou\tpd\tfa\n";
  for (const auto& e : log)
    out << e.epoch << "\t" << e.lr << "\t" << e.loss << "\t" << e.iou << "\t" << e.pd << "\t"
        << e.fa << "\n";
}

}  // namespace lcae::train

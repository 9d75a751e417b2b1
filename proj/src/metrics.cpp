#include "lcae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace lcae::metrics {

std::vector<Component> connected_components(const Mask& mask) {
  const int h = static_cast<int>(mask.rows());
  const int w = static_cast<int>(mask.cols());
  std::vector<Component> result;
  if (h == 0 || w == 0) return result;

  std::vector<std::uint8_t> visited(static_cast<size_t>(h) * w, 0);
  std::vector<std::pair<int, int>> stack;

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask(y, x) || visited[static_cast<size_t>(y) * w + x]) continue;
      Component comp;
      comp.min_row = y;
      comp.min_col = x;
      stack.clear();
      stack.emplace_back(y, x);
      visited[static_cast<size_t>(y) * w + x] = 1;
      double sum_r = 0.0, sum_c = 0.0;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        comp.pixels.emplace_back(cy, cx);
        sum_r += cy;
        sum_c += cx;
        comp.min_row = std::min(comp.min_row, cy);
        comp.min_col = std::min(comp.min_col, cx);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (!mask(ny, nx) || visited[static_cast<size_t>(ny) * w + nx]) continue;
            visited[static_cast<size_t>(ny) * w + nx] = 1;
            stack.emplace_back(ny, nx);
          }
        }
      }
      comp.area = static_cast<int>(comp.pixels.size());
      comp.centroid_row = sum_r / comp.area;
      comp.centroid_col = sum_c / comp.area;
      result.push_back(std::move(comp));
    }
  }

  // Scan order already yields components keyed by first pixel; normalize to
  // the documented (min row, min col) order with the discovery index as a
  // deterministic tie break.
  std::vector<int> order(result.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& ca = result[a];
    const auto& cb = result[b];
    if (ca.min_row != cb.min_row) return ca.min_row < cb.min_row;
    if (ca.min_col != cb.min_col) return ca.min_col < cb.min_col;
    return a < b;
  });
  std::vector<Component> sorted;
  sorted.reserve(result.size());
  for (int i : order) sorted.push_back(std::move(result[i]));
  return sorted;
}

EvalCounts& EvalCounts::operator+=(const EvalCounts& o) {
  tp_pixels += o.tp_pixels;
  gt_pixels += o.gt_pixels;
  pred_pixels += o.pred_pixels;
  detected_targets += o.detected_targets;
  total_targets += o.total_targets;
  false_pixels += o.false_pixels;
  total_pixels += o.total_pixels;
  return *this;
}

namespace {

constexpr double kCentroidTolerance = 3.0;  // strict: distance < 3 detects

std::int64_t match_targets(const std::vector<Component>& preds,
                           const std::vector<Component>& gts) {
  struct Pair {
    double dist;
    int gt;
    int pred;
  };
  std::vector<Pair> pairs;
  for (int g = 0; g < static_cast<int>(gts.size()); ++g) {
    for (int p = 0; p < static_cast<int>(preds.size()); ++p) {
      const double dr = preds[p].centroid_row - gts[g].centroid_row;
      const double dc = preds[p].centroid_col - gts[g].centroid_col;
      const double dist = std::sqrt(dr * dr + dc * dc);
      if (dist < kCentroidTolerance) pairs.push_back({dist, g, p});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    if (a.gt != b.gt) return a.gt < b.gt;
    return a.pred < b.pred;
  });
  std::vector<std::uint8_t> gt_used(gts.size(), 0), pred_used(preds.size(), 0);
  std::int64_t detected = 0;
  for (const auto& pr : pairs) {
    if (gt_used[pr.gt] || pred_used[pr.pred]) continue;
    gt_used[pr.gt] = 1;
    pred_used[pr.pred] = 1;
    ++detected;
  }
  return detected;
}

void check_shapes(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  if (preds.size() != gts.size())
    throw DimensionError("metrics: prediction/ground-truth count mismatch");
  if (preds.empty()) throw InputError("metrics: empty dataset");
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].rows() != gts[i].rows() || preds[i].cols() != gts[i].cols())
      throw DimensionError("metrics: mask shape mismatch at sample " + std::to_string(i));
  }
}

}  // namespace

EvalCounts count_pair(const Mask& pred, const Mask& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw DimensionError("metrics: mask shape mismatch");
  EvalCounts c;
  c.total_pixels = pred.size();
  for (Index y = 0; y < pred.rows(); ++y) {
    for (Index x = 0; x < pred.cols(); ++x) {
      const bool p = pred(y, x) != 0;
      const bool t = gt(y, x) != 0;
      c.tp_pixels += (p && t);
      c.gt_pixels += t;
      c.pred_pixels += p;
      c.false_pixels += (p && !t);
    }
  }
  const auto pred_comps = connected_components(pred);
  const auto gt_comps = connected_components(gt);
  c.total_targets = static_cast<std::int64_t>(gt_comps.size());
  c.detected_targets = match_targets(pred_comps, gt_comps);
  return c;
}

namespace {

EvalCounts count_dataset(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  check_shapes(preds, gts);
  EvalCounts total;
  for (size_t i = 0; i < preds.size(); ++i) total += count_pair(preds[i], gts[i]);
  return total;
}

}  // namespace

double iou(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  const EvalCounts c = count_dataset(preds, gts);
  const std::int64_t uni = c.gt_pixels + c.pred_pixels - c.tp_pixels;
  return uni == 0 ? 0.0 : static_cast<double>(c.tp_pixels) / static_cast<double>(uni);
}

double iou_per_image(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  check_shapes(preds, gts);
  double sum = 0.0;
  std::int64_t n = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    const EvalCounts c = count_pair(preds[i], gts[i]);
    const std::int64_t uni = c.gt_pixels + c.pred_pixels - c.tp_pixels;
    if (uni == 0) continue;
    sum += static_cast<double>(c.tp_pixels) / static_cast<double>(uni);
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double pd(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  const EvalCounts c = count_dataset(preds, gts);
  if (c.total_targets == 0)
    throw InputError("metrics: Pd undefined, no ground-truth targets in dataset");
  return static_cast<double>(c.detected_targets) / static_cast<double>(c.total_targets);
}

double fa(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  const EvalCounts c = count_dataset(preds, gts);
  return static_cast<double>(c.false_pixels) / static_cast<double>(c.total_pixels);
}

EvalReport evaluate(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  const EvalCounts c = count_dataset(preds, gts);
  EvalReport r;
  r.counts = c;
  const std::int64_t uni = c.gt_pixels + c.pred_pixels - c.tp_pixels;
  r.iou = uni == 0 ? 0.0 : static_cast<double>(c.tp_pixels) / static_cast<double>(uni);
  r.pd = c.total_targets == 0
             ? 0.0
             : static_cast<double>(c.detected_targets) / static_cast<double>(c.total_targets);
  r.fa = static_cast<double>(c.false_pixels) / static_cast<double>(c.total_pixels);
  return r;
}

std::vector<RocPoint> roc(const std::vector<Plane<double>>& probs, const std::vector<Mask>& gts,
                          const std::vector<double>& thresholds) {
  if (probs.size() != gts.size())
    throw DimensionError("metrics: probability/ground-truth count mismatch");
  std::vector<RocPoint> points;
  points.reserve(thresholds.size());
  for (double tau : thresholds) {
    std::vector<Mask> masks;
    masks.reserve(probs.size());
    for (const auto& p : probs) {
      Mask m(p.rows(), p.cols());
      for (Index y = 0; y < p.rows(); ++y)
        for (Index x = 0; x < p.cols(); ++x) m(y, x) = p(y, x) > tau ? 1 : 0;
      masks.push_back(std::move(m));
    }
    const EvalReport rep = evaluate(masks, gts);
    points.push_back({tau, rep.fa, rep.pd});
  }
  return points;
}

std::string report_header() {
  return "iou\tpd\tfa\ttp_pixels\tgt_pixels\tpred_pixels\tdetected_targets\ttotal_targets\t"
         "false_pixels\ttotal_pixels";
}

std::string report_row(const EvalReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%.6f\t%.6f\t%.9g\t%lld\t%lld\t%lld\t%lld\t%lld\t%lld\t%lld",
                r.iou, r.pd, r.fa, static_cast<long long>(r.counts.tp_pixels),
                static_cast<long long>(r.counts.gt_pixels),
                static_cast<long long>(r.counts.pred_pixels),
                static_cast<long long>(r.counts.detected_targets),
                static_cast<long long>(r.counts.total_targets),
                static_cast<long long>(r.counts.false_pixels),
                static_cast<long long>(r.counts.total_pixels));
  return buf;
}

void write_report(const std::string& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw IoError("metrics: cannot write report to " + path);
  out << "iou " << r.iou << "\n";
  out << "pd " << r.pd << "\n";
  out << "fa " << r.fa << "\n";
  out << "fa_per_million " << r.fa * 1e6 << "\n";
  out << "tp_pixels " << r.counts.tp_pixels << "\n";
  out << "gt_pixels " << r.counts.gt_pixels << "\n";
  out << "pred_pixels " << r.counts.pred_pixels << "\n";
  out << "detected_targets " << r.counts.detected_targets << "\n";
  out << "total_targets " << r.counts.total_targets << "\n";
  out << "false_pixels " << r.counts.false_pixels << "\n";
  out << "total_pixels " << r.counts.total_pixels << "\n";
}

void write_roc(const std::string& path, const std::vector<RocPoint>& points) {
  std::ofstream out(path);
  if (!out) throw IoError("metrics: cannot write ROC table to " + path);
  out << "# fa pd (one threshold per line, threshold order as requested)\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%.9g %.9g\n", p.fa, p.pd);
    out << buf;
  }
}

}  // namespace lcae::metrics

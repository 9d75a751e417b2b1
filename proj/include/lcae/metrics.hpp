#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcae/core.hpp"

namespace lcae::metrics {

/// One 8-connected foreground region of a binary mask.
struct Component {
  std::vector<std::pair<int, int>> pixels;  // (row, col), row-major discovery order
  double centroid_row = 0.0;
  double centroid_col = 0.0;
  int area = 0;
  int min_row = 0;
  int min_col = 0;
};

/// 8-connectivity partition of the foreground, ordered by (min row, min col).
std::vector<Component> connected_components(const Mask& mask);

/// Raw pixel/target tallies behind one evaluation run.
struct EvalCounts {
  std::int64_t tp_pixels = 0;     // pred=1 and gt=1
  std::int64_t gt_pixels = 0;     // gt=1
  std::int64_t pred_pixels = 0;   // pred=1
  std::int64_t detected_targets = 0;
  std::int64_t total_targets = 0;
  std::int64_t false_pixels = 0;  // pred=1 and gt=0
  std::int64_t total_pixels = 0;

  EvalCounts& operator+=(const EvalCounts& o);
};

struct EvalReport {
  double iou = 0.0;
  double pd = 0.0;
  double fa = 0.0;  // per-pixel rate; conventionally displayed in units of 1e-6
  EvalCounts counts;
};

/// Tallies one mask pair. Target matching is greedy nearest-centroid,
/// one-to-one, counted only under strict Euclidean distance < 3.
EvalCounts count_pair(const Mask& pred, const Mask& gt);

/// Dataset-aggregated IoU: sum of intersections over sum of unions
/// (micro average, not per-image averaged).
double iou(const std::vector<Mask>& preds, const std::vector<Mask>& gts);

/// Mean of per-image IoU ratios; empty-union images are skipped.
/// Not the default aggregation, available for comparison.
double iou_per_image(const std::vector<Mask>& preds, const std::vector<Mask>& gts);

/// Detection probability over the dataset. Throws InputError when no
/// ground-truth target exists anywhere (the ratio is undefined).
double pd(const std::vector<Mask>& preds, const std::vector<Mask>& gts);

/// False-alarm rate: falsely predicted pixels over all pixels.
double fa(const std::vector<Mask>& preds, const std::vector<Mask>& gts);

EvalReport evaluate(const std::vector<Mask>& preds, const std::vector<Mask>& gts);

struct RocPoint {
  double threshold = 0.0;
  double fa = 0.0;
  double pd = 0.0;
};

/// Binarizes every probability map at each threshold (strictly greater) and
/// reports (Fa, Pd); points come back in the given threshold order.
std::vector<RocPoint> roc(const std::vector<Plane<double>>& probs, const std::vector<Mask>& gts,
                          const std::vector<double>& thresholds);

/// Single delimited row: iou, pd, fa and the raw counts, tab separated.
std::string report_row(const EvalReport& report);
std::string report_header();

/// Key-value report file.
void write_report(const std::string& path, const EvalReport& report);

/// Two-column table (fa, pd), one threshold per line, '#' comments.
void write_roc(const std::string& path, const std::vector<RocPoint>& points);

}  // namespace lcae::metrics

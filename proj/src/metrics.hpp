#pragma once

#include <map>
#include <vector>

#include "geometry.hpp"

namespace polydet::metrics {

struct EvalDetection {
  int scene_id = 0;
  int class_id = 0;
  double score = 0.0;
  geom::Box box;
};

struct EvalGt {
  int scene_id = 0;
  int class_id = 0;
  geom::Box box;
  double area_fraction = 0.0;
};

// COCO-style metric family; NaN marks metrics with no ground truth in range.
struct EvalResult {
  double ap = 0.0;        // mean over IoU 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  double ar100 = 0.0;
  std::map<int, double> per_class_ap;
};

// Area-fraction buckets: canvas-relative rescaling of the 32^2 / 96^2 pixel
// thresholds on a 640-pixel reference frame.
constexpr double kSmallAreaMax = (32.0 / 640.0) * (32.0 / 640.0);
constexpr double kLargeAreaMin = (96.0 / 640.0) * (96.0 / 640.0);

struct GreedyOutcome {
  std::vector<int> matched_gt;   // per detection, -1 if none
  std::vector<uint8_t> tp;       // per detection
  std::vector<uint8_t> ignored;  // matched to an out-of-range gt, or area-filtered
};

// Score-descending greedy matching of one scene's single-class detections:
// each detection takes the highest-IoU unmatched ground truth at or above
// the threshold (ties by lower gt index, valid gts before ignored ones).
GreedyOutcome greedy_match_at_iou(const std::vector<EvalDetection>& dets_sorted,
                                  const std::vector<EvalGt>& gts,
                                  const std::vector<uint8_t>& gt_ignored,
                                  double iou_threshold);

// 101-point interpolated average precision. NaN when n_gt == 0.
double average_precision(const std::vector<uint8_t>& tp_by_score_desc, int n_gt);

EvalResult coco_map(const std::vector<EvalDetection>& detections,
                    const std::vector<EvalGt>& gts, int n_classes,
                    int max_dets_per_scene = 100);

}  // namespace polydet::metrics

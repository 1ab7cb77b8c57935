#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "errors.hpp"

namespace polydet::metrics {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<double> iou_thresholds() {
  std::vector<double> out;
  for (int i = 0; i < 10; ++i) out.push_back(0.5 + 0.05 * i);
  return out;
}

struct Bucket {
  double lo, hi;
};

bool in_bucket(double area, const Bucket& b) { return area >= b.lo && area < b.hi; }

double mean_ignoring_nan(const std::vector<double>& values) {
  double total = 0.0;
  int n = 0;
  for (double v : values) {
    if (std::isnan(v)) continue;
    total += v;
    ++n;
  }
  return n == 0 ? kNaN : total / n;
}

}  // namespace

GreedyOutcome greedy_match_at_iou(const std::vector<EvalDetection>& dets_sorted,
                                  const std::vector<EvalGt>& gts,
                                  const std::vector<uint8_t>& gt_ignored,
                                  double iou_threshold) {
  GreedyOutcome out;
  out.matched_gt.assign(dets_sorted.size(), -1);
  out.tp.assign(dets_sorted.size(), 0);
  out.ignored.assign(dets_sorted.size(), 0);
  std::vector<uint8_t> gt_used(gts.size(), 0);

  for (size_t di = 0; di < dets_sorted.size(); ++di) {
    const EvalDetection& d = dets_sorted[di];
    int best = -1;
    bool best_is_ignored = false;
    // valid gts outrank ignored ones; within a pass the highest IoU wins,
    // ties by lower gt index
    for (int pass = 0; pass < 2 && best < 0; ++pass) {
      double best_v = 0.0;
      for (size_t gi = 0; gi < gts.size(); ++gi) {
        if (gt_used[gi]) continue;
        if ((gt_ignored[gi] != 0) != (pass == 1)) continue;
        double v = geom::iou(d.box, gts[gi].box);
        if (v < iou_threshold) continue;
        if (best < 0 || v > best_v) {
          best = static_cast<int>(gi);
          best_v = v;
          best_is_ignored = (pass == 1);
        }
      }
    }
    if (best >= 0) {
      gt_used[static_cast<size_t>(best)] = 1;
      out.matched_gt[di] = best;
      if (best_is_ignored)
        out.ignored[di] = 1;
      else
        out.tp[di] = 1;
    }
  }
  return out;
}

double average_precision(const std::vector<uint8_t>& tp_by_score_desc, int n_gt) {
  if (n_gt == 0) return kNaN;
  size_t n = tp_by_score_desc.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0;
  for (size_t i = 0; i < n; ++i) {
    tp += tp_by_score_desc[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / n_gt;
  }
  // make precision monotonically non-increasing from the right
  for (size_t i = n; i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    double r = k / 100.0;
    double p = 0.0;
    for (size_t i = 0; i < n; ++i) {
      if (recall[i] >= r - 1e-12) {
        p = precision[i];
        break;
      }
    }
    total += p;
  }
  return total / 101.0;
}

EvalResult coco_map(const std::vector<EvalDetection>& detections,
                    const std::vector<EvalGt>& gts, int n_classes,
                    int max_dets_per_scene) {
  if (n_classes < 1) throw UsageError("coco_map: need at least one class");
  const std::vector<double> thresholds = iou_thresholds();
  const Bucket kAll{0.0, std::numeric_limits<double>::infinity()};
  const Bucket kSmall{0.0, kSmallAreaMax};
  const Bucket kMedium{kSmallAreaMax, kLargeAreaMin};
  const Bucket kLarge{kLargeAreaMin, std::numeric_limits<double>::infinity()};

  // cap detections per scene by score (stable on ties)
  std::vector<EvalDetection> capped;
  {
    std::map<int, std::vector<EvalDetection>> by_scene;
    for (const auto& d : detections) by_scene[d.scene_id].push_back(d);
    for (auto& [sid, list] : by_scene) {
      std::stable_sort(list.begin(), list.end(),
                       [](const EvalDetection& a, const EvalDetection& b) {
                         return a.score > b.score;
                       });
      if (static_cast<int>(list.size()) > max_dets_per_scene)
        list.resize(static_cast<size_t>(max_dets_per_scene));
      capped.insert(capped.end(), list.begin(), list.end());
    }
  }

  struct Flagged {
    double score;
    int scene_id;
    size_t order;
    uint8_t tp;
  };

  // AP for one (class, threshold, bucket); also reports recall and gt count.
  auto evaluate = [&](int cls, double thr, const Bucket& bucket, double* recall_out,
                      int* n_gt_out) -> double {
    std::vector<Flagged> flags;
    int n_gt = 0;
    int n_matched = 0;
    std::map<int, std::vector<EvalGt>> gt_by_scene;
    for (const auto& g : gts)
      if (g.class_id == cls) gt_by_scene[g.scene_id].push_back(g);
    std::map<int, std::vector<EvalDetection>> det_by_scene;
    for (const auto& d : capped)
      if (d.class_id == cls) det_by_scene[d.scene_id].push_back(d);

    for (const auto& [sid, scene_gts] : gt_by_scene)
      for (const auto& g : scene_gts)
        if (in_bucket(g.area_fraction, bucket)) ++n_gt;

    std::map<int, std::vector<EvalGt>> empty_gt;
    for (const auto& [sid, scene_dets_const] : det_by_scene) {
      std::vector<EvalDetection> scene_dets = scene_dets_const;
      std::stable_sort(scene_dets.begin(), scene_dets.end(),
                       [](const EvalDetection& a, const EvalDetection& b) {
                         return a.score > b.score;
                       });
      auto git = gt_by_scene.find(sid);
      static const std::vector<EvalGt> kNoGts;
      const std::vector<EvalGt>& scene_gts = git == gt_by_scene.end() ? kNoGts : git->second;
      std::vector<uint8_t> ignored(scene_gts.size(), 0);
      for (size_t gi = 0; gi < scene_gts.size(); ++gi)
        ignored[gi] = in_bucket(scene_gts[gi].area_fraction, bucket) ? 0 : 1;
      GreedyOutcome outcome = greedy_match_at_iou(scene_dets, scene_gts, ignored, thr);
      for (size_t di = 0; di < scene_dets.size(); ++di) {
        bool det_ignored = outcome.ignored[di] != 0;
        if (outcome.matched_gt[di] < 0) {
          // unmatched: drop if the detection's own area is out of range
          double area = scene_dets[di].box.area();
          if (!in_bucket(area, bucket)) det_ignored = true;
        }
        if (det_ignored) continue;
        if (outcome.tp[di]) ++n_matched;
        flags.push_back({scene_dets[di].score, sid, di, outcome.tp[di]});
      }
    }

    std::sort(flags.begin(), flags.end(), [](const Flagged& a, const Flagged& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
      return a.order < b.order;
    });
    std::vector<uint8_t> tp;
    tp.reserve(flags.size());
    for (const auto& f : flags) tp.push_back(f.tp);

    if (n_gt_out) *n_gt_out = n_gt;
    if (recall_out)
      *recall_out = n_gt == 0 ? kNaN : static_cast<double>(n_matched) / n_gt;
    return average_precision(tp, n_gt);
  };

  EvalResult result;
  std::vector<double> ap_all, ap50, ap75, ap_s, ap_m, ap_l, recalls;
  for (int cls = 0; cls < n_classes; ++cls) {
    std::vector<double> per_thr;
    for (double thr : thresholds) {
      double recall = kNaN;
      per_thr.push_back(evaluate(cls, thr, kAll, &recall, nullptr));
      recalls.push_back(recall);
      if (thr == 0.5) ap50.push_back(per_thr.back());
      if (std::abs(thr - 0.75) < 1e-12) ap75.push_back(per_thr.back());
      ap_s.push_back(evaluate(cls, thr, kSmall, nullptr, nullptr));
      ap_m.push_back(evaluate(cls, thr, kMedium, nullptr, nullptr));
      ap_l.push_back(evaluate(cls, thr, kLarge, nullptr, nullptr));
    }
    double class_ap = mean_ignoring_nan(per_thr);
    if (!std::isnan(class_ap)) result.per_class_ap[cls] = class_ap;
    ap_all.insert(ap_all.end(), per_thr.begin(), per_thr.end());
  }

  result.ap = mean_ignoring_nan(ap_all);
  result.ap50 = mean_ignoring_nan(ap50);
  result.ap75 = mean_ignoring_nan(ap75);
  result.ap_small = mean_ignoring_nan(ap_s);
  result.ap_medium = mean_ignoring_nan(ap_m);
  result.ap_large = mean_ignoring_nan(ap_l);
  result.ar100 = mean_ignoring_nan(recalls);
  return result;
}

}  // namespace polydet::metrics

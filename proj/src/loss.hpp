#pragma once

#include <utility>
#include <vector>

#include "geometry.hpp"
#include "model.hpp"
#include "query.hpp"
#include "tensor.hpp"

namespace polydet::loss {

struct Detection {
  int query_index = -1;
  int class_id = 0;
  double score = 0.0;
  geom::Box box;
  std::vector<double> class_probs;  // sigmoid per class, background last
};

struct GtObject {
  int class_id = 0;
  geom::Box box;
  double area_fraction = 0.0;
};

struct MatchWeights {
  double cls = 2.0;
  double bbox = 5.0;
  double giou = 2.0;
};

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

// predictions x ground truths; component terms kept for diagnostics.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> cost;
  std::vector<double> cls_term, bbox_term, giou_term;

  double at(int i, int j) const { return cost[static_cast<size_t>(i) * cols + j]; }
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction, gt), ascending prediction
  double total_cost = 0.0;
};

std::vector<GtObject> gt_objects(const scene::Scene& s);

// Live-query detections from one decoder layer's outputs; class scores are
// per-class sigmoids, the emitted class is the argmax over real classes.
std::vector<Detection> extract_detections(const model::LayerOutput& layer,
                                          const std::vector<uint8_t>& pad,
                                          int n_classes);

CostMatrix match_cost(const std::vector<Detection>& preds,
                      const std::vector<GtObject>& gts, const MatchWeights& w,
                      const FocalParams& fp);

// Minimum-total-cost assignment. Among exactly equal-cost optima the
// lexicographically smallest pair list wins.
Assignment hungarian_assign(const CostMatrix& c);

// Exhaustive enumeration oracle; requires min(rows, cols) <= 8.
Assignment brute_force_assign(const CostMatrix& c);

// Per-class sigmoid focal loss. targets[i] is the target class (background =
// n_classes) or -1 for pad rows, which contribute nothing. Summed over
// classes, averaged over non-pad queries.
nn::Tensor focal_loss(const nn::Tensor& class_logits, const std::vector<int>& targets,
                      const FocalParams& fp);

// Scalar (non-tensor) loss terms on plain boxes.
double l1_box_loss(const geom::Box& pred, const geom::Box& gt);
double giou_loss(const geom::Box& pred, const geom::Box& gt);

// Tensor-path box losses over matched pairs; both sum over the pairs.
nn::Tensor l1_box_loss_pairs(const nn::Tensor& pred_rows, const nn::Tensor& gt_rows);
nn::Tensor giou_loss_pairs(const nn::Tensor& pred_rows, const nn::Tensor& gt_rows);

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;   // unweighted per-layer means
  double bbox = 0.0;
  double giou = 0.0;
};

struct CompositeLoss {
  nn::Tensor loss;  // scalar, differentiable
  LossBreakdown breakdown;
  std::vector<Assignment> assignments;  // one per decoder layer
};

// Hungarian-matched set loss, averaged over decoder layers. The assignment
// is a constant in the gradient; pass fixed_assignments to pin it (used by
// the gradient checker).
CompositeLoss composite_loss(const model::ForwardResult& fwd,
                             const std::vector<uint8_t>& pad,
                             const std::vector<GtObject>& gts, const MatchWeights& w,
                             const FocalParams& fp, int n_classes,
                             const std::vector<Assignment>* fixed_assignments = nullptr);

}  // namespace polydet::loss

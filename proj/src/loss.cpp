#include "loss.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "errors.hpp"

namespace polydet::loss {

namespace {

constexpr double kProbClamp = 1e-7;

double clamp_prob(double p) {
  return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
}

double focal_pos(double p, const FocalParams& fp) {
  return -fp.alpha * std::pow(1.0 - p, fp.gamma) * std::log(p);
}

double focal_neg(double p, const FocalParams& fp) {
  return -(1.0 - fp.alpha) * std::pow(p, fp.gamma) * std::log(1.0 - p);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Square Jonker-Volgenant style solver with potentials; returns row->col and
// the dual variables for tight-edge analysis.
void jv_square(const std::vector<double>& a, int n, std::vector<int>& row_to_col,
               std::vector<double>& u, std::vector<double>& v) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  u.assign(static_cast<size_t>(n) + 1, 0.0);
  v.assign(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)], j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = a[static_cast<size_t>(i0 - 1) * n + (j - 1)] - u[static_cast<size_t>(i0)] -
                     v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  row_to_col.assign(static_cast<size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<size_t>(j)]) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
}

// Kuhn augmenting path on the tight-edge graph, avoiding locked columns.
bool try_augment(int row, const std::vector<std::vector<int>>& adj,
                 const std::vector<uint8_t>& col_locked, std::vector<int>& col_to_row,
                 std::vector<uint8_t>& visited) {
  for (int j : adj[static_cast<size_t>(row)]) {
    if (col_locked[static_cast<size_t>(j)] || visited[static_cast<size_t>(j)]) continue;
    visited[static_cast<size_t>(j)] = 1;
    if (col_to_row[static_cast<size_t>(j)] < 0 ||
        try_augment(col_to_row[static_cast<size_t>(j)], adj, col_locked, col_to_row, visited)) {
      col_to_row[static_cast<size_t>(j)] = row;
      return true;
    }
  }
  return false;
}

double canonical_pair_cost(const CostMatrix& c, const std::vector<std::pair<int, int>>& pairs) {
  double total = 0.0;
  for (const auto& [i, j] : pairs) total += c.at(i, j);
  return total;
}

}  // namespace

std::vector<GtObject> gt_objects(const scene::Scene& s) {
  std::vector<GtObject> out;
  out.reserve(s.ground_truth.size());
  for (const auto& gt : s.ground_truth)
    out.push_back({gt.class_id, gt.box, gt.area_fraction});
  return out;
}

std::vector<Detection> extract_detections(const model::LayerOutput& layer,
                                          const std::vector<uint8_t>& pad,
                                          int n_classes) {
  int n = layer.class_logits.rows();
  std::vector<Detection> out;
  for (int i = 0; i < n; ++i) {
    if (pad[static_cast<size_t>(i)]) continue;
    Detection d;
    d.query_index = i;
    d.class_probs.resize(static_cast<size_t>(n_classes) + 1);
    for (int c = 0; c <= n_classes; ++c)
      d.class_probs[static_cast<size_t>(c)] = stable_sigmoid(layer.class_logits.at(i, c));
    d.class_id = 0;
    d.score = d.class_probs[0];
    for (int c = 1; c < n_classes; ++c) {
      if (d.class_probs[static_cast<size_t>(c)] > d.score) {
        d.score = d.class_probs[static_cast<size_t>(c)];
        d.class_id = c;
      }
    }
    d.box = geom::Box{layer.boxes.at(i, 0), layer.boxes.at(i, 1), layer.boxes.at(i, 2),
                      layer.boxes.at(i, 3)};
    out.push_back(std::move(d));
  }
  return out;
}

CostMatrix match_cost(const std::vector<Detection>& preds,
                      const std::vector<GtObject>& gts, const MatchWeights& w,
                      const FocalParams& fp) {
  CostMatrix c;
  c.rows = static_cast<int>(preds.size());
  c.cols = static_cast<int>(gts.size());
  size_t total = static_cast<size_t>(c.rows) * static_cast<size_t>(c.cols);
  c.cost.resize(total);
  c.cls_term.resize(total);
  c.bbox_term.resize(total);
  c.giou_term.resize(total);

  for (int i = 0; i < c.rows; ++i) {
    const Detection& d = preds[static_cast<size_t>(i)];
    for (double v : d.class_probs)
      if (!std::isfinite(v))
        throw NumericError("match_cost: non-finite class probability in prediction " +
                           std::to_string(i));
    if (!std::isfinite(d.box.x1) || !std::isfinite(d.box.y1) ||
        !std::isfinite(d.box.x2) || !std::isfinite(d.box.y2))
      throw NumericError("match_cost: non-finite box in prediction " + std::to_string(i));
    for (int j = 0; j < c.cols; ++j) {
      const GtObject& g = gts[static_cast<size_t>(j)];
      double p = clamp_prob(d.class_probs[static_cast<size_t>(g.class_id)]);
      double cls = focal_pos(p, fp) - focal_neg(p, fp);
      double bbox = l1_box_loss(d.box, g.box);
      double gi = 1.0 - geom::giou(d.box, g.box);
      size_t idx = static_cast<size_t>(i) * c.cols + j;
      c.cls_term[idx] = cls;
      c.bbox_term[idx] = bbox;
      c.giou_term[idx] = gi;
      c.cost[idx] = w.cls * cls + w.bbox * bbox + w.giou * gi;
    }
  }
  return c;
}

Assignment hungarian_assign(const CostMatrix& c) {
  Assignment out;
  if (c.rows == 0 || c.cols == 0) return out;

  int n = std::max(c.rows, c.cols);
  std::vector<double> a(static_cast<size_t>(n) * n, 0.0);
  double max_abs = 0.0;
  for (int i = 0; i < c.rows; ++i)
    for (int j = 0; j < c.cols; ++j) {
      a[static_cast<size_t>(i) * n + j] = c.at(i, j);
      max_abs = std::max(max_abs, std::abs(c.at(i, j)));
    }

  std::vector<int> row_to_col;
  std::vector<double> u, v;
  jv_square(a, n, row_to_col, u, v);

  // Lexicographic refinement over the tight-edge graph: any perfect matching
  // on tight edges is optimal, so pick pairs greedily in index order. The
  // tolerance groups exactly-equal costs; generic float costs have a unique
  // optimum and pass straight through.
  double tol = 1e-9 * (1.0 + max_abs);
  std::vector<std::vector<int>> adj(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double rc = a[static_cast<size_t>(i) * n + j] - u[static_cast<size_t>(i + 1)] -
                  v[static_cast<size_t>(j + 1)];
      if (rc <= tol) adj[static_cast<size_t>(i)].push_back(j);
    }

  std::vector<int> col_to_row(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i)
    if (row_to_col[static_cast<size_t>(i)] >= 0)
      col_to_row[static_cast<size_t>(row_to_col[static_cast<size_t>(i)])] = i;

  std::vector<uint8_t> row_locked(static_cast<size_t>(n), 0), col_locked(static_cast<size_t>(n), 0);
  auto force_pair = [&](int i, int j) -> bool {
    int current_col = -1;
    for (int jj = 0; jj < n; ++jj)
      if (col_to_row[static_cast<size_t>(jj)] == i) current_col = jj;
    if (current_col == j) return true;
    int displaced = col_to_row[static_cast<size_t>(j)];
    // tentative: i takes j; displaced row (if any) must re-augment
    col_to_row[static_cast<size_t>(j)] = i;
    if (current_col >= 0) col_to_row[static_cast<size_t>(current_col)] = -1;
    if (displaced < 0) return true;
    std::vector<uint8_t> visited(static_cast<size_t>(n), 0);
    visited[static_cast<size_t>(j)] = 1;  // j is taken by i now
    if (try_augment(displaced, adj, col_locked, col_to_row, visited)) return true;
    // revert
    col_to_row[static_cast<size_t>(j)] = displaced;
    if (current_col >= 0) col_to_row[static_cast<size_t>(current_col)] = i;
    return false;
  };

  for (int i = 0; i < std::min(c.rows, n); ++i) {
    // candidates: real columns ascending, then dummy columns
    bool fixed = false;
    for (int j : adj[static_cast<size_t>(i)]) {
      if (j >= c.cols) continue;
      if (col_locked[static_cast<size_t>(j)]) continue;
      if (force_pair(i, j)) {
        fixed = true;
        col_locked[static_cast<size_t>(j)] = 1;
        row_locked[static_cast<size_t>(i)] = 1;
        break;
      }
    }
    if (!fixed) {
      // row stays on a dummy column (or unmatched in the rectangular sense)
      row_locked[static_cast<size_t>(i)] = 1;
    }
  }

  for (int j = 0; j < c.cols; ++j) {
    int i = col_to_row[static_cast<size_t>(j)];
    if (i >= 0 && i < c.rows) out.pairs.emplace_back(i, j);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  out.total_cost = canonical_pair_cost(c, out.pairs);
  return out;
}

Assignment brute_force_assign(const CostMatrix& c) {
  Assignment best;
  if (c.rows == 0 || c.cols == 0) return best;
  int k = std::min(c.rows, c.cols);
  if (k > 8) throw UsageError("brute_force_assign: size bound exceeded (min side > 8)");

  bool assign_gts = c.cols <= c.rows;  // iterate over the smaller side
  int small = assign_gts ? c.cols : c.rows;
  int large = assign_gts ? c.rows : c.cols;

  std::vector<int> choice(static_cast<size_t>(small), -1);
  std::vector<uint8_t> used(static_cast<size_t>(large), 0);
  bool have_best = false;

  auto consider = [&]() {
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<size_t>(small));
    for (int s = 0; s < small; ++s) {
      int l = choice[static_cast<size_t>(s)];
      if (assign_gts)
        pairs.emplace_back(l, s);
      else
        pairs.emplace_back(s, l);
    }
    std::sort(pairs.begin(), pairs.end());
    double cost = canonical_pair_cost(c, pairs);
    if (!have_best || cost < best.total_cost ||
        (cost == best.total_cost && pairs < best.pairs)) {
      best.pairs = std::move(pairs);
      best.total_cost = cost;
      have_best = true;
    }
  };

  std::function<void(int)> rec = [&](int s) {
    if (s == small) {
      consider();
      return;
    }
    for (int l = 0; l < large; ++l) {
      if (used[static_cast<size_t>(l)]) continue;
      used[static_cast<size_t>(l)] = 1;
      choice[static_cast<size_t>(s)] = l;
      rec(s + 1);
      used[static_cast<size_t>(l)] = 0;
    }
  };
  rec(0);
  return best;
}

nn::Tensor focal_loss(const nn::Tensor& class_logits, const std::vector<int>& targets,
                      const FocalParams& fp) {
  if (!(fp.alpha > 0.0 && fp.alpha < 1.0) || fp.gamma < 0.0)
    throw UsageError("focal_loss: alpha must be in (0,1) and gamma >= 0");
  int n = class_logits.rows();
  int width = class_logits.cols();
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("focal_loss: targets length " + std::to_string(targets.size()) +
                     " != rows " + std::to_string(n));

  std::vector<double> one_hot(static_cast<size_t>(n) * width, 0.0);
  std::vector<double> inv_hot(static_cast<size_t>(n) * width, 0.0);
  int live = 0;
  for (int i = 0; i < n; ++i) {
    int t = targets[static_cast<size_t>(i)];
    if (t < 0) continue;  // pad row: both masks stay zero
    if (t >= width) throw ShapeError("focal_loss: target class out of range");
    ++live;
    for (int c = 0; c < width; ++c) {
      if (c == t)
        one_hot[static_cast<size_t>(i) * width + c] = 1.0;
      else
        inv_hot[static_cast<size_t>(i) * width + c] = 1.0;
    }
  }
  if (live == 0) return nn::Tensor::scalar_of(0.0);

  nn::Tensor t_pos = nn::Tensor::constant({n, width}, std::move(one_hot));
  nn::Tensor t_neg = nn::Tensor::constant({n, width}, std::move(inv_hot));
  nn::Tensor prob = nn::clamp(nn::sigmoid(class_logits), kProbClamp, 1.0 - kProbClamp);
  nn::Tensor one_minus = nn::add_scalar(nn::scale(prob, -1.0), 1.0);

  nn::Tensor pos = nn::mul(nn::mul(nn::pow_scalar(one_minus, fp.gamma), nn::log(prob)), t_pos);
  nn::Tensor neg = nn::mul(nn::mul(nn::pow_scalar(prob, fp.gamma), nn::log(one_minus)), t_neg);
  nn::Tensor total = nn::add(nn::scale(pos, -fp.alpha), nn::scale(neg, -(1.0 - fp.alpha)));
  return nn::scale(nn::sum(total), 1.0 / live);
}

double l1_box_loss(const geom::Box& pred, const geom::Box& gt) {
  return std::abs(pred.x1 - gt.x1) + std::abs(pred.y1 - gt.y1) +
         std::abs(pred.x2 - gt.x2) + std::abs(pred.y2 - gt.y2);
}

double giou_loss(const geom::Box& pred, const geom::Box& gt) {
  return 1.0 - geom::giou(pred, gt);
}

nn::Tensor l1_box_loss_pairs(const nn::Tensor& pred_rows, const nn::Tensor& gt_rows) {
  return nn::sum(nn::abs(nn::sub(pred_rows, gt_rows)));
}

nn::Tensor giou_loss_pairs(const nn::Tensor& pred_rows, const nn::Tensor& gt_rows) {
  auto col = [](const nn::Tensor& t, int i) { return nn::slice(t, 1, i, 1); };
  nn::Tensor px1 = col(pred_rows, 0), py1 = col(pred_rows, 1);
  nn::Tensor px2 = col(pred_rows, 2), py2 = col(pred_rows, 3);
  nn::Tensor gx1 = col(gt_rows, 0), gy1 = col(gt_rows, 1);
  nn::Tensor gx2 = col(gt_rows, 2), gy2 = col(gt_rows, 3);

  nn::Tensor iw = nn::relu(nn::sub(nn::minimum(px2, gx2), nn::maximum(px1, gx1)));
  nn::Tensor ih = nn::relu(nn::sub(nn::minimum(py2, gy2), nn::maximum(py1, gy1)));
  nn::Tensor inter = nn::mul(iw, ih);
  nn::Tensor area_p = nn::mul(nn::sub(px2, px1), nn::sub(py2, py1));
  nn::Tensor area_g = nn::mul(nn::sub(gx2, gx1), nn::sub(gy2, gy1));
  nn::Tensor uni = nn::sub(nn::add(area_p, area_g), inter);
  nn::Tensor iou = nn::div(inter, uni);  // gt areas are positive
  nn::Tensor ew = nn::sub(nn::maximum(px2, gx2), nn::minimum(px1, gx1));
  nn::Tensor eh = nn::sub(nn::maximum(py2, gy2), nn::minimum(py1, gy1));
  nn::Tensor enclose = nn::mul(ew, eh);
  nn::Tensor gi = nn::sub(iou, nn::div(nn::sub(enclose, uni), enclose));
  return nn::sum(nn::add_scalar(nn::scale(gi, -1.0), 1.0));
}

CompositeLoss composite_loss(const model::ForwardResult& fwd,
                             const std::vector<uint8_t>& pad,
                             const std::vector<GtObject>& gts, const MatchWeights& w,
                             const FocalParams& fp, int n_classes,
                             const std::vector<Assignment>* fixed_assignments) {
  CompositeLoss out;
  int layers = static_cast<int>(fwd.layers.size());
  if (layers == 0) throw UsageError("composite_loss: no decoder layers");

  std::vector<double> gt_box_rows;
  gt_box_rows.reserve(gts.size() * 4);
  for (const auto& g : gts) {
    gt_box_rows.push_back(g.box.x1);
    gt_box_rows.push_back(g.box.y1);
    gt_box_rows.push_back(g.box.x2);
    gt_box_rows.push_back(g.box.y2);
  }

  std::vector<nn::Tensor> layer_losses;
  for (int l = 0; l < layers; ++l) {
    const model::LayerOutput& layer = fwd.layers[static_cast<size_t>(l)];
    std::vector<Detection> dets = extract_detections(layer, pad, n_classes);

    Assignment assign;
    if (fixed_assignments) {
      assign = (*fixed_assignments)[static_cast<size_t>(l)];
    } else if (!gts.empty() && !dets.empty()) {
      assign = hungarian_assign(match_cost(dets, gts, w, fp));
    }
    out.assignments.push_back(assign);

    // classification targets: matched -> gt class, live unmatched ->
    // background, pads excluded
    int n = layer.class_logits.rows();
    std::vector<int> targets(static_cast<size_t>(n), -1);
    for (int i = 0; i < n; ++i)
      if (!pad[static_cast<size_t>(i)]) targets[static_cast<size_t>(i)] = n_classes;
    std::vector<int> matched_query_rows;
    std::vector<double> matched_gt_rows;
    for (const auto& [pi, gj] : assign.pairs) {
      int qi = dets[static_cast<size_t>(pi)].query_index;
      targets[static_cast<size_t>(qi)] = gts[static_cast<size_t>(gj)].class_id;
      matched_query_rows.push_back(qi);
      for (int k = 0; k < 4; ++k)
        matched_gt_rows.push_back(gt_box_rows[static_cast<size_t>(gj) * 4 + k]);
    }

    nn::Tensor cls = focal_loss(layer.class_logits, targets, fp);
    nn::Tensor layer_loss = nn::scale(cls, w.cls);
    double bbox_val = 0.0, giou_val = 0.0;
    if (!matched_query_rows.empty()) {
      double norm = 1.0 / static_cast<double>(gts.size());
      nn::Tensor pred_rows = nn::gather_rows(layer.boxes, matched_query_rows);
      nn::Tensor gt_rows = nn::Tensor::constant(
          {static_cast<int>(matched_query_rows.size()), 4}, matched_gt_rows);
      nn::Tensor l1 = nn::scale(l1_box_loss_pairs(pred_rows, gt_rows), norm);
      nn::Tensor gi = nn::scale(giou_loss_pairs(pred_rows, gt_rows), norm);
      bbox_val = l1.scalar();
      giou_val = gi.scalar();
      layer_loss = nn::add(layer_loss, nn::add(nn::scale(l1, w.bbox), nn::scale(gi, w.giou)));
    }
    out.breakdown.cls += cls.scalar() / layers;
    out.breakdown.bbox += bbox_val / layers;
    out.breakdown.giou += giou_val / layers;
    layer_losses.push_back(layer_loss);
  }

  nn::Tensor total = layer_losses[0];
  for (size_t i = 1; i < layer_losses.size(); ++i) total = nn::add(total, layer_losses[i]);
  out.loss = nn::scale(total, 1.0 / layers);
  out.breakdown.total = out.loss.scalar();
  return out;
}

}  // namespace polydet::loss

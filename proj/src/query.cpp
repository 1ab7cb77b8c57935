#include "query.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "errors.hpp"

namespace polydet::query {

const char* origin_name(QueryOrigin o) {
  switch (o) {
    case QueryOrigin::kAppearance: return "appearance";
    case QueryOrigin::kPositional: return "positional";
    case QueryOrigin::kRandom: return "random";
    case QueryOrigin::kPad: return "pad";
  }
  return "?";
}

std::vector<Proposal> detector_stub(const scene::Scene& s, const nn::Tensor& prototypes,
                                    const StubConfig& cfg, uint64_t noise_seed) {
  if (prototypes.rank() != 2 || prototypes.rows() == 0)
    throw UsageError("detector_stub: empty vocabulary");
  int n_classes = prototypes.rows();
  int d_f = prototypes.cols();
  if (d_f != cfg.d_f)
    throw ShapeError("detector_stub: prototype width " + std::to_string(d_f) +
                     " != configured d_f " + std::to_string(cfg.d_f));
  for (const auto& gt : s.ground_truth)
    if (gt.class_id >= n_classes)
      throw UsageError("detector_stub: vocabulary does not cover class " +
                       std::to_string(gt.class_id));

  Rng rng(noise_seed);
  std::vector<Proposal> out;
  for (const auto& gt : s.ground_truth) {
    if (!rng.bernoulli(cfg.p_detect)) continue;
    Proposal p;
    p.source = "detector_stub";
    p.confidence = 1.0;
    // jittered copy of the visible-region polygon
    geom::Polygon jittered = gt.visible_polygon;
    for (auto& v : jittered.vertices) {
      v.x = std::min(std::max(v.x + cfg.polygon_jitter * rng.normal(), 0.0), 1.0);
      v.y = std::min(std::max(v.y + cfg.polygon_jitter * rng.normal(), 0.0), 1.0);
    }
    try {
      p.polygon = geom::canonicalize(jittered);
    } catch (const Error&) {
      p.polygon = gt.visible_polygon;  // jitter degenerated the ring
    }
    p.feature.resize(static_cast<size_t>(d_f));
    for (int i = 0; i < d_f; ++i)
      p.feature[static_cast<size_t>(i)] =
          prototypes.at(gt.class_id, i) + cfg.feature_noise * rng.normal();
    out.push_back(std::move(p));
  }

  int distractors = rng.poisson(cfg.distractor_rate);
  for (int k = 0; k < distractors; ++k) {
    double radius = rng.uniform(0.05, 0.15);
    double cx = rng.uniform(radius + 0.01, 1.0 - radius - 0.01);
    double cy = rng.uniform(radius + 0.01, 1.0 - radius - 0.01);
    Proposal p;
    p.source = "detector_stub";
    p.confidence = 0.5;
    p.polygon = scene::random_star_polygon(rng, cx, cy, radius, 5, 9);
    int cls = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(n_classes)));
    p.feature.resize(static_cast<size_t>(d_f));
    for (int i = 0; i < d_f; ++i)
      p.feature[static_cast<size_t>(i)] =
          prototypes.at(cls, i) + (0.3 + cfg.feature_noise) * rng.normal();
    out.push_back(std::move(p));
  }
  return out;
}

SegmenterResult segmenter_stub(const scene::Scene& s, const std::vector<Proposal>& prompts,
                               const StubConfig& cfg, uint64_t noise_seed) {
  Rng rng(noise_seed);
  SegmenterResult result;
  result.masks.reserve(prompts.size());
  for (const auto& prompt : prompts) {
    geom::BinaryMask m = geom::rasterize_polygon(prompt.polygon, s.width, s.height);
    if (m.count() == 0) {
      ++result.skipped;
      result.masks.push_back(std::move(m));
      continue;
    }
    if (cfg.mask_noise > 0.0) {
      geom::BinaryMask noisy = m;
      auto set_at = [&](int x, int y) {
        return x >= 0 && y >= 0 && x < m.width && y < m.height && m.at(x, y);
      };
      // Flips stay on boundary-adjacent pixels (<= 1 px of erosion/dilation)
      // and are capped at 10% of the object's area so that small objects
      // keep a usable mask.
      std::vector<std::pair<int, int>> hits;
      for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
          bool on = m.at(x, y);
          bool near_boundary =
              set_at(x - 1, y) != on || set_at(x + 1, y) != on ||
              set_at(x, y - 1) != on || set_at(x, y + 1) != on;
          if (!near_boundary) continue;
          if (rng.bernoulli(cfg.mask_noise)) hits.emplace_back(x, y);
        }
      }
      size_t budget = m.count() / 10;
      if (hits.size() > budget) {
        rng.shuffle(hits);
        hits.resize(budget);
      }
      for (auto [x, y] : hits) noisy.set(x, y, !m.at(x, y));
      m = std::move(noisy);
    }
    result.masks.push_back(std::move(m));
  }
  return result;
}

nn::Tensor init_random_queries(nn::ParameterStore& store, int n_random, int d,
                               uint64_t init_seed) {
  Rng rng(mix_seed(init_seed, 0x5a4dULL));
  std::vector<double> v(static_cast<size_t>(n_random) * d);
  for (auto& x : v) x = rng.normal();
  return store.create("query.random", {n_random, d}, std::move(v));
}

AppearanceBlock build_appearance_queries(const std::vector<Proposal>& proposals,
                                         int cap, const nn::Tensor& proj_w,
                                         const nn::Tensor& proj_b) {
  int d_f = proj_w.rows();
  int d_app = proj_w.cols();
  for (const auto& p : proposals)
    if (static_cast<int>(p.feature.size()) != d_f)
      throw ShapeError("appearance queries: feature length " +
                       std::to_string(p.feature.size()) + " != projection input " +
                       std::to_string(d_f));

  std::vector<size_t> order(proposals.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return proposals[a].confidence > proposals[b].confidence;
  });
  int kept = std::min<int>(cap, static_cast<int>(order.size()));

  AppearanceBlock block;
  block.pad.assign(static_cast<size_t>(cap), 1);
  if (kept > 0) {
    std::vector<double> feat;
    feat.reserve(static_cast<size_t>(kept) * d_f);
    for (int i = 0; i < kept; ++i) {
      const Proposal& p = proposals[order[static_cast<size_t>(i)]];
      feat.insert(feat.end(), p.feature.begin(), p.feature.end());
      block.polygons.push_back(p.polygon);
      block.pad[static_cast<size_t>(i)] = 0;
      block.filled_rows.push_back(i);
    }
    nn::Tensor projected = nn::add(
        nn::matmul(nn::Tensor::constant({kept, d_f}, std::move(feat)), proj_w), proj_b);
    block.semantic = kept == cap
                         ? projected
                         : nn::concat({projected, nn::Tensor::zeros({cap - kept, d_app})}, 0);
  } else {
    block.semantic = nn::Tensor::zeros({cap, d_app});
  }
  return block;
}

nn::Tensor polygon_embedding(const std::vector<geom::Polygon>& resampled, int k,
                             const QueryParams& params) {
  int n = static_cast<int>(resampled.size());
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(n) * 2 * k);
  for (const auto& poly : resampled) {
    auto f = geom::flatten_polygon(poly, k);
    flat.insert(flat.end(), f.begin(), f.end());
  }
  nn::Tensor x = nn::Tensor::constant({n, 2 * k}, std::move(flat));
  nn::Tensor h = nn::relu(nn::add(nn::matmul(x, params.mlp_w1), params.mlp_b1));
  return nn::add(nn::matmul(h, params.mlp_w2), params.mlp_b2);
}

PositionalBlock build_positional_queries(const std::vector<geom::BinaryMask>& masks,
                                         double epsilon, int k,
                                         const QueryParams& params, int cap) {
  PositionalBlock block;
  block.pad.assign(static_cast<size_t>(cap), 1);
  block.polygons.assign(static_cast<size_t>(cap), std::nullopt);

  std::vector<geom::Polygon> kept;
  for (const auto& m : masks) {
    if (static_cast<int>(kept.size()) >= cap) break;
    if (m.count() == 0) continue;  // skipped slot
    geom::Polygon ring = geom::polygon_approximate(m, epsilon);
    kept.push_back(geom::resample_polygon(ring, k));
  }

  int d_pos = params.mlp_w2.cols();
  int n = static_cast<int>(kept.size());
  if (n > 0) {
    nn::Tensor emb = polygon_embedding(kept, k, params);
    block.embeddings =
        n == cap ? emb : nn::concat({emb, nn::Tensor::zeros({cap - n, d_pos})}, 0);
    for (int i = 0; i < n; ++i) {
      block.pad[static_cast<size_t>(i)] = 0;
      block.polygons[static_cast<size_t>(i)] = kept[static_cast<size_t>(i)];
    }
  } else {
    block.embeddings = nn::Tensor::zeros({cap, d_pos});
  }
  return block;
}

QuerySet assemble_query_set(const AppearanceBlock* app, const PositionalBlock* pos,
                            const QueryParams& params, const AssembleSpec& spec) {
  int d = spec.d_app + spec.d_pos;
  std::vector<nn::Tensor> blocks;
  QuerySet qs;
  qs.d_app = spec.d_app;
  qs.d_pos = spec.d_pos;

  if (app && spec.cap_appearance > 0) {
    int cap = spec.cap_appearance;
    int kept = static_cast<int>(app->polygons.size());
    nn::Tensor positional;
    if (kept > 0) {
      std::vector<geom::Polygon> resampled;
      resampled.reserve(static_cast<size_t>(kept));
      for (const auto& poly : app->polygons)
        resampled.push_back(geom::resample_polygon(poly, spec.polygon_vertices));
      nn::Tensor emb = polygon_embedding(resampled, spec.polygon_vertices, params);
      positional = kept == cap
                       ? emb
                       : nn::concat({emb, nn::Tensor::zeros({cap - kept, spec.d_pos})}, 0);
      for (int i = 0; i < cap; ++i) {
        bool is_pad = app->pad[static_cast<size_t>(i)] != 0;
        qs.origin.push_back(is_pad ? QueryOrigin::kPad : QueryOrigin::kAppearance);
        qs.pad.push_back(is_pad ? 1 : 0);
        qs.polygon.push_back(is_pad || i >= kept
                                 ? std::optional<geom::Polygon>{}
                                 : std::optional<geom::Polygon>{resampled[static_cast<size_t>(i)]});
      }
    } else {
      positional = nn::Tensor::zeros({cap, spec.d_pos});
      for (int i = 0; i < cap; ++i) {
        qs.origin.push_back(QueryOrigin::kPad);
        qs.pad.push_back(1);
        qs.polygon.push_back(std::nullopt);
      }
    }
    blocks.push_back(nn::concat({app->semantic, positional}, 1));
  }

  if (pos && spec.cap_positional > 0) {
    int cap = spec.cap_positional;
    int filled = 0;
    for (uint8_t p : pos->pad)
      if (!p) ++filled;
    nn::Tensor semantic;
    if (filled > 0) {
      std::vector<nn::Tensor> rows(static_cast<size_t>(filled), params.content_free);
      nn::Tensor content = filled == 1 ? params.content_free : nn::concat(rows, 0);
      semantic = filled == cap
                     ? content
                     : nn::concat({content, nn::Tensor::zeros({cap - filled, spec.d_app})}, 0);
    } else {
      semantic = nn::Tensor::zeros({cap, spec.d_app});
    }
    blocks.push_back(nn::concat({semantic, pos->embeddings}, 1));
    for (int i = 0; i < cap; ++i) {
      bool is_pad = pos->pad[static_cast<size_t>(i)] != 0;
      qs.origin.push_back(is_pad ? QueryOrigin::kPad : QueryOrigin::kPositional);
      qs.pad.push_back(is_pad ? 1 : 0);
      qs.polygon.push_back(pos->polygons[static_cast<size_t>(i)]);
    }
  }

  if (spec.n_random > 0) {
    if (!params.random_q.defined())
      throw UsageError("assemble_query_set: random queries requested but not initialized");
    if (params.random_q.cols() != d)
      throw ShapeError("assemble_query_set: random query width " +
                       std::to_string(params.random_q.cols()) + " != d " + std::to_string(d));
    blocks.push_back(params.random_q);
    for (int i = 0; i < spec.n_random; ++i) {
      qs.origin.push_back(QueryOrigin::kRandom);
      qs.pad.push_back(0);
      qs.polygon.push_back(std::nullopt);
    }
  }

  if (blocks.empty()) throw UsageError("assemble_query_set: no query types enabled");
  qs.embeddings = blocks.size() == 1 ? blocks[0] : nn::concat(blocks, 0);
  qs.count = qs.embeddings.rows();
  return qs;
}

}  // namespace polydet::query

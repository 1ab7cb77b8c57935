#include <cmath>

#include "doctest.h"
#include "errors.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "query.hpp"
#include "rng.hpp"
#include "scene.hpp"

using namespace polydet;
using namespace polydet::model;
using nn::Tensor;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.d = 8;
  c.d_app = 4;
  c.d_pos = 4;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 2;
  c.patch = 8;
  c.canvas = 32;
  c.channels = 1;
  c.n_classes = 3;
  c.polygon_vertices = 8;
  c.pos_mlp_hidden = 8;
  c.ref_hidden = 6;
  c.cap_appearance = 1;
  c.cap_positional = 1;
  c.n_random = 2;
  c.d_f = 8;
  c.init_seed = 5;
  return c;
}

scene::DatasetSpec toy_scene_spec() {
  scene::DatasetSpec sp;
  sp.canvas = 32;
  sp.n_classes = 3;
  sp.objects_min = 1;
  sp.objects_max = 2;
  sp.size_min = 0.15;
  sp.size_max = 0.3;
  sp.occlusion_rate = 0.2;
  return sp;
}

query::StubConfig toy_stub() {
  query::StubConfig cfg;
  cfg.d_f = 8;
  cfg.p_detect = 1.0;
  cfg.distractor_rate = 0.5;
  return cfg;
}

struct ToyWorld {
  Model model;
  scene::Scene scn;
  Tensor prototypes;
  query::QuerySet queries;
  EncoderMemory memory;

  explicit ToyWorld(const ModelConfig& cfg, uint64_t scene_seed = 21)
      : model(cfg),
        scn(scene::generate_scene(toy_scene_spec(), scene_seed, 0)),
        prototypes(scene::class_prototypes(cfg.n_classes, cfg.d_f, 3)) {
    queries = model.build_queries(scn, prototypes, toy_stub(), 7);
    memory = model.encode(scene::render_scene_grid(scn, cfg.channels));
  }
};

void zero_param(Model& m, const std::string& name) {
  Tensor t = m.params().get(name);
  std::fill(t.values_mut().begin(), t.values_mut().end(), 0.0);
}

}  // namespace

TEST_CASE("encoder shapes: L = (H/patch) * (W/patch)") {
  ToyWorld w(toy_config());
  CHECK(w.memory.tokens.shape() == std::vector<int>{16, 8});
  CHECK(w.memory.k_app.shape() == std::vector<int>{16, 4});
  CHECK(w.memory.k_pos.shape() == std::vector<int>{16, 4});
  CHECK(w.memory.centers.size() == 32);
}

TEST_CASE("encode rejects a bad grid and bad divisibility") {
  ModelConfig cfg = toy_config();
  Model m(cfg);
  CHECK_THROWS_AS(m.encode(std::vector<double>(17, 0.0)), ShapeError);
  ModelConfig bad = toy_config();
  bad.canvas = 30;
  CHECK_THROWS_AS(Model{bad}, UsageError);
}

TEST_CASE("zero input with zero embed projection leaves only bias") {
  ModelConfig cfg = toy_config();
  cfg.encoder_layers = 0;
  cfg.use_posenc = false;
  Model m(cfg);
  zero_param(m, "enc.embed.w");
  Tensor b = m.params().get("enc.embed.b");
  for (auto& v : b.values_mut()) v = 0.7;
  auto mem = m.encode(std::vector<double>(32 * 32 * 1, 0.0));
  for (int t = 0; t < 16; ++t)
    for (int j = 0; j < 8; ++j) CHECK(mem.tokens.at(t, j) == 0.7);
}

TEST_CASE("patch permutation permutes K_app rows when posenc is off") {
  ModelConfig cfg = toy_config();
  cfg.use_posenc = false;
  Model m(cfg);
  Rng rng(9);
  std::vector<double> grid(32 * 32, 0.0);
  for (auto& v : grid) v = rng.uniform();
  auto mem1 = m.encode(grid);

  // swap the pixel content of patch 0 (gy=0,gx=0) and patch 1 (gy=0,gx=1)
  std::vector<double> swapped = grid;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      std::swap(swapped[static_cast<size_t>(y) * 32 + x],
                swapped[static_cast<size_t>(y) * 32 + (8 + x)]);
  auto mem2 = m.encode(swapped);

  for (int j = 0; j < 4; ++j) {
    CHECK(mem2.k_app.at(0, j) == doctest::Approx(mem1.k_app.at(1, j)).epsilon(1e-12));
    CHECK(mem2.k_app.at(1, j) == doctest::Approx(mem1.k_app.at(0, j)).epsilon(1e-12));
    CHECK(mem2.k_app.at(5, j) == doctest::Approx(mem1.k_app.at(5, j)).epsilon(1e-12));
  }
}

TEST_CASE("single-query self-attention reduces to the softmax-weight-one formula") {
  ModelConfig cfg = toy_config();
  Model m(cfg);
  Rng rng(31);
  std::vector<double> qv(8);
  for (auto& v : qv) v = rng.normal();
  Tensor q = Tensor::constant({1, 8}, qv);
  Tensor out = m.self_attention_block(0, q, {0});

  auto P = [&](const std::string& n) { return m.params().get(n); };
  Tensor v = nn::add(nn::matmul(q, P("dec.0.self.wv")), P("dec.0.self.bv"));
  Tensor proj = nn::add(nn::matmul(v, P("dec.0.self.wo")), P("dec.0.self.bo"));
  Tensor expect = nn::layer_norm(nn::add(q, proj), P("dec.0.ln_self.gamma"),
                                 P("dec.0.ln_self.beta"));
  CHECK(out.values() == expect.values());
}

TEST_CASE("padded rows pass through self-attention unchanged") {
  ModelConfig cfg = toy_config();
  Model m(cfg);
  Rng rng(33);
  std::vector<double> qv(3 * 8);
  for (auto& v : qv) v = rng.normal();
  Tensor q = Tensor::constant({3, 8}, qv);
  std::vector<uint8_t> pad = {0, 0, 1};
  Tensor out = m.self_attention_block(0, q, pad);
  for (int j = 0; j < 8; ++j) CHECK(out.at(2, j) == q.at(2, j));
  bool changed = false;
  for (int j = 0; j < 8; ++j) changed = changed || out.at(0, j) != q.at(0, j);
  CHECK(changed);

  CHECK_THROWS_AS(m.self_attention_block(0, q, {1, 1, 1}), NumericError);
}

TEST_CASE("zeroed value projections turn self-attention into LN of the input") {
  ModelConfig cfg = toy_config();
  Model m(cfg);
  zero_param(m, "dec.0.self.wv");
  Rng rng(35);
  std::vector<double> qv(4 * 8);
  for (auto& v : qv) v = rng.normal();
  Tensor q = Tensor::constant({4, 8}, qv);
  Tensor out = m.self_attention_block(0, q, {0, 0, 0, 0});
  Tensor expect = nn::layer_norm(q, m.params().get("dec.0.ln_self.gamma"),
                                 m.params().get("dec.0.ln_self.beta"));
  CHECK(out.values() == expect.values());
}

TEST_CASE("zeroed positional stream ignores spatial keys entirely") {
  ModelConfig cfg = toy_config();
  ToyWorld w(cfg);
  Model& m = w.model;
  zero_param(m, "dec.0.cross.wpq");
  zero_param(m, "dec.0.cross.bpq");
  zero_param(m, "dec.0.cross.wref");

  Tensor x = w.queries.embeddings;
  Tensor ref_enc = sinusoidal_encoding_2d(
      nn::sigmoid(m.reference_points_raw(nn::slice(x, 1, 4, 4))), 4);
  Tensor out1 = m.cross_attention_block(0, x, w.memory, ref_enc, w.queries.pad);

  EncoderMemory tampered = w.memory;
  std::vector<double> kv = tampered.k_pos.values();
  for (auto& v : kv) v = 42.0 - v;
  tampered.k_pos = Tensor::constant(tampered.k_pos.shape(), kv);
  Tensor out2 = m.cross_attention_block(0, x, tampered, ref_enc, w.queries.pad);
  CHECK(out1.values() == out2.values());
}

TEST_CASE("two-stream logit decomposition equals the concatenated dot product") {
  // unit-vector case: logit is exactly 2
  Tensor cq = Tensor::constant({1, 4}, {1, 0, 0, 0});
  Tensor pq = Tensor::constant({1, 4}, {0, 1, 0, 0});
  Tensor q = nn::concat({cq, pq}, 1);
  Tensor logit = nn::matmul(q, nn::transpose(q));
  CHECK(logit.scalar() == 2.0);

  // 100 random block-partitioned instances at machine precision
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 50);
    auto rand_mat = [&](int r, int c) {
      std::vector<double> v(static_cast<size_t>(r) * c);
      for (auto& x : v) x = rng.normal();
      return Tensor::constant({r, c}, v);
    };
    Tensor c_q = rand_mat(3, 5), p_q = rand_mat(3, 7);
    Tensor c_k = rand_mat(4, 5), p_k = rand_mat(4, 7);
    Tensor joint = nn::matmul(nn::concat({c_q, p_q}, 1),
                              nn::transpose(nn::concat({c_k, p_k}, 1)));
    Tensor split = nn::add(nn::matmul(c_q, nn::transpose(c_k)),
                           nn::matmul(p_q, nn::transpose(p_k)));
    for (size_t i = 0; i < joint.numel(); ++i) {
      double a = joint.values()[i], b = split.values()[i];
      CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, std::max(std::abs(a), std::abs(b))));
    }
  }
}

TEST_CASE("block-diagonal single-stream matches dual-stream bit for bit") {
  ModelConfig dual_cfg = toy_config();
  dual_cfg.stream = StreamMode::kDual;
  ToyWorld w(dual_cfg);

  ModelConfig single_cfg = toy_config();
  single_cfg.stream = StreamMode::kSingle;
  Model single(single_cfg);

  // copy every shared parameter from the dual model
  single.params().for_each([&](const std::string& name, Tensor& t) {
    if (w.model.params().has(name))
      t.values_mut() = w.model.params().get(name).values();
  });

  // embed the per-stream projections as a head-interleaved block-diagonal
  // joint projection: head h columns are [c-head-block | p-head-block]
  int d = dual_cfg.d, d_app = dual_cfg.d_app, d_pos = dual_cfg.d_pos;
  int H = dual_cfg.heads, wa = d_app / H, wp = d_pos / H;
  auto embed = [&](const std::string& wc, const std::string& bc, const std::string& wp_name,
                   const std::string& bp, const std::string& wj, const std::string& bj) {
    const auto& wcv = w.model.params().get(wc).values();
    const auto& bcv = w.model.params().get(bc).values();
    const auto& wpv = w.model.params().get(wp_name).values();
    const auto& bpv = w.model.params().get(bp).values();
    auto& wjv = single.params().get(wj).values_mut();
    auto& bjv = single.params().get(bj).values_mut();
    std::fill(wjv.begin(), wjv.end(), 0.0);
    for (int h = 0; h < H; ++h) {
      int base = h * (wa + wp);
      for (int col = 0; col < wa; ++col) {
        for (int row = 0; row < d_app; ++row)
          wjv[static_cast<size_t>(row) * d + base + col] =
              wcv[static_cast<size_t>(row) * d_app + h * wa + col];
        bjv[static_cast<size_t>(base + col)] = bcv[static_cast<size_t>(h * wa + col)];
      }
      for (int col = 0; col < wp; ++col) {
        for (int row = 0; row < d_pos; ++row)
          wjv[static_cast<size_t>(d_app + row) * d + base + wa + col] =
              wpv[static_cast<size_t>(row) * d_pos + h * wp + col];
        bjv[static_cast<size_t>(base + wa + col)] = bpv[static_cast<size_t>(h * wp + col)];
      }
    }
  };
  for (int l = 0; l < dual_cfg.decoder_layers; ++l) {
    std::string base = "dec." + std::to_string(l) + ".cross.";
    embed(base + "wcq", base + "bcq", base + "wpq", base + "bpq", base + "wq", base + "bq");
    embed(base + "wck", base + "bck", base + "wpk", base + "bpk", base + "wk", base + "bk");
  }

  EncoderMemory mem_single = single.encode(scene::render_scene_grid(w.scn, dual_cfg.channels));
  query::QuerySet qs_single = single.build_queries(w.scn, w.prototypes, toy_stub(), 7);

  ForwardResult a = w.model.forward(w.queries, w.memory);
  ForwardResult b = single.forward(qs_single, mem_single);
  REQUIRE(a.layers.size() == b.layers.size());
  for (size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].class_logits.values() == b.layers[l].class_logits.values());
    CHECK(a.layers[l].boxes.values() == b.layers[l].boxes.values());
  }
}

TEST_CASE("reference point strategies") {
  Rng rng(3);
  std::vector<double> qpos_v(3 * 4);
  for (auto& v : qpos_v) v = rng.normal();
  Tensor qpos = Tensor::constant({3, 4}, qpos_v);

  ModelConfig fixed_cfg = toy_config();
  fixed_cfg.strategy = RefPointStrategy::kFixed;
  Model fixed(fixed_cfg);
  Tensor rf = nn::sigmoid(fixed.reference_points_raw(qpos));
  for (size_t i = 0; i < rf.numel(); ++i) CHECK(rf.values()[i] == 0.5);

  ModelConfig glob_cfg = toy_config();
  glob_cfg.strategy = RefPointStrategy::kGlobalLearnable;
  Model glob(glob_cfg);
  Tensor rg = nn::sigmoid(glob.reference_points_raw(qpos));
  for (size_t i = 0; i < rg.numel(); ++i) CHECK(rg.values()[i] == 0.5);
  auto& sstar = glob.params().get("ref.sstar").values_mut();
  sstar[0] = 1.0;
  sstar[1] = -0.5;
  Tensor rg2 = nn::sigmoid(glob.reference_points_raw(qpos));
  for (int i = 0; i < 3; ++i) {
    CHECK(rg2.at(i, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
    CHECK(rg2.at(i, 1) == doctest::Approx(1.0 / (1.0 + std::exp(0.5))));
  }

  ModelConfig poly_cfg = toy_config();
  poly_cfg.strategy = RefPointStrategy::kPolygonPredict;
  Model poly(poly_cfg);
  zero_param(poly, "ref.w1");
  zero_param(poly, "ref.w2");
  Tensor rp = nn::sigmoid(poly.reference_points_raw(qpos));
  for (size_t i = 0; i < rp.numel(); ++i) CHECK(rp.values()[i] == 0.5);

  // with generic weights, different positional blocks map to different points
  Model poly2(poly_cfg);
  Tensor rp2 = nn::sigmoid(poly2.reference_points_raw(qpos));
  bool differs = rp2.at(0, 0) != rp2.at(1, 0) || rp2.at(0, 1) != rp2.at(1, 1);
  CHECK(differs);
  // and all strategies stay strictly inside (0,1)
  for (size_t i = 0; i < rp2.numel(); ++i) {
    CHECK(rp2.values()[i] > 0.0);
    CHECK(rp2.values()[i] < 1.0);
  }
}

TEST_CASE("fusion modes: none, partial, full") {
  Rng rng(8);
  auto rand_mat = [&](int r, int c) {
    std::vector<double> v(static_cast<size_t>(r) * c);
    for (auto& x : v) x = rng.normal();
    return Tensor::constant({r, c}, v);
  };
  Tensor q = rand_mat(3, 8), f = rand_mat(3, 8);
  std::vector<uint8_t> live = {0, 0, 0};

  ModelConfig none_cfg = toy_config();
  none_cfg.fusion = FusionMode::kNone;
  Model none(none_cfg);
  Tensor out_none = none.fusion_update(0, q, f, live);
  CHECK(out_none.values() == nn::add(q, f).values());

  ModelConfig part_cfg = toy_config();
  part_cfg.fusion = FusionMode::kPartial;
  Model part(part_cfg);
  Tensor out_part = part.fusion_update(0, q, f, live);
  for (int i = 0; i < 3; ++i)
    for (int j = 4; j < 8; ++j) CHECK(out_part.at(i, j) == q.at(i, j));

  // identity-embedded FFN: relu(x) - relu(-x) = x, so FFN(LN(q)) = LN(q)
  ModelConfig full_cfg = toy_config();
  full_cfg.fusion = FusionMode::kFull;
  Model full(full_cfg);
  auto& w1 = full.params().get("dec.0.fuse.w1").values_mut();
  auto& w2 = full.params().get("dec.0.fuse.w2").values_mut();
  std::fill(w1.begin(), w1.end(), 0.0);
  std::fill(w2.begin(), w2.end(), 0.0);
  int d = 8, hidden = 32;
  for (int i = 0; i < d; ++i) {
    w1[static_cast<size_t>(i) * hidden + i] = 1.0;        // +x block
    w1[static_cast<size_t>(i) * hidden + d + i] = -1.0;   // -x block
    w2[static_cast<size_t>(i) * d + i] = 1.0;
    w2[static_cast<size_t>(d + i) * d + i] = -1.0;
  }
  Tensor zero_f = Tensor::zeros({3, 8});
  Tensor out_full = full.fusion_update(0, q, zero_f, live);
  Tensor expect = nn::layer_norm(q, full.params().get("dec.0.fuse.ln.gamma"),
                                 full.params().get("dec.0.fuse.ln.beta"));
  for (size_t i = 0; i < expect.numel(); ++i)
    CHECK(out_full.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));

  CHECK_THROWS_AS(full.fusion_update(0, q, rand_mat(2, 8), {0, 0}), ShapeError);
}

TEST_CASE("zero-init heads give uniform logits and boxes at the reference point") {
  ModelConfig cfg = toy_config();
  cfg.strategy = RefPointStrategy::kFixed;
  ToyWorld w(cfg);
  for (const char* name : {"heads.cls.w", "heads.cls.b", "heads.box.w1", "heads.box.b1",
                           "heads.box.w2", "heads.box.b2", "heads.box.w3", "heads.box.b3"})
    zero_param(w.model, name);
  ForwardResult r = w.model.forward(w.queries, w.memory);
  const LayerOutput& last = r.layers.back();
  for (int i = 0; i < w.queries.count; ++i) {
    for (int c = 0; c <= cfg.n_classes; ++c) CHECK(last.class_logits.at(i, c) == 0.0);
    CHECK(last.boxes.at(i, 0) == 0.5);
    CHECK(last.boxes.at(i, 1) == 0.5);
    CHECK(last.boxes.at(i, 2) == 0.5);
    CHECK(last.boxes.at(i, 3) == 0.5);
  }
}

TEST_CASE("forward emits one detection set per decoder layer, deterministically") {
  ModelConfig cfg = toy_config();
  cfg.decoder_layers = 6;
  ToyWorld w(cfg);
  ForwardResult r1 = w.model.forward(w.queries, w.memory);
  CHECK(r1.layers.size() == 6);
  for (const auto& layer : r1.layers) {
    CHECK(layer.class_logits.shape() == std::vector<int>{4, 4});
    CHECK(layer.boxes.shape() == std::vector<int>{4, 4});
  }
  ForwardResult r2 = w.model.forward(w.queries, w.memory);
  for (size_t l = 0; l < 6; ++l) {
    CHECK(r1.layers[l].class_logits.values() == r2.layers[l].class_logits.values());
    CHECK(r1.layers[l].boxes.values() == r2.layers[l].boxes.values());
  }
  // boxes are always valid
  for (int i = 0; i < 4; ++i) {
    CHECK(r1.layers[0].boxes.at(i, 0) <= r1.layers[0].boxes.at(i, 2));
    CHECK(r1.layers[0].boxes.at(i, 1) <= r1.layers[0].boxes.at(i, 3));
  }
}

TEST_CASE("full model gradient check at toy dimensions") {
  ModelConfig cfg = toy_config();
  ToyWorld w(cfg);
  std::vector<loss::GtObject> gts = loss::gt_objects(w.scn);
  REQUIRE(!gts.empty());

  loss::MatchWeights weights;
  loss::FocalParams focal;
  auto grid = scene::render_scene_grid(w.scn, cfg.channels);

  // pin the assignment so finite differences probe a fixed matching
  auto initial = loss::composite_loss(w.model.forward(w.queries, w.memory), w.queries.pad,
                                      gts, weights, focal, cfg.n_classes);
  auto fixed = initial.assignments;

  auto loss_fn = [&]() {
    query::QuerySet qs = w.model.build_queries(w.scn, w.prototypes, toy_stub(), 7);
    EncoderMemory mem = w.model.encode(grid);
    ForwardResult fwd = w.model.forward(qs, mem);
    return loss::composite_loss(fwd, qs.pad, gts, weights, focal, cfg.n_classes, &fixed)
        .loss;
  };
  auto report = nn::grad_check(loss_fn, w.model.params(), 1e-5, 1e-4);
  for (const auto& e : report.entries) {
    INFO(e.name << " rel error " << e.max_rel_error);
    CHECK(e.pass);
  }
  CHECK(report.all_pass);
}

#include "model.hpp"

#include <cmath>

#include "errors.hpp"

namespace polydet::model {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Parameter factory: one RNG consumed in a fixed creation order keeps
// initialization deterministic for a given seed.
struct Init {
  Rng rng;
  nn::ParameterStore& store;

  Init(uint64_t seed, nn::ParameterStore& s) : rng(seed), store(s) {}

  nn::Tensor xavier(const std::string& name, int in, int out) {
    double a = std::sqrt(6.0 / (in + out));
    std::vector<double> v(static_cast<size_t>(in) * out);
    for (auto& x : v) x = rng.uniform(-a, a);
    return store.create(name, {in, out}, std::move(v));
  }
  nn::Tensor zeros(const std::string& name, std::vector<int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return store.create(name, std::move(shape), std::vector<double>(n, 0.0));
  }
  nn::Tensor ones(const std::string& name, std::vector<int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return store.create(name, std::move(shape), std::vector<double>(n, 1.0));
  }
  void attention_block(const std::string& prefix, int dim) {
    xavier(prefix + ".wq", dim, dim);
    zeros(prefix + ".bq", {dim});
    xavier(prefix + ".wk", dim, dim);
    zeros(prefix + ".bk", {dim});
    xavier(prefix + ".wv", dim, dim);
    zeros(prefix + ".bv", {dim});
    xavier(prefix + ".wo", dim, dim);
    zeros(prefix + ".bo", {dim});
  }
  void layer_norm_block(const std::string& prefix, int dim) {
    ones(prefix + ".gamma", {dim});
    zeros(prefix + ".beta", {dim});
  }
};

nn::Tensor linear(const nn::Tensor& x, const nn::Tensor& w, const nn::Tensor& b) {
  return nn::add(nn::matmul(x, w), b);
}

// Row-wise select: computed where keep, fallback on pad rows. No-op when
// nothing is padded.
nn::Tensor where_rows(const std::vector<uint8_t>& pad, const nn::Tensor& computed,
                      const nn::Tensor& fallback) {
  bool any = false;
  for (uint8_t p : pad) any = any || (p != 0);
  if (!any) return computed;
  int n = computed.rows(), d = computed.cols();
  std::vector<double> keep(static_cast<size_t>(n) * d), drop(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      keep[static_cast<size_t>(i) * d + j] = pad[static_cast<size_t>(i)] ? 0.0 : 1.0;
      drop[static_cast<size_t>(i) * d + j] = pad[static_cast<size_t>(i)] ? 1.0 : 0.0;
    }
  return nn::add(nn::mul(computed, nn::Tensor::constant({n, d}, std::move(keep))),
                 nn::mul(fallback, nn::Tensor::constant({n, d}, std::move(drop))));
}

// Shared multi-head scaled-dot-product core. Per-head query/key tensors are
// provided by the caller; values and the output projection are joint. Both
// stream modes and the encoder run through this same path.
nn::Tensor attention_core(const std::vector<nn::Tensor>& q_heads,
                          const std::vector<nn::Tensor>& k_heads,
                          const nn::Tensor& values_full, const nn::Tensor& wo,
                          const nn::Tensor& bo, const nn::Tensor& key_mask,
                          double scale, std::vector<double>* diag_weights) {
  int heads = static_cast<int>(q_heads.size());
  int dv = values_full.cols() / heads;
  std::vector<nn::Tensor> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    nn::Tensor logits =
        nn::scale(nn::matmul(q_heads[static_cast<size_t>(h)],
                             nn::transpose(k_heads[static_cast<size_t>(h)])),
                  scale);
    nn::Tensor weights = nn::softmax(logits, 1, key_mask);
    if (diag_weights) {
      if (diag_weights->empty()) diag_weights->assign(weights.numel(), 0.0);
      for (size_t i = 0; i < weights.numel(); ++i)
        (*diag_weights)[i] += weights.values()[i] / heads;
    }
    outs.push_back(nn::matmul(weights, nn::slice(values_full, 1, h * dv, dv)));
  }
  nn::Tensor merged = heads == 1 ? outs[0] : nn::concat(outs, 1);
  return linear(merged, wo, bo);
}

std::vector<nn::Tensor> split_heads(const nn::Tensor& x, int heads) {
  int w = x.cols() / heads;
  std::vector<nn::Tensor> out;
  out.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) out.push_back(nn::slice(x, 1, h * w, w));
  return out;
}

}  // namespace

const char* strategy_name(RefPointStrategy s) {
  switch (s) {
    case RefPointStrategy::kFixed: return "fixed";
    case RefPointStrategy::kGlobalLearnable: return "global_learnable";
    case RefPointStrategy::kPolygonPredict: return "polygon_predict";
  }
  return "?";
}

const char* stream_name(StreamMode s) {
  return s == StreamMode::kSingle ? "single" : "dual";
}

const char* fusion_name(FusionMode f) {
  switch (f) {
    case FusionMode::kNone: return "none";
    case FusionMode::kPartial: return "partial";
    case FusionMode::kFull: return "full";
  }
  return "?";
}

RefPointStrategy strategy_from_name(const std::string& s) {
  if (s == "fixed") return RefPointStrategy::kFixed;
  if (s == "global_learnable") return RefPointStrategy::kGlobalLearnable;
  if (s == "polygon_predict") return RefPointStrategy::kPolygonPredict;
  throw UsageError("unknown reference point strategy '" + s + "'");
}

StreamMode stream_from_name(const std::string& s) {
  if (s == "single") return StreamMode::kSingle;
  if (s == "dual") return StreamMode::kDual;
  throw UsageError("unknown stream mode '" + s + "'");
}

FusionMode fusion_from_name(const std::string& s) {
  if (s == "none") return FusionMode::kNone;
  if (s == "partial") return FusionMode::kPartial;
  if (s == "full") return FusionMode::kFull;
  throw UsageError("unknown fusion mode '" + s + "'");
}

void ModelConfig::validate() const {
  if (d != d_app + d_pos)
    throw UsageError("model config: d must equal d_app + d_pos");
  if (d % 4 != 0 || d_pos % 4 != 0)
    throw UsageError("model config: d and d_pos must be divisible by 4");
  if (d_app % heads != 0 || d_pos % heads != 0)
    throw UsageError("model config: d_app and d_pos must be divisible by heads");
  if (canvas % patch != 0)
    throw UsageError("model config: canvas must be divisible by patch size");
  if (!use_appearance && !use_positional && !use_random)
    throw UsageError("model config: at least one query type must be enabled");
  if (n_classes < 1 || decoder_layers < 1 || encoder_layers < 0 || heads < 1)
    throw UsageError("model config: bad layer/head/class counts");
  if (polygon_vertices < 3)
    throw UsageError("model config: polygon_vertices must be >= 3");
}

nn::Tensor sinusoidal_encoding_2d(const nn::Tensor& xy, int dim) {
  if (dim % 4 != 0) throw ShapeError("sinusoidal encoding dim must be divisible by 4");
  int n = xy.rows();
  int m = dim / 4;
  std::vector<double> freq_v(static_cast<size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      freq_v[static_cast<size_t>(i) * m + j] = kPi * std::pow(2.0, j);
  nn::Tensor freq = nn::Tensor::constant({n, m}, std::move(freq_v));

  auto expand = [&](int col) {
    nn::Tensor c = nn::slice(xy, 1, col, 1);
    if (m == 1) return c;
    std::vector<nn::Tensor> copies(static_cast<size_t>(m), c);
    return nn::concat(copies, 1);
  };
  nn::Tensor xs = nn::mul(expand(0), freq);
  nn::Tensor ys = nn::mul(expand(1), freq);
  return nn::concat({nn::sin(xs), nn::cos(xs), nn::sin(ys), nn::cos(ys)}, 1);
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Init init(mix_seed(cfg.init_seed, 0x90de1ULL), params_);

  int d = cfg.d, d_app = cfg.d_app, d_pos = cfg.d_pos;
  int patch_in = cfg.patch * cfg.patch * cfg.channels;

  // encoder
  init.xavier("enc.embed.w", patch_in, d);
  init.zeros("enc.embed.b", {d});
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    std::string base = "enc." + std::to_string(l);
    init.attention_block(base + ".attn", d);
    init.layer_norm_block(base + ".ln1", d);
    init.xavier(base + ".ffn.w1", d, 4 * d);
    init.zeros(base + ".ffn.b1", {4 * d});
    init.xavier(base + ".ffn.w2", 4 * d, d);
    init.zeros(base + ".ffn.b2", {d});
    init.layer_norm_block(base + ".ln2", d);
  }
  init.xavier("enc.kapp.w", d, d_app);
  init.zeros("enc.kapp.b", {d_app});
  init.xavier("enc.kpos.w", d_pos, d_pos);
  init.zeros("enc.kpos.b", {d_pos});

  // decoder
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    std::string base = "dec." + std::to_string(l);
    init.attention_block(base + ".self", d);
    init.layer_norm_block(base + ".ln_self", d);
    if (cfg.stream == StreamMode::kDual) {
      init.xavier(base + ".cross.wcq", d_app, d_app);
      init.zeros(base + ".cross.bcq", {d_app});
      init.xavier(base + ".cross.wck", d_app, d_app);
      init.zeros(base + ".cross.bck", {d_app});
      init.xavier(base + ".cross.wpq", d_pos, d_pos);
      init.zeros(base + ".cross.bpq", {d_pos});
      init.xavier(base + ".cross.wpk", d_pos, d_pos);
      init.zeros(base + ".cross.bpk", {d_pos});
    } else {
      init.xavier(base + ".cross.wq", d, d);
      init.zeros(base + ".cross.bq", {d});
      init.xavier(base + ".cross.wk", d, d);
      init.zeros(base + ".cross.bk", {d});
    }
    init.xavier(base + ".cross.wref", d_pos, d_pos);
    init.xavier(base + ".cross.wv", d, d);
    init.zeros(base + ".cross.bv", {d});
    init.xavier(base + ".cross.wo", d, d);
    init.zeros(base + ".cross.bo", {d});
    init.layer_norm_block(base + ".ln_cross", d);
    if (cfg.fusion == FusionMode::kFull) {
      init.layer_norm_block(base + ".fuse.ln", d);
      init.xavier(base + ".fuse.w1", d, 4 * d);
      init.zeros(base + ".fuse.b1", {4 * d});
      init.xavier(base + ".fuse.w2", 4 * d, d);
      init.zeros(base + ".fuse.b2", {d});
    } else if (cfg.fusion == FusionMode::kPartial) {
      init.layer_norm_block(base + ".fuse.ln", d_app);
      init.xavier(base + ".fuse.w1", d_app, 4 * d_app);
      init.zeros(base + ".fuse.b1", {4 * d_app});
      init.xavier(base + ".fuse.w2", 4 * d_app, d_app);
      init.zeros(base + ".fuse.b2", {d_app});
    }
  }

  // reference points
  if (cfg.strategy == RefPointStrategy::kGlobalLearnable) {
    init.zeros("ref.sstar", {1, 2});
  } else if (cfg.strategy == RefPointStrategy::kPolygonPredict) {
    init.xavier("ref.w1", d_pos, cfg.ref_hidden);
    init.zeros("ref.b1", {cfg.ref_hidden});
    init.xavier("ref.w2", cfg.ref_hidden, 2);
    init.zeros("ref.b2", {2});
  }

  // shared prediction heads
  init.xavier("heads.cls.w", d, cfg.n_classes + 1);
  init.zeros("heads.cls.b", {cfg.n_classes + 1});
  init.xavier("heads.box.w1", d, d);
  init.zeros("heads.box.b1", {d});
  init.xavier("heads.box.w2", d, d);
  init.zeros("heads.box.b2", {d});
  init.xavier("heads.box.w3", d, 4);
  init.zeros("heads.box.b3", {4});

  // query construction parameters
  if (cfg.use_appearance) {
    query_params_.proj_w = init.xavier("query.proj.w", cfg.d_f, d_app);
    query_params_.proj_b = init.zeros("query.proj.b", {d_app});
  }
  if (cfg.use_appearance || cfg.use_positional) {
    int k2 = 2 * cfg.polygon_vertices;
    query_params_.mlp_w1 = init.xavier("query.mlp.w1", k2, cfg.pos_mlp_hidden);
    query_params_.mlp_b1 = init.zeros("query.mlp.b1", {cfg.pos_mlp_hidden});
    query_params_.mlp_w2 = init.xavier("query.mlp.w2", cfg.pos_mlp_hidden, d_pos);
    query_params_.mlp_b2 = init.zeros("query.mlp.b2", {d_pos});
  }
  if (cfg.use_positional) {
    query_params_.content_free = init.zeros("query.content_free", {1, d_app});
  }
  if (cfg.use_random) {
    query_params_.random_q =
        query::init_random_queries(params_, cfg.n_random, d, cfg.init_seed);
  }
}

EncoderMemory Model::encode(const std::vector<double>& grid) const {
  const ModelConfig& c = cfg_;
  size_t expect = static_cast<size_t>(c.canvas) * c.canvas * c.channels;
  if (grid.size() != expect)
    throw ShapeError("encode: grid has " + std::to_string(grid.size()) +
                     " values, expected " + std::to_string(expect));
  int side = c.canvas / c.patch;
  int native_tokens = side * side;
  int patch_in = c.patch * c.patch * c.channels;

  std::vector<double> patches(static_cast<size_t>(native_tokens) * patch_in);
  std::vector<double> centers(static_cast<size_t>(native_tokens) * 2);
  for (int gy = 0; gy < side; ++gy) {
    for (int gx = 0; gx < side; ++gx) {
      int t = gy * side + gx;
      centers[static_cast<size_t>(t) * 2] = (gx + 0.5) / side;
      centers[static_cast<size_t>(t) * 2 + 1] = (gy + 0.5) / side;
      double* dst = patches.data() + static_cast<size_t>(t) * patch_in;
      for (int y = 0; y < c.patch; ++y)
        for (int x = 0; x < c.patch; ++x)
          for (int ch = 0; ch < c.channels; ++ch)
            *dst++ = grid[(static_cast<size_t>(gy * c.patch + y) * c.canvas +
                           (gx * c.patch + x)) *
                              c.channels +
                          ch];
    }
  }

  nn::Tensor tokens = linear(nn::Tensor::constant({native_tokens, patch_in}, std::move(patches)),
                             p("enc.embed.w"), p("enc.embed.b"));
  nn::Tensor center_t = nn::Tensor::constant({native_tokens, 2}, centers);
  if (c.use_posenc)
    tokens = nn::add(tokens, sinusoidal_encoding_2d(center_t, c.d));

  double scale = 1.0 / std::sqrt(static_cast<double>(c.d) / c.heads);
  for (int l = 0; l < c.encoder_layers; ++l) {
    std::string base = "enc." + std::to_string(l);
    nn::Tensor q = linear(tokens, p(base + ".attn.wq"), p(base + ".attn.bq"));
    nn::Tensor k = linear(tokens, p(base + ".attn.wk"), p(base + ".attn.bk"));
    nn::Tensor v = linear(tokens, p(base + ".attn.wv"), p(base + ".attn.bv"));
    nn::Tensor attn =
        attention_core(split_heads(q, c.heads), split_heads(k, c.heads), v,
                       p(base + ".attn.wo"), p(base + ".attn.bo"), nn::Tensor(),
                       scale, nullptr);
    tokens = nn::layer_norm(nn::add(tokens, attn), p(base + ".ln1.gamma"),
                            p(base + ".ln1.beta"));
    nn::Tensor h = nn::relu(linear(tokens, p(base + ".ffn.w1"), p(base + ".ffn.b1")));
    nn::Tensor ffn = linear(h, p(base + ".ffn.w2"), p(base + ".ffn.b2"));
    tokens = nn::layer_norm(nn::add(tokens, ffn), p(base + ".ln2.gamma"),
                            p(base + ".ln2.beta"));
  }

  EncoderMemory mem;
  mem.tokens = tokens;
  mem.k_app = linear(tokens, p("enc.kapp.w"), p("enc.kapp.b"));
  mem.k_pos = linear(sinusoidal_encoding_2d(center_t, c.d_pos), p("enc.kpos.w"),
                     p("enc.kpos.b"));
  mem.centers = std::move(centers);
  return mem;
}

query::QuerySet Model::build_queries(const scene::Scene& s, const nn::Tensor& prototypes,
                                     const query::StubConfig& stub_cfg,
                                     uint64_t stub_seed) const {
  const ModelConfig& c = cfg_;
  std::vector<query::Proposal> proposals;
  if (c.use_appearance || c.use_positional)
    proposals = query::detector_stub(s, prototypes, stub_cfg, mix_seed(stub_seed, 0xD1ULL));

  query::AppearanceBlock app;
  query::PositionalBlock pos;
  if (c.use_appearance)
    app = query::build_appearance_queries(proposals, c.cap_appearance,
                                          query_params_.proj_w, query_params_.proj_b);
  if (c.use_positional) {
    auto seg = query::segmenter_stub(s, proposals, stub_cfg, mix_seed(stub_seed, 0x5AULL));
    pos = query::build_positional_queries(seg.masks, c.epsilon, c.polygon_vertices,
                                          query_params_, c.cap_positional);
  }

  query::AssembleSpec spec;
  spec.cap_appearance = c.use_appearance ? c.cap_appearance : 0;
  spec.cap_positional = c.use_positional ? c.cap_positional : 0;
  spec.n_random = c.use_random ? c.n_random : 0;
  spec.d_app = c.d_app;
  spec.d_pos = c.d_pos;
  spec.polygon_vertices = c.polygon_vertices;
  return query::assemble_query_set(c.use_appearance ? &app : nullptr,
                                   c.use_positional ? &pos : nullptr, query_params_,
                                   spec);
}

nn::Tensor Model::reference_points_raw(const nn::Tensor& q_pos_block) const {
  int n = q_pos_block.rows();
  switch (cfg_.strategy) {
    case RefPointStrategy::kFixed:
      return nn::Tensor::zeros({n, 2});
    case RefPointStrategy::kGlobalLearnable: {
      nn::Tensor s = p("ref.sstar");
      if (n == 1) return s;
      std::vector<nn::Tensor> rows(static_cast<size_t>(n), s);
      return nn::concat(rows, 0);
    }
    case RefPointStrategy::kPolygonPredict: {
      nn::Tensor h = nn::relu(linear(q_pos_block, p("ref.w1"), p("ref.b1")));
      return linear(h, p("ref.w2"), p("ref.b2"));
    }
  }
  throw UsageError("unreachable strategy");
}

nn::Tensor Model::self_attention_block(int layer, const nn::Tensor& q,
                                       const std::vector<uint8_t>& pad) const {
  const ModelConfig& c = cfg_;
  int n = q.rows();
  bool any_live = false;
  for (uint8_t pd : pad) any_live = any_live || (pd == 0);
  if (!any_live) throw NumericError("self-attention: all queries are masked");

  std::vector<double> mask_v(static_cast<size_t>(n) * n, 1.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (pad[static_cast<size_t>(j)]) mask_v[static_cast<size_t>(i) * n + j] = 0.0;
  nn::Tensor mask = nn::Tensor::constant({n, n}, std::move(mask_v));

  double scale = 1.0 / std::sqrt(static_cast<double>(c.d) / c.heads);
  std::string base = "dec." + std::to_string(layer);
  nn::Tensor sq = linear(q, p(base + ".self.wq"), p(base + ".self.bq"));
  nn::Tensor sk = linear(q, p(base + ".self.wk"), p(base + ".self.bk"));
  nn::Tensor sv = linear(q, p(base + ".self.wv"), p(base + ".self.bv"));
  nn::Tensor out =
      attention_core(split_heads(sq, c.heads), split_heads(sk, c.heads), sv,
                     p(base + ".self.wo"), p(base + ".self.bo"), mask, scale, nullptr);
  nn::Tensor x = nn::layer_norm(nn::add(q, out), p(base + ".ln_self.gamma"),
                                p(base + ".ln_self.beta"));
  return where_rows(pad, x, q);
}

nn::Tensor Model::cross_attention_block(int layer, const nn::Tensor& x,
                                        const EncoderMemory& memory,
                                        const nn::Tensor& ref_enc,
                                        const std::vector<uint8_t>& pad,
                                        std::vector<double>* diag) const {
  const ModelConfig& c = cfg_;
  double scale = 1.0 / std::sqrt(static_cast<double>(c.d) / c.heads);
  std::string base = "dec." + std::to_string(layer);

  nn::Tensor x_sem = nn::slice(x, 1, 0, c.d_app);
  nn::Tensor x_pos = nn::add(nn::slice(x, 1, c.d_app, c.d_pos),
                             nn::matmul(ref_enc, p(base + ".cross.wref")));
  std::vector<nn::Tensor> q_heads, k_heads;
  if (c.stream == StreamMode::kDual) {
    // Per-stream projections; each head sees its [semantic | positional]
    // block pair, and the summed two-stream logit is computed as one dot
    // product over the concatenated blocks.
    nn::Tensor cq = linear(x_sem, p(base + ".cross.wcq"), p(base + ".cross.bcq"));
    nn::Tensor pq = linear(x_pos, p(base + ".cross.wpq"), p(base + ".cross.bpq"));
    nn::Tensor ck = linear(memory.k_app, p(base + ".cross.wck"), p(base + ".cross.bck"));
    nn::Tensor pk = linear(memory.k_pos, p(base + ".cross.wpk"), p(base + ".cross.bpk"));
    int wa = c.d_app / c.heads, wp = c.d_pos / c.heads;
    for (int h = 0; h < c.heads; ++h) {
      q_heads.push_back(
          nn::concat({nn::slice(cq, 1, h * wa, wa), nn::slice(pq, 1, h * wp, wp)}, 1));
      k_heads.push_back(
          nn::concat({nn::slice(ck, 1, h * wa, wa), nn::slice(pk, 1, h * wp, wp)}, 1));
    }
  } else {
    nn::Tensor qj = linear(nn::concat({x_sem, x_pos}, 1), p(base + ".cross.wq"),
                           p(base + ".cross.bq"));
    nn::Tensor kj = linear(nn::concat({memory.k_app, memory.k_pos}, 1),
                           p(base + ".cross.wk"), p(base + ".cross.bk"));
    q_heads = split_heads(qj, c.heads);
    k_heads = split_heads(kj, c.heads);
  }
  nn::Tensor values = linear(memory.tokens, p(base + ".cross.wv"), p(base + ".cross.bv"));
  nn::Tensor out = attention_core(q_heads, k_heads, values, p(base + ".cross.wo"),
                                  p(base + ".cross.bo"), nn::Tensor(), scale, diag);
  nn::Tensor f = nn::layer_norm(nn::add(x, out), p(base + ".ln_cross.gamma"),
                                p(base + ".ln_cross.beta"));
  return where_rows(pad, f, x);
}

nn::Tensor Model::fusion_update(int layer, const nn::Tensor& q, const nn::Tensor& f,
                                const std::vector<uint8_t>& pad) const {
  const ModelConfig& c = cfg_;
  if (q.shape() != f.shape())
    throw ShapeError("fusion_update: shape mismatch " + nn::shape_string(q.shape()) +
                     " vs " + nn::shape_string(f.shape()));
  std::string base = "dec." + std::to_string(layer);
  nn::Tensor fused;
  if (c.fusion == FusionMode::kNone) {
    fused = nn::add(q, f);
  } else if (c.fusion == FusionMode::kFull) {
    nn::Tensor pre = nn::layer_norm(nn::add(q, f), p(base + ".fuse.ln.gamma"),
                                    p(base + ".fuse.ln.beta"));
    nn::Tensor h = nn::relu(linear(pre, p(base + ".fuse.w1"), p(base + ".fuse.b1")));
    fused = linear(h, p(base + ".fuse.w2"), p(base + ".fuse.b2"));
  } else {  // partial: semantic channels only, positional pass through
    nn::Tensor sem_sum =
        nn::add(nn::slice(q, 1, 0, c.d_app), nn::slice(f, 1, 0, c.d_app));
    nn::Tensor pre = nn::layer_norm(sem_sum, p(base + ".fuse.ln.gamma"),
                                    p(base + ".fuse.ln.beta"));
    nn::Tensor h = nn::relu(linear(pre, p(base + ".fuse.w1"), p(base + ".fuse.b1")));
    nn::Tensor sem_out = linear(h, p(base + ".fuse.w2"), p(base + ".fuse.b2"));
    fused = nn::concat({sem_out, nn::slice(q, 1, c.d_app, c.d_pos)}, 1);
  }
  return where_rows(pad, fused, q);
}

ForwardResult Model::forward(const query::QuerySet& queries, const EncoderMemory& memory,
                             bool want_diagnostics) const {
  const ModelConfig& c = cfg_;
  if (queries.d_app != c.d_app || queries.d_pos != c.d_pos)
    throw ShapeError("forward: query channel split does not match the model");
  bool any_live = false;
  for (uint8_t pd : queries.pad) any_live = any_live || (pd == 0);
  if (!any_live) throw NumericError("forward: all queries are masked");

  ForwardResult result;
  nn::Tensor q_cur = queries.embeddings;

  // reference points: once, strategy-dependent, from the initial positional block
  nn::Tensor q_pos0 = nn::slice(q_cur, 1, c.d_app, c.d_pos);
  nn::Tensor s_raw = reference_points_raw(q_pos0);
  nn::Tensor ref = nn::sigmoid(s_raw);
  nn::Tensor ref_enc = sinusoidal_encoding_2d(ref, c.d_pos);
  result.ref_points = ref;
  result.ref_raw = s_raw;

  nn::Tensor s_x = nn::slice(s_raw, 1, 0, 1);
  nn::Tensor s_y = nn::slice(s_raw, 1, 1, 1);

  for (int l = 0; l < c.decoder_layers; ++l) {
    nn::Tensor x = self_attention_block(l, q_cur, queries.pad);
    std::vector<double> diag;
    nn::Tensor f = cross_attention_block(l, x, memory, ref_enc, queries.pad,
                                         want_diagnostics ? &diag : nullptr);
    if (want_diagnostics) result.cross_attention.push_back(std::move(diag));
    nn::Tensor q_next = fusion_update(l, q_cur, f, queries.pad);

    // shared prediction heads on this layer's output
    LayerOutput layer;
    layer.class_logits = linear(q_next, p("heads.cls.w"), p("heads.cls.b"));
    nn::Tensor b1 = nn::relu(linear(q_next, p("heads.box.w1"), p("heads.box.b1")));
    nn::Tensor b2 = nn::relu(linear(b1, p("heads.box.w2"), p("heads.box.b2")));
    nn::Tensor disp = linear(b2, p("heads.box.w3"), p("heads.box.b3"));
    nn::Tensor xa = nn::sigmoid(nn::add(s_x, nn::slice(disp, 1, 0, 1)));
    nn::Tensor ya = nn::sigmoid(nn::add(s_y, nn::slice(disp, 1, 1, 1)));
    nn::Tensor xb = nn::sigmoid(nn::add(s_x, nn::slice(disp, 1, 2, 1)));
    nn::Tensor yb = nn::sigmoid(nn::add(s_y, nn::slice(disp, 1, 3, 1)));
    layer.boxes = nn::concat({nn::minimum(xa, xb), nn::minimum(ya, yb),
                              nn::maximum(xa, xb), nn::maximum(ya, yb)},
                             1);
    result.layers.push_back(std::move(layer));
    q_cur = q_next;
  }
  return result;
}

}  // namespace polydet::model

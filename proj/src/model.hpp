#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "optim.hpp"
#include "query.hpp"
#include "scene.hpp"
#include "tensor.hpp"

namespace polydet::model {

enum class RefPointStrategy { kFixed, kGlobalLearnable, kPolygonPredict };
enum class StreamMode { kSingle, kDual };
enum class FusionMode { kNone, kPartial, kFull };

const char* strategy_name(RefPointStrategy s);
const char* stream_name(StreamMode s);
const char* fusion_name(FusionMode f);
RefPointStrategy strategy_from_name(const std::string& s);
StreamMode stream_from_name(const std::string& s);
FusionMode fusion_from_name(const std::string& s);

struct ModelConfig {
  int d = 64;
  int d_app = 32;
  int d_pos = 32;
  int heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 6;
  int patch = 8;
  int canvas = 64;
  int channels = 3;
  int n_classes = 5;
  int polygon_vertices = 16;  // K
  int pos_mlp_hidden = 64;
  int ref_hidden = 32;
  int cap_appearance = 10;
  int cap_positional = 10;
  int n_random = 10;
  int d_f = 32;
  bool use_appearance = true;
  bool use_positional = true;
  bool use_random = true;
  RefPointStrategy strategy = RefPointStrategy::kPolygonPredict;
  StreamMode stream = StreamMode::kDual;
  FusionMode fusion = FusionMode::kFull;
  double epsilon = 0.01;   // boundary simplification tolerance
  bool use_posenc = true;  // add position encodings to encoder tokens
  uint64_t init_seed = 1;

  int tokens() const { return (canvas / patch) * (canvas / patch); }
  int max_queries() const {
    return (use_appearance ? cap_appearance : 0) +
           (use_positional ? cap_positional : 0) + (use_random ? n_random : 0);
  }
  void validate() const;
};

struct EncoderMemory {
  nn::Tensor tokens;  // L x d
  nn::Tensor k_app;   // L x d_app
  nn::Tensor k_pos;   // L x d_pos
  std::vector<double> centers;  // L*2 normalized patch centers
};

struct LayerOutput {
  nn::Tensor class_logits;  // N x (n_classes+1), background last
  nn::Tensor boxes;         // N x 4 (x1,y1,x2,y2)
};

struct ForwardResult {
  std::vector<LayerOutput> layers;  // one per decoder layer
  nn::Tensor ref_points;            // N x 2, sigmoid-normalized
  nn::Tensor ref_raw;               // N x 2, pre-sigmoid
  // diagnostics (head-averaged cross-attention weights per layer)
  std::vector<std::vector<double>> cross_attention;
};

// Sinusoidal 2-D encoding of normalized coordinates; dim must be divisible
// by 4. Differentiable in xy.
nn::Tensor sinusoidal_encoding_2d(const nn::Tensor& xy, int dim);

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return params_; }
  const query::QueryParams& query_params() const { return query_params_; }

  // Patch-embeds the rendered scene grid and runs the dense self-attention
  // encoder; keys for both attention streams are projected once per scene.
  EncoderMemory encode(const std::vector<double>& grid) const;

  // Builds the query set from stub proposals for one scene.
  query::QuerySet build_queries(const scene::Scene& s, const nn::Tensor& prototypes,
                                const query::StubConfig& stub_cfg,
                                uint64_t stub_seed) const;

  // Full decoder pass: self-attention, cross-attention (dual or single
  // stream), fusion update and shared prediction heads per layer. Reference
  // points are computed once from the initial positional blocks.
  ForwardResult forward(const query::QuerySet& queries, const EncoderMemory& memory,
                        bool want_diagnostics = false) const;

  // Reference points for a given positional block, per configured strategy.
  nn::Tensor reference_points_raw(const nn::Tensor& q_pos_block) const;

  // Decoder building blocks, exposed for direct testing. Pad rows pass
  // through every block unchanged.
  nn::Tensor self_attention_block(int layer, const nn::Tensor& q,
                                  const std::vector<uint8_t>& pad) const;
  nn::Tensor cross_attention_block(int layer, const nn::Tensor& x,
                                   const EncoderMemory& memory,
                                   const nn::Tensor& ref_enc,
                                   const std::vector<uint8_t>& pad,
                                   std::vector<double>* diag = nullptr) const;
  nn::Tensor fusion_update(int layer, const nn::Tensor& q, const nn::Tensor& f,
                           const std::vector<uint8_t>& pad) const;

 private:
  ModelConfig cfg_;
  nn::ParameterStore params_;
  query::QueryParams query_params_;

  nn::Tensor p(const std::string& name) const { return params_.get(name); }
};

}  // namespace polydet::model

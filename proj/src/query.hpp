#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "optim.hpp"
#include "scene.hpp"
#include "tensor.hpp"

namespace polydet::query {

// Realism knobs for the detector/segmenter stand-ins. Zeroing every knob and
// setting p_detect=1 makes the query pipeline a pure function of the scene.
struct StubConfig {
  double p_detect = 0.9;
  double feature_noise = 0.1;    // sigma on appearance features
  double distractor_rate = 1.0;  // Poisson mean of spurious proposals
  double polygon_jitter = 0.01;  // sigma on prompt polygon vertices
  double mask_noise = 0.1;       // boundary flip probability, <= 1 px
  int d_f = 32;
};

struct Proposal {
  geom::Polygon polygon;
  std::vector<double> feature;  // length d_f
  double confidence = 0.0;
  std::string source;
};

// Region proposals with class-prototype appearance features; one proposal per
// visible ground-truth object with probability p_detect plus Poisson
// distractors. Fully deterministic given the seed.
std::vector<Proposal> detector_stub(const scene::Scene& s, const nn::Tensor& prototypes,
                                    const StubConfig& cfg, uint64_t noise_seed);

struct SegmenterResult {
  std::vector<geom::BinaryMask> masks;  // aligned with prompts; empty when skipped
  int skipped = 0;
};

// Rasterizes each prompt polygon with at most one pixel of boundary
// erosion/dilation noise.
SegmenterResult segmenter_stub(const scene::Scene& s, const std::vector<Proposal>& prompts,
                               const StubConfig& cfg, uint64_t noise_seed);

enum class QueryOrigin { kAppearance, kPositional, kRandom, kPad };

const char* origin_name(QueryOrigin o);

// Assembled decoder queries. Every row has d = d_app + d_pos channels laid
// out as [semantic | positional]; pad rows are zero and masked.
struct QuerySet {
  int count = 0;
  int d_app = 0;
  int d_pos = 0;
  nn::Tensor embeddings;  // count x (d_app + d_pos)
  std::vector<QueryOrigin> origin;
  std::vector<uint8_t> pad;  // 1 = pad
  std::vector<std::optional<geom::Polygon>> polygon;
};

// Parameters owned by the model's ParameterStore; undefined tensors mean the
// corresponding query type is disabled.
struct QueryParams {
  nn::Tensor proj_w, proj_b;                  // d_f -> d_app
  nn::Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // 2K -> hidden -> d_pos
  nn::Tensor content_free;                    // 1 x d_app
  nn::Tensor random_q;                        // n_random x (d_app + d_pos)
};

// Gaussian-initialized trainable queries, registered in the store under
// "query.random" and reused (not resampled) across steps.
nn::Tensor init_random_queries(nn::ParameterStore& store, int n_random, int d,
                               uint64_t init_seed);

struct AppearanceBlock {
  nn::Tensor semantic;  // cap x d_app, pads zero
  std::vector<uint8_t> pad;
  std::vector<geom::Polygon> polygons;  // kept proposals, in row order
  std::vector<int> filled_rows;
};

// Projects proposal features, keeping the cap highest-confidence proposals
// (ties by input order); missing slots are padded and masked.
AppearanceBlock build_appearance_queries(const std::vector<Proposal>& proposals,
                                         int cap, const nn::Tensor& proj_w,
                                         const nn::Tensor& proj_b);

struct PositionalBlock {
  nn::Tensor embeddings;  // cap x d_pos, pads zero
  std::vector<uint8_t> pad;
  std::vector<std::optional<geom::Polygon>> polygons;  // resampled K-gons
};

// Mask -> boundary polygon -> K-point resampling -> flatten -> MLP. Empty
// masks skip their slot.
PositionalBlock build_positional_queries(const std::vector<geom::BinaryMask>& masks,
                                         double epsilon, int k,
                                         const QueryParams& params, int cap);

// Polygon embedding shared by appearance and positional rows.
nn::Tensor polygon_embedding(const std::vector<geom::Polygon>& resampled, int k,
                             const QueryParams& params);

struct AssembleSpec {
  int cap_appearance = 0;  // 0 disables the block
  int cap_positional = 0;
  int n_random = 0;
  int d_app = 0;
  int d_pos = 0;
  int polygon_vertices = 16;
};

// Stacks appearance, positional and random rows (in that order) into the
// final query set.
QuerySet assemble_query_set(const AppearanceBlock* app, const PositionalBlock* pos,
                            const QueryParams& params, const AssembleSpec& spec);

}  // namespace polydet::query

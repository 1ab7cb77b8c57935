#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace polydet::scene {

struct SceneObject {
  int class_id = 0;
  geom::Polygon polygon;
  int z = 0;  // paint order, higher is on top
};

// Per-object ground truth after occlusion. Boxes and polygons derive from the
// visible region so that occlusion genuinely perturbs localization targets.
struct GroundTruth {
  int class_id = 0;
  geom::Box box;
  geom::Polygon visible_polygon;
  geom::BinaryMask visible_mask;
  double area_fraction = 0.0;  // visible pixels / canvas pixels
  int object_index = 0;
};

struct Scene {
  int id = 0;
  int width = 64;
  int height = 64;
  std::vector<SceneObject> objects;
  std::vector<GroundTruth> ground_truth;  // derived, recomputed on load
};

struct DatasetSpec {
  int n_scenes = 200;
  int n_classes = 5;
  int canvas = 64;
  int objects_min = 2;
  int objects_max = 6;
  double size_min = 0.04;  // star polygon base radius, normalized
  double size_max = 0.28;
  double occlusion_rate = 0.3;
  int vertices_min = 5;
  int vertices_max = 12;
  uint64_t seed = 1;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Scene> scenes;
};

geom::Polygon random_star_polygon(Rng& rng, double cx, double cy, double radius,
                                  int v_min, int v_max);

// Deterministic given (spec, scene_seed). Objects below 10% visibility are
// dropped from ground truth.
Scene generate_scene(const DatasetSpec& spec, uint64_t scene_seed, int scene_id);

// Recomputes visible masks / boxes / polygons from the object list.
void derive_ground_truth(Scene& s);

Dataset generate_dataset(const DatasetSpec& spec);

// Unit-norm class prototype rows with pairwise cosine similarity <= 0.3,
// rejection-sampled. Shape n_classes x d_f.
nn::Tensor class_prototypes(int n_classes, int d_f, uint64_t seed);

// Rendered class-colored image grid, canvas*canvas*channels values with
// channel-minor layout. The backbone stand-in input.
std::vector<double> render_scene_grid(const Scene& s, int channels = 3);

void dataset_write(const std::string& path, const Dataset& data);
Dataset dataset_read(const std::string& path);

}  // namespace polydet::scene

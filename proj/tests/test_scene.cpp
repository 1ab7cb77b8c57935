#include <cmath>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "errors.hpp"
#include "scene.hpp"

using namespace polydet;
using namespace polydet::scene;

namespace {

DatasetSpec small_spec() {
  DatasetSpec sp;
  sp.n_scenes = 20;
  sp.n_classes = 4;
  sp.canvas = 64;
  sp.objects_min = 1;
  sp.objects_max = 4;
  sp.occlusion_rate = 0.3;
  sp.seed = 11;
  return sp;
}

}  // namespace

TEST_CASE("scene generation is deterministic for a fixed seed") {
  DatasetSpec sp = small_spec();
  Scene a = generate_scene(sp, 123, 0);
  Scene b = generate_scene(sp, 123, 0);
  REQUIRE(a.objects.size() == b.objects.size());
  for (size_t i = 0; i < a.objects.size(); ++i) {
    CHECK(a.objects[i].class_id == b.objects[i].class_id);
    REQUIRE(a.objects[i].polygon.vertices.size() == b.objects[i].polygon.vertices.size());
    for (size_t v = 0; v < a.objects[i].polygon.vertices.size(); ++v) {
      CHECK(a.objects[i].polygon.vertices[v].x == b.objects[i].polygon.vertices[v].x);
      CHECK(a.objects[i].polygon.vertices[v].y == b.objects[i].polygon.vertices[v].y);
    }
  }
}

TEST_CASE("zero objects yields an empty scene") {
  DatasetSpec sp = small_spec();
  sp.objects_min = 0;
  sp.objects_max = 0;
  Scene s = generate_scene(sp, 5, 0);
  CHECK(s.objects.empty());
  CHECK(s.ground_truth.empty());
}

TEST_CASE("without occlusion every visible mask equals the full raster") {
  DatasetSpec sp = small_spec();
  sp.occlusion_rate = 0.0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Scene s = generate_scene(sp, mix_seed(77, seed), 0);
    REQUIRE(s.ground_truth.size() == s.objects.size());
    for (const auto& gt : s.ground_truth) {
      geom::BinaryMask full =
          geom::rasterize_polygon(s.objects[static_cast<size_t>(gt.object_index)].polygon,
                                  s.width, s.height);
      CHECK(gt.visible_mask.bits == full.bits);
    }
  }
}

TEST_CASE("polygons stay inside the canvas") {
  DatasetSpec sp = small_spec();
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Scene s = generate_scene(sp, mix_seed(3, seed), 0);
    for (const auto& obj : s.objects)
      for (const auto& v : obj.polygon.vertices) {
        CHECK(v.x >= 0.0);
        CHECK(v.x <= 1.0);
        CHECK(v.y >= 0.0);
        CHECK(v.y <= 1.0);
      }
  }
}

TEST_CASE("visible mask is a subset of the object raster") {
  DatasetSpec sp = small_spec();
  sp.occlusion_rate = 0.8;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Scene s = generate_scene(sp, mix_seed(211, seed), 0);
    for (const auto& gt : s.ground_truth) {
      geom::BinaryMask full =
          geom::rasterize_polygon(s.objects[static_cast<size_t>(gt.object_index)].polygon,
                                  s.width, s.height);
      for (size_t i = 0; i < full.bits.size(); ++i)
        if (gt.visible_mask.bits[i]) CHECK(full.bits[i]);
    }
  }
}

TEST_CASE("ground-truth box tracks the visible-region polygon within a pixel") {
  DatasetSpec sp = small_spec();
  sp.occlusion_rate = 0.5;
  double px = 1.0 / sp.canvas;
  for (uint64_t seed = 0; seed < 15; ++seed) {
    Scene s = generate_scene(sp, mix_seed(4242, seed), 0);
    for (const auto& gt : s.ground_truth) {
      geom::Box from_poly = geom::polygon_to_box(gt.visible_polygon);
      CHECK(std::abs(from_poly.x1 - gt.box.x1) <= px + 1e-12);
      CHECK(std::abs(from_poly.y1 - gt.box.y1) <= px + 1e-12);
      CHECK(std::abs(from_poly.x2 - gt.box.x2) <= px + 1e-12);
      CHECK(std::abs(from_poly.y2 - gt.box.y2) <= px + 1e-12);
    }
  }
}

TEST_CASE("measured overlap frequency tracks occlusion_rate") {
  DatasetSpec sp = small_spec();
  sp.objects_min = 2;
  sp.objects_max = 5;
  sp.occlusion_rate = 0.3;
  int overlap = 0, eligible = 0;
  for (uint64_t seed = 0; seed < 500; ++seed) {
    Scene s = generate_scene(sp, mix_seed(888, seed), 0);
    std::vector<geom::BinaryMask> rasters;
    for (const auto& obj : s.objects)
      rasters.push_back(geom::rasterize_polygon(obj.polygon, s.width, s.height));
    for (size_t i = 1; i < rasters.size(); ++i) {
      ++eligible;
      bool any = false;
      for (size_t j = 0; j < i && !any; ++j)
        for (size_t k = 0; k < rasters[i].bits.size(); ++k)
          if (rasters[i].bits[k] && rasters[j].bits[k]) {
            any = true;
            break;
          }
      overlap += any ? 1 : 0;
    }
  }
  REQUIRE(eligible > 500);
  double freq = static_cast<double>(overlap) / eligible;
  CHECK(freq > sp.occlusion_rate - 0.05);
  CHECK(freq < sp.occlusion_rate + 0.05);
}

TEST_CASE("class prototypes are unit norm with bounded similarity") {
  nn::Tensor p = class_prototypes(1, 16, 3);
  CHECK(p.rows() == 1);
  double norm = 0;
  for (int i = 0; i < 16; ++i) norm += p.at(0, i) * p.at(0, i);
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));

  for (uint64_t seed = 0; seed < 20; ++seed) {
    nn::Tensor m = class_prototypes(8, 32, seed);
    for (int a = 0; a < 8; ++a) {
      double n = 0;
      for (int i = 0; i < 32; ++i) n += m.at(a, i) * m.at(a, i);
      CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
      for (int b = 0; b < a; ++b) {
        double dot = 0;
        for (int i = 0; i < 32; ++i) dot += m.at(a, i) * m.at(b, i);
        CHECK(dot <= 0.3 + 1e-12);
      }
    }
  }
}

TEST_CASE("prototype sampling fails loudly when the bound is unsatisfiable") {
  CHECK_THROWS_AS(class_prototypes(40, 2, 1), NumericError);
}

TEST_CASE("dataset round-trips exactly") {
  DatasetSpec sp = small_spec();
  Dataset data = generate_dataset(sp);
  std::string path = "test_dataset_roundtrip.scenes";
  dataset_write(path, data);
  Dataset back = dataset_read(path);
  REQUIRE(back.scenes.size() == data.scenes.size());
  CHECK(back.spec.seed == sp.seed);
  CHECK(back.spec.occlusion_rate == sp.occlusion_rate);
  for (size_t i = 0; i < data.scenes.size(); ++i) {
    const Scene& a = data.scenes[i];
    const Scene& b = back.scenes[i];
    REQUIRE(a.objects.size() == b.objects.size());
    CHECK(a.ground_truth.size() == b.ground_truth.size());
    for (size_t o = 0; o < a.objects.size(); ++o) {
      CHECK(a.objects[o].class_id == b.objects[o].class_id);
      for (size_t v = 0; v < a.objects[o].polygon.vertices.size(); ++v) {
        CHECK(a.objects[o].polygon.vertices[v].x == b.objects[o].polygon.vertices[v].x);
        CHECK(a.objects[o].polygon.vertices[v].y == b.objects[o].polygon.vertices[v].y);
      }
    }
  }

  // write(read(write(x))) is byte-identical
  std::string path2 = "test_dataset_roundtrip2.scenes";
  dataset_write(path2, back);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(!s1.empty());
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("empty dataset round-trips") {
  Dataset data;
  data.spec = small_spec();
  std::string path = "test_dataset_empty.scenes";
  dataset_write(path, data);
  Dataset back = dataset_read(path);
  CHECK(back.scenes.empty());
  std::remove(path.c_str());
}

TEST_CASE("truncated dataset file fails without a partial result") {
  DatasetSpec sp = small_spec();
  sp.n_scenes = 5;
  Dataset data = generate_dataset(sp);
  std::string path = "test_dataset_trunc.scenes";
  dataset_write(path, data);
  std::ifstream f(path);
  std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  f.close();
  std::ofstream out(path, std::ios::trunc);
  out << all.substr(0, all.size() / 2);
  out.close();
  CHECK_THROWS_AS(dataset_read(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("render grid is class-colored and deterministic") {
  DatasetSpec sp = small_spec();
  Scene s = generate_scene(sp, 99, 0);
  auto g1 = render_scene_grid(s);
  auto g2 = render_scene_grid(s);
  CHECK(g1 == g2);
  CHECK(g1.size() == static_cast<size_t>(64 * 64 * 3));
  bool any_nonzero = false;
  for (double v : g1) any_nonzero = any_nonzero || v != 0.0;
  CHECK(any_nonzero == !s.objects.empty());
}

#include "scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "errors.hpp"

namespace polydet::scene {

namespace {

constexpr double kMinVisibleFraction = 0.10;  // of the object's own raster
constexpr double kPlacementMargin = 0.01;

struct Placed {
  double cx, cy, radius;
};

double centroid_x(const geom::Polygon& p) {
  double s = 0;
  for (const auto& v : p.vertices) s += v.x;
  return s / static_cast<double>(p.vertices.size());
}

double centroid_y(const geom::Polygon& p) {
  double s = 0;
  for (const auto& v : p.vertices) s += v.y;
  return s / static_cast<double>(p.vertices.size());
}

}  // namespace

geom::Polygon random_star_polygon(Rng& rng, double cx, double cy, double radius,
                                  int v_min, int v_max) {
  int n = static_cast<int>(rng.uniform_int(v_min, v_max));
  std::vector<geom::Vec2> pts;
  pts.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double ang = 2.0 * M_PI * (i + rng.uniform(-0.3, 0.3)) / n;
    double r = radius * rng.uniform(0.55, 1.0);
    pts.push_back({cx + r * std::cos(ang), cy + r * std::sin(ang)});
  }
  return geom::canonicalize(geom::Polygon{pts});
}

Scene generate_scene(const DatasetSpec& spec, uint64_t scene_seed, int scene_id) {
  Rng rng(scene_seed);
  Scene s;
  s.id = scene_id;
  s.width = spec.canvas;
  s.height = spec.canvas;

  int want = static_cast<int>(rng.uniform_int(spec.objects_min, spec.objects_max));
  std::vector<Placed> placed;
  for (int i = 0; i < want; ++i) {
    int class_id = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(spec.n_classes)));
    double radius = std::exp(rng.uniform(std::log(spec.size_min), std::log(spec.size_max)));
    double lo = radius + kPlacementMargin;
    double hi = 1.0 - radius - kPlacementMargin;
    if (lo >= hi) continue;  // object too large for the canvas

    bool want_overlap = !placed.empty() && rng.bernoulli(spec.occlusion_rate);
    double cx = 0, cy = 0;
    bool ok = false;
    if (want_overlap) {
      const Placed& target = placed[rng.uniform_index(placed.size())];
      double dist = rng.uniform(0.1, 0.5) * 0.55 * target.radius;
      double ang = rng.uniform(0.0, 2.0 * M_PI);
      cx = std::min(std::max(target.cx + dist * std::cos(ang), lo), hi);
      cy = std::min(std::max(target.cy + dist * std::sin(ang), lo), hi);
      ok = true;
    } else {
      // Rejection-sample a clear spot so occlusion_rate really controls the
      // overlap frequency; give up after a bounded number of tries.
      for (int attempt = 0; attempt < 60 && !ok; ++attempt) {
        cx = rng.uniform(lo, hi);
        cy = rng.uniform(lo, hi);
        ok = true;
        for (const Placed& q : placed) {
          double d = std::hypot(cx - q.cx, cy - q.cy);
          if (d < 1.05 * (radius + q.radius)) {
            ok = false;
            break;
          }
        }
      }
    }
    if (!ok) continue;

    SceneObject obj;
    obj.class_id = class_id;
    obj.polygon = random_star_polygon(rng, cx, cy, radius, spec.vertices_min,
                                      spec.vertices_max);
    obj.z = static_cast<int>(s.objects.size());
    s.objects.push_back(std::move(obj));
    placed.push_back({cx, cy, radius});
  }

  derive_ground_truth(s);
  return s;
}

void derive_ground_truth(Scene& s) {
  s.ground_truth.clear();
  size_t n = s.objects.size();
  std::vector<geom::BinaryMask> rasters;
  rasters.reserve(n);
  for (const auto& obj : s.objects)
    rasters.push_back(geom::rasterize_polygon(obj.polygon, s.width, s.height));

  for (size_t i = 0; i < n; ++i) {
    geom::BinaryMask visible = rasters[i];
    for (size_t j = 0; j < n; ++j) {
      if (s.objects[j].z <= s.objects[i].z) continue;
      for (size_t k = 0; k < visible.bits.size(); ++k)
        if (rasters[j].bits[k]) visible.bits[k] = 0;
    }
    size_t own = rasters[i].count();
    size_t vis = visible.count();
    if (own == 0 || static_cast<double>(vis) < kMinVisibleFraction * static_cast<double>(own))
      continue;

    GroundTruth gt;
    gt.class_id = s.objects[i].class_id;
    gt.object_index = static_cast<int>(i);
    gt.area_fraction = static_cast<double>(vis) / static_cast<double>(visible.bits.size());
    gt.visible_polygon = geom::polygon_approximate(visible, 0.01);
    // Box from the unsimplified traced ring, hence consistent with the
    // polygon the queries will see.
    gt.box = geom::polygon_to_box(geom::polygon_approximate(visible, 0.0));
    gt.visible_mask = std::move(visible);
    s.ground_truth.push_back(std::move(gt));
  }
}

Dataset generate_dataset(const DatasetSpec& spec) {
  Dataset data;
  data.spec = spec;
  data.scenes.reserve(static_cast<size_t>(spec.n_scenes));
  for (int i = 0; i < spec.n_scenes; ++i)
    data.scenes.push_back(
        generate_scene(spec, mix_seed(spec.seed, static_cast<uint64_t>(i)), i));
  return data;
}

nn::Tensor class_prototypes(int n_classes, int d_f, uint64_t seed) {
  if (n_classes < 1 || d_f < 1) throw UsageError("class_prototypes: bad dimensions");
  Rng rng(seed);
  std::vector<double> rows;
  rows.reserve(static_cast<size_t>(n_classes) * d_f);
  std::vector<std::vector<double>> accepted;
  for (int c = 0; c < n_classes; ++c) {
    bool found = false;
    for (int attempt = 0; attempt < 10000 && !found; ++attempt) {
      std::vector<double> v(static_cast<size_t>(d_f));
      double norm = 0.0;
      for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
      }
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (auto& x : v) x /= norm;
      bool ok = true;
      for (const auto& prev : accepted) {
        double dot = 0.0;
        for (int i = 0; i < d_f; ++i) dot += v[static_cast<size_t>(i)] * prev[static_cast<size_t>(i)];
        if (dot > 0.3) {
          ok = false;
          break;
        }
      }
      if (ok) {
        accepted.push_back(std::move(v));
        found = true;
      }
    }
    if (!found)
      throw NumericError(
          "class_prototypes: cannot satisfy the similarity bound; increase d_f");
  }
  for (const auto& v : accepted) rows.insert(rows.end(), v.begin(), v.end());
  return nn::Tensor::constant({n_classes, d_f}, std::move(rows));
}

std::vector<double> render_scene_grid(const Scene& s, int channels) {
  std::vector<double> grid(static_cast<size_t>(s.width) * s.height * channels, 0.0);
  std::vector<const SceneObject*> order;
  for (const auto& obj : s.objects) order.push_back(&obj);
  std::sort(order.begin(), order.end(),
            [](const SceneObject* a, const SceneObject* b) { return a->z < b->z; });
  for (const SceneObject* obj : order) {
    geom::BinaryMask m = geom::rasterize_polygon(obj->polygon, s.width, s.height);
    // deterministic per-class palette
    Rng palette(mix_seed(0x70a1e77eULL, static_cast<uint64_t>(obj->class_id)));
    std::vector<double> color(static_cast<size_t>(channels));
    for (auto& c : color) c = palette.uniform(0.2, 1.0);
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        if (m.at(x, y))
          for (int c = 0; c < channels; ++c)
            grid[(static_cast<size_t>(y) * s.width + x) * channels + c] = color[static_cast<size_t>(c)];
  }
  return grid;
}

// --- dataset file format ----------------------------------------------------
//
// POLYSCENES 1
// spec.<key> <value>     (fixed order)
// scene <id> <W> <H> <n_objects>
// obj <class> <z> <n_vertices> <x1> <y1> ...
// end

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void dataset_write(const std::string& path, const Dataset& data) {
  std::ostringstream out;
  out << "POLYSCENES 1\n";
  const DatasetSpec& sp = data.spec;
  out << "spec.n_scenes " << sp.n_scenes << "\n";
  out << "spec.n_classes " << sp.n_classes << "\n";
  out << "spec.canvas " << sp.canvas << "\n";
  out << "spec.objects_min " << sp.objects_min << "\n";
  out << "spec.objects_max " << sp.objects_max << "\n";
  out << "spec.size_min " << fmt_double(sp.size_min) << "\n";
  out << "spec.size_max " << fmt_double(sp.size_max) << "\n";
  out << "spec.occlusion_rate " << fmt_double(sp.occlusion_rate) << "\n";
  out << "spec.vertices_min " << sp.vertices_min << "\n";
  out << "spec.vertices_max " << sp.vertices_max << "\n";
  out << "spec.seed " << sp.seed << "\n";
  out << "scenes " << data.scenes.size() << "\n";
  for (const Scene& s : data.scenes) {
    out << "scene " << s.id << " " << s.width << " " << s.height << " "
        << s.objects.size() << "\n";
    for (const SceneObject& obj : s.objects) {
      out << "obj " << obj.class_id << " " << obj.z << " " << obj.polygon.vertices.size();
      for (const auto& v : obj.polygon.vertices)
        out << " " << fmt_double(v.x) << " " << fmt_double(v.y);
      out << "\n";
    }
  }
  out << "end\n";

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << out.str();
  if (!f) throw IoError("short write to '" + path + "'");
}

Dataset dataset_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");

  Dataset data;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& msg) -> IoError {
    return IoError(path + ":" + std::to_string(line_no) + ": " + msg);
  };
  auto next_line = [&]() -> bool {
    if (!std::getline(f, line)) return false;
    ++line_no;
    return true;
  };

  if (!next_line() || line != "POLYSCENES 1") throw fail("missing POLYSCENES header");

  bool saw_end = false;
  Scene* current = nullptr;
  size_t expect_objects = 0;
  size_t expect_scenes = 0;
  bool saw_scene_count = false;
  while (next_line()) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "end") {
      saw_end = true;
      break;
    } else if (tag.rfind("spec.", 0) == 0) {
      std::string key = tag.substr(5);
      DatasetSpec& sp = data.spec;
      if (key == "n_scenes") ls >> sp.n_scenes;
      else if (key == "n_classes") ls >> sp.n_classes;
      else if (key == "canvas") ls >> sp.canvas;
      else if (key == "objects_min") ls >> sp.objects_min;
      else if (key == "objects_max") ls >> sp.objects_max;
      else if (key == "size_min") ls >> sp.size_min;
      else if (key == "size_max") ls >> sp.size_max;
      else if (key == "occlusion_rate") ls >> sp.occlusion_rate;
      else if (key == "vertices_min") ls >> sp.vertices_min;
      else if (key == "vertices_max") ls >> sp.vertices_max;
      else if (key == "seed") ls >> sp.seed;
      else throw fail("unknown spec key '" + key + "'");
      if (!ls) throw fail("bad value for '" + tag + "'");
    } else if (tag == "scenes") {
      ls >> expect_scenes;
      if (!ls) throw fail("bad scene count");
      saw_scene_count = true;
    } else if (tag == "scene") {
      if (current && current->objects.size() != expect_objects)
        throw fail("scene object count mismatch");
      Scene s;
      size_t n_obj = 0;
      ls >> s.id >> s.width >> s.height >> n_obj;
      if (!ls) throw fail("bad scene header");
      data.scenes.push_back(std::move(s));
      current = &data.scenes.back();
      expect_objects = n_obj;
    } else if (tag == "obj") {
      if (!current) throw fail("object outside of a scene");
      SceneObject obj;
      size_t nv = 0;
      ls >> obj.class_id >> obj.z >> nv;
      if (!ls || nv < 3) throw fail("bad object header");
      obj.polygon.vertices.resize(nv);
      for (auto& v : obj.polygon.vertices) {
        ls >> v.x >> v.y;
        if (!ls) throw fail("bad vertex data");
      }
      current->objects.push_back(std::move(obj));
    } else {
      throw fail("unknown record '" + tag + "'");
    }
  }
  if (!saw_end) throw IoError(path + ": truncated file (missing end marker)");
  if (current && current->objects.size() != expect_objects)
    throw IoError(path + ": scene object count mismatch");
  if (!saw_scene_count || data.scenes.size() != expect_scenes)
    throw IoError(path + ": scene count does not match header");

  for (Scene& s : data.scenes) derive_ground_truth(s);
  return data;
}

}  // namespace polydet::scene

#include "geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <map>

#include "errors.hpp"

namespace polydet::geom {

namespace {

constexpr double kProbEps = 1e-7;  // logit clamp for reference coordinates

double logit(double p) {
  p = std::min(std::max(p, kProbEps), 1.0 - kProbEps);
  return std::log(p / (1.0 - p));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  double dx = b.x - a.x, dy = b.y - a.y;
  double len2 = dx * dx + dy * dy;
  if (len2 == 0.0) return std::hypot(p.x - a.x, p.y - a.y);
  double t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2;
  t = std::min(std::max(t, 0.0), 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

// Douglas-Peucker on an open chain; keeps endpoints, discards points whose
// perpendicular distance to the simplified chain is <= epsilon.
void douglas_peucker(const std::vector<Vec2>& pts, size_t lo, size_t hi,
                     double epsilon, std::vector<bool>& keep) {
  if (hi <= lo + 1) return;
  double best = -1.0;
  size_t best_i = lo;
  for (size_t i = lo + 1; i < hi; ++i) {
    double d = point_segment_distance(pts[i], pts[lo], pts[hi]);
    if (d > best) {
      best = d;
      best_i = i;
    }
  }
  if (best > epsilon) {
    keep[best_i] = true;
    douglas_peucker(pts, lo, best_i, epsilon, keep);
    douglas_peucker(pts, best_i, hi, epsilon, keep);
  }
}

std::vector<Vec2> simplify_chain(const std::vector<Vec2>& pts, double epsilon) {
  std::vector<bool> keep(pts.size(), false);
  keep.front() = keep.back() = true;
  douglas_peucker(pts, 0, pts.size() - 1, epsilon, keep);
  std::vector<Vec2> out;
  for (size_t i = 0; i < pts.size(); ++i)
    if (keep[i]) out.push_back(pts[i]);
  return out;
}

size_t min_yx_index(const std::vector<Vec2>& v) {
  size_t best = 0;
  for (size_t i = 1; i < v.size(); ++i) {
    if (v[i].y < v[best].y || (v[i].y == v[best].y && v[i].x < v[best].x))
      best = i;
  }
  return best;
}

}  // namespace

size_t BinaryMask::count() const {
  size_t n = 0;
  for (uint8_t b : bits) n += b;
  return n;
}

BinaryMask BinaryMask::empty(int width, int height) {
  BinaryMask m;
  m.width = width;
  m.height = height;
  m.bits.assign(static_cast<size_t>(width) * height, 0);
  return m;
}

double signed_area(const Polygon& p) {
  double a = 0.0;
  size_t n = p.vertices.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& u = p.vertices[i];
    const Vec2& v = p.vertices[(i + 1) % n];
    a += u.x * v.y - v.x * u.y;
  }
  return 0.5 * a;
}

double perimeter(const Polygon& p) {
  double total = 0.0;
  size_t n = p.vertices.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& u = p.vertices[i];
    const Vec2& v = p.vertices[(i + 1) % n];
    total += std::hypot(v.x - u.x, v.y - u.y);
  }
  return total;
}

bool is_canonical(const Polygon& p) {
  if (p.vertices.size() < 3) return false;
  if (signed_area(p) <= 0.0) return false;
  return min_yx_index(p.vertices) == 0;
}

Polygon canonicalize(const Polygon& p) {
  std::vector<Vec2> v;
  for (const Vec2& u : p.vertices) {
    if (!v.empty() && u.x == v.back().x && u.y == v.back().y) continue;
    v.push_back(u);
  }
  while (v.size() > 1 && v.front().x == v.back().x && v.front().y == v.back().y)
    v.pop_back();
  if (v.size() < 3) throw NumericError("polygon: fewer than 3 distinct vertices");

  Polygon q{std::move(v)};
  double area = signed_area(q);
  if (area == 0.0) throw NumericError("polygon: zero area");
  if (area < 0.0) std::reverse(q.vertices.begin(), q.vertices.end());

  size_t start = min_yx_index(q.vertices);
  std::rotate(q.vertices.begin(), q.vertices.begin() + static_cast<long>(start),
              q.vertices.end());
  return q;
}

BinaryMask rasterize_polygon(const Polygon& p, int width, int height) {
  BinaryMask mask = BinaryMask::empty(width, height);
  if (p.vertices.size() < 3 || signed_area(p) == 0.0) return mask;
  const auto& v = p.vertices;
  size_t n = v.size();
  for (int py = 0; py < height; ++py) {
    double cy = (py + 0.5) / height;
    // Gather crossings of the horizontal ray once per scanline.
    std::vector<double> xs;
    for (size_t i = 0; i < n; ++i) {
      const Vec2& a = v[i];
      const Vec2& b = v[(i + 1) % n];
      if ((a.y > cy) != (b.y > cy)) {
        double x = a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y);
        xs.push_back(x);
      }
    }
    std::sort(xs.begin(), xs.end());
    for (int px = 0; px < width; ++px) {
      double cx = (px + 0.5) / width;
      size_t strictly_right =
          xs.end() - std::upper_bound(xs.begin(), xs.end(), cx);
      if (strictly_right % 2 == 1) mask.set(px, py, true);
    }
  }
  return mask;
}

namespace {

struct Corner {
  int x, y;
  bool operator<(const Corner& o) const {
    return y != o.y ? y < o.y : x < o.x;
  }
  bool operator==(const Corner& o) const { return x == o.x && y == o.y; }
};

// Largest 8-connected component, row-major discovery order breaking ties.
BinaryMask largest_component(const BinaryMask& m) {
  std::vector<int> label(m.bits.size(), -1);
  int next_label = 0;
  std::vector<size_t> best_cells;
  std::vector<size_t> cells;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      size_t idx = static_cast<size_t>(y) * m.width + x;
      if (!m.bits[idx] || label[idx] >= 0) continue;
      cells.clear();
      std::deque<std::pair<int, int>> queue{{x, y}};
      label[idx] = next_label;
      while (!queue.empty()) {
        auto [cx, cy] = queue.front();
        queue.pop_front();
        cells.push_back(static_cast<size_t>(cy) * m.width + cx);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= m.width || ny >= m.height) continue;
            size_t nidx = static_cast<size_t>(ny) * m.width + nx;
            if (!m.bits[nidx] || label[nidx] >= 0) continue;
            label[nidx] = next_label;
            queue.emplace_back(nx, ny);
          }
        }
      }
      if (cells.size() > best_cells.size()) best_cells = cells;
      ++next_label;
    }
  }
  BinaryMask out = BinaryMask::empty(m.width, m.height);
  for (size_t idx : best_cells) out.bits[idx] = 1;
  return out;
}

// Boundary of the pixel union as directed lattice edges; loops stitched with
// an 8-connectivity-preserving turn rule at checkerboard corners.
std::vector<std::vector<Corner>> trace_boundary_loops(const BinaryMask& m) {
  auto inside = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < m.width && y < m.height && m.at(x, y);
  };

  // Outgoing directed edges per corner, as direction flags.
  // Directions: 0=(1,0) 1=(0,1) 2=(-1,0) 3=(0,-1)
  static const int kDx[4] = {1, 0, -1, 0};
  static const int kDy[4] = {0, 1, 0, -1};
  std::map<Corner, std::array<bool, 4>> edges;
  auto add_edge = [&](int x, int y, int dir) {
    edges[{x, y}][static_cast<size_t>(dir)] = true;
  };
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      if (!inside(x, y - 1)) add_edge(x, y, 0);          // top, walking +x
      if (!inside(x + 1, y)) add_edge(x + 1, y, 1);      // right, walking +y
      if (!inside(x, y + 1)) add_edge(x + 1, y + 1, 2);  // bottom, walking -x
      if (!inside(x - 1, y)) add_edge(x, y + 1, 3);      // left, walking -y
    }
  }

  std::vector<std::vector<Corner>> loops;
  while (!edges.empty()) {
    auto it = edges.begin();
    Corner start = it->first;
    int dir = 0;
    while (!it->second[static_cast<size_t>(dir)]) ++dir;

    std::vector<Corner> loop;
    Corner cur = start;
    int cur_dir = dir;
    do {
      loop.push_back(cur);
      auto eit = edges.find(cur);
      eit->second[static_cast<size_t>(cur_dir)] = false;
      if (eit->second == std::array<bool, 4>{}) edges.erase(eit);
      cur = {cur.x + kDx[cur_dir], cur.y + kDy[cur_dir]};
      auto nit = edges.find(cur);
      if (nit == edges.end()) break;  // loop closed, start edge consumed
      // Prefer the turn that keeps diagonally-touching pixels on one ring.
      int preferred = (cur_dir + 3) % 4;  // (dy, -dx)
      if (nit->second[static_cast<size_t>(preferred)]) {
        cur_dir = preferred;
      } else if (nit->second[static_cast<size_t>(cur_dir)]) {
        // keep going straight
      } else {
        int other = (cur_dir + 1) % 4;
        if (nit->second[static_cast<size_t>(other)]) {
          cur_dir = other;
        } else {
          cur_dir = (cur_dir + 2) % 4;
          if (!nit->second[static_cast<size_t>(cur_dir)]) break;  // dead end
        }
      }
    } while (!(cur == start));
    if (loop.size() >= 4) loops.push_back(std::move(loop));
  }
  return loops;
}

}  // namespace

Polygon polygon_approximate(const BinaryMask& m, double epsilon) {
  if (epsilon < 0.0) throw UsageError("polygon_approximate: epsilon must be >= 0");
  if (m.count() == 0) throw NumericError("polygon_approximate: empty mask, no object");

  BinaryMask comp = largest_component(m);
  auto loops = trace_boundary_loops(comp);
  if (loops.empty()) throw NumericError("polygon_approximate: no boundary found");

  // The outer boundary is the loop with the largest absolute area.
  std::vector<Vec2> ring;
  double best_area = -1.0;
  for (const auto& loop : loops) {
    std::vector<Vec2> pts;
    pts.reserve(loop.size());
    for (const Corner& c : loop)
      pts.push_back({static_cast<double>(c.x) / m.width,
                     static_cast<double>(c.y) / m.height});
    Polygon candidate{pts};
    double a = std::abs(signed_area(candidate));
    if (a > best_area) {
      best_area = a;
      ring = std::move(pts);
    }
  }

  // Rotate so the chain anchors sit at canonical extremes, then run the
  // split Douglas-Peucker on the two halves of the ring.
  size_t anchor = min_yx_index(ring);
  std::rotate(ring.begin(), ring.begin() + static_cast<long>(anchor), ring.end());
  size_t far_i = 0;
  double far_d = -1.0;
  for (size_t i = 1; i < ring.size(); ++i) {
    double d = std::hypot(ring[i].x - ring[0].x, ring[i].y - ring[0].y);
    if (d > far_d) {
      far_d = d;
      far_i = i;
    }
  }

  std::vector<Vec2> first(ring.begin(), ring.begin() + static_cast<long>(far_i) + 1);
  std::vector<Vec2> second(ring.begin() + static_cast<long>(far_i), ring.end());
  second.push_back(ring[0]);
  std::vector<Vec2> sf = simplify_chain(first, epsilon);
  std::vector<Vec2> ss = simplify_chain(second, epsilon);
  std::vector<Vec2> merged(sf.begin(), sf.end());
  merged.insert(merged.end(), ss.begin() + 1, ss.end() - 1);

  if (merged.size() < 3) {
    // Over-aggressive pruning on tiny rings: fall back to axis extremes.
    std::vector<Vec2> ext;
    auto push_extreme = [&](auto cmp) {
      size_t best = 0;
      for (size_t i = 1; i < ring.size(); ++i)
        if (cmp(ring[i], ring[best])) best = i;
      ext.push_back(ring[best]);
    };
    push_extreme([](const Vec2& a, const Vec2& b) { return a.y < b.y || (a.y == b.y && a.x < b.x); });
    push_extreme([](const Vec2& a, const Vec2& b) { return a.x > b.x || (a.x == b.x && a.y < b.y); });
    push_extreme([](const Vec2& a, const Vec2& b) { return a.y > b.y || (a.y == b.y && a.x > b.x); });
    push_extreme([](const Vec2& a, const Vec2& b) { return a.x < b.x || (a.x == b.x && a.y > b.y); });
    merged = std::move(ext);
  }

  return canonicalize(Polygon{merged});
}

Polygon resample_polygon(const Polygon& p, int k) {
  if (k < 3) throw UsageError("resample_polygon: need at least 3 vertices");
  double total = perimeter(p);
  if (!(total > 1e-12)) throw NumericError("resample_polygon: degenerate perimeter");

  const auto& v = p.vertices;
  size_t n = v.size();
  std::vector<Vec2> out;
  out.reserve(static_cast<size_t>(k));
  double step = total / k;
  size_t edge = 0;
  double edge_start = 0.0;
  double edge_len = std::hypot(v[1 % n].x - v[0].x, v[1 % n].y - v[0].y);
  for (int i = 0; i < k; ++i) {
    double target = step * i;
    while (target > edge_start + edge_len && edge + 1 < n) {
      edge_start += edge_len;
      ++edge;
      const Vec2& a = v[edge];
      const Vec2& b = v[(edge + 1) % n];
      edge_len = std::hypot(b.x - a.x, b.y - a.y);
    }
    const Vec2& a = v[edge];
    const Vec2& b = v[(edge + 1) % n];
    double t = edge_len > 0.0 ? (target - edge_start) / edge_len : 0.0;
    t = std::min(std::max(t, 0.0), 1.0);
    out.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
  }
  return Polygon{out};
}

std::vector<double> flatten_polygon(const Polygon& p, int k) {
  if (static_cast<int>(p.vertices.size()) != k)
    throw ShapeError("flatten_polygon: expected " + std::to_string(k) + " vertices, got " +
                     std::to_string(p.vertices.size()));
  std::vector<double> out;
  out.reserve(static_cast<size_t>(2 * k));
  for (const Vec2& v : p.vertices) {
    out.push_back(v.x);
    out.push_back(v.y);
  }
  return out;
}

Polygon unflatten_polygon(const std::vector<double>& flat) {
  if (flat.size() % 2 != 0 || flat.size() < 6)
    throw ShapeError("unflatten_polygon: bad length " + std::to_string(flat.size()));
  Polygon p;
  for (size_t i = 0; i < flat.size(); i += 2) p.vertices.push_back({flat[i], flat[i + 1]});
  return p;
}

Box polygon_to_box(const Polygon& p) {
  if (p.vertices.empty()) throw NumericError("polygon_to_box: empty polygon");
  Box b{1e300, 1e300, -1e300, -1e300};
  for (const Vec2& v : p.vertices) {
    b.x1 = std::min(b.x1, v.x);
    b.y1 = std::min(b.y1, v.y);
    b.x2 = std::max(b.x2, v.x);
    b.y2 = std::max(b.y2, v.y);
  }
  b.x1 = std::min(std::max(b.x1, 0.0), 1.0);
  b.y1 = std::min(std::max(b.y1, 0.0), 1.0);
  b.x2 = std::min(std::max(b.x2, 0.0), 1.0);
  b.y2 = std::min(std::max(b.y2, 0.0), 1.0);
  return b;
}

double iou(const Box& a, const Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  double inter = std::max(iw, 0.0) * std::max(ih, 0.0);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  double inter = std::max(iw, 0.0) * std::max(ih, 0.0);
  double uni = a.area() + b.area() - inter;
  double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  double enclose = ew * eh;
  double base = uni > 0.0 ? inter / uni : 0.0;
  if (enclose <= 0.0) return base;
  return base - (enclose - uni) / enclose;
}

Box decode_box(const Vec2& reference, const double displacements[4]) {
  if (reference.x < 0.0 || reference.x > 1.0 || reference.y < 0.0 || reference.y > 1.0)
    throw UsageError("decode_box: reference point outside [0,1]^2");
  double lx = logit(reference.x);
  double ly = logit(reference.y);
  double xa = sigmoid(lx + displacements[0]);
  double ya = sigmoid(ly + displacements[1]);
  double xb = sigmoid(lx + displacements[2]);
  double yb = sigmoid(ly + displacements[3]);
  return Box{std::min(xa, xb), std::min(ya, yb), std::max(xa, xb), std::max(ya, yb)};
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height)
    throw ShapeError("mask_iou: size mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.bits.size(); ++i) {
    bool av = a.bits[i] != 0, bv = b.bits[i] != 0;
    inter += (av && bv) ? 1 : 0;
    uni += (av || bv) ? 1 : 0;
  }
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace polydet::geom

#pragma once

#include <cstdint>
#include <vector>

namespace polydet::geom {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
  double area() const { return (x2 - x1) * (y2 - y1); }
};

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> bits;  // row-major, width*height entries

  bool at(int x, int y) const {
    return bits[static_cast<size_t>(y) * width + x] != 0;
  }
  void set(int x, int y, bool v) {
    bits[static_cast<size_t>(y) * width + x] = v ? 1 : 0;
  }
  size_t count() const;
  static BinaryMask empty(int width, int height);
};

// Ordered vertex ring in normalized [0,1]^2 coordinates. Canonical form is
// counter-clockwise (positive shoelace area) starting at the vertex with
// minimal y, ties broken by minimal x.
struct Polygon {
  std::vector<Vec2> vertices;
};

double signed_area(const Polygon& p);
double perimeter(const Polygon& p);
bool is_canonical(const Polygon& p);
// Dedups consecutive vertices, fixes orientation and start vertex. Throws on
// rings with fewer than 3 distinct vertices or zero area.
Polygon canonicalize(const Polygon& p);

// Even-odd fill with the pixel-center inclusion rule. Degenerate (zero area)
// polygons rasterize to an empty mask.
BinaryMask rasterize_polygon(const Polygon& p, int width, int height);

// Traces the outer boundary of the largest 8-connected component and prunes
// it by perpendicular distance (Douglas-Peucker) with tolerance epsilon in
// normalized units. Throws on an empty mask.
Polygon polygon_approximate(const BinaryMask& m, double epsilon = 0.01);

// K points at equal arc-length spacing along the ring, starting at vertex 0.
Polygon resample_polygon(const Polygon& p, int k);

// [x1,y1,...,xK,yK]
std::vector<double> flatten_polygon(const Polygon& p, int k);
Polygon unflatten_polygon(const std::vector<double>& flat);

Box polygon_to_box(const Polygon& p);

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

// Decodes four corner displacements (dx1, dy1, dx2, dy2) against a reference
// point: each corner is sigmoid(logit(ref) + displacement), then the corners
// are reordered so x1 <= x2 and y1 <= y2.
Box decode_box(const Vec2& reference, const double displacements[4]);

double mask_iou(const BinaryMask& a, const BinaryMask& b);

}  // namespace polydet::geom

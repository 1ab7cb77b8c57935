#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "errors.hpp"

namespace polydet::nn {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

bool g_negate_ln_grad = false;

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

NodePtr make_node(std::vector<int> shape, std::vector<double> values) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  return n;
}

// Result node wiring: parents and backprop are attached only when some
// parent requires grad, so constant subgraphs carry no tape.
Tensor make_result(std::vector<int> shape, std::vector<double> values,
                   std::vector<NodePtr> parents,
                   std::function<void(const Node&, const std::vector<double>&,
                                      const std::vector<std::vector<double>*>&)>
                       backprop) {
  auto n = make_node(std::move(shape), std::move(values));
  bool needs = false;
  for (const auto& p : parents)
    if (p->requires_grad) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor(n);
}

// Accumulating matmul kernels on row-major buffers.
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void mm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[m,n] += a[k,m]^T * b[k,n]
void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<size_t>(p) * m;
    const double* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = arow[i];
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

double stable_sigmoid(double x) {
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    double e = std::exp(x);
    s = e / (1.0 + e);
  }
  // Keep the output strictly inside (0,1) even when exp underflows.
  if (s >= 1.0) s = std::nextafter(1.0, 0.0);
  if (s <= 0.0) s = std::numeric_limits<double>::min();
  return s;
}

// Shared implementation for unary pointwise ops with a value-based gradient.
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.values()[i]);
  return make_result(
      a.shape(), std::move(out), {a.node()},
      [bwd](const Node& self, const std::vector<double>& g,
            const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        const auto& x = self.parents[0]->values;
        auto& dst = *pg[0];
        for (size_t i = 0; i < g.size(); ++i)
          dst[i] += g[i] * bwd(x[i], self.values[i]);
      });
}

}  // namespace

// --- Tensor basics ----------------------------------------------------------

Tensor Tensor::constant(std::vector<int> shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor: " + shape_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::zeros(std::vector<int> shape) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return Tensor(make_node(std::move(shape), std::move(v)));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  std::vector<double> v(shape_numel(shape), value);
  return Tensor(make_node(std::move(shape), std::move(v)));
}

Tensor Tensor::scalar_of(double value) { return constant({1}, {value}); }

Tensor Tensor::variable(std::vector<int> shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node()->requires_grad = true;
  return t;
}

int Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows(): tensor is not 2-d: " + shape_string(shape()));
  return dim(0);
}

int Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols(): tensor is not 2-d: " + shape_string(shape()));
  return dim(1);
}

double Tensor::at(int r, int c) const {
  return node_->values[static_cast<size_t>(r) * dim(1) + c];
}

double Tensor::scalar() const {
  if (numel() != 1)
    throw ShapeError("scalar(): tensor has " + std::to_string(numel()) + " elements");
  return node_->values[0];
}

void Tensor::zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// --- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) +
                     " x " + shape_string(b.shape()));
  int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_result(
      {m, n}, std::move(out), {a.node(), b.node()},
      [m, k, n](const Node& self, const std::vector<double>& g,
                const std::vector<std::vector<double>*>& pg) {
        const auto& av = self.parents[0]->values;
        const auto& bv = self.parents[1]->values;
        if (pg[0]) mm_nt(g.data(), bv.data(), pg[0]->data(), m, n, k);
        if (pg[1]) mm_tn(av.data(), g.data(), pg[1]->data(), k, m, n);
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected 2-d, got " + shape_string(a.shape()));
  int r = a.rows(), c = a.cols();
  std::vector<double> out(a.numel());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(j) * r + i] = a.at(i, j);
  return make_result(
      {c, r}, std::move(out), {a.node()},
      [r, c](const Node&, const std::vector<double>& g,
             const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            dst[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
      });
}

namespace {

// add/sub with optional trailing-bias broadcast of b over the last axis.
Tensor add_like(const Tensor& a, const Tensor& b, double sign) {
  const char* op = sign > 0 ? "add" : "sub";
  bool bias = a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.cols();
  if (!bias) require_same_shape(a, b, op);
  std::vector<double> out(a.numel());
  if (bias) {
    int r = a.rows(), c = a.cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        out[static_cast<size_t>(i) * c + j] = a.at(i, j) + sign * b.at(static_cast<size_t>(j));
  } else {
    for (size_t i = 0; i < out.size(); ++i)
      out[i] = a.values()[i] + sign * b.values()[i];
  }
  return make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [bias, sign](const Node& self, const std::vector<double>& g,
                   const std::vector<std::vector<double>*>& pg) {
        if (pg[0]) {
          auto& dst = *pg[0];
          for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        if (pg[1]) {
          auto& dst = *pg[1];
          if (bias) {
            int c = self.shape[1];
            for (size_t i = 0; i < g.size(); ++i)
              dst[i % static_cast<size_t>(c)] += sign * g[i];
          } else {
            for (size_t i = 0; i < g.size(); ++i) dst[i] += sign * g[i];
          }
        }
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_like(a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like(a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](const Node& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        const auto& av = self.parents[0]->values;
        const auto& bv = self.parents[1]->values;
        if (pg[0])
          for (size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * bv[i];
        if (pg[1])
          for (size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * av[i];
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / b.values()[i];
  return make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](const Node& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        const auto& av = self.parents[0]->values;
        const auto& bv = self.parents[1]->values;
        if (pg[0])
          for (size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / bv[i];
        if (pg[1])
          for (size_t i = 0; i < g.size(); ++i)
            (*pg[1])[i] -= g[i] * av[i] / (bv[i] * bv[i]);
      });
}

namespace {

Tensor extremum(const Tensor& a, const Tensor& b, bool take_min) {
  require_same_shape(a, b, take_min ? "minimum" : "maximum");
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = take_min ? std::min(a.values()[i], b.values()[i])
                      : std::max(a.values()[i], b.values()[i]);
  return make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [take_min](const Node& self, const std::vector<double>& g,
                 const std::vector<std::vector<double>*>& pg) {
        const auto& av = self.parents[0]->values;
        const auto& bv = self.parents[1]->values;
        for (size_t i = 0; i < g.size(); ++i) {
          // Ties route the gradient to the first operand.
          bool first = take_min ? (av[i] <= bv[i]) : (av[i] >= bv[i]);
          if (first) {
            if (pg[0]) (*pg[0])[i] += g[i];
          } else {
            if (pg[1]) (*pg[1])[i] += g[i];
          }
        }
      });
}

}  // namespace

Tensor minimum(const Tensor& a, const Tensor& b) { return extremum(a, b, true); }
Tensor maximum(const Tensor& a, const Tensor& b) { return extremum(a, b, false); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](double x) { return stable_sigmoid(x); },
      [](double, double s) { return s * (1.0 - s); });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sin(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sin(x); },
      [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); });
}

Tensor pow_scalar(const Tensor& a, double exponent) {
  return unary_op(
      a,
      [exponent](double x) { return exponent == 0.0 ? 1.0 : std::pow(x, exponent); },
      [exponent](double x, double) {
        if (exponent == 0.0) return 0.0;
        return exponent * std::pow(x, exponent - 1.0);
      });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_op(
      a, [value](double x) { return x + value; },
      [](double, double) { return 1.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& a, int axis, const Tensor& mask) {
  if (a.rank() < 1 || a.rank() > 2)
    throw ShapeError("softmax: expected 1-d or 2-d, got " + shape_string(a.shape()));
  if (axis < 0 || axis >= a.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of bounds for " +
                     shape_string(a.shape()));
  if (mask.defined()) {
    if (mask.shape() != a.shape())
      throw ShapeError("softmax: mask shape " + shape_string(mask.shape()) +
                       " does not match " + shape_string(a.shape()));
    if (mask.requires_grad())
      throw ShapeError("softmax: mask must be a constant");
  }

  int slices, len, stride, slice_step;
  if (a.rank() == 1) {
    slices = 1, len = a.dim(0), stride = 1, slice_step = 0;
  } else if (axis == 1) {
    slices = a.dim(0), len = a.dim(1), stride = 1, slice_step = a.dim(1);
  } else {
    slices = a.dim(1), len = a.dim(0), stride = a.dim(1), slice_step = 1;
  }

  const double* mv = mask.defined() ? mask.values().data() : nullptr;
  std::vector<double> out(a.numel(), 0.0);
  for (int s = 0; s < slices; ++s) {
    size_t base = static_cast<size_t>(s) * slice_step;
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < len; ++i) {
      size_t idx = base + static_cast<size_t>(i) * stride;
      if (mv && mv[idx] < 0.5) continue;
      mx = std::max(mx, a.values()[idx]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked
    double total = 0.0;
    for (int i = 0; i < len; ++i) {
      size_t idx = base + static_cast<size_t>(i) * stride;
      if (mv && mv[idx] < 0.5) continue;
      double e = std::exp(a.values()[idx] - mx);
      out[idx] = e;
      total += e;
    }
    for (int i = 0; i < len; ++i) {
      size_t idx = base + static_cast<size_t>(i) * stride;
      out[idx] /= total;
    }
  }

  std::vector<NodePtr> parents = {a.node()};
  if (mask.defined()) parents.push_back(mask.node());
  return make_result(
      a.shape(), std::move(out), std::move(parents),
      [slices, len, stride, slice_step](const Node& self, const std::vector<double>& g,
                                        const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        const auto& sv = self.values;
        for (int s = 0; s < slices; ++s) {
          size_t base = static_cast<size_t>(s) * slice_step;
          double dot = 0.0;
          for (int i = 0; i < len; ++i) {
            size_t idx = base + static_cast<size_t>(i) * stride;
            dot += g[idx] * sv[idx];
          }
          for (int i = 0; i < len; ++i) {
            size_t idx = base + static_cast<size_t>(i) * stride;
            dst[idx] += sv[idx] * (g[idx] - dot);
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1 || x.rank() > 2)
    throw ShapeError("layer_norm: expected 1-d or 2-d, got " + shape_string(x.shape()));
  int c = x.rank() == 2 ? x.dim(1) : x.dim(0);
  int r = x.rank() == 2 ? x.dim(0) : 1;
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("layer_norm: gamma " + shape_string(gamma.shape()) + ", beta " +
                     shape_string(beta.shape()) + " do not match last axis of " +
                     shape_string(x.shape()));
  if (eps <= 0.0) throw NumericError("layer_norm: eps must be positive");

  std::vector<double> out(x.numel());
  for (int i = 0; i < r; ++i) {
    const double* row = x.values().data() + static_cast<size_t>(i) * c;
    double* orow = out.data() + static_cast<size_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j)
      orow[j] = gamma.at(static_cast<size_t>(j)) * (row[j] - mu) * inv +
                beta.at(static_cast<size_t>(j));
  }

  return make_result(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [r, c, eps](const Node& self, const std::vector<double>& g,
                  const std::vector<std::vector<double>*>& pg) {
        const auto& xv = self.parents[0]->values;
        const auto& gv = self.parents[1]->values;
        double sign = g_negate_ln_grad ? -1.0 : 1.0;
        for (int i = 0; i < r; ++i) {
          const double* row = xv.data() + static_cast<size_t>(i) * c;
          const double* grow = g.data() + static_cast<size_t>(i) * c;
          double mu = 0.0;
          for (int j = 0; j < c; ++j) mu += row[j];
          mu /= c;
          double var = 0.0;
          for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= c;
          double inv = 1.0 / std::sqrt(var + eps);
          double mean_dy = 0.0, mean_dyx = 0.0;
          for (int j = 0; j < c; ++j) {
            double xhat = (row[j] - mu) * inv;
            double dy = grow[j] * gv[static_cast<size_t>(j)];
            mean_dy += dy;
            mean_dyx += dy * xhat;
          }
          mean_dy /= c;
          mean_dyx /= c;
          for (int j = 0; j < c; ++j) {
            double xhat = (row[j] - mu) * inv;
            double dy = grow[j] * gv[static_cast<size_t>(j)];
            if (pg[0])
              (*pg[0])[static_cast<size_t>(i) * c + j] +=
                  sign * inv * (dy - mean_dy - xhat * mean_dyx);
            if (pg[1]) (*pg[1])[static_cast<size_t>(j)] += grow[j] * xhat;
            if (pg[2]) (*pg[2])[static_cast<size_t>(j)] += grow[j];
          }
        }
      });
}

Tensor concat(const std::vector<Tensor>& tensors, int axis) {
  if (tensors.empty()) throw ShapeError("concat: no inputs");
  int rank = tensors[0].rank();
  if (rank < 1 || rank > 2) throw ShapeError("concat: expected 1-d or 2-d inputs");
  if (axis < 0 || axis >= rank)
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of bounds");
  for (const auto& t : tensors) {
    if (t.rank() != rank)
      throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && t.dim(d) != tensors[0].dim(d))
        throw ShapeError("concat: incompatible shapes " + shape_string(tensors[0].shape()) +
                         " vs " + shape_string(t.shape()));
  }

  std::vector<int> shape = tensors[0].shape();
  int total = 0;
  for (const auto& t : tensors) total += t.dim(axis);
  shape[static_cast<size_t>(axis)] = total;

  std::vector<double> out(shape_numel(shape));
  std::vector<int> offsets;
  if (rank == 1 || axis == 0) {
    size_t pos = 0;
    for (const auto& t : tensors) {
      offsets.push_back(static_cast<int>(pos));
      std::copy(t.values().begin(), t.values().end(), out.begin() + pos);
      pos += t.numel();
    }
  } else {
    int r = shape[0];
    int off = 0;
    for (const auto& t : tensors) {
      offsets.push_back(off);
      int c = t.cols();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          out[static_cast<size_t>(i) * total + off + j] = t.at(i, j);
      off += c;
    }
  }

  std::vector<NodePtr> parents;
  std::vector<int> widths;
  for (const auto& t : tensors) {
    parents.push_back(t.node());
    widths.push_back(t.dim(axis));
  }
  bool column_mode = (rank == 2 && axis == 1);
  int rows = rank == 2 ? shape[0] : 1;
  return make_result(
      shape, std::move(out), std::move(parents),
      [offsets, widths, column_mode, rows, total](
          const Node& self, const std::vector<double>& g,
          const std::vector<std::vector<double>*>& pg) {
        for (size_t k = 0; k < pg.size(); ++k) {
          if (!pg[k]) continue;
          auto& dst = *pg[k];
          if (!column_mode) {
            // axis-0 / 1-d case: offsets are flat element positions
            size_t start = static_cast<size_t>(offsets[k]);
            size_t count = self.parents[k]->numel();
            for (size_t i = 0; i < count; ++i) dst[i] += g[start + i];
          } else {
            int c = widths[k], off = offsets[k];
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < c; ++j)
                dst[static_cast<size_t>(i) * c + j] +=
                    g[static_cast<size_t>(i) * total + off + j];
          }
        }
      });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  if (a.rank() < 1 || a.rank() > 2)
    throw ShapeError("slice: expected 1-d or 2-d, got " + shape_string(a.shape()));
  if (axis < 0 || axis >= a.rank() || start < 0 || len <= 0 ||
      start + len > a.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds on axis " +
                     std::to_string(axis) + " of " + shape_string(a.shape()));

  std::vector<int> shape = a.shape();
  shape[static_cast<size_t>(axis)] = len;
  std::vector<double> out(shape_numel(shape));
  int rows = a.rank() == 2 ? a.dim(0) : 1;
  int cols = a.rank() == 2 ? a.dim(1) : a.dim(0);
  bool column_mode = (a.rank() == 2 && axis == 1) || a.rank() == 1;
  if (column_mode) {
    int r = a.rank() == 2 ? rows : 1;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < len; ++j)
        out[static_cast<size_t>(i) * len + j] =
            a.values()[static_cast<size_t>(i) * cols + start + j];
  } else {
    std::copy(a.values().begin() + static_cast<size_t>(start) * cols,
              a.values().begin() + static_cast<size_t>(start + len) * cols, out.begin());
  }
  return make_result(
      shape, std::move(out), {a.node()},
      [axis, start, len, rows, cols, column_mode](
          const Node& self, const std::vector<double>& g,
          const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        if (column_mode) {
          int r = self.shape.size() == 2 ? self.shape[0] : 1;
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < len; ++j)
              dst[static_cast<size_t>(i) * cols + start + j] +=
                  g[static_cast<size_t>(i) * len + j];
        } else {
          size_t base = static_cast<size_t>(start) * cols;
          for (size_t i = 0; i < g.size(); ++i) dst[base + i] += g[i];
        }
      });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
  if (a.rank() != 2) throw ShapeError("gather_rows: expected 2-d, got " + shape_string(a.shape()));
  int c = a.cols();
  for (int idx : indices)
    if (idx < 0 || idx >= a.rows())
      throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range for " +
                       shape_string(a.shape()));
  std::vector<double> out(indices.size() * static_cast<size_t>(c));
  for (size_t i = 0; i < indices.size(); ++i)
    std::copy(a.values().begin() + static_cast<size_t>(indices[i]) * c,
              a.values().begin() + static_cast<size_t>(indices[i] + 1) * c,
              out.begin() + i * c);
  return make_result(
      {static_cast<int>(indices.size()), c}, std::move(out), {a.node()},
      [indices, c](const Node&, const std::vector<double>& g,
                   const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        for (size_t i = 0; i < indices.size(); ++i)
          for (int j = 0; j < c; ++j)
            dst[static_cast<size_t>(indices[i]) * c + j] += g[i * c + j];
      });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_result(
      {1}, {total}, {a.node()},
      [](const Node& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        auto& dst = *pg[0];
        for (size_t i = 0; i < self.parents[0]->numel(); ++i) dst[i] += g[0];
      });
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw NumericError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::vector<double>> flow;
  flow[loss.node().get()] = {1.0};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto fit = flow.find(node);
    if (fit == flow.end()) continue;
    const std::vector<double>& g = fit->second;
    if (node->backprop) {
      std::vector<std::vector<double>*> pg(node->parents.size(), nullptr);
      for (size_t i = 0; i < node->parents.size(); ++i) {
        Node* p = node->parents[i].get();
        if (!p->requires_grad) continue;
        auto [pit, inserted] = flow.try_emplace(p);
        if (inserted) pit->second.assign(p->numel(), 0.0);
        pg[i] = &pit->second;
      }
      node->backprop(*node, g, pg);
    }
  }

  for (auto& [node, g] : flow) {
    if (node->grad.empty()) node->grad.assign(node->numel(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
  }
}

void set_layer_norm_grad_negation(bool enabled) { g_negate_ln_grad = enabled; }

}  // namespace polydet::nn

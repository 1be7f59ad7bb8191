#include "tapkit/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace tapkit::ad {

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

namespace {

Map emap(Tensor& t) { return Map(t.data(), t.rows(), t.cols()); }
CMap emap(const Tensor& t) { return CMap(t.data(), t.rows(), t.cols()); }

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Shared bilinear kernel. Coordinates are given in [0,1] units; cell
// coordinate of x is x*(W-1), clamped to the border. `wx` reports whether
// the x coordinate was inside the un-clamped range (gradient gate).
struct BilinearCoeffs {
  int x0, x1, y0, y1;
  double fx, fy;
  bool x_free, y_free;
};

inline BilinearCoeffs bilinear_coeffs(double x, double y, int h, int w) {
  BilinearCoeffs c;
  double cx = x * (w - 1);
  double cy = y * (h - 1);
  c.x_free = cx > 0.0 && cx < w - 1;
  c.y_free = cy > 0.0 && cy < h - 1;
  cx = std::clamp(cx, 0.0, static_cast<double>(w - 1));
  cy = std::clamp(cy, 0.0, static_cast<double>(h - 1));
  c.x0 = std::min(static_cast<int>(cx), std::max(w - 2, 0));
  c.y0 = std::min(static_cast<int>(cy), std::max(h - 2, 0));
  c.x1 = std::min(c.x0 + 1, w - 1);
  c.y1 = std::min(c.y0 + 1, h - 1);
  c.fx = cx - c.x0;
  c.fy = cy - c.y0;
  return c;
}

// Same but with coordinates already in cell units (for lattice offsets).
inline BilinearCoeffs bilinear_coeffs_cells(double cx, double cy, int h,
                                            int w) {
  BilinearCoeffs c;
  c.x_free = cx > 0.0 && cx < w - 1;
  c.y_free = cy > 0.0 && cy < h - 1;
  cx = std::clamp(cx, 0.0, static_cast<double>(w - 1));
  cy = std::clamp(cy, 0.0, static_cast<double>(h - 1));
  c.x0 = std::min(static_cast<int>(cx), std::max(w - 2, 0));
  c.y0 = std::min(static_cast<int>(cy), std::max(h - 2, 0));
  c.x1 = std::min(c.x0 + 1, w - 1);
  c.y1 = std::min(c.y0 + 1, h - 1);
  c.fx = cx - c.x0;
  c.fy = cy - c.y0;
  return c;
}

}  // namespace

int Graph::push_node(std::function<void()> back) {
  nodes_.push_back(Node{std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

bool Graph::should_record(std::initializer_list<const Var*> parents) const {
  if (!recording_) return false;
  for (const Var* p : parents)
    if (p->node >= 0) return true;
  return false;
}

Tensor& Graph::gbuf(int node, int rows, int cols) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  if (!grads_[node]) grads_[node] = std::make_unique<Tensor>(rows, cols);
  return *grads_[node];
}

Var Graph::leaf(TensorPtr v) {
  if (!recording_) return Var{std::move(v), -1};
  Var out{std::move(v), -1};
  out.node = push_node(nullptr);
  return out;
}

void Graph::backward(const Var& loss) {
  TAPKIT_REQUIRE(loss.node >= 0, "backward: loss is not on the tape");
  TAPKIT_REQUIRE(loss.rows() == 1 && loss.cols() == 1,
                 "backward: loss must be a scalar");
  grads_.resize(nodes_.size());
  gbuf(loss.node, 1, 1)(0, 0) = 1.0;
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[i] && nodes_[i].back) nodes_[i].back();
  }
}

bool Graph::has_grad(const Var& v) const {
  return v.node >= 0 && static_cast<std::size_t>(v.node) < grads_.size() &&
         grads_[v.node] != nullptr;
}

const Tensor& Graph::grad(const Var& v) const {
  TAPKIT_REQUIRE(has_grad(v), "grad: no gradient recorded for this Var");
  return *grads_[v.node];
}

// ---------------------------------------------------------------------------
// elementwise / linear algebra
// ---------------------------------------------------------------------------

Var Graph::add(const Var& a, const Var& b) {
  TAPKIT_CHECK_ARG(a.val->same_shape(*b.val), "add: shape mismatch");
  auto out = make_tensor(a.rows(), a.cols());
  emap(*out) = emap(*a.val) + emap(*b.val);
  Var r{out, -1};
  if (should_record({&a, &b})) {
    int an = a.node, bn = b.node, rows = a.rows(), cols = a.cols();
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, bn, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) emap(*ga) += emap(*g);
      if (Tensor* gb = gbuf_if(bn, rows, cols)) emap(*gb) += emap(*g);
    };
  }
  return r;
}

Var Graph::sub(const Var& a, const Var& b) {
  TAPKIT_CHECK_ARG(a.val->same_shape(*b.val), "sub: shape mismatch");
  auto out = make_tensor(a.rows(), a.cols());
  emap(*out) = emap(*a.val) - emap(*b.val);
  Var r{out, -1};
  if (should_record({&a, &b})) {
    int an = a.node, bn = b.node, rows = a.rows(), cols = a.cols();
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, bn, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) emap(*ga) += emap(*g);
      if (Tensor* gb = gbuf_if(bn, rows, cols)) emap(*gb) -= emap(*g);
    };
  }
  return r;
}

Var Graph::mul(const Var& a, const Var& b) {
  TAPKIT_CHECK_ARG(a.val->same_shape(*b.val), "mul: shape mismatch");
  auto out = make_tensor(a.rows(), a.cols());
  emap(*out) = emap(*a.val).cwiseProduct(emap(*b.val));
  Var r{out, -1};
  if (should_record({&a, &b})) {
    int an = a.node, bn = b.node, rows = a.rows(), cols = a.cols();
    TensorPtr av = a.val, bv = b.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, bn, av, bv, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols))
        emap(*ga) += emap(*g).cwiseProduct(emap(*bv));
      if (Tensor* gb = gbuf_if(bn, rows, cols))
        emap(*gb) += emap(*g).cwiseProduct(emap(*av));
    };
  }
  return r;
}

Var Graph::scale(const Var& a, double s) {
  auto out = make_tensor(a.rows(), a.cols());
  emap(*out) = emap(*a.val) * s;
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, s, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) emap(*ga) += emap(*g) * s;
    };
  }
  return r;
}

Var Graph::add_scalar(const Var& a, double s) {
  auto out = make_tensor(a.rows(), a.cols());
  emap(*out) = emap(*a.val).array() + s;
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) emap(*ga) += emap(*g);
    };
  }
  return r;
}

Var Graph::add_rowvec(const Var& a, const Var& b) {
  TAPKIT_CHECK_ARG(b.rows() == 1 && b.cols() == a.cols(),
                   "add_rowvec: b must be [1, cols(a)]");
  auto out = make_tensor(a.rows(), a.cols());
  emap(*out) = emap(*a.val).rowwise() + emap(*b.val).row(0);
  Var r{out, -1};
  if (should_record({&a, &b})) {
    int an = a.node, bn = b.node, rows = a.rows(), cols = a.cols();
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, bn, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) emap(*ga) += emap(*g);
      if (Tensor* gb = gbuf_if(bn, 1, cols))
        emap(*gb).row(0) += emap(*g).colwise().sum();
    };
  }
  return r;
}

Var Graph::matmul(const Var& a, const Var& b) {
  TAPKIT_CHECK_ARG(a.cols() == b.rows(), "matmul: inner dims mismatch");
  auto out = make_tensor(a.rows(), b.cols());
  emap(*out) = emap(*a.val) * emap(*b.val);
  Var r{out, -1};
  if (should_record({&a, &b})) {
    int an = a.node, bn = b.node;
    TensorPtr av = a.val, bv = b.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, bn, av, bv]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, av->rows(), av->cols()))
        emap(*ga) += emap(*g) * emap(*bv).transpose();
      if (Tensor* gb = gbuf_if(bn, bv->rows(), bv->cols()))
        emap(*gb) += emap(*av).transpose() * emap(*g);
    };
  }
  return r;
}

Var Graph::matmul_nt(const Var& a, const Var& b) {
  TAPKIT_CHECK_ARG(a.cols() == b.cols(), "matmul_nt: inner dims mismatch");
  auto out = make_tensor(a.rows(), b.rows());
  emap(*out) = emap(*a.val) * emap(*b.val).transpose();
  Var r{out, -1};
  if (should_record({&a, &b})) {
    int an = a.node, bn = b.node;
    TensorPtr av = a.val, bv = b.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, bn, av, bv]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, av->rows(), av->cols()))
        emap(*ga) += emap(*g) * emap(*bv);
      if (Tensor* gb = gbuf_if(bn, bv->rows(), bv->cols()))
        emap(*gb) += emap(*g).transpose() * emap(*av);
    };
  }
  return r;
}

Var Graph::linear(const Var& x, const Var& w, const Var& b) {
  TAPKIT_CHECK_ARG(x.cols() == w.cols(), "linear: input width != fan-in");
  auto out = make_tensor(x.rows(), w.rows());
  emap(*out) = emap(*x.val) * emap(*w.val).transpose();
  if (b.defined()) {
    TAPKIT_CHECK_ARG(b.rows() == 1 && b.cols() == w.rows(),
                     "linear: bias must be [1, out]");
    emap(*out).rowwise() += emap(*b.val).row(0);
  }
  Var r{out, -1};
  bool rec = b.defined() ? should_record({&x, &w, &b})
                         : should_record({&x, &w});
  if (rec) {
    int xn = x.node, wn = w.node, bn = b.defined() ? b.node : -1;
    TensorPtr xv = x.val, wv = w.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, xn, wn, bn, xv, wv]() {
      const Tensor* g = gout(id);
      if (Tensor* gx = gbuf_if(xn, xv->rows(), xv->cols()))
        emap(*gx) += emap(*g) * emap(*wv);
      if (Tensor* gw = gbuf_if(wn, wv->rows(), wv->cols()))
        emap(*gw) += emap(*g).transpose() * emap(*xv);
      if (Tensor* gb = gbuf_if(bn, 1, g->cols()))
        emap(*gb).row(0) += emap(*g).colwise().sum();
    };
  }
  return r;
}

Var Graph::concat_cols(std::span<const Var> parts) {
  TAPKIT_CHECK_ARG(!parts.empty(), "concat_cols: no parts");
  int rows = parts[0].rows();
  int cols = 0;
  for (const Var& p : parts) {
    TAPKIT_CHECK_ARG(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  auto out = make_tensor(rows, cols);
  int off = 0;
  for (const Var& p : parts) {
    emap(*out).middleCols(off, p.cols()) = emap(*p.val);
    off += p.cols();
  }
  Var r{out, -1};
  bool rec = false;
  if (recording_)
    for (const Var& p : parts)
      if (p.node >= 0) rec = true;
  if (rec) {
    std::vector<std::pair<int, int>> spans;  // (node, width)
    for (const Var& p : parts) spans.emplace_back(p.node, p.cols());
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, spans, rows]() {
      const Tensor* g = gout(id);
      int off2 = 0;
      for (auto [node, width] : spans) {
        if (Tensor* gp = gbuf_if(node, rows, width))
          emap(*gp) += emap(*g).middleCols(off2, width);
        off2 += width;
      }
    };
  }
  return r;
}

Var Graph::slice_cols(const Var& a, int c0, int c1) {
  TAPKIT_CHECK_ARG(0 <= c0 && c0 < c1 && c1 <= a.cols(),
                   "slice_cols: bad range");
  auto out = make_tensor(a.rows(), c1 - c0);
  emap(*out) = emap(*a.val).middleCols(c0, c1 - c0);
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, rows, cols, c0, c1]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols))
        emap(*ga).middleCols(c0, c1 - c0) += emap(*g);
    };
  }
  return r;
}

Var Graph::concat_rows(std::span<const Var> parts) {
  TAPKIT_CHECK_ARG(!parts.empty(), "concat_rows: no parts");
  int cols = parts[0].cols();
  int rows = 0;
  for (const Var& p : parts) {
    TAPKIT_CHECK_ARG(p.cols() == cols, "concat_rows: col mismatch");
    rows += p.rows();
  }
  auto out = make_tensor(rows, cols);
  int off = 0;
  for (const Var& p : parts) {
    emap(*out).middleRows(off, p.rows()) = emap(*p.val);
    off += p.rows();
  }
  Var r{out, -1};
  bool rec = false;
  if (recording_)
    for (const Var& p : parts)
      if (p.node >= 0) rec = true;
  if (rec) {
    std::vector<std::pair<int, int>> spans;  // (node, height)
    for (const Var& p : parts) spans.emplace_back(p.node, p.rows());
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, spans, cols]() {
      const Tensor* g = gout(id);
      int off2 = 0;
      for (auto [node, height] : spans) {
        if (Tensor* gp = gbuf_if(node, height, cols))
          emap(*gp) += emap(*g).middleRows(off2, height);
        off2 += height;
      }
    };
  }
  return r;
}

Var Graph::slice_rows(const Var& a, int r0, int r1) {
  TAPKIT_CHECK_ARG(0 <= r0 && r0 < r1 && r1 <= a.rows(),
                   "slice_rows: bad range");
  auto out = make_tensor(r1 - r0, a.cols());
  emap(*out) = emap(*a.val).middleRows(r0, r1 - r0);
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, rows, cols, r0, r1]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols))
        emap(*ga).middleRows(r0, r1 - r0) += emap(*g);
    };
  }
  return r;
}

Var Graph::gather_rows(const Var& a, std::vector<int> idx) {
  auto out = make_tensor(static_cast<int>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    TAPKIT_CHECK_ARG(idx[i] >= 0 && idx[i] < a.rows(),
                     "gather_rows: index out of range");
    std::copy_n(a.val->data() + static_cast<std::size_t>(idx[i]) * a.cols(),
                a.cols(), out->data() + i * a.cols());
  }
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, rows, cols, ix]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) {
        for (std::size_t i = 0; i < ix->size(); ++i) {
          double* dst = ga->data() + static_cast<std::size_t>((*ix)[i]) * cols;
          const double* src = g->data() + i * cols;
          for (int c = 0; c < cols; ++c) dst[c] += src[c];
        }
      }
    };
  }
  return r;
}

Var Graph::sum(const Var& a) {
  auto out = make_tensor(1, 1);
  (*out)(0, 0) = emap(*a.val).sum();
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols))
        emap(*ga).array() += (*g)(0, 0);
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

Var Graph::gelu(const Var& a) {
  auto out = make_tensor(a.rows(), a.cols());
  const double inv_sqrt2 = 0.7071067811865476;
  for (std::size_t i = 0; i < a.val->size(); ++i) {
    double x = (*a.val)[i];
    (*out)[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    TensorPtr av = a.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, av, rows, cols, inv_sqrt2]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) {
        const double inv_sqrt2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < av->size(); ++i) {
          double x = (*av)[i];
          double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          (*ga)[i] += (*g)[i] * (cdf + x * pdf);
        }
      }
    };
  }
  return r;
}

Var Graph::sigmoid(const Var& a) {
  auto out = make_tensor(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.val->size(); ++i)
    (*out)[i] = stable_sigmoid((*a.val)[i]);
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    TensorPtr ov = out;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, ov, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) {
        for (std::size_t i = 0; i < ov->size(); ++i) {
          double s = (*ov)[i];
          (*ga)[i] += (*g)[i] * s * (1.0 - s);
        }
      }
    };
  }
  return r;
}

Var Graph::inverse_sigmoid(const Var& a, double eps) {
  TAPKIT_CHECK_ARG(eps > 0.0 && eps < 0.5, "inverse_sigmoid: eps in (0, 0.5)");
  auto out = make_tensor(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.val->size(); ++i) {
    double p = std::clamp((*a.val)[i], eps, 1.0 - eps);
    (*out)[i] = std::log(p) - std::log1p(-p);
  }
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    TensorPtr av = a.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, av, eps, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) {
        for (std::size_t i = 0; i < av->size(); ++i) {
          double p = (*av)[i];
          if (p > eps && p < 1.0 - eps) (*ga)[i] += (*g)[i] / (p * (1.0 - p));
        }
      }
    };
  }
  return r;
}

Var Graph::softmax_rows(const Var& a) {
  auto out = make_tensor(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i) {
    double mx = -1e300;
    for (int j = 0; j < a.cols(); ++j) mx = std::max(mx, (*a.val)(i, j));
    double z = 0.0;
    for (int j = 0; j < a.cols(); ++j) {
      double e = std::exp((*a.val)(i, j) - mx);
      (*out)(i, j) = e;
      z += e;
    }
    for (int j = 0; j < a.cols(); ++j) (*out)(i, j) /= z;
  }
  Var r{out, -1};
  if (should_record({&a})) {
    int an = a.node, rows = a.rows(), cols = a.cols();
    TensorPtr ov = out;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, an, ov, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* ga = gbuf_if(an, rows, cols)) {
        for (int i = 0; i < rows; ++i) {
          double dot = 0.0;
          for (int j = 0; j < cols; ++j) dot += (*g)(i, j) * (*ov)(i, j);
          for (int j = 0; j < cols; ++j)
            (*ga)(i, j) += (*ov)(i, j) * ((*g)(i, j) - dot);
        }
      }
    };
  }
  return r;
}

Var Graph::layer_norm(const Var& x, const Var& gamma, const Var& beta,
                      double eps) {
  TAPKIT_CHECK_ARG(gamma.rows() == 1 && gamma.cols() == x.cols() &&
                       beta.rows() == 1 && beta.cols() == x.cols(),
                   "layer_norm: affine params must be [1, cols]");
  int rows = x.rows(), cols = x.cols();
  auto out = make_tensor(rows, cols);
  auto xhat = make_tensor(rows, cols);
  auto rstd = make_tensor(rows, 1);
  for (int i = 0; i < rows; ++i) {
    double m = 0.0;
    for (int j = 0; j < cols; ++j) m += (*x.val)(i, j);
    m /= cols;
    double v = 0.0;
    for (int j = 0; j < cols; ++j) {
      double d = (*x.val)(i, j) - m;
      v += d * d;
    }
    v /= cols;
    double rs = 1.0 / std::sqrt(v + eps);
    (*rstd)(i, 0) = rs;
    for (int j = 0; j < cols; ++j) {
      double xh = ((*x.val)(i, j) - m) * rs;
      (*xhat)(i, j) = xh;
      (*out)(i, j) = xh * (*gamma.val)(0, j) + (*beta.val)(0, j);
    }
  }
  Var r{out, -1};
  if (should_record({&x, &gamma, &beta})) {
    int xn = x.node, gn = gamma.node, bn = beta.node;
    TensorPtr gv = gamma.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, xn, gn, bn, gv, xhat, rstd, rows, cols]() {
      const Tensor* g = gout(id);
      Tensor* gx = gbuf_if(xn, rows, cols);
      Tensor* gg = gbuf_if(gn, 1, cols);
      Tensor* gb = gbuf_if(bn, 1, cols);
      for (int i = 0; i < rows; ++i) {
        if (gg || gb) {
          for (int j = 0; j < cols; ++j) {
            if (gg) (*gg)(0, j) += (*g)(i, j) * (*xhat)(i, j);
            if (gb) (*gb)(0, j) += (*g)(i, j);
          }
        }
        if (gx) {
          double s1 = 0.0, s2 = 0.0;
          for (int j = 0; j < cols; ++j) {
            double dxh = (*g)(i, j) * (*gv)(0, j);
            s1 += dxh;
            s2 += dxh * (*xhat)(i, j);
          }
          s1 /= cols;
          s2 /= cols;
          double rs = (*rstd)(i, 0);
          for (int j = 0; j < cols; ++j) {
            double dxh = (*g)(i, j) * (*gv)(0, j);
            (*gx)(i, j) += rs * (dxh - s1 - (*xhat)(i, j) * s2);
          }
        }
      }
    };
  }
  return r;
}

Var Graph::attention(const Var& q, const Var& k, const Var& v, int batch) {
  TAPKIT_CHECK_ARG(batch >= 1, "attention: batch must be >= 1");
  TAPKIT_CHECK_ARG(q.cols() == k.cols() && k.rows() == v.rows(),
                   "attention: shape mismatch");
  TAPKIT_CHECK_ARG(q.rows() % batch == 0 && k.rows() % batch == 0,
                   "attention: rows not divisible by batch");
  int n = q.rows() / batch;
  int m = k.rows() / batch;
  int c = q.cols();
  int cv = v.cols();
  TAPKIT_CHECK_ARG(m >= 1, "attention: empty key set");
  double sc = 1.0 / std::sqrt(static_cast<double>(c));
  auto out = make_tensor(q.rows(), cv);
  auto probs = make_tensor(batch * n, m);
  for (int b = 0; b < batch; ++b) {
    CMap qb(q.val->data() + static_cast<std::size_t>(b) * n * c, n, c);
    CMap kb(k.val->data() + static_cast<std::size_t>(b) * m * c, m, c);
    CMap vb(v.val->data() + static_cast<std::size_t>(b) * m * cv, m, cv);
    Map pb(probs->data() + static_cast<std::size_t>(b) * n * m, n, m);
    pb = (qb * kb.transpose()) * sc;
    for (int i = 0; i < n; ++i) {
      double mx = pb.row(i).maxCoeff();
      pb.row(i) = (pb.row(i).array() - mx).exp();
      pb.row(i) /= pb.row(i).sum();
    }
    Map ob(out->data() + static_cast<std::size_t>(b) * n * cv, n, cv);
    ob = pb * vb;
  }
  Var r{out, -1};
  if (should_record({&q, &k, &v})) {
    int qn = q.node, kn = k.node, vn = v.node;
    TensorPtr qv = q.val, kv = k.val, vv = v.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, qn, kn, vn, qv, kv, vv, probs, batch, n, m, c,
                       cv, sc]() {
      const Tensor* g = gout(id);
      Tensor* gq = gbuf_if(qn, batch * n, c);
      Tensor* gk = gbuf_if(kn, batch * m, c);
      Tensor* gv = gbuf_if(vn, batch * m, cv);
      for (int b = 0; b < batch; ++b) {
        CMap qb(qv->data() + static_cast<std::size_t>(b) * n * c, n, c);
        CMap kb(kv->data() + static_cast<std::size_t>(b) * m * c, m, c);
        CMap vb(vv->data() + static_cast<std::size_t>(b) * m * cv, m, cv);
        CMap pb(probs->data() + static_cast<std::size_t>(b) * n * m, n, m);
        CMap gb(g->data() + static_cast<std::size_t>(b) * n * cv, n, cv);
        if (gv) {
          Map gvb(gv->data() + static_cast<std::size_t>(b) * m * cv, m, cv);
          gvb += pb.transpose() * gb;
        }
        if (gq || gk) {
          EMat dp = gb * vb.transpose();  // [n, m]
          EMat dl(n, m);
          for (int i = 0; i < n; ++i) {
            double dot = dp.row(i).dot(pb.row(i));
            dl.row(i) =
                pb.row(i).cwiseProduct(dp.row(i).array() - dot).matrix();
          }
          if (gq) {
            Map gqb(gq->data() + static_cast<std::size_t>(b) * n * c, n, c);
            gqb += (dl * kb) * sc;
          }
          if (gk) {
            Map gkb(gk->data() + static_cast<std::size_t>(b) * m * c, m, c);
            gkb += (dl.transpose() * qb) * sc;
          }
        }
      }
    };
  }
  return r;
}

Var Graph::positional_encoding(const Var& loc, double tau, int channels,
                               double scale) {
  TAPKIT_CHECK_ARG(tau > 0.0, "positional_encoding: tau must be positive");
  TAPKIT_CHECK_ARG(channels >= 4 && channels % 4 == 0,
                   "positional_encoding: channels must be divisible by 4");
  TAPKIT_CHECK_ARG(loc.cols() == 2, "positional_encoding: loc must be [n,2]");
  int n = loc.rows();
  int pairs = channels / 4;  // per axis
  std::vector<double> freq(pairs);
  for (int j = 0; j < pairs; ++j)
    freq[j] = std::pow(tau, -2.0 * j / (channels / 2.0));
  auto out = make_tensor(n, channels);
  for (int i = 0; i < n; ++i) {
    for (int axis = 0; axis < 2; ++axis) {
      double a = (*loc.val)(i, axis) * scale;
      int base = axis * (channels / 2);
      for (int j = 0; j < pairs; ++j) {
        double ang = a * freq[j];
        (*out)(i, base + 2 * j) = std::sin(ang);
        (*out)(i, base + 2 * j + 1) = std::cos(ang);
      }
    }
  }
  Var r{out, -1};
  if (should_record({&loc})) {
    int ln = loc.node;
    TensorPtr lv = loc.val;
    auto fr = std::make_shared<std::vector<double>>(std::move(freq));
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, ln, lv, fr, n, channels, pairs, scale]() {
      const Tensor* g = gout(id);
      if (Tensor* gl = gbuf_if(ln, n, 2)) {
        for (int i = 0; i < n; ++i) {
          for (int axis = 0; axis < 2; ++axis) {
            double a = (*lv)(i, axis) * scale;
            int base = axis * (channels / 2);
            double da = 0.0;
            for (int j = 0; j < pairs; ++j) {
              double f = (*fr)[j];
              double ang = a * f;
              da += (*g)(i, base + 2 * j) * std::cos(ang) * f;
              da -= (*g)(i, base + 2 * j + 1) * std::sin(ang) * f;
            }
            (*gl)(i, axis) += da * scale;
          }
        }
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

Var Graph::bilinear_sample(const Var& grid, int h, int w, const Var& points) {
  TAPKIT_CHECK_ARG(h >= 1 && w >= 1 && grid.rows() == h * w,
                   "bilinear_sample: grid shape mismatch");
  TAPKIT_CHECK_ARG(points.cols() == 2, "bilinear_sample: points must be [n,2]");
  int n = points.rows();
  int c = grid.cols();
  auto out = make_tensor(n, c);
  const Tensor& gr = *grid.val;
  for (int i = 0; i < n; ++i) {
    auto bc = bilinear_coeffs((*points.val)(i, 0), (*points.val)(i, 1), h, w);
    const double* v00 = gr.data() + static_cast<std::size_t>(bc.y0 * w + bc.x0) * c;
    const double* v01 = gr.data() + static_cast<std::size_t>(bc.y0 * w + bc.x1) * c;
    const double* v10 = gr.data() + static_cast<std::size_t>(bc.y1 * w + bc.x0) * c;
    const double* v11 = gr.data() + static_cast<std::size_t>(bc.y1 * w + bc.x1) * c;
    double w00 = (1 - bc.fy) * (1 - bc.fx), w01 = (1 - bc.fy) * bc.fx;
    double w10 = bc.fy * (1 - bc.fx), w11 = bc.fy * bc.fx;
    double* o = out->data() + static_cast<std::size_t>(i) * c;
    for (int ch = 0; ch < c; ++ch)
      o[ch] = w00 * v00[ch] + w01 * v01[ch] + w10 * v10[ch] + w11 * v11[ch];
  }
  Var r{out, -1};
  if (should_record({&grid, &points})) {
    int gn = grid.node, pn = points.node;
    TensorPtr gv = grid.val, pv = points.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, gn, pn, gv, pv, h, w, n, c]() {
      const Tensor* g = gout(id);
      Tensor* gg = gbuf_if(gn, h * w, c);
      Tensor* gp = gbuf_if(pn, n, 2);
      for (int i = 0; i < n; ++i) {
        auto bc = bilinear_coeffs((*pv)(i, 0), (*pv)(i, 1), h, w);
        const double* go = g->data() + static_cast<std::size_t>(i) * c;
        double w00 = (1 - bc.fy) * (1 - bc.fx), w01 = (1 - bc.fy) * bc.fx;
        double w10 = bc.fy * (1 - bc.fx), w11 = bc.fy * bc.fx;
        if (gg) {
          double* d00 = gg->data() + static_cast<std::size_t>(bc.y0 * w + bc.x0) * c;
          double* d01 = gg->data() + static_cast<std::size_t>(bc.y0 * w + bc.x1) * c;
          double* d10 = gg->data() + static_cast<std::size_t>(bc.y1 * w + bc.x0) * c;
          double* d11 = gg->data() + static_cast<std::size_t>(bc.y1 * w + bc.x1) * c;
          for (int ch = 0; ch < c; ++ch) {
            d00[ch] += w00 * go[ch];
            d01[ch] += w01 * go[ch];
            d10[ch] += w10 * go[ch];
            d11[ch] += w11 * go[ch];
          }
        }
        if (gp) {
          const double* v00 = gv->data() + static_cast<std::size_t>(bc.y0 * w + bc.x0) * c;
          const double* v01 = gv->data() + static_cast<std::size_t>(bc.y0 * w + bc.x1) * c;
          const double* v10 = gv->data() + static_cast<std::size_t>(bc.y1 * w + bc.x0) * c;
          const double* v11 = gv->data() + static_cast<std::size_t>(bc.y1 * w + bc.x1) * c;
          double dx = 0.0, dy = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            dx += go[ch] * ((1 - bc.fy) * (v01[ch] - v00[ch]) +
                            bc.fy * (v11[ch] - v10[ch]));
            dy += go[ch] * ((1 - bc.fx) * (v10[ch] - v00[ch]) +
                            bc.fx * (v11[ch] - v01[ch]));
          }
          if (bc.x_free) (*gp)(i, 0) += dx * (w - 1);
          if (bc.y_free) (*gp)(i, 1) += dy * (h - 1);
        }
      }
    };
  }
  return r;
}

Var Graph::lattice_sample(const Var& vols, int h, int w,
                          std::vector<int> row_of, const Var& centers,
                          int grid_size, double radius_cells) {
  TAPKIT_CHECK_ARG(grid_size >= 1 && grid_size % 2 == 1,
                   "lattice_sample: grid size must be odd");
  TAPKIT_CHECK_ARG(radius_cells > 0.0, "lattice_sample: radius must be > 0");
  TAPKIT_CHECK_ARG(vols.cols() == h * w, "lattice_sample: vol shape mismatch");
  TAPKIT_CHECK_ARG(centers.cols() == 2 &&
                       centers.rows() == static_cast<int>(row_of.size()),
                   "lattice_sample: centers/rows mismatch");
  int n = centers.rows();
  int gg = grid_size * grid_size;
  double step = grid_size > 1 ? 2.0 * radius_cells / (grid_size - 1) : 0.0;
  auto out = make_tensor(n, gg);
  for (int i = 0; i < n; ++i) {
    const double* vol = vols.val->data() +
                        static_cast<std::size_t>(row_of[i]) * vols.cols();
    double cx = (*centers.val)(i, 0) * (w - 1);
    double cy = (*centers.val)(i, 1) * (h - 1);
    for (int gy = 0; gy < grid_size; ++gy) {
      double sy = cy - radius_cells + gy * step;
      for (int gx = 0; gx < grid_size; ++gx) {
        double sx = cx - radius_cells + gx * step;
        auto bc = bilinear_coeffs_cells(sx, sy, h, w);
        double v = (1 - bc.fy) * ((1 - bc.fx) * vol[bc.y0 * w + bc.x0] +
                                  bc.fx * vol[bc.y0 * w + bc.x1]) +
                   bc.fy * ((1 - bc.fx) * vol[bc.y1 * w + bc.x0] +
                            bc.fx * vol[bc.y1 * w + bc.x1]);
        (*out)(i, gy * grid_size + gx) = v;
      }
    }
  }
  Var r{out, -1};
  if (should_record({&vols, &centers})) {
    int vn = vols.node, cn = centers.node;
    TensorPtr vv = vols.val, cv = centers.val;
    auto rows = std::make_shared<std::vector<int>>(std::move(row_of));
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, vn, cn, vv, cv, rows, h, w, n, grid_size,
                       radius_cells, step]() {
      const Tensor* g = gout(id);
      Tensor* gvols = gbuf_if(vn, vv->rows(), vv->cols());
      Tensor* gc = gbuf_if(cn, n, 2);
      for (int i = 0; i < n; ++i) {
        const double* vol =
            vv->data() + static_cast<std::size_t>((*rows)[i]) * vv->cols();
        double* gvol =
            gvols ? gvols->data() +
                        static_cast<std::size_t>((*rows)[i]) * vv->cols()
                  : nullptr;
        double cx = (*cv)(i, 0) * (w - 1);
        double cy = (*cv)(i, 1) * (h - 1);
        double dx_total = 0.0, dy_total = 0.0;
        for (int gy = 0; gy < grid_size; ++gy) {
          double sy = cy - radius_cells + gy * step;
          for (int gx = 0; gx < grid_size; ++gx) {
            double sx = cx - radius_cells + gx * step;
            auto bc = bilinear_coeffs_cells(sx, sy, h, w);
            double go = (*g)(i, gy * grid_size + gx);
            double w00 = (1 - bc.fy) * (1 - bc.fx), w01 = (1 - bc.fy) * bc.fx;
            double w10 = bc.fy * (1 - bc.fx), w11 = bc.fy * bc.fx;
            if (gvol) {
              gvol[bc.y0 * w + bc.x0] += w00 * go;
              gvol[bc.y0 * w + bc.x1] += w01 * go;
              gvol[bc.y1 * w + bc.x0] += w10 * go;
              gvol[bc.y1 * w + bc.x1] += w11 * go;
            }
            if (gc) {
              double v00 = vol[bc.y0 * w + bc.x0], v01 = vol[bc.y0 * w + bc.x1];
              double v10 = vol[bc.y1 * w + bc.x0], v11 = vol[bc.y1 * w + bc.x1];
              if (bc.x_free)
                dx_total += go * ((1 - bc.fy) * (v01 - v00) + bc.fy * (v11 - v10));
              if (bc.y_free)
                dy_total += go * ((1 - bc.fx) * (v10 - v00) + bc.fx * (v11 - v01));
            }
          }
        }
        if (gc) {
          (*gc)(i, 0) += dx_total * (w - 1);
          (*gc)(i, 1) += dy_total * (h - 1);
        }
      }
    };
  }
  return r;
}

Var Graph::deformable_sample(std::span<const Var> levels,
                             std::span<const std::pair<int, int>> shapes,
                             const Var& refs, const Var& offsets,
                             const Var& weights, int points_per_level) {
  int S = static_cast<int>(levels.size());
  TAPKIT_CHECK_ARG(S >= 1 && shapes.size() == levels.size(),
                   "deformable_sample: levels/shapes mismatch");
  int K = points_per_level;
  int n = refs.rows();
  int c = levels[0].cols();
  TAPKIT_CHECK_ARG(refs.cols() == 2, "deformable_sample: refs must be [n,2]");
  TAPKIT_CHECK_ARG(offsets.rows() == n && offsets.cols() == K * S * 2,
                   "deformable_sample: offsets shape");
  TAPKIT_CHECK_ARG(weights.rows() == n && weights.cols() == K * S,
                   "deformable_sample: weights shape");
  auto out = make_tensor(n, c);
  for (int i = 0; i < n; ++i) {
    double* o = out->data() + static_cast<std::size_t>(i) * c;
    for (int s = 0; s < S; ++s) {
      auto [h, w] = shapes[s];
      const double* lv = levels[s].val->data();
      for (int k = 0; k < K; ++k) {
        int j = s * K + k;
        double wgt = (*weights.val)(i, j);
        double px = (*refs.val)(i, 0) + (*offsets.val)(i, 2 * j);
        double py = (*refs.val)(i, 1) + (*offsets.val)(i, 2 * j + 1);
        auto bc = bilinear_coeffs(px, py, h, w);
        double w00 = (1 - bc.fy) * (1 - bc.fx), w01 = (1 - bc.fy) * bc.fx;
        double w10 = bc.fy * (1 - bc.fx), w11 = bc.fy * bc.fx;
        const double* v00 = lv + static_cast<std::size_t>(bc.y0 * w + bc.x0) * c;
        const double* v01 = lv + static_cast<std::size_t>(bc.y0 * w + bc.x1) * c;
        const double* v10 = lv + static_cast<std::size_t>(bc.y1 * w + bc.x0) * c;
        const double* v11 = lv + static_cast<std::size_t>(bc.y1 * w + bc.x1) * c;
        for (int ch = 0; ch < c; ++ch)
          o[ch] += wgt * (w00 * v00[ch] + w01 * v01[ch] + w10 * v10[ch] +
                          w11 * v11[ch]);
      }
    }
  }
  Var r{out, -1};
  bool rec = recording_ && (refs.node >= 0 || offsets.node >= 0 ||
                            weights.node >= 0 ||
                            std::any_of(levels.begin(), levels.end(),
                                        [](const Var& l) { return l.node >= 0; }));
  if (rec) {
    std::vector<int> lnodes;
    std::vector<TensorPtr> lvals;
    for (const Var& l : levels) {
      lnodes.push_back(l.node);
      lvals.push_back(l.val);
    }
    std::vector<std::pair<int, int>> shp(shapes.begin(), shapes.end());
    int rn = refs.node, on = offsets.node, wn = weights.node;
    TensorPtr rv = refs.val, ov = offsets.val, wv = weights.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, lnodes, lvals, shp, rn, on, wn, rv, ov, wv, K,
                       S, n, c]() {
      const Tensor* g = gout(id);
      std::vector<Tensor*> glev(S, nullptr);
      for (int s = 0; s < S; ++s)
        glev[s] = gbuf_if(lnodes[s], lvals[s]->rows(), lvals[s]->cols());
      Tensor* gr = gbuf_if(rn, n, 2);
      Tensor* go_off = gbuf_if(on, n, K * S * 2);
      Tensor* gw = gbuf_if(wn, n, K * S);
      for (int i = 0; i < n; ++i) {
        const double* gi = g->data() + static_cast<std::size_t>(i) * c;
        for (int s = 0; s < S; ++s) {
          auto [h, w] = shp[s];
          const double* lv = lvals[s]->data();
          for (int k = 0; k < K; ++k) {
            int j = s * K + k;
            double wgt = (*wv)(i, j);
            double px = (*rv)(i, 0) + (*ov)(i, 2 * j);
            double py = (*rv)(i, 1) + (*ov)(i, 2 * j + 1);
            auto bc = bilinear_coeffs(px, py, h, w);
            double w00 = (1 - bc.fy) * (1 - bc.fx), w01 = (1 - bc.fy) * bc.fx;
            double w10 = bc.fy * (1 - bc.fx), w11 = bc.fy * bc.fx;
            const double* v00 = lv + static_cast<std::size_t>(bc.y0 * w + bc.x0) * c;
            const double* v01 = lv + static_cast<std::size_t>(bc.y0 * w + bc.x1) * c;
            const double* v10 = lv + static_cast<std::size_t>(bc.y1 * w + bc.x0) * c;
            const double* v11 = lv + static_cast<std::size_t>(bc.y1 * w + bc.x1) * c;
            double dot = 0.0, dx = 0.0, dy = 0.0;
            for (int ch = 0; ch < c; ++ch) {
              double sv = w00 * v00[ch] + w01 * v01[ch] + w10 * v10[ch] +
                          w11 * v11[ch];
              dot += gi[ch] * sv;
              dx += gi[ch] * ((1 - bc.fy) * (v01[ch] - v00[ch]) +
                              bc.fy * (v11[ch] - v10[ch]));
              dy += gi[ch] * ((1 - bc.fx) * (v10[ch] - v00[ch]) +
                              bc.fx * (v11[ch] - v01[ch]));
            }
            if (gw) (*gw)(i, j) += dot;
            double ddx = bc.x_free ? wgt * dx * (w - 1) : 0.0;
            double ddy = bc.y_free ? wgt * dy * (h - 1) : 0.0;
            if (go_off) {
              (*go_off)(i, 2 * j) += ddx;
              (*go_off)(i, 2 * j + 1) += ddy;
            }
            if (gr) {
              (*gr)(i, 0) += ddx;
              (*gr)(i, 1) += ddy;
            }
            if (glev[s]) {
              double* d00 = glev[s]->data() + static_cast<std::size_t>(bc.y0 * w + bc.x0) * c;
              double* d01 = glev[s]->data() + static_cast<std::size_t>(bc.y0 * w + bc.x1) * c;
              double* d10 = glev[s]->data() + static_cast<std::size_t>(bc.y1 * w + bc.x0) * c;
              double* d11 = glev[s]->data() + static_cast<std::size_t>(bc.y1 * w + bc.x1) * c;
              for (int ch = 0; ch < c; ++ch) {
                double gw_ch = wgt * gi[ch];
                d00[ch] += w00 * gw_ch;
                d01[ch] += w01 * gw_ch;
                d10[ch] += w10 * gw_ch;
                d11[ch] += w11 * gw_ch;
              }
            }
          }
        }
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

void im2col(const Tensor& x, int batch, int h, int w, int cin, int k,
            int stride, int pad, int ho, int wo, Tensor& cols) {
  int patch = k * k * cin;
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double* dst = cols.data() +
                      (static_cast<std::size_t>(b) * ho * wo + oy * wo + ox) *
                          patch;
        for (int ky = 0; ky < k; ++ky) {
          int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < k; ++kx) {
            int ix = ox * stride - pad + kx;
            double* d = dst + (ky * k + kx) * cin;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
              std::fill_n(d, cin, 0.0);
            } else {
              const double* src =
                  x.data() +
                  (static_cast<std::size_t>(b) * h * w + iy * w + ix) * cin;
              std::copy_n(src, cin, d);
            }
          }
        }
      }
    }
  }
}

void col2im_add(const Tensor& cols, int batch, int h, int w, int cin, int k,
                int stride, int pad, int ho, int wo, Tensor& gx) {
  int patch = k * k * cin;
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const double* src =
            cols.data() +
            (static_cast<std::size_t>(b) * ho * wo + oy * wo + ox) * patch;
        for (int ky = 0; ky < k; ++ky) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            double* dst =
                gx.data() +
                (static_cast<std::size_t>(b) * h * w + iy * w + ix) * cin;
            const double* s = src + (ky * k + kx) * cin;
            for (int ch = 0; ch < cin; ++ch) dst[ch] += s[ch];
          }
        }
      }
    }
  }
}

}  // namespace

Var Graph::conv2d(const Var& x, int batch, int h, int w, const Var& weight,
                  const Var& bias, int ksize, int stride, int pad) {
  int cin = x.cols();
  TAPKIT_CHECK_ARG(x.rows() == batch * h * w, "conv2d: input shape mismatch");
  TAPKIT_CHECK_ARG(weight.cols() == ksize * ksize * cin,
                   "conv2d: weight fan-in mismatch");
  int ho = (h + 2 * pad - ksize) / stride + 1;
  int wo = (w + 2 * pad - ksize) / stride + 1;
  TAPKIT_CHECK_ARG(ho >= 1 && wo >= 1, "conv2d: output would be empty");
  int cout = weight.rows();
  Tensor cols(batch * ho * wo, ksize * ksize * cin);
  im2col(*x.val, batch, h, w, cin, ksize, stride, pad, ho, wo, cols);
  auto out = make_tensor(batch * ho * wo, cout);
  emap(*out) = emap(cols) * emap(*weight.val).transpose();
  if (bias.defined()) emap(*out).rowwise() += emap(*bias.val).row(0);
  Var r{out, -1};
  bool rec = bias.defined() ? should_record({&x, &weight, &bias})
                            : should_record({&x, &weight});
  if (rec) {
    int xn = x.node, wn = weight.node, bn = bias.defined() ? bias.node : -1;
    TensorPtr xv = x.val, wv = weight.val;
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, xn, wn, bn, xv, wv, batch, h, w, cin, ksize,
                       stride, pad, ho, wo, cout]() {
      const Tensor* g = gout(id);
      // cols are recomputed here instead of being kept on the tape
      Tensor cols2(batch * ho * wo, ksize * ksize * cin);
      im2col(*xv, batch, h, w, cin, ksize, stride, pad, ho, wo, cols2);
      if (Tensor* gw = gbuf_if(wn, cout, ksize * ksize * cin))
        emap(*gw) += emap(*g).transpose() * emap(cols2);
      if (Tensor* gb = gbuf_if(bn, 1, cout))
        emap(*gb).row(0) += emap(*g).colwise().sum();
      if (Tensor* gx = gbuf_if(xn, batch * h * w, cin)) {
        Tensor gcols(batch * ho * wo, ksize * ksize * cin);
        emap(gcols) = emap(*g) * emap(*wv);
        col2im_add(gcols, batch, h, w, cin, ksize, stride, pad, ho, wo, *gx);
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Var Graph::l1_masked_sum(const Var& pred, const Tensor& target,
                         const Tensor& mask) {
  TAPKIT_CHECK_ARG(pred.val->same_shape(target), "l1_masked_sum: shape");
  TAPKIT_CHECK_ARG(mask.rows() == pred.rows() && mask.cols() == 1,
                   "l1_masked_sum: mask must be [n,1]");
  auto out = make_tensor(1, 1);
  double s = 0.0;
  for (int i = 0; i < pred.rows(); ++i) {
    if (mask(i, 0) == 0.0) continue;
    for (int j = 0; j < pred.cols(); ++j)
      s += std::abs((*pred.val)(i, j) - target(i, j));
  }
  (*out)(0, 0) = s;
  Var r{out, -1};
  if (should_record({&pred})) {
    int pn = pred.node, rows = pred.rows(), cols = pred.cols();
    TensorPtr pv = pred.val;
    auto tv = std::make_shared<Tensor>(target);
    auto mv = std::make_shared<Tensor>(mask);
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, pn, pv, tv, mv, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* gp = gbuf_if(pn, rows, cols)) {
        double go = (*g)(0, 0);
        for (int i = 0; i < rows; ++i) {
          if ((*mv)(i, 0) == 0.0) continue;
          for (int j = 0; j < cols; ++j) {
            double d = (*pv)(i, j) - (*tv)(i, j);
            (*gp)(i, j) += go * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
          }
        }
      }
    };
  }
  return r;
}

Var Graph::bce_logits_masked_sum(const Var& logits, const Tensor& targets,
                                 const Tensor& mask) {
  TAPKIT_CHECK_ARG(logits.val->same_shape(targets),
                   "bce_logits_masked_sum: shape");
  TAPKIT_CHECK_ARG(mask.rows() == logits.rows() && mask.cols() == 1,
                   "bce_logits_masked_sum: mask must be [n,1]");
  auto out = make_tensor(1, 1);
  double s = 0.0;
  for (int i = 0; i < logits.rows(); ++i) {
    if (mask(i, 0) == 0.0) continue;
    for (int j = 0; j < logits.cols(); ++j) {
      double z = (*logits.val)(i, j);
      s += softplus(z) - targets(i, j) * z;
    }
  }
  (*out)(0, 0) = s;
  Var r{out, -1};
  if (should_record({&logits})) {
    int ln = logits.node, rows = logits.rows(), cols = logits.cols();
    TensorPtr lv = logits.val;
    auto tv = std::make_shared<Tensor>(targets);
    auto mv = std::make_shared<Tensor>(mask);
    r.node = push_node(nullptr);
    int id = r.node;
    nodes_[id].back = [this, id, ln, lv, tv, mv, rows, cols]() {
      const Tensor* g = gout(id);
      if (Tensor* gl = gbuf_if(ln, rows, cols)) {
        double go = (*g)(0, 0);
        for (int i = 0; i < rows; ++i) {
          if ((*mv)(i, 0) == 0.0) continue;
          for (int j = 0; j < cols; ++j)
            (*gl)(i, j) +=
                go * (stable_sigmoid((*lv)(i, j)) - (*tv)(i, j));
        }
      }
    };
  }
  return r;
}

}  // namespace tapkit::ad

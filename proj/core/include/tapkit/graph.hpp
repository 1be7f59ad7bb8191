#pragma once

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "tapkit/tensor.hpp"

namespace tapkit::ad {

// Handle to a tensor living on a Graph tape. node < 0 means the value is a
// constant for differentiation purposes.
struct Var {
  TensorPtr val;
  int node = -1;

  bool defined() const { return val != nullptr; }
  int rows() const { return val->rows(); }
  int cols() const { return val->cols(); }
  const Tensor& t() const { return *val; }
};

// Reverse-mode tape. Ops execute eagerly and, while recording, push a
// backward closure. Creation order is a topological order, so backward()
// is a single reverse sweep. Not thread safe; build one Graph per forward
// pass and throw it away.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  Var constant(TensorPtr v) { return Var{std::move(v), -1}; }
  Var leaf(TensorPtr v);

  // ---- elementwise and linear algebra ----
  Var add(const Var& a, const Var& b);
  Var sub(const Var& a, const Var& b);
  Var mul(const Var& a, const Var& b);
  Var scale(const Var& a, double s);
  Var add_rowvec(const Var& a, const Var& b);  // b is [1, c]
  Var matmul(const Var& a, const Var& b);      // [n,k] x [k,m]
  Var matmul_nt(const Var& a, const Var& b);   // [n,k] x [m,k]^T
  Var linear(const Var& x, const Var& w, const Var& b);  // w [out,in]
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(const Var& a, int c0, int c1);
  Var concat_rows(std::span<const Var> parts);
  Var slice_rows(const Var& a, int r0, int r1);
  Var gather_rows(const Var& a, std::vector<int> idx);
  Var sum(const Var& a);  // -> [1,1]
  Var add_scalar(const Var& a, double s);

  // ---- nonlinearities ----
  Var gelu(const Var& a);
  Var sigmoid(const Var& a);
  Var inverse_sigmoid(const Var& a, double eps);
  Var softmax_rows(const Var& a);
  Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
                 double eps = 1e-6);

  // softmax over keys with 1/sqrt(C) scaling, batched over `batch` equal
  // groups of rows: q [B*n, c], k and v [B*m, c] -> [B*n, c]
  Var attention(const Var& q, const Var& k, const Var& v, int batch);

  // sinusoidal encoding of 2-D locations: loc [n,2] -> [n,C].
  // Per axis C/4 sin/cos pairs at frequencies tau^(-2j/(C/2)); locations are
  // multiplied by `scale` before encoding.
  Var positional_encoding(const Var& loc, double tau, int channels,
                          double scale);

  // ---- sampling ----
  // grid [H*W, C] row-major cells, points [n,2] in [0,1]^2 (cell coordinate
  // of x is x*(W-1)); coordinates are clamped to the border.
  Var bilinear_sample(const Var& grid, int h, int w, const Var& points);

  // vols [R, H*W] one flattened single-channel map per row-group; for query
  // q sample a G x G lattice spanning +-radius cells around centers[q] from
  // map row_of[q]. Output [n, G*G], lattice row-major.
  Var lattice_sample(const Var& vols, int h, int w, std::vector<int> row_of,
                     const Var& centers, int grid_size, double radius_cells);

  // Multi-scale deformable sampling. levels[s] is [H_s*W_s, C]; offsets
  // [n, K*S*2] in normalized units, slot j = s*K + k; weights [n, K*S]
  // (convex weights per row). Output [n, C].
  Var deformable_sample(std::span<const Var> levels,
                        std::span<const std::pair<int, int>> shapes,
                        const Var& refs, const Var& offsets,
                        const Var& weights, int points_per_level);

  // x [B*H*W, Cin] -> [B*Ho*Wo, Cout]; weight [Cout, k*k*Cin]
  Var conv2d(const Var& x, int batch, int h, int w, const Var& weight,
             const Var& bias, int ksize, int stride, int pad);

  // ---- reductions for losses (targets/masks are plain constants) ----
  // sum over masked rows of |pred - target| (all columns)
  Var l1_masked_sum(const Var& pred, const Tensor& target, const Tensor& mask);
  // sum over masked rows of softplus(z) - y*z  (binary CE on logits)
  Var bce_logits_masked_sum(const Var& logits, const Tensor& targets,
                            const Tensor& mask);

  // ---- backward ----
  void backward(const Var& loss);
  bool has_grad(const Var& v) const;
  const Tensor& grad(const Var& v) const;
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    std::function<void()> back;
  };

  int push_node(std::function<void()> back);
  bool tracked(const Var& v) const { return v.node >= 0; }
  bool should_record(std::initializer_list<const Var*> parents) const;
  Tensor& gbuf(int node, int rows, int cols);
  Tensor* gbuf_if(int node, int rows, int cols) {
    return node >= 0 ? &gbuf(node, rows, cols) : nullptr;
  }
  const Tensor* gout(int node) const { return grads_[node].get(); }

  bool recording_ = true;
  std::vector<Node> nodes_;
  std::vector<std::unique_ptr<Tensor>> grads_;
};

}  // namespace tapkit::ad

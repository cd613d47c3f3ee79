#include "lss/autodiff.hpp"

#include <Eigen/Core>
#include <Eigen/SparseCore>
#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "lss/error.hpp"

namespace lss::ad {

namespace {

thread_local bool g_grad_enabled = true;

class GradModeScope {
 public:
  explicit GradModeScope(bool enabled) : prev_(g_grad_enabled) { g_grad_enabled = enabled; }
  ~GradModeScope() { g_grad_enabled = prev_; }

 private:
  bool prev_;
};

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
}

void require_rank(const Var& a, std::int64_t rank, const char* op) {
  if (static_cast<std::int64_t>(a.shape().size()) != rank)
    throw InvalidArgument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          shape_string(a.shape()));
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.ptr();
  double* po = out.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool any = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) any = any || in.requires_grad();
  Var out(std::move(value), any);
  if (any) {
    out.node_->inputs = std::move(inputs);
    out.node_->backward = std::move(backward);
  }
  return out;
}

double Var::item() const {
  if (numel() != 1) throw InvalidArgument("item() on tensor of shape " + shape_string(shape()));
  return value()[0];
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs, bool create_graph) {
  GradModeScope mode(create_graph);

  std::unordered_map<Node*, bool> is_target;
  for (const auto& in : inputs)
    if (in.defined()) is_target[in.node()] = true;

  std::unordered_map<Node*, bool> relevant;
  std::vector<Node*> order;
  if (output.requires_grad()) {
    struct Frame {
      Node* node;
      std::size_t next;
    };
    std::vector<Frame> stack{{output.node(), 0}};
    relevant[output.node()] = false;
    while (!stack.empty()) {
      Frame& f = stack.back();
      Node* n = f.node;
      const bool target = is_target.count(n) > 0;
      if (!target && f.next < n->inputs.size()) {
        Node* child = n->inputs[f.next++].node();
        if (child->requires_grad && !relevant.count(child)) {
          relevant[child] = false;
          stack.push_back({child, 0});
        }
        continue;
      }
      bool rel = target;
      if (!target)
        for (const auto& in : n->inputs)
          if (in.requires_grad() && relevant[in.node()]) rel = true;
      relevant[n] = rel;
      order.push_back(n);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, Var> grads;
  if (output.requires_grad() && relevant[output.node()])
    grads[output.node()] = Var(Tensor::ones(output.shape()));

  std::vector<Var> result(inputs.size());
  std::unordered_map<Node*, Var> finished;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto g_it = grads.find(n);
    if (g_it == grads.end()) continue;
    Var g = std::move(g_it->second);
    grads.erase(g_it);
    if (is_target.count(n)) {
      finished[n] = g;
      continue;
    }
    if (!n->backward) continue;
    std::vector<bool> needs(n->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const Var& in = n->inputs[i];
      needs[i] = in.requires_grad() && relevant[in.node()];
      any = any || needs[i];
    }
    if (!any) continue;
    std::vector<Var> out(n->inputs.size());
    n->backward(g, n->inputs, needs, out);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!needs[i] || !out[i].defined()) continue;
      Node* child = n->inputs[i].node();
      auto c_it = grads.find(child);
      if (c_it == grads.end())
        grads.emplace(child, out[i]);
      else
        c_it->second = add(c_it->second, out[i]);
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].defined()) continue;
    auto f = finished.find(inputs[i].node());
    result[i] = f != finished.end() ? f->second : Var(Tensor::zeros(inputs[i].shape()));
  }
  return result;
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return Var::make_op(map_binary(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
                      [](const Var& g, const std::vector<Var>&, const std::vector<bool>& needs,
                         std::vector<Var>& out) {
                        if (needs[0]) out[0] = g;
                        if (needs[1]) out[1] = g;
                      });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return Var::make_op(map_binary(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
                      [](const Var& g, const std::vector<Var>&, const std::vector<bool>& needs,
                         std::vector<Var>& out) {
                        if (needs[0]) out[0] = g;
                        if (needs[1]) out[1] = neg(g);
                      });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return Var::make_op(map_binary(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>& needs,
                         std::vector<Var>& out) {
                        if (needs[0]) out[0] = mul(g, in[1]);
                        if (needs[1]) out[1] = mul(g, in[0]);
                      });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  return Var::make_op(map_unary(a.value(), [c](double x) { return c * x; }), {a},
                      [c](const Var& g, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& out) {
                        out[0] = scale(g, c);
                      });
}

Var add_scalar(const Var& a, double c) {
  return Var::make_op(map_unary(a.value(), [c](double x) { return x + c; }), {a},
                      [](const Var& g, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& out) {
                        out[0] = g;
                      });
}

Var mul_scalar(const Var& a, const Var& s) {
  if (s.numel() != 1) throw InvalidArgument("mul_scalar: scalar operand has shape " + shape_string(s.shape()));
  const double sv = s.value()[0];
  return Var::make_op(map_unary(a.value(), [sv](double x) { return sv * x; }), {a, s},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>& needs,
                         std::vector<Var>& out) {
                        if (needs[0]) out[0] = mul_scalar(g, in[1]);
                        if (needs[1]) out[1] = reshape(sum(mul(g, in[0])), in[1].shape());
                      });
}

Var exp(const Var& a) {
  return Var::make_op(map_unary(a.value(), [](double x) { return std::exp(x); }), {a},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>&, std::vector<Var>& out) {
                        out[0] = mul(g, exp(in[0]));
                      });
}

Var log(const Var& a) {
  return Var::make_op(map_unary(a.value(), [](double x) { return std::log(x); }), {a},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>&, std::vector<Var>& out) {
                        out[0] = mul(g, pow(in[0], -1.0));
                      });
}

Var pow(const Var& a, double p) {
  return Var::make_op(map_unary(a.value(), [p](double x) { return std::pow(x, p); }), {a},
                      [p](const Var& g, const std::vector<Var>& in, const std::vector<bool>&, std::vector<Var>& out) {
                        out[0] = mul(g, scale(pow(in[0], p - 1.0), p));
                      });
}

Var relu(const Var& a) {
  return Var::make_op(map_unary(a.value(), [](double x) { return x <= 0.0 ? 0.0 : x; }), {a},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>&, std::vector<Var>& out) {
                        Var mask(map_unary(in[0].value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
                        out[0] = mul(g, mask);
                      });
}

// ---- reductions and shape ---------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return Var::make_op(Tensor::scalar(s), {a},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>&, std::vector<Var>& out) {
                        out[0] = expand(g, in[0].shape());
                      });
}

Var expand(const Var& s, const Shape& shape) {
  if (s.numel() != 1) throw InvalidArgument("expand: operand is not a scalar");
  return Var::make_op(Tensor(shape, s.value()[0]), {s},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>&, std::vector<Var>& out) {
                        out[0] = reshape(sum(g), in[0].shape());
                      });
}

Var reshape(const Var& a, Shape shape) {
  if (a.shape() == shape) return a;
  return Var::make_op(a.value().reshaped(std::move(shape)), {a},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>&, std::vector<Var>& out) {
                        out[0] = reshape(g, in[0].shape());
                      });
}

Var row_sum(const Var& a) {
  require_rank(a, 2, "row_sum");
  const auto rows = a.shape()[0], cols = a.shape()[1];
  Tensor out(Shape{rows});
  const double* p = a.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) s += p[r * cols + c];
    out[r] = s;
  }
  return Var::make_op(std::move(out), {a},
                      [cols](const Var& g, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& o) {
                        o[0] = broadcast_rows(g, cols);
                      });
}

Var row_mean(const Var& a) {
  require_rank(a, 2, "row_mean");
  return scale(row_sum(a), 1.0 / static_cast<double>(a.shape()[1]));
}

Var broadcast_rows(const Var& a, std::int64_t cols) {
  require_rank(a, 1, "broadcast_rows");
  const auto rows = a.shape()[0];
  Tensor out(Shape{rows, cols});
  double* po = out.ptr();
  for (std::int64_t r = 0; r < rows; ++r) std::fill(po + r * cols, po + (r + 1) * cols, a.value()[r]);
  return Var::make_op(std::move(out), {a},
                      [](const Var& g, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& o) {
                        o[0] = row_sum(g);
                      });
}

Var col_sum(const Var& a) {
  require_rank(a, 2, "col_sum");
  const auto rows = a.shape()[0], cols = a.shape()[1];
  Tensor out(Shape{cols});
  const double* p = a.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) out[c] += p[r * cols + c];
  return Var::make_op(std::move(out), {a},
                      [rows](const Var& g, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& o) {
                        o[0] = tile_rows(g, rows);
                      });
}

Var tile_rows(const Var& a, std::int64_t rows) {
  require_rank(a, 1, "tile_rows");
  const auto cols = a.shape()[0];
  Tensor out(Shape{rows, cols});
  for (std::int64_t r = 0; r < rows; ++r) std::copy_n(a.value().ptr(), cols, out.ptr() + r * cols);
  return Var::make_op(std::move(out), {a},
                      [](const Var& g, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& o) {
                        o[0] = col_sum(g);
                      });
}

Var gather_rows(const Var& a, const std::vector<std::int64_t>& index) {
  if (a.shape().empty()) throw InvalidArgument("gather_rows: scalar operand");
  const auto rows = a.shape()[0];
  const auto width = rows == 0 ? 0 : a.numel() / rows;
  Shape shape = a.shape();
  shape[0] = static_cast<std::int64_t>(index.size());
  Tensor out(shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= rows) throw InvalidArgument("gather_rows: index out of range");
    std::copy_n(a.value().ptr() + index[i] * width, width, out.ptr() + static_cast<std::int64_t>(i) * width);
  }
  return Var::make_op(std::move(out), {a},
                      [index, rows](const Var& g, const std::vector<Var>&, const std::vector<bool>&,
                                    std::vector<Var>& o) { o[0] = scatter_rows(g, index, rows); });
}

Var scatter_rows(const Var& g, const std::vector<std::int64_t>& index, std::int64_t rows) {
  if (g.shape().empty() || g.shape()[0] != static_cast<std::int64_t>(index.size()))
    throw InvalidArgument("scatter_rows: index length does not match leading dimension");
  const auto width = index.empty() ? 0 : g.numel() / static_cast<std::int64_t>(index.size());
  Shape shape = g.shape();
  shape[0] = rows;
  Tensor out(shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const double* src = g.value().ptr() + static_cast<std::int64_t>(i) * width;
    double* dst = out.ptr() + index[i] * width;
    for (std::int64_t j = 0; j < width; ++j) dst[j] += src[j];
  }
  return Var::make_op(std::move(out), {g},
                      [index](const Var& gg, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& o) {
                        o[0] = gather_rows(gg, index);
                      });
}

Var slice(const Var& a, std::int64_t offset, Shape shape) {
  const auto n = shape_numel(shape);
  if (offset < 0 || offset + n > a.numel()) throw InvalidArgument("slice: segment out of range");
  std::vector<double> data(a.value().ptr() + offset, a.value().ptr() + offset + n);
  const auto total = a.numel();
  return Var::make_op(Tensor(std::move(shape), std::move(data)), {a},
                      [offset, total](const Var& g, const std::vector<Var>& in, const std::vector<bool>&,
                                      std::vector<Var>& o) {
                        o[0] = reshape(embed(g, offset, total), in[0].shape());
                      });
}

Var embed(const Var& a, std::int64_t offset, std::int64_t total) {
  if (offset < 0 || offset + a.numel() > total) throw InvalidArgument("embed: segment out of range");
  Tensor out(Shape{total});
  std::copy_n(a.value().ptr(), a.numel(), out.ptr() + offset);
  return Var::make_op(std::move(out), {a},
                      [offset](const Var& g, const std::vector<Var>& in, const std::vector<bool>&,
                               std::vector<Var>& o) { o[0] = slice(g, offset, in[0].shape()); });
}

// ---- linear algebra -----------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const bool batched = a.shape().size() == 3;
  if (a.shape().size() != b.shape().size() || (a.shape().size() != 2 && a.shape().size() != 3))
    throw InvalidArgument("matmul: operands must both be rank 2 or rank 3");
  const std::int64_t batch = batched ? a.shape()[0] : 1;
  if (batched && b.shape()[0] != batch) throw InvalidArgument("matmul: batch size mismatch");
  const std::size_t o = batched ? 1 : 0;
  const std::int64_t ar = a.shape()[o], ac = a.shape()[o + 1];
  const std::int64_t br = b.shape()[o], bc = b.shape()[o + 1];
  const std::int64_t p = trans_a ? ac : ar, q = trans_a ? ar : ac;
  const std::int64_t q2 = trans_b ? bc : br, s = trans_b ? br : bc;
  if (q != q2)
    throw InvalidArgument("matmul: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                          shape_string(b.shape()));
  Tensor out(batched ? Shape{batch, p, s} : Shape{p, s});
  for (std::int64_t i = 0; i < batch; ++i) {
    CMapRM A(a.value().ptr() + i * ar * ac, ar, ac);
    CMapRM B(b.value().ptr() + i * br * bc, br, bc);
    MapRM C(out.ptr() + i * p * s, p, s);
    if (!trans_a && !trans_b)
      C.noalias() = A * B;
    else if (trans_a && !trans_b)
      C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  return Var::make_op(std::move(out), {a, b},
                      [trans_a, trans_b](const Var& g, const std::vector<Var>& in, const std::vector<bool>& needs,
                                         std::vector<Var>& o) {
                        const Var& A = in[0];
                        const Var& B = in[1];
                        if (!trans_a && !trans_b) {
                          if (needs[0]) o[0] = matmul(g, B, false, true);
                          if (needs[1]) o[1] = matmul(A, g, true, false);
                        } else if (trans_a && !trans_b) {
                          if (needs[0]) o[0] = matmul(B, g, false, true);
                          if (needs[1]) o[1] = matmul(A, g, false, false);
                        } else if (!trans_a && trans_b) {
                          if (needs[0]) o[0] = matmul(g, B, false, false);
                          if (needs[1]) o[1] = matmul(g, A, true, false);
                        } else {
                          if (needs[0]) o[0] = matmul(B, g, true, true);
                          if (needs[1]) o[1] = matmul(g, A, true, true);
                        }
                      });
}

// ---- convolution --------------------------------------------------------------

namespace {

struct ConvGeom {
  std::int64_t n, ci, h, w, co, k, pad;
  std::int64_t col_rows() const { return ci * k * k; }
  std::int64_t hw() const { return h * w; }
};

void im2col(const double* x, const ConvGeom& g, double* col) {
  const auto hw = g.hw();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::int64_t oy = 0; oy < g.h; ++oy) {
          const std::int64_t iy = oy + ky - g.pad;
          double* dst = row + oy * g.w;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.w, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.w; ++ox) {
            const std::int64_t ix = ox + kx - g.pad;
            dst[ox] = (ix < 0 || ix >= g.w) ? 0.0 : src[ix];
          }
        }
      }
}

void col2im(const double* col, const ConvGeom& g, double* x) {
  const auto hw = g.hw();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::int64_t oy = 0; oy < g.h; ++oy) {
          const std::int64_t iy = oy + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          double* dst = x + (c * g.h + iy) * g.w;
          const double* src = row + oy * g.w;
          for (std::int64_t ox = 0; ox < g.w; ++ox) {
            const std::int64_t ix = ox + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

ConvGeom conv_geom(const Shape& xs, const Shape& ws, const char* op) {
  if (xs.size() != 4 || ws.size() != 4) throw InvalidArgument(std::string(op) + ": expected NCHW input and OIKK weight");
  if (xs[1] != ws[1]) throw InvalidArgument(std::string(op) + ": channel mismatch");
  if (ws[2] != ws[3] || ws[2] % 2 == 0) throw InvalidArgument(std::string(op) + ": kernel must be square and odd");
  return ConvGeom{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[2] / 2};
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvGeom& g) {
  Tensor out(Shape{g.n, g.co, g.h, g.w});
  std::vector<double> col(static_cast<std::size_t>(g.col_rows() * g.hw()));
  CMapRM W(w.ptr(), g.co, g.col_rows());
  for (std::int64_t i = 0; i < g.n; ++i) {
    im2col(x.ptr() + i * g.ci * g.hw(), g, col.data());
    CMapRM C(col.data(), g.col_rows(), g.hw());
    MapRM O(out.ptr() + i * g.co * g.hw(), g.co, g.hw());
    O.noalias() = W * C;
  }
  return out;
}

Tensor conv_input_grad_value(const Tensor& gy, const Tensor& w, const ConvGeom& g) {
  Tensor gx(Shape{g.n, g.ci, g.h, g.w});
  MatRM col(g.col_rows(), g.hw());
  CMapRM W(w.ptr(), g.co, g.col_rows());
  for (std::int64_t i = 0; i < g.n; ++i) {
    CMapRM G(gy.ptr() + i * g.co * g.hw(), g.co, g.hw());
    col.noalias() = W.transpose() * G;
    col2im(col.data(), g, gx.ptr() + i * g.ci * g.hw());
  }
  return gx;
}

Tensor conv_weight_grad_value(const Tensor& x, const Tensor& gy, const ConvGeom& g) {
  Tensor gw(Shape{g.co, g.ci, g.k, g.k});
  MapRM GW(gw.ptr(), g.co, g.col_rows());
  std::vector<double> col(static_cast<std::size_t>(g.col_rows() * g.hw()));
  for (std::int64_t i = 0; i < g.n; ++i) {
    im2col(x.ptr() + i * g.ci * g.hw(), g, col.data());
    CMapRM C(col.data(), g.col_rows(), g.hw());
    CMapRM G(gy.ptr() + i * g.co * g.hw(), g.co, g.hw());
    GW.noalias() += G * C.transpose();
  }
  return gw;
}

}  // namespace

Var conv2d(const Var& x, const Var& w) {
  const ConvGeom geom = conv_geom(x.shape(), w.shape(), "conv2d");
  return Var::make_op(conv_forward(x.value(), w.value(), geom), {x, w},
                      [](const Var& g, const std::vector<Var>& in, const std::vector<bool>& needs,
                         std::vector<Var>& o) {
                        if (needs[0]) o[0] = conv2d_input_grad(g, in[1], in[0].shape());
                        if (needs[1]) o[1] = conv2d_weight_grad(in[0], g, in[1].shape());
                      });
}

Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape) {
  const ConvGeom geom = conv_geom(x_shape, w.shape(), "conv2d_input_grad");
  if (g.shape() != Shape{geom.n, geom.co, geom.h, geom.w}) throw InvalidArgument("conv2d_input_grad: bad gradient shape");
  return Var::make_op(conv_input_grad_value(g.value(), w.value(), geom), {g, w},
                      [](const Var& gg, const std::vector<Var>& in, const std::vector<bool>& needs,
                         std::vector<Var>& o) {
                        if (needs[0]) o[0] = conv2d(gg, in[1]);
                        if (needs[1]) o[1] = conv2d_weight_grad(gg, in[0], in[1].shape());
                      });
}

Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape) {
  const ConvGeom geom = conv_geom(x.shape(), w_shape, "conv2d_weight_grad");
  if (g.shape() != Shape{geom.n, geom.co, geom.h, geom.w}) throw InvalidArgument("conv2d_weight_grad: bad gradient shape");
  return Var::make_op(conv_weight_grad_value(x.value(), g.value(), geom), {x, g},
                      [](const Var& gw, const std::vector<Var>& in, const std::vector<bool>& needs,
                         std::vector<Var>& o) {
                        if (needs[0]) o[0] = conv2d_input_grad(in[1], gw, in[0].shape());
                        if (needs[1]) o[1] = conv2d(in[0], gw);
                      });
}

Var avg_pool2(const Var& x) {
  require_rank(x, 4, "avg_pool2");
  const auto n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const auto h2 = h / 2, w2 = w / 2;
  if (h2 == 0 || w2 == 0) throw InvalidArgument("avg_pool2: spatial size below 2");
  Tensor out(Shape{n, c, h2, w2});
  const double* px = x.value().ptr();
  double* po = out.ptr();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = px + p * h * w;
    double* dst = po + p * h2 * w2;
    for (std::int64_t i = 0; i < h2; ++i)
      for (std::int64_t j = 0; j < w2; ++j)
        dst[i * w2 + j] = 0.25 * (src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1] + src[(2 * i + 1) * w + 2 * j] +
                                  src[(2 * i + 1) * w + 2 * j + 1]);
  }
  return Var::make_op(std::move(out), {x},
                      [h, w](const Var& g, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& o) {
                        o[0] = avg_pool2_adjoint(g, h, w);
                      });
}

Var avg_pool2_adjoint(const Var& g, std::int64_t height, std::int64_t width) {
  require_rank(g, 4, "avg_pool2_adjoint");
  const auto n = g.shape()[0], c = g.shape()[1], h2 = g.shape()[2], w2 = g.shape()[3];
  if (h2 != height / 2 || w2 != width / 2) throw InvalidArgument("avg_pool2_adjoint: shape mismatch");
  Tensor out(Shape{n, c, height, width});
  const double* pg = g.value().ptr();
  double* po = out.ptr();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = pg + p * h2 * w2;
    double* dst = po + p * height * width;
    for (std::int64_t i = 0; i < h2; ++i)
      for (std::int64_t j = 0; j < w2; ++j) {
        const double v = 0.25 * src[i * w2 + j];
        dst[2 * i * width + 2 * j] = v;
        dst[2 * i * width + 2 * j + 1] = v;
        dst[(2 * i + 1) * width + 2 * j] = v;
        dst[(2 * i + 1) * width + 2 * j + 1] = v;
      }
  }
  return Var::make_op(std::move(out), {g},
                      [](const Var& gg, const std::vector<Var>&, const std::vector<bool>&, std::vector<Var>& o) {
                        o[0] = avg_pool2(gg);
                      });
}

// ---- sparse maps ---------------------------------------------------------------

struct SparseMap::Impl {
  Eigen::SparseMatrix<double, Eigen::RowMajor> forward;
  Eigen::SparseMatrix<double, Eigen::RowMajor> transposed;
};

SparseMap::SparseMap(std::int64_t rows, std::int64_t cols, const std::vector<Entry>& entries)
    : rows_(rows), cols_(cols), impl_(std::make_unique<Impl>()) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(entries.size());
  for (const auto& e : entries) {
    if (e.row < 0 || e.row >= rows || e.col < 0 || e.col >= cols) throw InvalidArgument("SparseMap: entry out of range");
    trips.emplace_back(static_cast<int>(e.row), static_cast<int>(e.col), e.value);
  }
  impl_->forward.resize(static_cast<int>(rows), static_cast<int>(cols));
  impl_->forward.setFromTriplets(trips.begin(), trips.end());
  impl_->transposed = impl_->forward.transpose();
}

SparseMap::~SparseMap() = default;

void SparseMap::apply(std::span<const double> in, std::span<double> out, bool transpose) const {
  const auto& m = transpose ? impl_->transposed : impl_->forward;
  if (static_cast<std::int64_t>(in.size()) != m.cols() || static_cast<std::int64_t>(out.size()) != m.rows())
    throw InvalidArgument("SparseMap::apply: size mismatch");
  Eigen::Map<const Eigen::VectorXd> x(in.data(), static_cast<Eigen::Index>(in.size()));
  Eigen::Map<Eigen::VectorXd> y(out.data(), static_cast<Eigen::Index>(out.size()));
  y.noalias() = m * x;
}

Var sparse_apply(const Var& x, std::shared_ptr<const SparseMap> map, bool transpose, Shape out_shape) {
  const auto in_len = transpose ? map->rows() : map->cols();
  const auto out_len = transpose ? map->cols() : map->rows();
  if (x.numel() != in_len || shape_numel(out_shape) != out_len) throw InvalidArgument("sparse_apply: size mismatch");
  Tensor out(out_shape);
  map->apply(x.value().data(), out.data(), transpose);
  return Var::make_op(std::move(out), {x},
                      [map, transpose](const Var& g, const std::vector<Var>& in, const std::vector<bool>&,
                                       std::vector<Var>& o) { o[0] = sparse_apply(g, map, !transpose, in[0].shape()); });
}

// ---- composites ----------------------------------------------------------------

Var log_softmax_rows(const Var& a) {
  require_rank(a, 2, "log_softmax_rows");
  const auto rows = a.shape()[0], cols = a.shape()[1];
  Tensor mx(Shape{rows, cols});
  for (std::int64_t r = 0; r < rows; ++r) {
    double m = a.value()[r * cols];
    for (std::int64_t c = 1; c < cols; ++c) m = std::max(m, a.value()[r * cols + c]);
    std::fill(mx.ptr() + r * cols, mx.ptr() + (r + 1) * cols, m);
  }
  Var z = sub(a, Var(std::move(mx)));
  Var lse = log(row_sum(exp(z)));
  return sub(z, broadcast_rows(lse, cols));
}

Var softmax_rows(const Var& a) { return exp(log_softmax_rows(a)); }

Var squared_norm(const Var& a) { return sum(mul(a, a)); }

}  // namespace lss::ad

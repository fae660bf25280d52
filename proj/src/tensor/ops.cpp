#include "gtmm/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace gtmm {

namespace {

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

template <typename S>
ConstMatMap<S> as_matrix(const Vec<S>& v, Index rows, Index cols, Index offset = 0) {
  return ConstMatMap<S>(v.data() + offset, rows, cols);
}

template <typename S>
MatMap<S> as_matrix(Vec<S>& v, Index rows, Index cols, Index offset = 0) {
  return MatMap<S>(v.data() + offset, rows, cols);
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  std::vector<Index> stride_a;
  std::vector<Index> stride_b;
  bool same = false;
};

std::vector<Index> aligned_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t offset = r - s.size();
  std::vector<Index> strides(r, 0);
  Index running = 1;
  for (std::size_t d = r; d-- > offset;) {
    const Index extent = s[d - offset];
    strides[d] = (extent == 1 && out[d] != 1) ? 0 : running;
    running *= extent;
  }
  return strides;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  for (std::size_t d = 0; d < r; ++d) {
    const Index da = d + a.size() >= r ? a[d + a.size() - r] : 1;
    const Index db = d + b.size() >= r ? b[d + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    p.out[d] = std::max(da, db);
  }
  p.stride_a = aligned_strides(a, p.out);
  p.stride_b = aligned_strides(b, p.out);
  return p;
}

template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const Index n = numel(p.out);
  if (p.same) {
    for (Index i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<Index> idx(r, 0);
  Index ia = 0;
  Index ib = 0;
  for (Index o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

// f(x, y) -> value; da(x, y) and db(x, y) -> partial derivatives.
template <typename S, class F, class DA, class DB>
Tensor<S> binary(const char* op, const Tensor<S>& a, const Tensor<S>& b, F f, DA da, DB db) {
  Broadcast p = plan_broadcast(a.shape(), b.shape(), op);
  const Vec<S>& av = a.value();
  const Vec<S>& bv = b.value();
  Vec<S> out(numel(p.out));
  for_each_broadcast(p, [&](Index o, Index ia, Index ib) { out[o] = f(av[ia], bv[ib]); });
  Shape shape = p.out;
  return make_result<S>(op, std::move(shape), std::move(out), {a, b},
                        [p = std::move(p), da, db](Node<S>& self) {
                          auto& na = *self.inputs[0];
                          auto& nb = *self.inputs[1];
                          const Vec<S>& g = self.grad;
                          if (na.requires_grad) {
                            Vec<S>& ga = na.grad_buffer();
                            for_each_broadcast(p, [&](Index o, Index ia, Index ib) {
                              ga[ia] += g[o] * da(na.value[ia], nb.value[ib]);
                            });
                          }
                          if (nb.requires_grad) {
                            Vec<S>& gb = nb.grad_buffer();
                            for_each_broadcast(p, [&](Index o, Index ia, Index ib) {
                              gb[ib] += g[o] * db(na.value[ia], nb.value[ib]);
                            });
                          }
                        });
}

// f(x) -> y; d(x, y) -> dy/dx.
template <typename S, class F, class D>
Tensor<S> unary(const char* op, const Tensor<S>& x, F f, D d) {
  const Vec<S>& xv = x.value();
  Vec<S> out(xv.size());
  for (Index i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result<S>(op, x.shape(), std::move(out), {x}, [d](Node<S>& self) {
    auto& in = *self.inputs[0];
    Vec<S>& g = in.grad_buffer();
    for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i] * d(in.value[i], self.value[i]);
  });
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
S stable_softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// Convolution helpers

struct ConvPlan {
  Index channels, height, width;
  Index kh, kw;
  Index stride, padding;
  Index out_h, out_w;
};

ConvPlan conv_plan(Index c, Index h, Index w, Index kh, Index kw, Conv2dGeometry g, const char* op) {
  if (g.stride < 1 || g.padding < 0) throw ShapeError(std::string(op) + ": stride must be >= 1, padding >= 0");
  const Index oh = (h + 2 * g.padding - kh) / g.stride + 1;
  const Index ow = (w + 2 * g.padding - kw) / g.stride + 1;
  if (h + 2 * g.padding < kh || w + 2 * g.padding < kw || oh < 1 || ow < 1) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " does not fit image " + std::to_string(h) + "x" + std::to_string(w));
  }
  return {c, h, w, kh, kw, g.stride, g.padding, oh, ow};
}

// image [C, H, W] -> cols [C*KH*KW, OH*OW]
template <typename S>
void im2col(const S* image, const ConvPlan& p, RowMatrix<S>& cols) {
  cols.setZero(p.channels * p.kh * p.kw, p.out_h * p.out_w);
  for (Index c = 0; c < p.channels; ++c) {
    for (Index ki = 0; ki < p.kh; ++ki) {
      for (Index kj = 0; kj < p.kw; ++kj) {
        const Index row = (c * p.kh + ki) * p.kw + kj;
        for (Index oi = 0; oi < p.out_h; ++oi) {
          const Index ii = oi * p.stride - p.padding + ki;
          if (ii < 0 || ii >= p.height) continue;
          for (Index oj = 0; oj < p.out_w; ++oj) {
            const Index ij = oj * p.stride - p.padding + kj;
            if (ij < 0 || ij >= p.width) continue;
            cols(row, oi * p.out_w + oj) = image[(c * p.height + ii) * p.width + ij];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates cols back into image [C, H, W].
template <typename S, class Cols>
void col2im(const Cols& cols, const ConvPlan& p, S* image) {
  for (Index c = 0; c < p.channels; ++c) {
    for (Index ki = 0; ki < p.kh; ++ki) {
      for (Index kj = 0; kj < p.kw; ++kj) {
        const Index row = (c * p.kh + ki) * p.kw + kj;
        for (Index oi = 0; oi < p.out_h; ++oi) {
          const Index ii = oi * p.stride - p.padding + ki;
          if (ii < 0 || ii >= p.height) continue;
          for (Index oj = 0; oj < p.out_w; ++oj) {
            const Index ij = oj * p.stride - p.padding + kj;
            if (ij < 0 || ij >= p.width) continue;
            image[(c * p.height + ii) * p.width + ij] += cols(row, oi * p.out_w + oj);
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); }, [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>(
      "div", a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return make_result<S>("scale", a.shape(), a.value() * factor, {a}, [factor](Node<S>& self) {
    self.inputs[0]->grad_buffer() += self.grad * factor;
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S offset) {
  return make_result<S>("add_scalar", a.shape(), a.value() + offset, {a},
                        [](Node<S>& self) { self.inputs[0]->grad_buffer() += self.grad; });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary<S>("sigmoid", x, [](S v) { return stable_sigmoid(v); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  return unary<S>("tanh", x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  return unary<S>("softplus", x, [](S v) { return stable_softplus(v); },
                  [](S v, S) { return stable_sigmoid(v); });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary<S>("relu", x, [](S v) { return v > S(0) ? v : S(0); },
                  [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary<S>("exp", x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return unary<S>("log", x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  return unary<S>("square", x, [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
  return unary<S>("sqrt", x, [](S v) { return std::sqrt(v); }, [](S, S y) { return S(0.5) / y; });
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  return unary<S>("clamp", x, [lo, hi](S v) { return std::clamp(v, lo, hi); },
                  [lo, hi](S v, S) { return (v >= lo && v <= hi) ? S(1) : S(0); });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Index k = b.dim(0);
  const Index n = b.dim(1);
  const Index rows = a.size() / k;
  Vec<S> out(rows * n);
  as_matrix(out, rows, n).noalias() = as_matrix(a.value(), rows, k) * as_matrix(b.value(), k, n);
  Shape shape = a.shape();
  shape.back() = n;
  return make_result<S>("matmul", std::move(shape), std::move(out), {a, b}, [rows, k, n](Node<S>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto g = as_matrix(self.grad, rows, n);
    if (na.requires_grad) {
      as_matrix(na.grad_buffer(), rows, k).noalias() += g * as_matrix(nb.value, k, n).transpose();
    }
    if (nb.requires_grad) {
      as_matrix(nb.grad_buffer(), k, n).noalias() += as_matrix(na.value, rows, k).transpose() * g;
    }
  });
}

template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_a, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Index batch = a.dim(0);
  const Index ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const Index m = trans_a ? ac : ar;
  const Index k = trans_a ? ar : ac;
  const Index kb = trans_b ? bc : br;
  const Index n = trans_b ? br : bc;
  if (k != kb) {
    throw ShapeError("bmm: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  Vec<S> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    const auto A = as_matrix(a.value(), ar, ac, i * ar * ac);
    const auto B = as_matrix(b.value(), br, bc, i * br * bc);
    auto C = as_matrix(out, m, n, i * m * n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return make_result<S>(
      "bmm", {batch, m, n}, std::move(out), {a, b},
      [=](Node<S>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        for (Index i = 0; i < batch; ++i) {
          const auto G = as_matrix(self.grad, m, n, i * m * n);
          const auto A = as_matrix(na.value, ar, ac, i * ar * ac);
          const auto B = as_matrix(nb.value, br, bc, i * br * bc);
          if (na.requires_grad) {
            auto dA = as_matrix(na.grad_buffer(), ar, ac, i * ar * ac);
            // d op(A) = G op(B)^T
            if (!trans_a && !trans_b) dA.noalias() += G * B.transpose();
            else if (!trans_a && trans_b) dA.noalias() += G * B;
            else if (trans_a && !trans_b) dA.noalias() += B * G.transpose();
            else dA.noalias() += B.transpose() * G.transpose();
          }
          if (nb.requires_grad) {
            auto dB = as_matrix(nb.grad_buffer(), br, bc, i * br * bc);
            // d op(B) = op(A)^T G
            if (!trans_a && !trans_b) dB.noalias() += A.transpose() * G;
            else if (trans_a && !trans_b) dB.noalias() += A * G;
            else if (!trans_a && trans_b) dB.noalias() += G.transpose() * A;
            else dB.noalias() += G.transpose() * A.transpose();
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structure

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  Index known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension in " + to_string(shape));
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0 && x.size() % known == 0) shape[static_cast<std::size_t>(infer)] = x.size() / known;
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return make_result<S>("reshape", std::move(shape), x.value(), {x},
                        [](Node<S>& self) { self.inputs[0]->grad_buffer() += self.grad; });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int rank = parts.front().rank();
  const int ax = normalize_axis(axis, rank, "concat");
  Shape shape = parts.front().shape();
  shape[ax] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == rank;
    for (int d = 0; ok && d < rank; ++d) {
      if (d != ax && p.shape()[d] != parts.front().shape()[d]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + to_string(parts.front().shape()) + " and " +
                       to_string(p.shape()));
    }
    shape[ax] += p.shape()[ax];
  }
  Index outer = 1;
  for (int d = 0; d < ax; ++d) outer *= shape[d];
  Index inner = 1;
  for (int d = ax + 1; d < rank; ++d) inner *= shape[d];
  const Index out_block = shape[ax] * inner;

  std::vector<Index> blocks;
  blocks.reserve(parts.size());
  Vec<S> out(numel(shape));
  Index offset = 0;
  for (const auto& p : parts) {
    const Index block = p.shape()[ax] * inner;
    for (Index o = 0; o < outer; ++o) {
      out.segment(o * out_block + offset, block) = p.value().segment(o * block, block);
    }
    blocks.push_back(block);
    offset += block;
  }
  return make_result<S>("concat", std::move(shape), std::move(out), parts,
                        [blocks = std::move(blocks), outer, out_block](Node<S>& self) {
                          Index off = 0;
                          for (std::size_t i = 0; i < blocks.size(); ++i) {
                            auto& in = *self.inputs[i];
                            const Index block = blocks[i];
                            if (in.requires_grad) {
                              Vec<S>& g = in.grad_buffer();
                              for (Index o = 0; o < outer; ++o) {
                                g.segment(o * block, block) += self.grad.segment(o * out_block + off, block);
                              }
                            }
                            off += block;
                          }
                        });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length) {
  const int rank = x.rank();
  const int ax = normalize_axis(axis, rank, "slice");
  if (start < 0 || length < 1 || start + length > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  Index outer = 1;
  for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
  Index inner = 1;
  for (int d = ax + 1; d < rank; ++d) inner *= x.shape()[d];
  const Index in_block = x.shape()[ax] * inner;
  const Index block = length * inner;
  const Index offset = start * inner;
  Shape shape = x.shape();
  shape[ax] = length;
  Vec<S> out(outer * block);
  for (Index o = 0; o < outer; ++o) out.segment(o * block, block) = x.value().segment(o * in_block + offset, block);
  return make_result<S>("slice", std::move(shape), std::move(out), {x},
                        [outer, block, in_block, offset](Node<S>& self) {
                          Vec<S>& g = self.inputs[0]->grad_buffer();
                          for (Index o = 0; o < outer; ++o) {
                            g.segment(o * in_block + offset, block) += self.grad.segment(o * block, block);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  return make_result<S>("sum", {}, Vec<S>::Constant(1, x.value().sum()), {x},
                        [](Node<S>& self) { self.inputs[0]->grad_buffer() += self.grad[0]; });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x, int axis, bool keep_dim) {
  const int rank = x.rank();
  const int ax = normalize_axis(axis, rank, "sum");
  Index outer = 1;
  for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
  Index inner = 1;
  for (int d = ax + 1; d < rank; ++d) inner *= x.shape()[d];
  const Index n = x.shape()[ax];
  Vec<S> out = Vec<S>::Zero(outer * inner);
  const Vec<S>& xv = x.value();
  for (Index o = 0; o < outer; ++o) {
    for (Index j = 0; j < n; ++j) {
      out.segment(o * inner, inner) += xv.segment((o * n + j) * inner, inner);
    }
  }
  Shape shape = x.shape();
  if (keep_dim) shape[ax] = 1;
  else shape.erase(shape.begin() + ax);
  return make_result<S>("sum_axis", std::move(shape), std::move(out), {x}, [outer, inner, n](Node<S>& self) {
    Vec<S>& g = self.inputs[0]->grad_buffer();
    for (Index o = 0; o < outer; ++o) {
      for (Index j = 0; j < n; ++j) g.segment((o * n + j) * inner, inner) += self.grad.segment(o * inner, inner);
    }
  });
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  const Index cols = x.dim(-1);
  const Index rows = x.size() / cols;
  Vec<S> out(x.size());
  auto y = as_matrix(out, rows, cols);
  const auto in = as_matrix(x.value(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const S peak = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - peak).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return make_result<S>("softmax", x.shape(), std::move(out), {x}, [rows, cols](Node<S>& self) {
    const auto yv = as_matrix(self.value, rows, cols);
    const auto g = as_matrix(self.grad, rows, cols);
    auto dx = as_matrix(self.inputs[0]->grad_buffer(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const S dot = g.row(r).dot(yv.row(r));
      dx.row(r).array() += yv.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

template <typename S>
Tensor<S> cosine_scores(const Tensor<S>& memory, const Tensor<S>& keys, S eps) {
  if (memory.rank() != 3 || keys.rank() != 3 || memory.dim(0) != keys.dim(0) || memory.dim(2) != keys.dim(2)) {
    throw ShapeError("cosine_scores: incompatible shapes " + to_string(memory.shape()) + " and " +
                     to_string(keys.shape()));
  }
  const Index batch = memory.dim(0), slots = memory.dim(1), width = memory.dim(2), heads = keys.dim(1);
  Vec<S> out(batch * heads * slots);
  for (Index b = 0; b < batch; ++b) {
    const auto M = as_matrix(memory.value(), slots, width, b * slots * width);
    const auto K = as_matrix(keys.value(), heads, width, b * heads * width);
    auto C = as_matrix(out, heads, slots, b * heads * slots);
    const Eigen::Array<S, Eigen::Dynamic, 1> nm = M.rowwise().norm().array() + eps;
    const Eigen::Array<S, Eigen::Dynamic, 1> nk = K.rowwise().norm().array() + eps;
    C.noalias() = K * M.transpose();
    C.array().colwise() /= nk;
    C.array().rowwise() /= nm.transpose();
  }
  return make_result<S>(
      "cosine_scores", {batch, heads, slots}, std::move(out), {memory, keys},
      [=](Node<S>& self) {
        auto& nm_node = *self.inputs[0];
        auto& nk_node = *self.inputs[1];
        for (Index b = 0; b < batch; ++b) {
          const auto M = as_matrix(nm_node.value, slots, width, b * slots * width);
          const auto K = as_matrix(nk_node.value, heads, width, b * heads * width);
          const auto G = as_matrix(self.grad, heads, slots, b * heads * slots);
          const auto Sv = as_matrix(self.value, heads, slots, b * heads * slots);
          const Eigen::Array<S, Eigen::Dynamic, 1> rm = M.rowwise().norm().array();
          const Eigen::Array<S, Eigen::Dynamic, 1> rk = K.rowwise().norm().array();
          RowMatrix<S> scaled = G;  // G / ((|k| + eps)(|m| + eps))
          scaled.array().colwise() /= (rk + eps);
          scaled.array().rowwise() /= (rm + eps).transpose();
          const RowMatrix<S> gs = (G.array() * Sv.array()).matrix();
          if (nk_node.requires_grad) {
            auto dK = as_matrix(nk_node.grad_buffer(), heads, width, b * heads * width);
            dK.noalias() += scaled * M;
            for (Index r = 0; r < heads; ++r) {
              if (rk[r] > S(0)) dK.row(r) -= (gs.row(r).sum() / (rk[r] * (rk[r] + eps))) * K.row(r);
            }
          }
          if (nm_node.requires_grad) {
            auto dM = as_matrix(nm_node.grad_buffer(), slots, width, b * slots * width);
            dM.noalias() += scaled.transpose() * K;
            for (Index i = 0; i < slots; ++i) {
              if (rm[i] > S(0)) dM.row(i) -= (gs.col(i).sum() / (rm[i] * (rm[i] + eps))) * M.row(i);
            }
          }
        }
      });
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, Conv2dGeometry geometry) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0)))) {
    throw ShapeError("conv2d: incompatible input " + to_string(x.shape()) + " and weight " +
                     to_string(weight.shape()));
  }
  const Index n = x.dim(0), c = x.dim(1), o = weight.dim(0);
  const ConvPlan p = conv_plan(c, x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), geometry, "conv2d");
  const Index ckk = c * p.kh * p.kw;
  const Index positions = p.out_h * p.out_w;
  const Index in_size = c * p.height * p.width;
  const auto W = as_matrix(weight.value(), o, ckk);
  Vec<S> out(n * o * positions);
  RowMatrix<S> cols;
  for (Index i = 0; i < n; ++i) {
    im2col(x.value().data() + i * in_size, p, cols);
    auto Y = as_matrix(out, o, positions, i * o * positions);
    Y.noalias() = W * cols;
    if (bias.defined()) Y.colwise() += bias.value().matrix();
  }
  std::vector<Tensor<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<S>(
      "conv2d", {n, o, p.out_h, p.out_w}, std::move(out), std::move(inputs),
      [=](Node<S>& self) {
        auto& nx = *self.inputs[0];
        auto& nw = *self.inputs[1];
        const auto Wm = as_matrix(nw.value, o, ckk);
        RowMatrix<S> cols_b;
        for (Index i = 0; i < n; ++i) {
          const auto G = as_matrix(self.grad, o, positions, i * o * positions);
          if (nw.requires_grad) {
            im2col(nx.value.data() + i * in_size, p, cols_b);
            as_matrix(nw.grad_buffer(), o, ckk).noalias() += G * cols_b.transpose();
          }
          if (nx.requires_grad) {
            const RowMatrix<S> dcols = Wm.transpose() * G;
            col2im(dcols, p, nx.grad_buffer().data() + i * in_size);
          }
          if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            self.inputs[2]->grad_buffer() += G.rowwise().sum().array();
          }
        }
      });
}

template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           Conv2dGeometry geometry) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(1) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(1)))) {
    throw ShapeError("conv_transpose2d: incompatible input " + to_string(x.shape()) + " and weight " +
                     to_string(weight.shape()));
  }
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), o = weight.dim(1);
  const Index kh = weight.dim(2), kw = weight.dim(3);
  const Index out_h = (h - 1) * geometry.stride - 2 * geometry.padding + kh;
  const Index out_w = (w - 1) * geometry.stride - 2 * geometry.padding + kw;
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("conv_transpose2d: empty output for input " + to_string(x.shape()) + " and weight " +
                     to_string(weight.shape()));
  }
  const ConvPlan p = conv_plan(o, out_h, out_w, kh, kw, geometry, "conv_transpose2d");
  if (p.out_h != h || p.out_w != w) throw ShapeError("conv_transpose2d: inconsistent geometry");
  const Index okk = o * kh * kw;
  const Index positions = h * w;
  const Index out_size = o * out_h * out_w;
  const auto Wm = as_matrix(weight.value(), c, okk);
  Vec<S> out = Vec<S>::Zero(n * out_size);
  for (Index i = 0; i < n; ++i) {
    const RowMatrix<S> cols = Wm.transpose() * as_matrix(x.value(), c, positions, i * c * positions);
    col2im(cols, p, out.data() + i * out_size);
    if (bias.defined()) {
      auto Y = as_matrix(out, o, out_h * out_w, i * out_size);
      Y.colwise() += bias.value().matrix();
    }
  }
  std::vector<Tensor<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<S>(
      "conv_transpose2d", {n, o, out_h, out_w}, std::move(out), std::move(inputs),
      [=](Node<S>& self) {
        auto& nx = *self.inputs[0];
        auto& nw = *self.inputs[1];
        const auto Wv = as_matrix(nw.value, c, okk);
        RowMatrix<S> gcols;
        for (Index i = 0; i < n; ++i) {
          im2col(self.grad.data() + i * out_size, p, gcols);
          if (nx.requires_grad) {
            as_matrix(nx.grad_buffer(), c, positions, i * c * positions).noalias() += Wv * gcols;
          }
          if (nw.requires_grad) {
            as_matrix(nw.grad_buffer(), c, okk).noalias() +=
                as_matrix(nx.value, c, positions, i * c * positions) * gcols.transpose();
          }
          if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            self.inputs[2]->grad_buffer() += as_matrix(self.grad, o, out_h * out_w, i * out_size).rowwise().sum().array();
          }
        }
      });
}

template <typename S>
Tensor<S> least_used_allocation(const Tensor<S>& usage) {
  const Index slots = usage.dim(-1);
  const Index rows = usage.size() / slots;
  const Vec<S>& u = usage.value();
  if ((u < S(0)).any() || (u > S(1)).any()) throw NumericError("least_used_allocation: usage outside [0, 1]");
  // Orders are recorded so backward follows the same permutation.
  std::vector<Index> order(static_cast<std::size_t>(rows * slots));
  Vec<S> out(usage.size());
  for (Index r = 0; r < rows; ++r) {
    auto first = order.begin() + r * slots;
    std::iota(first, first + slots, Index{0});
    const S* ur = u.data() + r * slots;
    std::stable_sort(first, first + slots, [ur](Index a, Index b) {
      return ur[a] + S(1e-6) * static_cast<S>(a) < ur[b] + S(1e-6) * static_cast<S>(b);
    });
    S prefix = S(1);
    for (Index j = 0; j < slots; ++j) {
      const Index slot = first[j];
      out[r * slots + slot] = (S(1) - ur[slot]) * prefix;
      prefix *= ur[slot];
    }
  }
  return make_result<S>("least_used_allocation", usage.shape(), std::move(out), {usage},
                        [order = std::move(order), rows, slots](Node<S>& self) {
                          auto& in = *self.inputs[0];
                          Vec<S>& du = in.grad_buffer();
                          std::vector<S> prefix(static_cast<std::size_t>(slots));
                          for (Index r = 0; r < rows; ++r) {
                            const Index* ord = order.data() + r * slots;
                            const S* ur = in.value.data() + r * slots;
                            const S* g = self.grad.data() + r * slots;
                            S running = S(1);
                            for (Index j = 0; j < slots; ++j) {
                              prefix[j] = running;
                              running *= ur[ord[j]];
                            }
                            // tail = sum_{j > m} g_j (1 - u_j) prod_{m < m' < j} u_m'
                            S tail = S(0);
                            for (Index m = slots; m-- > 0;) {
                              const Index slot = ord[m];
                              du[r * slots + slot] += prefix[m] * (tail - g[slot]);
                              tail = g[slot] * (S(1) - ur[slot]) + ur[slot] * tail;
                            }
                          }
                        });
}

#define GTMM_INSTANTIATE(S)                                                                           \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                         \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                         \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                         \
  template Tensor<S> div(const Tensor<S>&, const Tensor<S>&);                                         \
  template Tensor<S> scale(const Tensor<S>&, S);                                                      \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                                 \
  template Tensor<S> neg(const Tensor<S>&);                                                           \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                       \
  template Tensor<S> tanh(const Tensor<S>&);                                                          \
  template Tensor<S> softplus(const Tensor<S>&);                                                      \
  template Tensor<S> relu(const Tensor<S>&);                                                          \
  template Tensor<S> exp(const Tensor<S>&);                                                           \
  template Tensor<S> log(const Tensor<S>&);                                                           \
  template Tensor<S> square(const Tensor<S>&);                                                        \
  template Tensor<S> sqrt(const Tensor<S>&);                                                          \
  template Tensor<S> clamp(const Tensor<S>&, S, S);                                                   \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> bmm(const Tensor<S>&, const Tensor<S>&, bool, bool);                             \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                                      \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                                      \
  template Tensor<S> sum(const Tensor<S>&);                                                           \
  template Tensor<S> mean(const Tensor<S>&);                                                          \
  template Tensor<S> sum(const Tensor<S>&, int, bool);                                                \
  template Tensor<S> softmax(const Tensor<S>&);                                                       \
  template Tensor<S> cosine_scores(const Tensor<S>&, const Tensor<S>&, S);                            \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Conv2dGeometry);    \
  template Tensor<S> conv_transpose2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,           \
                                      Conv2dGeometry);                                                \
  template Tensor<S> least_used_allocation(const Tensor<S>&);

GTMM_INSTANTIATE(float)
GTMM_INSTANTIATE(double)
#undef GTMM_INSTANTIATE

}  // namespace gtmm

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "clarga/errors.hpp"
#include "clarga/rng.hpp"
#include "clarga/tensor.hpp"

namespace clarga {

// One byte per entry, 1 = excluded.
using Mask = std::vector<std::uint8_t>;

// What softmax_masked does with a row whose entries are all excluded.
enum class DegenerateRows {
  kError,    // throw DegenerateSoftmaxError
  kZeroRow,  // emit an all-zero row (no probability mass)
};

namespace detail {

inline bool taping(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
  }
}

// Splits a shape into (rows, last-axis length).
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t,
                                                     const char* op) {
  if (t.rank() == 0 || t.shape().back() == 0) {
    throw ShapeError(std::string(op) + ": empty last axis in " +
                     shape_str(t.shape()));
  }
  const std::size_t cols = t.shape().back();
  return {t.numel() / cols, cols};
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMatrix> map(const double* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
inline Eigen::Map<RowMatrix> cmap(double* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

inline Tensor make_output(Shape shape, std::vector<double> data,
                          bool on_tape) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (on_tape) out.set_requires_grad(true);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  const bool tape = detail::taping({&a, &b});
  Tensor y = detail::make_output(a.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      for (auto* in : {ai.get(), bi.get()}) {
        if (!in->requires_grad) continue;
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
      }
    });
  }
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  const bool tape = detail::taping({&a, &b});
  Tensor y = detail::make_output(a.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= yi->grad[i];
      }
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const bool tape = detail::taping({&a, &b});
  Tensor y = detail::make_output(a.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += yi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += yi->grad[i] * ai->data[i];
      }
    });
  }
  return y;
}

// x[..., n] + bias[n], bias broadcast over leading axes.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  const auto [rows, cols] = detail::rows_cols(x, "add_rowwise");
  if (bias.numel() != cols) {
    throw ShapeError("add_rowwise: bias " + shape_str(bias.shape()) +
                     " does not match last axis of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = x[r * cols + c] + bias[c];
  const bool tape = detail::taping({&x, &bias});
  Tensor y = detail::make_output(x.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record(
        [xi = x.impl(), bi = bias.impl(), yi = y.impl(), rows, cols] {
          if (yi->grad.empty()) return;
          if (xi->requires_grad) {
            auto& g = xi->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
          }
          if (bi->requires_grad) {
            auto& g = bi->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cols; ++c)
                g[c] += yi->grad[r * cols + c];
          }
        });
  }
  return y;
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(x.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl(), c] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * yi->grad[i];
    });
  }
  return y;
}

inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + c;
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(x.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
    });
  }
  return y;
}

// s * x with s a one-element tensor; gradient flows to both.
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ShapeError("scale_by: factor must have one element, got " +
                     shape_str(s.shape()));
  }
  const double c = s[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  const bool tape = detail::taping({&x, &s});
  Tensor y = detail::make_output(x.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), si = s.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const double c = si->data[0];
      if (xi->requires_grad) {
        auto& g = xi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * yi->grad[i];
      }
      if (si->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < yi->grad.size(); ++i)
          acc += yi->grad[i] * xi->data[i];
        si->grad_buffer()[0] += acc;
      }
    });
  }
  return y;
}

inline Tensor leaky_relu(const Tensor& x, double slope) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(x.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl(), slope] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += (xi->data[i] > 0.0 ? 1.0 : slope) * yi->grad[i];
    });
  }
  return y;
}

// ------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) +
                     " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::cmap(out.data(), m, n).noalias() =
      detail::map(a.data().data(), m, k) * detail::map(b.data().data(), k, n);
  const bool tape = detail::taping({&a, &b});
  Tensor y = detail::make_output({m, n}, std::move(out), tape);
  if (tape) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), yi = y.impl(), m, k,
                            n] {
      if (yi->grad.empty()) return;
      const auto gy = detail::map(yi->grad.data(), m, n);
      if (ai->requires_grad) {
        detail::cmap(ai->grad_buffer().data(), m, k).noalias() +=
            gy * detail::map(bi->data.data(), k, n).transpose();
      }
      if (bi->requires_grad) {
        detail::cmap(bi->grad_buffer().data(), k, n).noalias() +=
            detail::map(ai->data.data(), m, k).transpose() * gy;
      }
    });
  }
  return y;
}

// a[m x k] * b[n x k]^T -> [m x n], without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: cannot multiply " + shape_str(a.shape()) +
                     " by the transpose of " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(m * n, 0.0);
  detail::cmap(out.data(), m, n).noalias() =
      detail::map(a.data().data(), m, k) * detail::map(b.data().data(), n, k).transpose();
  const bool tape = detail::taping({&a, &b});
  Tensor y = detail::make_output({m, n}, std::move(out), tape);
  if (tape) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), yi = y.impl(), m, k,
                            n] {
      if (yi->grad.empty()) return;
      const auto gy = detail::map(yi->grad.data(), m, n);
      if (ai->requires_grad) {
        detail::cmap(ai->grad_buffer().data(), m, k).noalias() +=
            gy * detail::map(bi->data.data(), n, k);
      }
      if (bi->requires_grad) {
        detail::cmap(bi->grad_buffer().data(), n, k).noalias() +=
            gy.transpose() * detail::map(ai->data.data(), m, k);
      }
    });
  }
  return y;
}

// Batched product: a[B x m x k] * b[B x k x n] -> [B x m x n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(bs * m * n, 0.0);
  for (std::size_t s = 0; s < bs; ++s) {
    const double* A = a.data().data() + s * m * k;
    const double* B = b.data().data() + s * k * n;
    double* C = out.data() + s * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
      }
  }
  const bool tape = detail::taping({&a, &b});
  Tensor y = detail::make_output({bs, m, n}, std::move(out), tape);
  if (tape) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), yi = y.impl(), bs, m,
                            k, n] {
      if (yi->grad.empty()) return;
      for (std::size_t s = 0; s < bs; ++s) {
        const double* A = ai->data.data() + s * m * k;
        const double* B = bi->data.data() + s * k * n;
        const double* G = yi->grad.data() + s * m * n;
        if (ai->requires_grad) {
          double* gA = ai->grad_buffer().data() + s * m * k;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j)
                acc += G[i * n + j] * B[p * n + j];
              gA[i * k + p] += acc;
            }
        }
        if (bi->requires_grad) {
          double* gB = bi->grad_buffer().data() + s * k * n;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = A[i * k + p];
              for (std::size_t j = 0; j < n; ++j)
                gB[p * n + j] += av * G[i * n + j];
            }
        }
      }
    });
  }
  return y;
}

// ------------------------------------------------------------ shape handling

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " +
                     shape_str(shape) + " changes element count");
  }
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(std::move(shape), x.values(), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
    });
  }
  return y;
}

// General axis permutation: output axis i is input axis axes[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) {
    throw ShapeError("permute: " + std::to_string(axes.size()) +
                     " axes for rank " + std::to_string(r));
  }
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: invalid axis list");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;)
    in_strides[i - 1] = in_strides[i] * x.dim(i);
  // Input offset of each output element.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[axes[i]];
    src[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[src[i]];
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(std::move(out_shape), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl(), src = std::move(src)] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += yi->grad[i];
    });
  }
  return y;
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

// Concatenation along the last axis; leading axes must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (p.rank() != parts[0].rank() || pl != lead) {
      throw ShapeError("concat: " + shape_str(p.shape()) +
                       " incompatible with " + shape_str(parts[0].shape()));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = numel_of(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c)
        out[r * total + offset + c] = parts[k][r * widths[k] + c];
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  bool tape = false;
  for (const auto& p : parts) tape = tape || detail::taping({&p});
  Tensor y = detail::make_output(std::move(shape), std::move(out), tape);
  if (tape) {
    std::vector<detail::ImplPtr> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    Tape::active()->record([ins, yi = y.impl(), widths, rows, total] {
      if (yi->grad.empty()) return;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (ins[k]->requires_grad) {
          auto& g = ins[k]->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c)
              g[r * widths[k] + c] += yi->grad[r * total + offset + c];
        }
        offset += widths[k];
      }
    });
  }
  return y;
}

// Row lookup across several [rows x n] sources: output row r is
// sources[index[r].first] row index[r].second.
inline Tensor gather_rows(
    const std::vector<Tensor>& sources,
    const std::vector<std::pair<std::size_t, std::size_t>>& index) {
  if (sources.empty()) throw ShapeError("gather_rows: no sources");
  const std::size_t n = sources[0].shape().back();
  for (const auto& s : sources) {
    if (s.rank() != 2 || s.dim(1) != n) {
      throw ShapeError("gather_rows: source " + shape_str(s.shape()) +
                       " is not [rows x " + std::to_string(n) + "]");
    }
  }
  std::vector<double> out(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto [s, row] = index[r];
    if (s >= sources.size() || row >= sources[s].dim(0)) {
      throw ShapeError("gather_rows: index out of range");
    }
    std::copy_n(sources[s].data().data() + row * n, n, out.data() + r * n);
  }
  bool tape = false;
  for (const auto& s : sources) tape = tape || detail::taping({&s});
  Tensor y = detail::make_output({index.size(), n}, std::move(out), tape);
  if (tape) {
    std::vector<detail::ImplPtr> ins;
    for (const auto& s : sources) ins.push_back(s.impl());
    Tape::active()->record([ins, yi = y.impl(), index, n] {
      if (yi->grad.empty()) return;
      for (std::size_t r = 0; r < index.size(); ++r) {
        auto& in = ins[index[r].first];
        if (!in->requires_grad) continue;
        auto& g = in->grad_buffer();
        for (std::size_t c = 0; c < n; ++c)
          g[index[r].second * n + c] += yi->grad[r * n + c];
      }
    });
  }
  return y;
}

// ----------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output({1}, {acc}, tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (auto& v : g) v += yi->grad[0];
    });
  }
  return y;
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Sum over one axis, which is removed from the shape.
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("sum_axis: axis out of range");
  std::size_t pre = 1, post = 1;
  for (std::size_t i = 0; i < axis; ++i) pre *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) post *= x.dim(i);
  const std::size_t n = x.dim(axis);
  std::vector<double> out(pre * post, 0.0);
  for (std::size_t a = 0; a < pre; ++a)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t b = 0; b < post; ++b)
        out[a * post + b] += x[(a * n + k) * post + b];
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape.push_back(1);
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(std::move(shape), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl(), pre, n, post] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t a = 0; a < pre; ++a)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t b = 0; b < post; ++b)
            g[(a * n + k) * post + b] += yi->grad[a * post + b];
    });
  }
  return y;
}

// ------------------------------------------------------------------- softmax

// Softmax over the last axis with excluded entries (mask byte 1) forced to 0.
// Max-subtraction runs over the included entries only.
inline Tensor softmax_masked(const Tensor& logits, const Mask& mask,
                             DegenerateRows on_empty = DegenerateRows::kError) {
  if (mask.size() != logits.numel()) {
    throw ShapeError("softmax_masked: mask has " + std::to_string(mask.size()) +
                     " entries for logits " + shape_str(logits.shape()));
  }
  const auto [rows, cols] = detail::rows_cols(logits, "softmax_masked");
  std::vector<double> out(logits.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (!mask[base + c]) mx = std::max(mx, logits[base + c]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      if (on_empty == DegenerateRows::kError) {
        throw DegenerateSoftmaxError("softmax_masked: row " +
                                     std::to_string(r) +
                                     " has every entry masked");
      }
      continue;
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask[base + c]) continue;
      out[base + c] = std::exp(logits[base + c] - mx);
      z += out[base + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[base + c] /= z;
  }
  const bool tape = detail::taping({&logits});
  Tensor y = detail::make_output(logits.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = logits.impl(), yi = y.impl(), rows = rows,
                            cols = cols] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
          dot += yi->data[base + c] * yi->grad[base + c];
        // Masked entries have y = 0 and receive nothing.
        for (std::size_t c = 0; c < cols; ++c)
          g[base + c] += yi->data[base + c] * (yi->grad[base + c] - dot);
      }
    });
  }
  return y;
}

inline Tensor log_softmax(const Tensor& logits) {
  const auto [rows, cols] = detail::rows_cols(logits, "log_softmax");
  std::vector<double> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    double mx = logits[base];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, logits[base + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(logits[base + c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[base + c] = logits[base + c] - lse;
  }
  const bool tape = detail::taping({&logits});
  Tensor y = detail::make_output(logits.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = logits.impl(), yi = y.impl(), rows = rows,
                            cols = cols] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double gs = 0.0;
        for (std::size_t c = 0; c < cols; ++c) gs += yi->grad[base + c];
        for (std::size_t c = 0; c < cols; ++c)
          g[base + c] += yi->grad[base + c] - std::exp(yi->data[base + c]) * gs;
      }
    });
  }
  return y;
}

// Mean negative log-likelihood of log_probs[n x p] at the target columns.
inline Tensor nll_loss(const Tensor& log_probs,
                       const std::vector<std::size_t>& targets) {
  if (log_probs.rank() != 2 || log_probs.dim(0) != targets.size()) {
    throw ShapeError("nll_loss: log_probs " + shape_str(log_probs.shape()) +
                     " vs " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = log_probs.dim(0), p = log_probs.dim(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= p) {
      throw DataError("nll_loss: target class " + std::to_string(targets[i]) +
                      " out of range for " + std::to_string(p) + " classes");
    }
    acc -= log_probs[i * p + targets[i]];
  }
  const bool tape = detail::taping({&log_probs});
  Tensor y = detail::make_output({1}, {acc / static_cast<double>(n)}, tape);
  if (tape) {
    Tape::active()->record([xi = log_probs.impl(), yi = y.impl(), targets, n,
                            p] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      const double w = yi->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) g[i * p + targets[i]] -= w;
    });
  }
  return y;
}

// ------------------------------------------------------------- normalization

// Affine-free LayerNorm over the last axis with biased variance.
inline Tensor layer_norm(const Tensor& x, double epsilon) {
  const auto [rows, cols] = detail::rows_cols(x, "layer_norm");
  std::vector<double> out(x.numel(), 0.0);
  std::vector<double> inv_std(rows, 0.0);
  const double n = static_cast<double>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += x[base + c];
    mu /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double dlt = x[base + c] - mu;
      var += dlt * dlt;
    }
    var /= n;
    const double denom = var + epsilon;
    if (denom <= 0.0) continue;  // constant row with epsilon = 0
    inv_std[r] = 1.0 / std::sqrt(denom);
    for (std::size_t c = 0; c < cols; ++c)
      out[base + c] = (x[base + c] - mu) * inv_std[r];
  }
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(x.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl(), rows = rows,
                            cols = cols, inv_std = std::move(inv_std), n] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double gm = 0.0, gy = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          gm += yi->grad[base + c];
          gy += yi->grad[base + c] * yi->data[base + c];
        }
        gm /= n;
        gy /= n;
        for (std::size_t c = 0; c < cols; ++c)
          g[base + c] += inv_std[r] * (yi->grad[base + c] - gm -
                                       yi->data[base + c] * gy);
      }
    });
  }
  return y;
}

// Inverted dropout: kept entries are divided by (1 - p); eval mode and p = 0
// return the input unchanged.
inline Tensor dropout(const Tensor& x, double p, bool train, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ContractError("dropout: probability must lie in [0, 1)");
  }
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> factor(x.numel());
  for (auto& f : factor) f = rng.bernoulli(p) ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor[i];
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(x.shape(), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl(),
                            factor = std::move(factor)] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor[i] * yi->grad[i];
    });
  }
  return y;
}

// Euclidean norm over the last axis.
inline Tensor l2_norm(const Tensor& x) {
  const auto [rows, cols] = detail::rows_cols(x, "l2_norm");
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += x[r * cols + c] * x[r * cols + c];
    out[r] = std::sqrt(acc);
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape.push_back(1);
  const bool tape = detail::taping({&x});
  Tensor y = detail::make_output(std::move(shape), std::move(out), tape);
  if (tape) {
    Tape::active()->record([xi = x.impl(), yi = y.impl(), rows = rows,
                            cols = cols] {
      if (yi->grad.empty()) return;
      auto& g = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        if (yi->data[r] == 0.0) continue;  // subgradient 0 at the origin
        const double w = yi->grad[r] / yi->data[r];
        for (std::size_t c = 0; c < cols; ++c)
          g[r * cols + c] += w * xi->data[r * cols + c];
      }
    });
  }
  return y;
}

// Pairwise cosine similarity between rows: a[n x d], b[m x d] -> [n x m].
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("cosine_similarity: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  auto unit_rows = [d](const Tensor& t, const char* which) {
    std::vector<double> norms(t.dim(0));
    std::vector<double> unit(t.numel());
    for (std::size_t r = 0; r < t.dim(0); ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += t[r * d + c] * t[r * d + c];
      norms[r] = std::sqrt(acc);
      if (!(norms[r] > 0.0) || !std::isfinite(norms[r])) {
        throw NumericalError(std::string("cosine_similarity: zero-norm row ") +
                             std::to_string(r) + " in " + which);
      }
      for (std::size_t c = 0; c < d; ++c) unit[r * d + c] = t[r * d + c] / norms[r];
    }
    return std::make_pair(std::move(norms), std::move(unit));
  };
  auto [na, ua] = unit_rows(a, "first operand");
  auto [nb, ub] = unit_rows(b, "second operand");
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += ua[i * d + c] * ub[j * d + c];
      out[i * m + j] = acc;
    }
  const bool tape = detail::taping({&a, &b});
  Tensor y = detail::make_output({n, m}, std::move(out), tape);
  if (tape) {
    Tape::active()->record([ai = a.impl(), bi = b.impl(), yi = y.impl(), n, m,
                            d, na = std::move(na), ua = std::move(ua),
                            nb = std::move(nb), ub = std::move(ub)] {
      if (yi->grad.empty()) return;
      const auto& G = yi->grad;
      const auto& C = yi->data;
      if (ai->requires_grad) {
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double w = G[i * m + j] / na[i];
            if (w == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c)
              g[i * d + c] += w * (ub[j * d + c] - C[i * m + j] * ua[i * d + c]);
          }
      }
      if (bi->requires_grad) {
        auto& g = bi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double w = G[i * m + j] / nb[j];
            if (w == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c)
              g[j * d + c] += w * (ua[i * d + c] - C[i * m + j] * ub[j * d + c]);
          }
      }
    });
  }
  return y;
}

}  // namespace clarga

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/tensor.hpp"

// Differentiable tensor operations. Each op computes its forward value and,
// when a tape is active and the result requires grad, records a closure that
// accumulates gradients into its operands.

namespace cmfuse {

namespace detail {

// ---------------------------------------------------------------- kernels

// C += A(m x k) * B(k x n)
inline void mm_nn_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A(m x k) * B(n x k)^T, i.e. C[i][j] += dot(A.row(i), B.row(j))
inline void mm_nt_acc(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C += A(p x m)^T * B(p x n)
inline void mm_tn_acc(const double* a, const double* b, double* c,
                      std::size_t p, std::size_t m, std::size_t n) {
  for (std::size_t r = 0; r < p; ++r) {
    const double* arow = a + r * m;
    const double* brow = b + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline bool recording(const Tensor& out) {
  return out.requires_grad() && Tape::active() != nullptr;
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) +
                                " tensor, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  detail::mm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on, m, k, n] {
      const double* g = on->grad.data();
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
        detail::mm_nt_acc(g, bn->data.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
        detail::mm_tn_acc(an->data.data(), g, bn->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  out.set_requires_grad(a.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    Tape::active()->record([an, on, m, n] {
      if (!an->requires_grad) return;
      if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
      const double* g = on->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on] {
      for (auto* n : {an.get(), bn.get()}) {
        if (!n->requires_grad) continue;
        if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
        for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on] {
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
        for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on] {
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
        for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

// k * a + c, with scalar constants.
inline Tensor affine(const Tensor& a, double k, double c) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = k * a.data()[i] + c;
  out.set_requires_grad(a.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    Tape::active()->record([an, on, k] {
      if (!an->requires_grad) return;
      if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += k * on->grad[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double k) { return affine(a, k, 0.0); }

// a * s where s is a scalar tensor; differentiable in both.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) {
    throw std::invalid_argument("scale_by: scale must be scalar, got " + shape_str(s.shape()));
  }
  const double sv = s.data()[0];
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = sv * a.data()[i];
  out.set_requires_grad(a.requires_grad() || s.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), sn = s.node(), on = out.node();
    Tape::active()->record([an, sn, on, sv] {
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += sv * on->grad[i];
      }
      if (sn->requires_grad) {
        if (sn->grad.empty()) sn->grad.assign(1, 0.0);
        double acc = 0.0;
        for (std::size_t i = 0; i < an->data.size(); ++i) acc += on->grad[i] * an->data[i];
        sn->grad[0] += acc;
      }
    });
  }
  return out;
}

// Broadcast-add a length-n vector to every row of an (m x n) matrix.
inline Tensor add_row(const Tensor& a, const Tensor& v) {
  detail::require_rank(a, 2, "add_row");
  detail::require_rank(v, 1, "add_row");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (v.dim(0) != n) {
    throw std::invalid_argument("add_row: row " + shape_str(v.shape()) + " does not match " +
                                shape_str(a.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = a.data()[i * n + j] + v.data()[j];
  out.set_requires_grad(a.requires_grad() || v.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), vn = v.node(), on = out.node();
    Tape::active()->record([an, vn, on, m, n] {
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (vn->requires_grad) {
        if (vn->grad.empty()) vn->grad.assign(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) vn->grad[j] += on->grad[i * n + j];
      }
    });
  }
  return out;
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 1, "dot");
  detail::require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
  Tensor out = Tensor::scalar(acc);
  out.set_requires_grad(a.requires_grad() || b.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on] {
      const double g = on->grad[0];
      if (an->requires_grad) {
        if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g * bn->data[i];
      }
      if (bn->requires_grad) {
        if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
        for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += g * an->data[i];
      }
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  Tensor out = Tensor::scalar(acc);
  out.set_requires_grad(a.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    Tape::active()->record([an, on] {
      if (!an->requires_grad) return;
      if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
      const double g = on->grad[0];
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(new_shape));
  }
  Tensor out = Tensor::from(std::move(new_shape), a.values());
  out.set_requires_grad(a.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    Tape::active()->record([an, on] {
      if (!an->requires_grad) return;
      if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- slicing / concat

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) {
      throw std::invalid_argument("concat_rows: column mismatch " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    needs_grad = needs_grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({rows, cols});
  std::size_t r = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), out.data() + r * cols);
    r += p.dim(0);
  }
  out.set_requires_grad(needs_grad);
  if (detail::recording(out)) {
    std::vector<std::shared_ptr<Tensor::Node>> nodes;
    nodes.reserve(parts.size());
    for (const Tensor& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    Tape::active()->record([nodes, on, cols] {
      std::size_t offset = 0;
      for (const auto& n : nodes) {
        const std::size_t count = n->data.size();
        if (n->requires_grad) {
          if (n->grad.empty()) n->grad.assign(count, 0.0);
          for (std::size_t i = 0; i < count; ++i) n->grad[i] += on->grad[offset + i];
        }
        offset += count;
      }
      (void)cols;
    });
  }
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) { return concat_rows(std::vector<Tensor>{a, b}); }

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t len) {
  detail::require_rank(a, 2, "slice_rows");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (start + len > rows) {
    throw std::invalid_argument("slice_rows: [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of range for " +
                                shape_str(a.shape()));
  }
  Tensor out = Tensor::zeros({len, cols});
  std::copy(a.data() + start * cols, a.data() + (start + len) * cols, out.data());
  out.set_requires_grad(a.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    Tape::active()->record([an, on, start, cols] {
      if (!an->requires_grad) return;
      if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[start * cols + i] += on->grad[i];
    });
  }
  return out;
}

// Row i of a matrix, as a length-n vector.
inline Tensor select_row(const Tensor& a, std::size_t i) {
  detail::require_rank(a, 2, "select_row");
  Tensor out = reshape(slice_rows(a, i, 1), {a.dim(1)});
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.shape()));
    }
    cols += p.dim(1);
    needs_grad = needs_grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({rows, cols});
  std::size_t c0 = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.dim(1);
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(p.data() + i * pc, p.data() + (i + 1) * pc, out.data() + i * cols + c0);
    c0 += pc;
  }
  out.set_requires_grad(needs_grad);
  if (detail::recording(out)) {
    std::vector<std::shared_ptr<Tensor::Node>> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    Tape::active()->record([nodes, on, rows, cols] {
      std::size_t c0 = 0;
      for (const auto& n : nodes) {
        const std::size_t pc = n->shape[1];
        if (n->requires_grad) {
          if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < pc; ++j) n->grad[i * pc + j] += on->grad[i * cols + c0 + j];
        }
        c0 += pc;
      }
    });
  }
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  detail::require_rank(a, 2, "slice_cols");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (start + len > cols) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of range for " +
                                shape_str(a.shape()));
  }
  Tensor out = Tensor::zeros({rows, len});
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(a.data() + i * cols + start, a.data() + i * cols + start + len, out.data() + i * len);
  out.set_requires_grad(a.requires_grad());
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    Tape::active()->record([an, on, rows, cols, start, len] {
      if (!an->requires_grad) return;
      if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < len; ++j) an->grad[i * cols + start + j] += on->grad[i * len + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------- nonlinearities

// Softmax along `axis`, computed with max-subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(x.shape()));
  }
  const Shape& shape = x.shape();
  const std::size_t len = shape[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];

  Tensor out = Tensor::zeros(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x.data()[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, x.data()[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(x.data()[base + l * inner] - mx);
        out.data()[base + l * inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < len; ++l) out.data()[base + l * inner] /= total;
    }
  }
  out.set_requires_grad(x.requires_grad());
  if (detail::recording(out)) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, outer, len, inner] {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double gy = 0.0;
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t idx = base + l * inner;
            gy += on->grad[idx] * on->data[idx];
          }
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t idx = base + l * inner;
            xn->grad[idx] += on->data[idx] * (on->grad[idx] - gy);
          }
        }
      }
    });
  }
  return out;
}

// Row-wise softmax over the key positions marked valid. Invalid positions get
// weight exactly 0; their logits never enter the computation.
inline Tensor masked_softmax_rows(const Tensor& x, const std::vector<bool>& valid) {
  detail::require_rank(x, 2, "masked_softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (valid.size() != cols) {
    throw std::invalid_argument("masked_softmax_rows: mask length " + std::to_string(valid.size()) +
                                " does not match " + shape_str(x.shape()));
  }
  bool any = false;
  for (bool v : valid) any = any || v;
  if (!any) throw std::invalid_argument("masked_softmax_rows: mask excludes all positions");

  Tensor out = Tensor::zeros({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xr = x.data() + i * cols;
    double* yr = out.data() + i * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j)
      if (valid[j]) mx = std::max(mx, xr[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!valid[j]) continue;
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    for (std::size_t j = 0; j < cols; ++j)
      if (valid[j]) yr[j] /= total;
  }
  out.set_requires_grad(x.requires_grad());
  if (detail::recording(out)) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, rows, cols] {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* y = on->data.data() + i * cols;
        const double* g = on->grad.data() + i * cols;
        double gy = 0.0;
        for (std::size_t j = 0; j < cols; ++j) gy += g[j] * y[j];
        for (std::size_t j = 0; j < cols; ++j) xn->grad[i * cols + j] += y[j] * (g[j] - gy);
      }
    });
  }
  return out;
}

// Row-wise layer norm with population variance, then affine gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  detail::require_rank(x, 2, "layer_norm");
  detail::require_rank(gain, 1, "layer_norm");
  detail::require_rank(bias, 1, "layer_norm");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (gain.dim(0) != cols || bias.dim(0) != cols) {
    throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                                shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros({rows, cols});
  std::vector<double> xhat(rows * cols);
  std::vector<double> invstd(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xr = x.data() + i * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[i] = is;
    for (std::size_t j = 0; j < cols; ++j) {
      const double xh = (xr[j] - mean) * is;
      xhat[i * cols + j] = xh;
      out.data()[i * cols + j] = xh * gain.data()[j] + bias.data()[j];
    }
  }
  out.set_requires_grad(x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  if (detail::recording(out)) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    Tape::active()->record([xn, gn, bn, on, rows, cols, xhat = std::move(xhat),
                            invstd = std::move(invstd)] {
      for (std::size_t i = 0; i < rows; ++i) {
        const double* g = on->grad.data() + i * cols;
        const double* xh = xhat.data() + i * cols;
        if (gn->requires_grad) {
          if (gn->grad.empty()) gn->grad.assign(cols, 0.0);
          for (std::size_t j = 0; j < cols; ++j) gn->grad[j] += g[j] * xh[j];
        }
        if (bn->requires_grad) {
          if (bn->grad.empty()) bn->grad.assign(cols, 0.0);
          for (std::size_t j = 0; j < cols; ++j) bn->grad[j] += g[j];
        }
        if (xn->requires_grad) {
          if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const double dxh = g[j] * gn->data[j];
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= static_cast<double>(cols);
          m2 /= static_cast<double>(cols);
          for (std::size_t j = 0; j < cols; ++j) {
            const double dxh = g[j] * gn->data[j];
            xn->grad[i * cols + j] += invstd[i] * (dxh - m1 - xh[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

// Exact-erf GELU: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  out.set_requires_grad(x.requires_grad());
  if (detail::recording(out)) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record([xn, on] {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      for (std::size_t i = 0; i < xn->grad.size(); ++i) {
        const double v = xn->data[i];
        const double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        xn->grad[i] += on->grad[i] * (phi + v * pdf);
      }
    });
  }
  return out;
}

// Numerically stable logistic, elementwise.
inline Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x.data()[i];
    if (v >= 0.0) {
      out.data()[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out.data()[i] = e / (1.0 + e);
    }
  }
  out.set_requires_grad(x.requires_grad());
  if (detail::recording(out)) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record([xn, on] {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      for (std::size_t i = 0; i < xn->grad.size(); ++i) {
        const double y = on->data[i];
        xn->grad[i] += on->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

// Mean over the batch of -log softmax(logits)[label], via stable log-sum-exp.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(b));
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) +
                              " out of range for " + std::to_string(c) + " classes at row " +
                              std::to_string(i));
    }
    const double* row = logits.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - mx);
      total += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= total;
    loss += std::log(total) + mx - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  Tensor out = Tensor::scalar(loss);
  out.set_requires_grad(logits.requires_grad());
  if (detail::recording(out)) {
    auto ln = logits.node(), on = out.node();
    Tape::active()->record([ln, on, b, c, labels, probs = std::move(probs)] {
      if (!ln->requires_grad) return;
      if (ln->grad.empty()) ln->grad.assign(ln->data.size(), 0.0);
      const double g = on->grad[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double one_hot = (j == labels[i]) ? 1.0 : 0.0;
          ln->grad[i * c + j] += g * (probs[i * c + j] - one_hot);
        }
      }
    });
  }
  return out;
}

// Gather rows of an embedding table; gradients scatter-add back into the rows.
inline Tensor embedding_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  detail::require_rank(table, 2, "embedding_rows");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw std::out_of_range("embedding_rows: id " + std::to_string(ids[i]) + " >= vocab " +
                              std::to_string(vocab) + " at position " + std::to_string(i));
    }
    std::copy(table.data() + ids[i] * d, table.data() + (ids[i] + 1) * d, out.data() + i * d);
  }
  out.set_requires_grad(table.requires_grad());
  if (detail::recording(out)) {
    auto tn = table.node(), on = out.node();
    Tape::active()->record([tn, on, ids, d] {
      if (!tn->requires_grad) return;
      if (tn->grad.empty()) tn->grad.assign(tn->data.size(), 0.0);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) tn->grad[ids[i] * d + j] += on->grad[i * d + j];
    });
  }
  return out;
}

// Row-wise L2 normalization; a row of exact zeros is an error.
inline Tensor l2_normalize_rows(const Tensor& x) {
  detail::require_rank(x, 2, "l2_normalize_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::zeros({rows, cols});
  std::vector<double> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xr = x.data() + i * cols;
    double sq = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sq += xr[j] * xr[j];
    const double norm = std::sqrt(sq);
    if (norm == 0.0) {
      throw std::runtime_error("l2_normalize_rows: zero-norm row " + std::to_string(i));
    }
    norms[i] = norm;
    for (std::size_t j = 0; j < cols; ++j) out.data()[i * cols + j] = xr[j] / norm;
  }
  out.set_requires_grad(x.requires_grad());
  if (detail::recording(out)) {
    auto xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, rows, cols, norms = std::move(norms)] {
      if (!xn->requires_grad) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* y = on->data.data() + i * cols;
        const double* g = on->grad.data() + i * cols;
        double gy = 0.0;
        for (std::size_t j = 0; j < cols; ++j) gy += g[j] * y[j];
        for (std::size_t j = 0; j < cols; ++j)
          xn->grad[i * cols + j] += (g[j] - y[j] * gy) / norms[i];
      }
    });
  }
  return out;
}

}  // namespace cmfuse

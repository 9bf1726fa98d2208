#pragma once

// Differentiable operations over gig::Tensor.
//
// Broadcasting is limited to one documented rule: add() accepts a 1 x cols
// right operand and adds it to every row of the left operand. Every other
// binary op requires identical shapes.

#include "gig/tensor.hpp"

#include <cassert>
#include <limits>

namespace gig {

namespace kernel {

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace kernel

namespace detail {

inline bool wants(const NodePtr& p) { return p->requires_grad; }

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// a + b. `b` may equal a's shape or be a 1 x cols row broadcast over rows.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool broadcast = b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols();
  if (!broadcast) detail::require_same(a, b, "add");
  const std::size_t cols = a.cols();
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[broadcast ? i % cols : i];
  return make_op(a.shape(), std::move(out), {a, b}, [broadcast, cols](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (detail::wants(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (detail::wants(pb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        pb->grad[broadcast ? i % cols : i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (detail::wants(pa)) pa->grad[i] += self.grad[i];
      if (detail::wants(pb)) pb->grad[i] -= self.grad[i];
    }
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (detail::wants(pa)) pa->grad[i] += self.grad[i] * pb->value[i];
      if (detail::wants(pb)) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= s;
  return make_op(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    auto& pa = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += s * self.grad[i];
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  kernel::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (detail::wants(pa)) kernel::gemm_nt(self.grad.data(), pb->value.data(), pa->grad.data(), m, n, k);
    if (detail::wants(pb)) kernel::gemm_tn(pa->value.data(), self.grad.data(), pb->grad.data(), k, m, n);
  });
}

/// a * b^T, with b stored as (n x k).
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: shape mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  kernel::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    // dA = dC * B ; dB = dC^T * A
    if (detail::wants(pa)) kernel::gemm_nn(self.grad.data(), pb->value.data(), pa->grad.data(), m, n, k);
    if (detail::wants(pb)) kernel::gemm_tn(self.grad.data(), pa->value.data(), pb->grad.data(), n, m, k);
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& pa = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa->value[i] > 0.0) pa->grad[i] += self.grad[i];
    }
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& pa = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      pa->grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(a.values()[i]);
  return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& pa = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      pa->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

/// Stacks tensors vertically; all inputs need the same column count.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: width mismatch " + to_string(parts.front().shape()) + " vs " +
                       to_string(p.shape()));
    }
    rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_op({rows, cols}, std::move(out), parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (detail::wants(p)) {
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

inline Tensor concat_rows(std::initializer_list<Tensor> parts) {
  return concat_rows(std::span<const Tensor>(parts.begin(), parts.size()));
}

/// Places tensors side by side; all inputs need the same row count.
inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: height mismatch " + to_string(parts.front().shape()) +
                       " vs " + to_string(p.shape()));
    }
    cols += p.cols();
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(r * p.cols()), p.cols(),
                  out.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
    }
    offset += p.cols();
  }
  return make_op({rows, cols}, std::move(out), parts, [rows, cols](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t pc = p->shape.cols;
      if (detail::wants(p)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < pc; ++c) p->grad[r * pc + c] += self.grad[r * cols + offset + c];
        }
      }
      offset += pc;
    }
  });
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  return concat_cols(std::span<const Tensor>(parts.begin(), parts.size()));
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") out of " + to_string(a.shape()));
  }
  const std::size_t cols = a.cols();
  const auto first = a.values().begin() + static_cast<std::ptrdiff_t>(begin * cols);
  std::vector<double> out(first, first + static_cast<std::ptrdiff_t>(count * cols));
  return make_op({count, cols}, std::move(out), {a}, [begin, cols](detail::Node& self) {
    auto& pa = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[begin * cols + i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") out of " + to_string(a.shape()));
  }
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = a.values()[r * cols + begin + c];
  }
  return make_op({rows, count}, std::move(out), {a}, [rows, cols, begin, count](detail::Node& self) {
    auto& pa = self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < count; ++c) pa->grad[r * cols + begin + c] += self.grad[r * count + c];
    }
  });
}

/// Row gather: out[i] = table[ids[i]]. Serves as the embedding lookup.
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const std::size_t cols = table.cols();
  std::vector<double> out(ids.size() * cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of " +
                       to_string(table.shape()));
    }
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i]) * static_cast<std::ptrdiff_t>(cols),
                cols, out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_op({ids.size(), cols}, std::move(out), {table}, [idx = std::move(idx), cols](detail::Node& self) {
    auto& pt = self.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = pt->grad.data() + static_cast<std::size_t>(idx[i]) * cols;
      const double* src = self.grad.data() + i * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  return gather_rows(table, ids);
}

/// Column-wise mean over rows: (r x c) -> (1 x c).
inline Tensor mean_rows(const Tensor& a) {
  if (a.rows() == 0) throw ShapeError("mean_rows: empty tensor");
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c] += a.values()[r * cols + c];
  }
  for (double& v : out) v /= static_cast<double>(rows);
  return make_op({1, cols}, std::move(out), {a}, [rows, cols](detail::Node& self) {
    auto& pa = self.parents[0];
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) pa->grad[r * cols + c] += self.grad[c] * inv;
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op({1, 1}, {s}, {a}, [](detail::Node& self) {
    auto& pa = self.parents[0];
    for (double& g : pa->grad) g += self.grad[0];
  });
}

/// Constant sparse matrix times tensor: (r x k) * (k x c).
inline Tensor spmm(const SparseMatrix& m, const Tensor& a) {
  if (m.cols != a.rows()) {
    throw ShapeError("spmm: shape mismatch [" + std::to_string(m.rows) + "x" +
                     std::to_string(m.cols) + "] x " + to_string(a.shape()));
  }
  const std::size_t cols = a.cols();
  std::vector<double> out(m.rows * cols, 0.0);
  for (const auto& e : m.entries) {
    const double* src = a.values().data() + e.col * cols;
    double* dst = out.data() + e.row * cols;
    for (std::size_t c = 0; c < cols; ++c) dst[c] += e.value * src[c];
  }
  return make_op({m.rows, cols}, std::move(out), {a}, [m, cols](detail::Node& self) {
    auto& pa = self.parents[0];
    for (const auto& e : m.entries) {
      const double* src = self.grad.data() + e.row * cols;
      double* dst = pa->grad.data() + e.col * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += e.value * src[c];
    }
  });
}

/// Softmax along `axis` (1: within each row, 0: within each column), with
/// max subtraction.
inline Tensor softmax(const Tensor& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  const std::size_t rows = x.rows(), cols = x.cols();
  const std::size_t lanes = axis == 1 ? rows : cols;
  const std::size_t len = axis == 1 ? cols : rows;
  const std::size_t lane_stride = axis == 1 ? cols : 1;
  const std::size_t step = axis == 1 ? 1 : cols;
  std::vector<double> out(x.size());
  for (std::size_t l = 0; l < lanes; ++l) {
    const std::size_t base = l * lane_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) {
      assert(!std::isnan(x.values()[base + i * step]));
      mx = std::max(mx, x.values()[base + i * step]);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(x.values()[base + i * step] - mx);
      out[base + i * step] = e;
      total += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * step] /= total;
  }
  return make_op(x.shape(), std::move(out), {x}, [lanes, len, lane_stride, step](detail::Node& self) {
    auto& px = self.parents[0];
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t base = l * lane_stride;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * step;
        dot += self.grad[k] * self.value[k];
      }
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * step;
        px->grad[k] += self.value[k] * (self.grad[k] - dot);
      }
    }
  });
}

/// Row-wise layer normalisation, y = (x - mean) / sqrt(var + eps) * gain + bias,
/// with gain and bias of shape 1 x cols.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.shape() != Shape{1, cols} || bias.shape() != Shape{1, cols}) {
    throw ShapeError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" +
                     to_string(bias.shape()) + " for input " + to_string(x.shape()));
  }
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mean) * inv_std[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gain.values()[c] + bias.values()[c];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                   auto& px = self.parents[0];
                   auto& pg = self.parents[1];
                   auto& pb = self.parents[2];
                   std::vector<double> dxhat(cols);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* dy = self.grad.data() + r * cols;
                     const double* h = xhat.data() + r * cols;
                     double mean_d = 0.0, mean_dh = 0.0;
                     for (std::size_t c = 0; c < cols; ++c) {
                       if (detail::wants(pg)) pg->grad[c] += dy[c] * h[c];
                       if (detail::wants(pb)) pb->grad[c] += dy[c];
                       dxhat[c] = dy[c] * pg->value[c];
                       mean_d += dxhat[c];
                       mean_dh += dxhat[c] * h[c];
                     }
                     if (!detail::wants(px)) continue;
                     mean_d /= static_cast<double>(cols);
                     mean_dh /= static_cast<double>(cols);
                     for (std::size_t c = 0; c < cols; ++c) {
                       px->grad[r * cols + c] += inv_std[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
                     }
                   }
                 });
}

/// Deterministic dropout stream. Masks are a pure function of
/// (seed, step, site, element), where `site` counts dropout calls within one
/// forward pass.
struct DropoutContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t site = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double counter_uniform(std::uint64_t seed, std::uint64_t step, std::uint64_t site,
                              std::uint64_t index) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ step);
  h = splitmix64(h ^ (site * 0x632be59bd9b4e019ULL));
  h = splitmix64(h ^ index);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace detail

/// Inverted dropout; identity when not training or rate == 0.
inline Tensor dropout(const Tensor& x, double rate, DropoutContext& ctx) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate " + std::to_string(rate) + " outside [0,1)");
  }
  if (!ctx.training || rate == 0.0) return x;
  const std::uint64_t site = ctx.site++;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = detail::counter_uniform(ctx.seed, ctx.step, site, i) >= rate ? keep_scale : 0.0;
    out[i] = x.values()[i] * mask[i];
  }
  return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    auto& px = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * mask[i];
  });
}

/// Sum over rows of -log softmax(logits[r])[targets[r]]. Rows whose target
/// equals `ignore_index` contribute nothing.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index = -1) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     to_string(logits.shape()));
  }
  std::vector<double> probs(logits.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= cols) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0," +
                              std::to_string(cols) + ")");
    }
    const double* z = logits.values().data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, z[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(z[c] - mx);
    const double lse = mx + std::log(total);
    loss += lse - z[t];
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(z[c] - lse);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return make_op({1, 1}, {loss}, {logits},
                 [rows, cols, ignore_index, probs = std::move(probs), tg = std::move(tg)](detail::Node& self) {
                   auto& pl = self.parents[0];
                   const double g = self.grad[0];
                   for (std::size_t r = 0; r < rows; ++r) {
                     if (tg[r] == ignore_index) continue;
                     for (std::size_t c = 0; c < cols; ++c) {
                       const double onehot = static_cast<int>(c) == tg[r] ? 1.0 : 0.0;
                       pl->grad[r * cols + c] += g * (probs[r * cols + c] - onehot);
                     }
                   }
                 });
}

inline Tensor cross_entropy(const Tensor& logits, int target) {
  const int t[1] = {target};
  return cross_entropy(logits, std::span<const int>(t, 1));
}

/// Fused LSTM cell update. `gates` is (r x 4H) laid out as [i | f | g | o]
/// pre-activations; `state` is (r x 2H) laid out as [h | c]. Returns the new
/// [h | c].
inline Tensor lstm_cell(const Tensor& gates, const Tensor& state) {
  const std::size_t rows = gates.rows();
  const std::size_t hidden = gates.cols() / 4;
  if (gates.cols() != 4 * hidden || state.shape() != Shape{rows, 2 * hidden}) {
    throw ShapeError("lstm_cell: gates " + to_string(gates.shape()) + " with state " +
                     to_string(state.shape()));
  }
  // Activated gates, cached for backward.
  std::vector<double> act(gates.size());
  std::vector<double> tanh_c(rows * hidden);
  std::vector<double> out(rows * 2 * hidden);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = gates.values().data() + r * 4 * hidden;
    double* a = act.data() + r * 4 * hidden;
    const double* c_prev = state.values().data() + r * 2 * hidden + hidden;
    for (std::size_t j = 0; j < hidden; ++j) {
      a[j] = detail::sigmoid(z[j]);
      a[hidden + j] = detail::sigmoid(z[hidden + j]);
      a[2 * hidden + j] = std::tanh(z[2 * hidden + j]);
      a[3 * hidden + j] = detail::sigmoid(z[3 * hidden + j]);
      const double c = a[hidden + j] * c_prev[j] + a[j] * a[2 * hidden + j];
      tanh_c[r * hidden + j] = std::tanh(c);
      out[r * 2 * hidden + j] = a[3 * hidden + j] * tanh_c[r * hidden + j];
      out[r * 2 * hidden + hidden + j] = c;
    }
  }
  return make_op({rows, 2 * hidden}, std::move(out), {gates, state},
                 [rows, hidden, act = std::move(act), tanh_c = std::move(tanh_c)](detail::Node& self) {
                   auto& pz = self.parents[0];
                   auto& ps = self.parents[1];
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* a = act.data() + r * 4 * hidden;
                     const double* dout = self.grad.data() + r * 2 * hidden;
                     const double* c_prev = ps->value.data() + r * 2 * hidden + hidden;
                     for (std::size_t j = 0; j < hidden; ++j) {
                       const double tc = tanh_c[r * hidden + j];
                       const double dh = dout[j];
                       const double dc = dout[hidden + j] + dh * a[3 * hidden + j] * (1.0 - tc * tc);
                       const double di = dc * a[2 * hidden + j];
                       const double df = dc * c_prev[j];
                       const double dg = dc * a[j];
                       const double d_o = dh * tc;
                       if (detail::wants(pz)) {
                         double* dz = pz->grad.data() + r * 4 * hidden;
                         dz[j] += di * a[j] * (1.0 - a[j]);
                         dz[hidden + j] += df * a[hidden + j] * (1.0 - a[hidden + j]);
                         dz[2 * hidden + j] += dg * (1.0 - a[2 * hidden + j] * a[2 * hidden + j]);
                         dz[3 * hidden + j] += d_o * a[3 * hidden + j] * (1.0 - a[3 * hidden + j]);
                       }
                       if (detail::wants(ps)) ps->grad[r * 2 * hidden + hidden + j] += dc * a[hidden + j];
                     }
                   }
                 });
}

/// Per-row select: row r comes from `updated` when keep[r] is true and from
/// `previous` otherwise. Used to freeze recurrent state past a sequence end.
inline Tensor select_rows(const Tensor& updated, const Tensor& previous, const std::vector<bool>& keep) {
  detail::require_same(updated, previous, "select_rows");
  if (keep.size() != updated.rows()) throw ShapeError("select_rows: mask length mismatch");
  const std::size_t cols = updated.cols();
  std::vector<double> out(updated.size());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto& src = keep[r] ? updated : previous;
    std::copy_n(src.values().begin() + static_cast<std::ptrdiff_t>(r * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return make_op(updated.shape(), std::move(out), {updated, previous}, [keep, cols](detail::Node& self) {
    for (std::size_t r = 0; r < keep.size(); ++r) {
      auto& p = self.parents[keep[r] ? 0 : 1];
      if (!detail::wants(p)) continue;
      for (std::size_t c = 0; c < cols; ++c) p->grad[r * cols + c] += self.grad[r * cols + c];
    }
  });
}

/// Multi-head scaled dot-product attention over already projected inputs.
/// q is (Tq x d), k and v are (Tk x d); head h uses columns
/// [h*d/heads, (h+1)*d/heads). With `causal`, query i only sees keys j <= i.
/// Returns the concatenated head outputs (Tq x d). When `weights` is non-null
/// it receives the head-averaged attention matrix (Tq x Tk).
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal,
                        std::vector<double>* weights = nullptr) {
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (k.cols() != d || v.shape() != k.shape()) {
    throw ShapeError("attention: q " + to_string(q.shape()) + " k " + to_string(k.shape()) + " v " +
                     to_string(v.shape()));
  }
  if (causal && tk < tq) throw ShapeError("attention: causal mask needs at least as many keys as queries");
  const std::size_t dn = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dn));
  std::vector<double> probs(heads * tq * tk, 0.0);
  std::vector<double> out(tq * d, 0.0);
  const double* Q = q.values().data();
  const double* K = k.values().data();
  const double* V = v.values().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dn;
    for (std::size_t i = 0; i < tq; ++i) {
      double* p = probs.data() + (h * tq + i) * tk;
      const std::size_t visible = causal ? i + 1 : tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < visible; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dn; ++c) s += Q[i * d + off + c] * K[j * d + off + c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      for (std::size_t j = 0; j < visible; ++j) {
        p[j] /= total;
        for (std::size_t c = 0; c < dn; ++c) out[i * d + off + c] += p[j] * V[j * d + off + c];
      }
    }
  }
  if (weights != nullptr) {
    weights->assign(tq * tk, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t x = 0; x < tq * tk; ++x) (*weights)[x] += probs[h * tq * tk + x] / static_cast<double>(heads);
    }
  }
  return make_op({tq, d}, std::move(out), {q, k, v},
                 [tq, tk, d, dn, heads, causal, inv_sqrt, probs = std::move(probs)](detail::Node& self) {
                   auto& pq = self.parents[0];
                   auto& pk = self.parents[1];
                   auto& pv = self.parents[2];
                   const double* Q = pq->value.data();
                   const double* K = pk->value.data();
                   const double* V = pv->value.data();
                   const double* dO = self.grad.data();
                   std::vector<double> ds(tk);
                   for (std::size_t h = 0; h < heads; ++h) {
                     const std::size_t off = h * dn;
                     for (std::size_t i = 0; i < tq; ++i) {
                       const double* p = probs.data() + (h * tq + i) * tk;
                       const std::size_t visible = causal ? i + 1 : tk;
                       double dot = 0.0;
                       for (std::size_t j = 0; j < visible; ++j) {
                         double dp = 0.0;
                         for (std::size_t c = 0; c < dn; ++c) dp += dO[i * d + off + c] * V[j * d + off + c];
                         ds[j] = dp;
                         dot += dp * p[j];
                         if (detail::wants(pv)) {
                           for (std::size_t c = 0; c < dn; ++c) pv->grad[j * d + off + c] += p[j] * dO[i * d + off + c];
                         }
                       }
                       for (std::size_t j = 0; j < visible; ++j) {
                         const double g = p[j] * (ds[j] - dot) * inv_sqrt;
                         if (g == 0.0) continue;
                         if (detail::wants(pq)) {
                           for (std::size_t c = 0; c < dn; ++c) pq->grad[i * d + off + c] += g * K[j * d + off + c];
                         }
                         if (detail::wants(pk)) {
                           for (std::size_t c = 0; c < dn; ++c) pk->grad[j * d + off + c] += g * Q[i * d + off + c];
                         }
                       }
                     }
                   }
                 });
}

}  // namespace gig

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sflow/tensor.hpp"

namespace sflow {

// KL divergence clamps the second argument at this floor so attention
// rows that underflow at 32-bit never produce log(0).
inline constexpr double kKlEps = 1e-12;

namespace detail {

template <typename T>
bool want_grad(const Tensor<T>& t) {
  return GradMode::enabled() && t.requires_grad();
}

template <typename T, typename... Rest>
bool want_grad(const Tensor<T>& t, const Rest&... rest) {
  return GradMode::enabled() && (t.requires_grad() || want_grad(rest...));
}

// c[m x n] += a[m x k] * b[k x n]; fixed accumulation order.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
              std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose_copy(const T* a, std::int64_t rows, std::int64_t cols) {
  std::vector<T> out(static_cast<std::size_t>(rows * cols));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

template <typename T>
void check_rank2(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected matrix, got " +
                                shape_str(a.shape()));
}

template <typename T>
Tensor<T> make_result(Shape shape, bool track,
                      std::vector<std::shared_ptr<TensorNode<T>>> parents) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  if (track) {
    out.set_requires_grad(true);
    out.node()->parents = std::move(parents);
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  const bool track = detail::want_grad(a, b);
  Tensor<T> out = detail::make_result<T>(a.shape(), track, {a.node(), b.node()});
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] + b.values()[i];
  if (track)
    out.node()->backward_fn = [](TensorNode<T>& o) {
      for (int pi = 0; pi < 2; ++pi) {
        auto& p = *o.parents[pi];
        if (!p.requires_grad) continue;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
      }
    };
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  const bool track = detail::want_grad(a, b);
  Tensor<T> out = detail::make_result<T>(a.shape(), track, {a.node(), b.node()});
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] - b.values()[i];
  if (track)
    out.node()->backward_fn = [](TensorNode<T>& o) {
      auto& pa = *o.parents[0];
      auto& pb = *o.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
      }
    };
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  const bool track = detail::want_grad(a, b);
  Tensor<T> out = detail::make_result<T>(a.shape(), track, {a.node(), b.node()});
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] * b.values()[i];
  if (track)
    out.node()->backward_fn = [](TensorNode<T>& o) {
      auto& pa = *o.parents[0];
      auto& pb = *o.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          pa.grad[i] += o.grad[i] * pb.data[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          pb.grad[i] += o.grad[i] * pa.data[i];
      }
    };
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  const bool track = detail::want_grad(a);
  Tensor<T> out = detail::make_result<T>(a.shape(), track, {a.node()});
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * s;
  if (track)
    out.node()->backward_fn = [s](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * s;
    };
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  const bool track = detail::want_grad(a);
  Tensor<T> out = detail::make_result<T>(a.shape(), track, {a.node()});
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + s;
  if (track)
    out.node()->backward_fn = [](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    };
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

/// Broadcast-add a length-n vector to every row of an [m x n] matrix.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& v) {
  detail::check_rank2(a, "add_row");
  const std::int64_t m = a.rows(), n = a.cols();
  if (v.numel() != n)
    throw std::invalid_argument("add_row: vector " + shape_str(v.shape()) +
                                " does not match " + shape_str(a.shape()));
  const bool track = detail::want_grad(a, v);
  Tensor<T> out = detail::make_result<T>(a.shape(), track, {a.node(), v.node()});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      out.values()[i * n + j] = a.values()[i * n + j] + v.values()[j];
  if (track)
    out.node()->backward_fn = [m, n](TensorNode<T>& o) {
      auto& pa = *o.parents[0];
      auto& pv = *o.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
      }
      if (pv.requires_grad) {
        pv.ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) pv.grad[j] += o.grad[i * n + j];
      }
    };
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_rank2(a, "matmul");
  detail::check_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
  const bool track = detail::want_grad(a, b);
  Tensor<T> out = detail::make_result<T>({m, n}, track, {a.node(), b.node()});
  detail::gemm_acc(a.ptr(), b.ptr(), out.ptr(), m, k, n);
  if (track)
    out.node()->backward_fn = [m, k, n](TensorNode<T>& o) {
      auto& pa = *o.parents[0];
      auto& pb = *o.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        // dA += dC * B^T
        std::vector<T> bt = detail::transpose_copy(pb.data.data(), k, n);
        detail::gemm_acc(o.grad.data(), bt.data(), pa.grad.data(), m, n, k);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        // dB += A^T * dC
        std::vector<T> at = detail::transpose_copy(pa.data.data(), m, k);
        detail::gemm_acc(at.data(), o.grad.data(), pb.grad.data(), k, m, n);
      }
    };
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::check_rank2(a, "transpose");
  const std::int64_t m = a.rows(), n = a.cols();
  const bool track = detail::want_grad(a);
  Tensor<T> out = detail::make_result<T>({n, m}, track, {a.node()});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      out.values()[j * m + i] = a.values()[i * n + j];
  if (track)
    out.node()->backward_fn = [m, n](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          p.grad[i * n + j] += o.grad[j * m + i];
    };
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " +
                                shape_str(shape) + " changes element count");
  const bool track = detail::want_grad(a);
  Tensor<T> out = detail::make_result<T>(std::move(shape), track, {a.node()});
  out.values() = a.values();
  if (track)
    out.node()->backward_fn = [](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    };
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t r0, std::int64_t r1) {
  detail::check_rank2(a, "slice_rows");
  if (r0 < 0 || r1 > a.rows() || r0 >= r1)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) +
                                "," + std::to_string(r1) + ") invalid for " +
                                shape_str(a.shape()));
  const std::int64_t n = a.cols();
  const bool track = detail::want_grad(a);
  Tensor<T> out = detail::make_result<T>({r1 - r0, n}, track, {a.node()});
  std::copy(a.values().begin() + r0 * n, a.values().begin() + r1 * n,
            out.values().begin());
  if (track)
    out.node()->backward_fn = [r0, n](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        p.grad[static_cast<std::size_t>(r0 * n) + i] += o.grad[i];
    };
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::int64_t c0, std::int64_t c1) {
  detail::check_rank2(a, "slice_cols");
  if (c0 < 0 || c1 > a.cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) +
                                "," + std::to_string(c1) + ") invalid for " +
                                shape_str(a.shape()));
  const std::int64_t m = a.rows(), n = a.cols(), w = c1 - c0;
  const bool track = detail::want_grad(a);
  Tensor<T> out = detail::make_result<T>({m, w}, track, {a.node()});
  for (std::int64_t i = 0; i < m; ++i)
    std::copy(a.values().begin() + i * n + c0, a.values().begin() + i * n + c1,
              out.values().begin() + i * w);
  if (track)
    out.node()->backward_fn = [n, c0, w](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      const std::int64_t m2 = o.shape[0];
      for (std::int64_t i = 0; i < m2; ++i)
        for (std::int64_t j = 0; j < w; ++j)
          p.grad[i * n + c0 + j] += o.grad[i * w + j];
    };
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const std::int64_t n = parts[0].cols();
  std::int64_t m = 0;
  bool track = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  for (const auto& p : parts) {
    detail::check_rank2(p, "concat_rows");
    if (p.cols() != n)
      throw std::invalid_argument("concat_rows: column mismatch");
    m += p.rows();
    track = track || p.requires_grad();
    parents.push_back(p.node());
  }
  track = track && GradMode::enabled();
  Tensor<T> out = detail::make_result<T>({m, n}, track, std::move(parents));
  std::int64_t row = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(),
              out.values().begin() + row * n);
    row += p.rows();
  }
  if (track)
    out.node()->backward_fn = [n](TensorNode<T>& o) {
      std::int64_t row = 0;
      for (auto& pp : o.parents) {
        const std::int64_t pr = pp->shape[0];
        if (pp->requires_grad) {
          pp->ensure_grad();
          for (std::size_t i = 0; i < pp->grad.size(); ++i)
            pp->grad[i] += o.grad[static_cast<std::size_t>(row * n) + i];
        }
        row += pr;
      }
    };
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const std::int64_t m = parts[0].rows();
  std::int64_t n = 0;
  bool track = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  for (const auto& p : parts) {
    detail::check_rank2(p, "concat_cols");
    if (p.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    n += p.cols();
    track = track || p.requires_grad();
    parents.push_back(p.node());
  }
  track = track && GradMode::enabled();
  Tensor<T> out = detail::make_result<T>({m, n}, track, std::move(parents));
  std::int64_t col = 0;
  for (const auto& p : parts) {
    const std::int64_t w = p.cols();
    for (std::int64_t i = 0; i < m; ++i)
      std::copy(p.values().begin() + i * w, p.values().begin() + (i + 1) * w,
                out.values().begin() + i * n + col);
    col += w;
  }
  if (track)
    out.node()->backward_fn = [m, n](TensorNode<T>& o) {
      std::int64_t col = 0;
      for (auto& pp : o.parents) {
        const std::int64_t w = pp->shape[1];
        if (pp->requires_grad) {
          pp->ensure_grad();
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < w; ++j)
              pp->grad[i * w + j] += o.grad[i * n + col + j];
        }
        col += w;
      }
    };
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  const bool track = detail::want_grad(a);
  Tensor<T> out = detail::make_result<T>({}, track, {a.node()});
  T acc = T(0);
  for (T v : a.values()) acc += v;
  out.values()[0] = acc;
  if (track)
    out.node()->backward_fn = [](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (auto& g : p.grad) g += o.grad[0];
    };
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  const bool track = detail::want_grad(a);
  Tensor<T> out = detail::make_result<T>({}, track, {a.node()});
  T acc = T(0);
  for (T v : a.values()) acc += v;
  out.values()[0] = acc * inv;
  if (track)
    out.node()->backward_fn = [inv](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (auto& g : p.grad) g += o.grad[0] * inv;
    };
  return out;
}

/// RMS normalization over the last axis of a matrix, with a learned
/// per-column gain: y = x / sqrt(mean(x^2) + eps) * g.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain,
                   T eps = T(1e-6)) {
  detail::check_rank2(x, "rms_norm");
  const std::int64_t m = x.rows(), n = x.cols();
  if (gain.numel() != n)
    throw std::invalid_argument("rms_norm: gain " + shape_str(gain.shape()) +
                                " does not match " + shape_str(x.shape()));
  const bool track = detail::want_grad(x, gain);
  Tensor<T> out = detail::make_result<T>(x.shape(), track, {x.node(), gain.node()});
  std::vector<T> inv_r(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    T ss = T(0);
    for (std::int64_t j = 0; j < n; ++j) {
      T v = x.values()[i * n + j];
      ss += v * v;
    }
    inv_r[i] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::int64_t j = 0; j < n; ++j)
      out.values()[i * n + j] =
          x.values()[i * n + j] * inv_r[i] * gain.values()[j];
  }
  if (track)
    out.node()->backward_fn = [m, n, inv_r](TensorNode<T>& o) {
      auto& px = *o.parents[0];
      auto& pg = *o.parents[1];
      if (pg.requires_grad) {
        pg.ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j)
            pg.grad[j] += o.grad[i * n + j] * px.data[i * n + j] * inv_r[i];
      }
      if (px.requires_grad) {
        px.ensure_grad();
        for (std::int64_t i = 0; i < m; ++i) {
          T s = T(0);
          for (std::int64_t j = 0; j < n; ++j)
            s += o.grad[i * n + j] * pg.data[j] * px.data[i * n + j];
          const T r3 = inv_r[i] * inv_r[i] * inv_r[i];
          for (std::int64_t j = 0; j < n; ++j)
            px.grad[i * n + j] +=
                o.grad[i * n + j] * pg.data[j] * inv_r[i] -
                px.data[i * n + j] * s * r3 / static_cast<T>(n);
        }
      }
    };
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const bool track = detail::want_grad(x);
  Tensor<T> out = detail::make_result<T>(x.shape(), track, {x.node()});
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < x.values().size(); ++i) {
    T v = x.values()[i];
    out.values()[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  if (track)
    out.node()->backward_fn = [inv_sqrt2](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      const T inv_sqrt_2pi = T(0.39894228040143267794);
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        T v = p.data[i];
        T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        p.grad[i] += o.grad[i] * (cdf + v * pdf);
      }
    };
  return out;
}

/// Softmax along the last axis; rows are stabilized by max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1)
    throw std::invalid_argument("softmax: scalar input");
  const std::int64_t n = x.shape().back();
  const std::int64_t outer = x.numel() / n;
  for (T v : x.values())
    if (std::isnan(v))
      throw std::domain_error("softmax: NaN in input");
  const bool track = detail::want_grad(x);
  Tensor<T> out = detail::make_result<T>(x.shape(), track, {x.node()});
  for (std::int64_t i = 0; i < outer; ++i) {
    const T* row = x.ptr() + i * n;
    T* orow = out.ptr() + i * n;
    T mx = row[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::int64_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const T inv = T(1) / denom;
    for (std::int64_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  if (track)
    out.node()->backward_fn = [n, outer](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (std::int64_t i = 0; i < outer; ++i) {
        const T* y = o.data.data() + i * n;
        const T* dy = o.grad.data() + i * n;
        T dot = T(0);
        for (std::int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (std::int64_t j = 0; j < n; ++j)
          p.grad[i * n + j] += y[j] * (dy[j] - dot);
      }
    };
  return out;
}

/// Per-slice KL divergence sum_j p_j log(p_j / q_j) along the last axis,
/// with 0 * log(0/q) = 0 and q clamped below at kKlEps. The result drops
/// the last axis (scalar for rank-1 inputs).
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& p, const Tensor<T>& q) {
  detail::check_same_shape(p, q, "kl_divergence");
  if (p.rank() < 1)
    throw std::invalid_argument("kl_divergence: scalar input");
  for (T v : p.values())
    if (v < T(0)) throw std::domain_error("kl_divergence: negative entry in p");
  for (T v : q.values())
    if (v < T(0)) throw std::domain_error("kl_divergence: negative entry in q");
  const std::int64_t n = p.shape().back();
  const std::int64_t outer = p.numel() / n;
  Shape out_shape(p.shape().begin(), p.shape().end() - 1);
  const bool track = detail::want_grad(p, q);
  const T eps = static_cast<T>(kKlEps);
  Tensor<T> out =
      detail::make_result<T>(std::move(out_shape), track, {p.node(), q.node()});
  for (std::int64_t i = 0; i < outer; ++i) {
    T acc = T(0);
    for (std::int64_t j = 0; j < n; ++j) {
      const T pv = p.values()[i * n + j];
      if (pv > T(0)) {
        const T qv = std::max(q.values()[i * n + j], eps);
        acc += pv * std::log(pv / qv);
      }
    }
    out.values()[static_cast<std::size_t>(i)] = acc;
  }
  if (track)
    out.node()->backward_fn = [n, outer, eps](TensorNode<T>& o) {
      auto& pp = *o.parents[0];
      auto& pq = *o.parents[1];
      if (pp.requires_grad) pp.ensure_grad();
      if (pq.requires_grad) pq.ensure_grad();
      for (std::int64_t i = 0; i < outer; ++i) {
        const T g = o.grad[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < n; ++j) {
          const T pv = pp.data[i * n + j];
          if (pv <= T(0)) continue;
          const T qraw = pq.data[i * n + j];
          const T qv = std::max(qraw, eps);
          if (pp.requires_grad)
            pp.grad[i * n + j] += g * (std::log(pv / qv) + T(1));
          if (pq.requires_grad && qraw >= eps)
            pq.grad[i * n + j] -= g * pv / qv;
        }
      }
    };
  return out;
}

/// Gather rows of an embedding table; backward scatter-adds into it.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& ids) {
  detail::check_rank2(table, "embedding");
  const std::int64_t v = table.rows(), d = table.cols();
  for (auto id : ids)
    if (id < 0 || id >= v)
      throw std::out_of_range("embedding: id " + std::to_string(id) +
                              " outside table of " + std::to_string(v));
  const std::int64_t m = static_cast<std::int64_t>(ids.size());
  const bool track = detail::want_grad(table);
  Tensor<T> out = detail::make_result<T>({m, d}, track, {table.node()});
  for (std::int64_t i = 0; i < m; ++i)
    std::copy(table.values().begin() + ids[i] * d,
              table.values().begin() + (ids[i] + 1) * d,
              out.values().begin() + i * d);
  if (track)
    out.node()->backward_fn = [ids, d](TensorNode<T>& o) {
      auto& p = *o.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::int64_t j = 0; j < d; ++j)
          p.grad[ids[i] * d + j] += o.grad[i * d + j];
    };
  return out;
}

/// Mean of elementwise squared difference; the workhorse of both the
/// task and distillation objectives.
template <typename T>
Tensor<T> mean_squared_error(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> d = sub(a, b);
  return mean_all(mul(d, d));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_row(matmul(x, w), b);
}

}  // namespace sflow

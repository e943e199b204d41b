// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable primitives. Tensors of rank > 2 are viewed as
// rows x cols, with cols the last dimension.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "defmod/error.hpp"
#include "defmod/random.hpp"
#include "defmod/tensor.hpp"

namespace defmod {

/// Additive logit offset for masked entries; softmax outputs at masked
/// positions are then forced to exactly zero.
inline constexpr double kMaskedLogit = -1e9;
inline constexpr double kLayerNormEps = 1e-6;

/// Kernel parallelism cap from DEFMOD_THREADS (default 1).
inline std::size_t kernel_threads() {
  static const std::size_t n = [] {
    const char* env = std::getenv("DEFMOD_THREADS");
    if (!env) return std::size_t{1};
    const long v = std::strtol(env, nullptr, 10);
    return v > 0 ? static_cast<std::size_t>(v) : std::size_t{1};
  }();
  return n;
}

namespace detail {

// Runs fn(begin, end) over [0, n) split into contiguous chunks. Each index
// is owned by exactly one chunk, so results do not depend on thread count.
template <typename Fn>
void parallel_rows(std::size_t n, std::size_t work_per_row, Fn&& fn) {
  const std::size_t threads = std::min(kernel_threads(), n);
  if (threads <= 1 || n * work_per_row < (1u << 16)) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = t * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& th : pool) th.join();
}

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_rows(m, k * n, [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      T* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = a[i * k + p];
        if (aip == T(0)) continue;
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  });
}

// c[m x k] += g[m x n] * b[k x n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  parallel_rows(m, k * n, [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const T* gi = g + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T* bp = b + p * n;
        T acc = T(0);
        for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
        c[i * k + p] += acc;
      }
    }
  });
}

// c[k x n] += a[m x k]^T * g[m x n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_rows(k, m * n, [=](std::size_t p0, std::size_t p1) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* gi = g + i * n;
      for (std::size_t p = p0; p < p1; ++p) {
        const T aip = a[i * k + p];
        if (aip == T(0)) continue;
        T* cp = c + p * n;
        for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
      }
    }
  });
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    raise<DimensionError>(op, ": shape mismatch ", shape_string(a.shape()), " vs ",
                          shape_string(b.shape()));
  }
}

}  // namespace detail

/// Matrix product of a[m x k] and b[k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    raise<DimensionError>("matmul: incompatible shapes ", shape_string(a.shape()),
                          " and ", shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    Node<T>& na = *self.parents[0];
    Node<T>& nb = *self.parents[1];
    if (T* ga = grad_target(na)) detail::gemm_nt(g, nb.value.data(), ga, m, n, k);
    if (T* gb = grad_target(nb)) detail::gemm_tn(na.value.data(), g, gb, m, k, n);
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (T* g = grad_target(*p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    Node<T>& nb = *self.parents[1];
    if (T* g = grad_target(na)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    }
    if (T* g = grad_target(nb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * na.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    if (T* g = grad_target(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

/// Adds a row vector (any tensor with `a.cols()` elements) to every row of a.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  const std::size_t n = a.cols(), m = a.rows();
  if (row.size() != n) {
    raise<DimensionError>("add_row: row ", shape_string(row.shape()),
                          " does not match columns of ", shape_string(a.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + row.data()[j];
  }
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, row}, [m, n](Node<T>& self) {
    if (T* g = grad_target(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = grad_target(*self.parents[1])) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
      }
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], T(0));
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    if (T* g = grad_target(na)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (na.value[i] > T(0)) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return Tensor<T>::make_result({1}, {total}, {a}, [](Node<T>& self) {
    Node<T>& na = *self.parents[0];
    if (T* g = grad_target(na)) {
      for (std::size_t i = 0; i < na.value.size(); ++i) g[i] += self.grad[0];
    }
  });
}

/// Gathers rows of `table` (viewed as rows x cols) into an ids.size() x cols
/// tensor. Frozen tables receive no gradient.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
  const std::size_t n = table.cols(), rows = table.rows();
  if (ids.empty()) raise<DimensionError>("gather_rows: empty id list");
  std::vector<T> out(ids.size() * n);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) {
      raise<IndexError>("gather_rows: id ", ids[r], " out of range for ", rows, " rows");
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return Tensor<T>::make_result({ids.size(), n}, std::move(out), {table},
                                [idx = std::move(idx), n](Node<T>& self) {
                                  if (T* g = grad_target(*self.parents[0])) {
                                    for (std::size_t r = 0; r < idx.size(); ++r) {
                                      for (std::size_t j = 0; j < n; ++j)
                                        g[idx[r] * n + j] += self.grad[r * n + j];
                                    }
                                  }
                                });
}

/// Copy of `base` where row positions[j] is replaced by source row
/// source_rows[j].
template <typename T>
Tensor<T> override_rows(const Tensor<T>& base, std::span<const std::size_t> positions,
                        const Tensor<T>& source, std::span<const std::size_t> source_rows) {
  const std::size_t n = base.cols();
  if (source.cols() != n || positions.size() != source_rows.size()) {
    raise<DimensionError>("override_rows: incompatible operands ", shape_string(base.shape()),
                          " and ", shape_string(source.shape()));
  }
  std::vector<T> out(base.data().begin(), base.data().end());
  std::vector<std::uint8_t> replaced(base.rows(), 0);
  for (std::size_t j = 0; j < positions.size(); ++j) {
    if (positions[j] >= base.rows() || source_rows[j] >= source.rows()) {
      raise<IndexError>("override_rows: row index out of range");
    }
    std::copy_n(source.data().begin() + static_cast<std::ptrdiff_t>(source_rows[j] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(positions[j] * n));
    replaced[positions[j]] = 1;
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  std::vector<std::size_t> src(source_rows.begin(), source_rows.end());
  return Tensor<T>::make_result(
      base.shape(), std::move(out), {base, source},
      [pos = std::move(pos), src = std::move(src), replaced = std::move(replaced), n](Node<T>& self) {
        if (T* g = grad_target(*self.parents[0])) {
          for (std::size_t r = 0; r < replaced.size(); ++r) {
            if (replaced[r]) continue;
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r * n + j];
          }
        }
        if (T* g = grad_target(*self.parents[1])) {
          for (std::size_t q = 0; q < pos.size(); ++q) {
            for (std::size_t j = 0; j < n; ++j) g[src[q] * n + j] += self.grad[pos[q] * n + j];
          }
        }
      });
}

/// Stacks the rows of each input (all with equal cols).
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) raise<DimensionError>("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      raise<DimensionError>("concat_rows: column mismatch ", shape_string(p.shape()), " vs ", n);
    }
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor<T>::make_result({rows, n}, std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (T* g = grad_target(*p)) {
        for (std::size_t i = 0; i < p->value.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p->value.size();
    }
  });
}

/// Row-wise softmax over the last dimension. `mask`, when given, holds one
/// byte per element; zero entries are excluded and come out exactly 0.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::optional<std::span<const std::uint8_t>> mask = std::nullopt) {
  const std::size_t n = x.cols(), m = x.rows();
  if (mask && mask->size() != x.size()) {
    raise<DimensionError>("softmax: mask of ", mask->size(), " entries for tensor ",
                          shape_string(x.shape()));
  }
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const T* xi = x.data().data() + i * n;
    T* yi = out.data() + i * n;
    bool any = false;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const bool on = !mask || (*mask)[i * n + j];
      yi[j] = on ? xi[j] : xi[j] + static_cast<T>(kMaskedLogit);
      any = any || on;
      mx = std::max(mx, yi[j]);
    }
    if (!any) raise<DegenerateMaskError>("softmax: row ", i, " is fully masked");
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      yi[j] = std::exp(yi[j] - mx);
      total += yi[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      const bool on = !mask || (*mask)[i * n + j];
      yi[j] = on ? yi[j] / total : T(0);
    }
  }
  return Tensor<T>::make_result(x.shape(), out, {x}, [out, m, n](Node<T>& self) {
    if (T* g = grad_target(*self.parents[0])) {
      for (std::size_t i = 0; i < m; ++i) {
        const T* y = out.data() + i * n;
        const T* gy = self.grad.data() + i * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
      }
    }
  });
}

/// Per-row normalization to zero mean and unit variance, then gain * x + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = static_cast<T>(kLayerNormEps)) {
  const std::size_t d = x.cols(), m = x.rows();
  if (d < 2) raise<DimensionError>("layer_norm: need at least 2 features, got ", d);
  if (gain.size() != d || bias.size() != d) {
    raise<DimensionError>("layer_norm: gain/bias ", shape_string(gain.shape()), "/",
                          shape_string(bias.shape()), " vs features ", d);
  }
  std::vector<T> xhat(x.size()), inv_std(m), out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const T* xi = x.data().data() + i * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<T>(d);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xi[j] - mean) * inv_std[i];
      out[i * d + j] = gain.data()[j] * xhat[i * d + j] + bias.data()[j];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), m, d](Node<T>& self) {
        const T* gy = self.grad.data();
        Node<T>& nx = *self.parents[0];
        Node<T>& ng = *self.parents[1];
        if (T* gg = grad_target(ng)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += gy[i * d + j] * xhat[i * d + j];
        }
        if (T* gb = grad_target(*self.parents[2])) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += gy[i * d + j];
        }
        if (T* gx = grad_target(nx)) {
          const auto dd = static_cast<T>(d);
          for (std::size_t i = 0; i < m; ++i) {
            T sum_g = T(0), sum_gx = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = gy[i * d + j] * ng.value[j];
              sum_g += gh;
              sum_gx += gh * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = gy[i * d + j] * ng.value[j];
              gx[i * d + j] += inv_std[i] / dd * (dd * gh - sum_g - xhat[i * d + j] * sum_gx);
            }
          }
        }
      });
}

/// Inverted dropout. Identity (same tensor) when not training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) raise<ConfigError>("dropout: rate must lie in [0, 1), got ", p);
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> factor(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    factor[i] = rng.uniform() < p ? T(0) : keep_scale;
    out[i] = x.data()[i] * factor[i];
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [factor = std::move(factor)](Node<T>& self) {
                                  if (T* g = grad_target(*self.parents[0])) {
                                    for (std::size_t i = 0; i < factor.size(); ++i)
                                      g[i] += self.grad[i] * factor[i];
                                  }
                                });
}

template <typename T>
struct CrossEntropyResult {
  Tensor<T> loss;          // smoothed loss summed over tokens, divided by the normalizer
  double smoothed_sum = 0;  // smoothed loss summed over counted tokens
  double nll_sum = 0;       // unsmoothed negative log-likelihood sum
  std::size_t token_count = 0;
};

/// Label-smoothed cross entropy over logits[T x V]. The target puts 1 - eps
/// on the gold class and eps / (V - 2) on every class other than gold and
/// pad. Positions whose gold id is pad_id are skipped. The returned loss is
/// the smoothed sum divided by `normalizer` (token count when 0).
template <typename T>
CrossEntropyResult<T> cross_entropy_smoothed(const Tensor<T>& logits,
                                             std::span<const std::size_t> gold, double epsilon,
                                             std::size_t pad_id, double normalizer = 0.0) {
  const std::size_t v = logits.cols(), rows = logits.rows();
  if (v < 3) raise<ConfigError>("cross_entropy_smoothed: vocabulary of ", v, " classes, need >= 3");
  if (gold.size() != rows) {
    raise<DimensionError>("cross_entropy_smoothed: ", gold.size(), " targets for ", rows, " rows");
  }
  if (epsilon < 0.0 || epsilon >= 1.0) {
    raise<ConfigError>("cross_entropy_smoothed: epsilon must lie in [0, 1)");
  }
  const double off = epsilon / static_cast<double>(v - 2);
  CrossEntropyResult<T> res;
  std::vector<T> probs(logits.size(), T(0));
  std::vector<std::uint8_t> counted(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    if (gold[i] == pad_id) continue;
    if (gold[i] >= v) raise<IndexError>("cross_entropy_smoothed: gold id ", gold[i], " >= ", v);
    counted[i] = 1;
    const T* z = logits.data().data() + i * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(static_cast<double>(z[j]) - mx);
    const double log_total = std::log(total) + mx;
    double row_loss = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double logp = static_cast<double>(z[j]) - log_total;
      probs[i * v + j] = static_cast<T>(std::exp(logp));
      double target = j == gold[i] ? 1.0 - epsilon : (j == pad_id ? 0.0 : off);
      if (target > 0.0) row_loss -= target * logp;
    }
    res.nll_sum -= static_cast<double>(z[gold[i]]) - log_total;
    res.smoothed_sum += row_loss;
    ++res.token_count;
  }
  const double norm = normalizer > 0.0 ? normalizer
                                       : static_cast<double>(std::max<std::size_t>(res.token_count, 1));
  const std::vector<std::size_t> gold_ids(gold.begin(), gold.end());
  res.loss = Tensor<T>::make_result(
      {1}, {static_cast<T>(res.smoothed_sum / norm)}, {logits},
      [probs = std::move(probs), counted = std::move(counted), gold_ids, v, off, epsilon, pad_id,
       norm](Node<T>& self) {
        T* g = grad_target(*self.parents[0]);
        if (!g) return;
        const double up = static_cast<double>(self.grad[0]) / norm;
        for (std::size_t i = 0; i < counted.size(); ++i) {
          if (!counted[i]) continue;
          for (std::size_t j = 0; j < v; ++j) {
            const double target = j == gold_ids[i] ? 1.0 - epsilon : (j == pad_id ? 0.0 : off);
            g[i * v + j] += static_cast<T>(up * (static_cast<double>(probs[i * v + j]) - target));
          }
        }
      });
  return res;
}

}  // namespace defmod

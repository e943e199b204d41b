// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "defmod/error.hpp"
#include "defmod/ops.hpp"
#include "defmod/random.hpp"
#include "defmod/tensor.hpp"

namespace defmod {

/// Which keys each query may attend to, per batch element:
/// allowed[(b * query_len + i) * key_len + j].
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::vector<std::uint8_t> allowed;

  AttentionMask() = default;
  AttentionMask(std::size_t b, std::size_t q, std::size_t k, std::uint8_t fill = 1)
      : batch(b), query_len(q), key_len(k), allowed(b * q * k, fill) {}

  std::uint8_t& at(std::size_t b, std::size_t i, std::size_t j) {
    return allowed[(b * query_len + i) * key_len + j];
  }
  std::uint8_t at(std::size_t b, std::size_t i, std::size_t j) const {
    return allowed[(b * query_len + i) * key_len + j];
  }

  /// Keys at positions >= key_lengths[b] are hidden.
  static AttentionMask padding(const std::vector<std::size_t>& key_lengths, std::size_t query_len,
                               std::size_t key_len) {
    AttentionMask m(key_lengths.size(), query_len, key_len, 0);
    for (std::size_t b = 0; b < m.batch; ++b)
      for (std::size_t i = 0; i < query_len; ++i)
        for (std::size_t j = 0; j < std::min(key_lengths[b], key_len); ++j) m.at(b, i, j) = 1;
    return m;
  }

  /// Padding plus causal restriction j <= i.
  static AttentionMask causal(const std::vector<std::size_t>& lengths, std::size_t len) {
    AttentionMask m = padding(lengths, len, len);
    for (std::size_t b = 0; b < m.batch; ++b)
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = i + 1; j < len; ++j) m.at(b, i, j) = 0;
    return m;
  }
};

/// Receives attention weights (before dropout), laid out as
/// [batch][head][query][key].
struct AttentionProbe {
  std::vector<std::vector<double>> weights;
  std::vector<std::size_t> batch, heads, query_len, key_len;

  void record(std::vector<double> w, std::size_t b, std::size_t h, std::size_t q, std::size_t k) {
    weights.push_back(std::move(w));
    batch.push_back(b);
    heads.push_back(h);
    query_len.push_back(q);
    key_len.push_back(k);
  }
};

/// Multi-head scaled dot-product attention over already projected inputs.
/// q is (batch * query_len) x d, k and v are (batch * key_len) x d. The d
/// columns split into `heads` contiguous slices; each head uses scale
/// 1 / sqrt(d / heads). Output heads are concatenated back into d columns.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionMask& mask, std::size_t heads, double dropout_p,
                               bool training, Rng* rng, AttentionProbe* probe = nullptr) {
  const std::size_t d = q.cols();
  const std::size_t B = mask.batch, Lq = mask.query_len, Lk = mask.key_len;
  if (heads == 0 || d % heads != 0) {
    raise<ConfigError>("attention: model width ", d, " not divisible by ", heads, " heads");
  }
  if (k.cols() != d || v.cols() != d || q.rows() != B * Lq || k.rows() != B * Lk ||
      v.rows() != B * Lk || mask.allowed.size() != B * Lq * Lk) {
    raise<DimensionError>("attention: q ", shape_string(q.shape()), ", k ", shape_string(k.shape()),
                          ", v ", shape_string(v.shape()), " inconsistent with mask ", B, "x", Lq,
                          "x", Lk);
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
    raise<ConfigError>("attention: dropout rate must lie in [0, 1), got ", dropout_p);
  }
  const bool drop = training && dropout_p > 0.0;
  if (drop && !rng) raise<ConfigError>("attention: dropout in training needs an rng");

  const std::size_t dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const T keep_scale = drop ? static_cast<T>(1.0 / (1.0 - dropout_p)) : T(1);
  // weights[((b * heads + h) * Lq + i) * Lk + j]
  std::vector<T> weights(B * heads * Lq * Lk, T(0));
  std::vector<T> dropped;  // effective weights after dropout, if any
  if (drop) dropped.assign(weights.size(), T(0));
  std::vector<T> out(B * Lq * d, T(0));
  std::vector<T> scores(Lk);

  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        const T* qi = Q + (b * Lq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < Lk; ++j) {
          const T* kj = K + (b * Lk + j) * d + h * dh;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= scale;
          const bool on = mask.at(b, i, j);
          any = any || on;
          scores[j] = on ? s : s + static_cast<T>(kMaskedLogit);
          mx = std::max(mx, scores[j]);
        }
        if (!any) {
          raise<DegenerateMaskError>("attention: query ", i, " of batch element ", b,
                                     " has every key masked");
        }
        T total = T(0);
        for (std::size_t j = 0; j < Lk; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          total += scores[j];
        }
        T* w = weights.data() + ((b * heads + h) * Lq + i) * Lk;
        for (std::size_t j = 0; j < Lk; ++j) w[j] = mask.at(b, i, j) ? scores[j] / total : T(0);
        const T* we = w;
        if (drop) {
          T* wd = dropped.data() + ((b * heads + h) * Lq + i) * Lk;
          for (std::size_t j = 0; j < Lk; ++j)
            wd[j] = rng->uniform() < dropout_p ? T(0) : w[j] * keep_scale;
          we = wd;
        }
        T* oi = out.data() + (b * Lq + i) * d + h * dh;
        for (std::size_t j = 0; j < Lk; ++j) {
          if (we[j] == T(0)) continue;
          const T* vj = V + (b * Lk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += we[j] * vj[c];
        }
      }
    }
  }
  if (probe) {
    probe->record(std::vector<double>(weights.begin(), weights.end()), B, heads, Lq, Lk);
  }

  return Tensor<T>::make_result(
      {B * Lq, d}, std::move(out), {q, k, v},
      [weights = std::move(weights), dropped = std::move(dropped), keep_scale, drop, scale, B, Lq,
       Lk, heads, dh, d](Node<T>& self) {
        Node<T>& nq = *self.parents[0];
        Node<T>& nk = *self.parents[1];
        Node<T>& nv = *self.parents[2];
        T* gq = grad_target(nq);
        T* gk = grad_target(nk);
        T* gv = grad_target(nv);
        const T* go = self.grad.data();
        std::vector<T> dw(Lk), ds(Lk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < Lq; ++i) {
              const std::size_t base = ((b * heads + h) * Lq + i) * Lk;
              const T* w = weights.data() + base;
              const T* we = drop ? dropped.data() + base : w;
              const T* goi = go + (b * Lq + i) * d + h * dh;
              for (std::size_t j = 0; j < Lk; ++j) {
                const T* vj = nv.value.data() + (b * Lk + j) * d + h * dh;
                T acc = T(0);
                for (std::size_t c = 0; c < dh; ++c) acc += goi[c] * vj[c];
                // d(effective)/d(weight) is the dropout factor.
                dw[j] = drop ? (we[j] == T(0) ? T(0) : acc * keep_scale) : acc;
                if (gv && we[j] != T(0)) {
                  T* gvj = gv + (b * Lk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += we[j] * goi[c];
                }
              }
              T dot = T(0);
              for (std::size_t j = 0; j < Lk; ++j) dot += w[j] * dw[j];
              for (std::size_t j = 0; j < Lk; ++j) ds[j] = w[j] * (dw[j] - dot) * scale;
              const T* qi = nq.value.data() + (b * Lq + i) * d + h * dh;
              for (std::size_t j = 0; j < Lk; ++j) {
                if (ds[j] == T(0)) continue;
                const T* kj = nk.value.data() + (b * Lk + j) * d + h * dh;
                if (gq) {
                  T* gqi = gq + (b * Lq + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds[j] * kj[c];
                }
                if (gk) {
                  T* gkj = gk + (b * Lk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace defmod

// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include "cpsim/attention.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cpsim/error.h"

namespace cpsim {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::size_t kMaxProbeEntries = 10000;

void require_finite(const Tensor& t, const char* name) {
  if (!t.all_finite()) throw ShapeError(std::string(name) + " contains non-finite values");
}

// Validates q/k/v against each other and the head map; returns d_head.
std::size_t check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const GqaMap& gqa) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw ShapeError("attention expects rank-3 q/k/v, got " + shape_to_string(q.shape()) + ", " +
                     shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  }
  if (k.shape() != v.shape()) {
    throw ShapeError("k " + shape_to_string(k.shape()) + " and v " + shape_to_string(v.shape()) +
                     " differ");
  }
  if (q.dim(2) != k.dim(2)) throw ShapeError("q and k head_dim differ");
  if (q.dim(1) != gqa.q_heads() || k.dim(1) != gqa.kv_heads()) {
    throw ShapeError("head counts " + std::to_string(q.dim(1)) + "/" + std::to_string(k.dim(1)) +
                     " do not match gqa map " + std::to_string(gqa.q_heads()) + "/" +
                     std::to_string(gqa.kv_heads()));
  }
  require_finite(q, "q");
  require_finite(k, "k");
  require_finite(v, "v");
  return q.dim(2);
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

GqaMap::GqaMap(std::size_t q_heads, std::size_t kv_heads) : q_heads_(q_heads), kv_heads_(kv_heads) {
  if (q_heads == 0 || kv_heads == 0) throw ConfigError("head counts must be positive");
  if (q_heads % kv_heads != 0) {
    throw ConfigError("constraint \"H_q divisible by H_kv\" violated: H_q=" + std::to_string(q_heads) +
                      ", H_kv=" + std::to_string(kv_heads));
  }
}

AttentionPartial AttentionPartial::empty(std::size_t rows, std::size_t heads, std::size_t head_dim) {
  AttentionPartial p{Tensor({rows, heads, head_dim}), Tensor({rows, heads})};
  std::fill(p.lse.data().begin(), p.lse.data().end(), kNegInf);
  return p;
}

AttentionPartial attention_partial(const Tensor& q, const Tensor& k, const Tensor& v, const GqaMap& gqa,
                                   const CausalWindow& window) {
  const std::size_t d = check_qkv(q, k, v, gqa);
  const std::size_t sq = q.dim(0);
  const std::size_t sk = k.dim(0);
  const std::size_t hq = q.dim(1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  AttentionPartial result = AttentionPartial::empty(sq, hq, d);
  std::vector<double> scores(sk);
  for (std::size_t i = 0; i < sq; ++i) {
    for (std::size_t h = 0; h < hq; ++h) {
      const std::size_t kh = gqa.kv_head(h);
      const double* qrow = &q.at(i, h, 0);
      double m = kNegInf;
      for (std::size_t j = 0; j < sk; ++j) {
        if (!window.allows(i, j)) continue;
        scores[j] = dot(qrow, &k.at(j, kh, 0), d) * scale;
        m = std::max(m, scores[j]);
      }
      if (m == kNegInf) continue;

      double denom = 0.0;
      double* orow = &result.out.at(i, h, 0);
      for (std::size_t j = 0; j < sk; ++j) {
        if (!window.allows(i, j)) continue;
        const double w = std::exp(scores[j] - m);
        denom += w;
        const double* vrow = &v.at(j, kh, 0);
        for (std::size_t e = 0; e < d; ++e) orow[e] += w * vrow[e];
      }
      for (std::size_t e = 0; e < d; ++e) orow[e] /= denom;
      result.lse.at(i, h) = m + std::log(denom);
    }
  }
  return result;
}

AttentionPartial reference_attention_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                             const GqaMap& gqa, bool causal) {
  if (q.rank() == 3 && k.rank() == 3 && q.dim(0) != k.dim(0)) {
    throw ShapeError("self-attention expects equal sequence lengths for q and k");
  }
  return attention_partial(q, k, v, gqa, CausalWindow{causal, 0, 0});
}

AttentionGrads attention_backward(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& out,
                                  const Tensor& lse, const Tensor& d_out, const GqaMap& gqa,
                                  const CausalWindow& window) {
  const std::size_t d = check_qkv(q, k, v, gqa);
  if (out.shape() != q.shape() || d_out.shape() != q.shape()) {
    throw ShapeError("out/d_out must match q shape " + shape_to_string(q.shape()));
  }
  if (lse.shape() != Shape{q.dim(0), q.dim(1)}) {
    throw ShapeError("lse shape " + shape_to_string(lse.shape()) + " does not match q rows/heads");
  }
  require_finite(out, "out");
  require_finite(d_out, "d_out");

  const std::size_t sq = q.dim(0);
  const std::size_t sk = k.dim(0);
  const std::size_t hq = q.dim(1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  AttentionGrads g{Tensor(q.shape()), Tensor(k.shape()), Tensor(v.shape())};
  for (std::size_t i = 0; i < sq; ++i) {
    for (std::size_t h = 0; h < hq; ++h) {
      const double row_lse = lse.at(i, h);
      if (row_lse == kNegInf) continue;
      const std::size_t kh = gqa.kv_head(h);
      const double* qrow = &q.at(i, h, 0);
      const double* dorow = &d_out.at(i, h, 0);
      const double delta = dot(dorow, &out.at(i, h, 0), d);
      double* dqrow = &g.dq.at(i, h, 0);
      for (std::size_t j = 0; j < sk; ++j) {
        if (!window.allows(i, j)) continue;
        const double* krow = &k.at(j, kh, 0);
        const double* vrow = &v.at(j, kh, 0);
        const double p = std::exp(dot(qrow, krow, d) * scale - row_lse);
        const double ds = p * (dot(dorow, vrow, d) - delta) * scale;
        double* dkrow = &g.dk.at(j, kh, 0);
        double* dvrow = &g.dv.at(j, kh, 0);
        for (std::size_t e = 0; e < d; ++e) {
          dvrow[e] += p * dorow[e];
          dqrow[e] += ds * krow[e];
          dkrow[e] += ds * qrow[e];
        }
      }
    }
  }
  return g;
}

AttentionGrads reference_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const Tensor& out, const Tensor& lse, const Tensor& d_out,
                                            const GqaMap& gqa, bool causal) {
  if (q.rank() == 3 && k.rank() == 3 && q.dim(0) != k.dim(0)) {
    throw ShapeError("self-attention expects equal sequence lengths for q and k");
  }
  return attention_backward(q, k, v, out, lse, d_out, gqa, CausalWindow{causal, 0, 0});
}

AttentionPartial merge_partials(const AttentionPartial& a, const AttentionPartial& b) {
  if (a.out.shape() != b.out.shape() || a.lse.shape() != b.lse.shape()) {
    throw ShapeError("merge_partials: " + shape_to_string(a.out.shape()) + " vs " +
                     shape_to_string(b.out.shape()));
  }
  if (a.out.rank() != 3 || a.lse.shape() != Shape{a.out.dim(0), a.out.dim(1)}) {
    throw ShapeError("merge_partials: malformed partial " + shape_to_string(a.out.shape()));
  }
  const std::size_t rows = a.out.dim(0);
  const std::size_t heads = a.out.dim(1);
  const std::size_t d = a.out.dim(2);
  AttentionPartial r{Tensor(a.out.shape()), Tensor(a.lse.shape())};
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double la = a.lse.at(i, h);
      const double lb = b.lse.at(i, h);
      const double* oa = &a.out.at(i, h, 0);
      const double* ob = &b.out.at(i, h, 0);
      double* o = &r.out.at(i, h, 0);
      if (la == kNegInf) {
        r.lse.at(i, h) = lb;
        std::copy(ob, ob + d, o);
        continue;
      }
      if (lb == kNegInf) {
        r.lse.at(i, h) = la;
        std::copy(oa, oa + d, o);
        continue;
      }
      const double m = std::max(la, lb);
      const double l = m + std::log(std::exp(la - m) + std::exp(lb - m));
      const double wa = std::exp(la - l);
      const double wb = std::exp(lb - l);
      for (std::size_t e = 0; e < d; ++e) o[e] = wa * oa[e] + wb * ob[e];
      r.lse.at(i, h) = l;
    }
  }
  return r;
}

double attention_probe_loss(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& cotangent,
                            const GqaMap& gqa, bool causal) {
  const auto fwd = reference_attention_forward(q, k, v, gqa, causal);
  if (cotangent.shape() != fwd.out.shape()) throw ShapeError("cotangent must match out shape");
  double s = 0.0;
  for (std::size_t i = 0; i < cotangent.size(); ++i) s += fwd.out[i] * cotangent[i];
  return s;
}

AttentionGrads finite_difference_gradients(const Tensor& q, const Tensor& k, const Tensor& v,
                                           const Tensor& cotangent, const GqaMap& gqa, bool causal,
                                           double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  if (q.size() + k.size() + v.size() > kMaxProbeEntries) {
    throw std::invalid_argument("finite difference sweep limited to 10^4 scalar entries");
  }
  Tensor qp = q, kp = k, vp = v;
  auto sweep = [&](Tensor& target) {
    Tensor grad(target.shape());
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double saved = target[i];
      target[i] = saved + step;
      const double up = attention_probe_loss(qp, kp, vp, cotangent, gqa, causal);
      target[i] = saved - step;
      const double down = attention_probe_loss(qp, kp, vp, cotangent, gqa, causal);
      target[i] = saved;
      grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
  };
  AttentionGrads g;
  g.dq = sweep(qp);
  g.dk = sweep(kp);
  g.dv = sweep(vp);
  return g;
}

double gradient_max_abs_diff(const AttentionGrads& a, const AttentionGrads& b) {
  return std::max({max_abs_diff(a.dq, b.dq), max_abs_diff(a.dk, b.dk), max_abs_diff(a.dv, b.dv)});
}

double gradient_relative_error(const AttentionGrads& got, const AttentionGrads& reference) {
  const double diff = gradient_max_abs_diff(got, reference);
  const double scale = std::max({max_abs(reference.dq), max_abs(reference.dk), max_abs(reference.dv)});
  return scale > 0.0 ? diff / scale : diff;
}

}  // namespace cpsim

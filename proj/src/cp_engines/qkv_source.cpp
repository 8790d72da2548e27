// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include <numeric>
#include <string>

#include "cpsim/engines.h"
#include "cpsim/error.h"

namespace cpsim {

namespace {

std::vector<std::size_t> iota_heads(std::size_t n) {
  std::vector<std::size_t> h(n);
  std::iota(h.begin(), h.end(), std::size_t{0});
  return h;
}

// [rows, in] x [in, cols] restricted to the column blocks of `heads`.
Tensor project_heads(const Tensor& x, const Tensor& w, std::span<const std::size_t> heads, std::size_t head_dim) {
  const std::size_t rows = x.dim(0);
  const std::size_t in = x.dim(1);
  if (w.rank() != 2 || w.dim(0) != in || w.dim(1) % head_dim != 0) {
    throw ShapeError("projection " + shape_to_string(w.shape()) + " does not fit input " +
                     shape_to_string(x.shape()));
  }
  Tensor out({rows, heads.size(), head_dim});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t s = 0; s < heads.size(); ++s) {
      if ((heads[s] + 1) * head_dim > w.dim(1)) throw ShapeError("projected head out of range");
      for (std::size_t e = 0; e < head_dim; ++e) {
        const std::size_t col = heads[s] * head_dim + e;
        double acc = 0.0;
        for (std::size_t m = 0; m < in; ++m) acc += x.at(i, m) * w.at(m, col);
        out.at(i, s, e) = acc;
      }
    }
  }
  return out;
}

}  // namespace

GlobalQkv project_global(const Tensor& x, const Projection& w, const ModelConfig& model) {
  if (x.rank() != 2 || x.dim(1) != model.d_model()) {
    throw ShapeError("hidden state " + shape_to_string(x.shape()) + " does not match d_model " +
                     std::to_string(model.d_model()));
  }
  const auto qh = iota_heads(model.q_heads);
  const auto kh = iota_heads(model.kv_heads);
  return GlobalQkv{project_heads(x, w.w_q, qh, model.head_dim), project_heads(x, w.w_k, kh, model.head_dim),
                   project_heads(x, w.w_v, kh, model.head_dim)};
}

QkvSource QkvSource::preformed(ShardedActivation q, ShardedActivation k, ShardedActivation v) {
  QkvSource s;
  if (q.shards.empty()) return s;
  if (q.axis != ShardAxis::sequence || k.axis != ShardAxis::sequence || v.axis != ShardAxis::sequence) {
    throw ShapeError("pre-formed q/k/v must be sequence-sharded");
  }
  if (k.shards.size() != q.shards.size() || v.shards.size() != q.shards.size()) {
    throw ShapeError("q/k/v shard counts differ");
  }
  s.preformed_ = std::make_shared<const Preformed>(Preformed{std::move(q), std::move(k), std::move(v)});
  return s;
}

QkvSource QkvSource::projected(ShardedActivation x, Projection weights, std::size_t head_dim) {
  if (x.axis != ShardAxis::sequence || x.shards.empty()) throw ShapeError("hidden state must be sequence-sharded");
  QkvSource s;
  s.projected_ = std::make_shared<const Projected>(Projected{std::move(x), std::move(weights), head_dim});
  return s;
}

std::size_t QkvSource::device_count() const {
  if (preformed_) return preformed_->q.shards.size();
  if (projected_) return projected_->x.shards.size();
  return 0;
}

std::size_t QkvSource::local_rows() const {
  if (preformed_) return preformed_->q.shards.front().dim(0);
  if (projected_) return projected_->x.shards.front().dim(0);
  return 0;
}

Tensor QkvSource::project(std::size_t device, const Tensor& w, std::span<const std::size_t> heads) const {
  return project_heads(projected_->x.shards.at(device), w, heads, projected_->head_dim);
}

Tensor QkvSource::q_heads(std::size_t device, std::span<const std::size_t> heads) const {
  if (preformed_) return take(preformed_->q.shards.at(device), 1, heads);
  if (projected_) return project(device, projected_->w.w_q, heads);
  throw ShapeError("empty q/k/v source");
}

Tensor QkvSource::k_heads(std::size_t device, std::span<const std::size_t> heads) const {
  if (preformed_) return take(preformed_->k.shards.at(device), 1, heads);
  if (projected_) return project(device, projected_->w.w_k, heads);
  throw ShapeError("empty q/k/v source");
}

Tensor QkvSource::v_heads(std::size_t device, std::span<const std::size_t> heads) const {
  if (preformed_) return take(preformed_->v.shards.at(device), 1, heads);
  if (projected_) return project(device, projected_->w.w_v, heads);
  throw ShapeError("empty q/k/v source");
}

ShardedActivation QkvSource::project_all(const Tensor& w) const {
  ShardedActivation a;
  a.axis = ShardAxis::sequence;
  const auto heads = iota_heads(w.dim(1) / projected_->head_dim);
  for (std::size_t d = 0; d < projected_->x.shards.size(); ++d) a.shards.push_back(project(d, w, heads));
  a.global_shape = {projected_->x.global_shape.at(0), heads.size(), projected_->head_dim};
  return a;
}

ShardedActivation QkvSource::all_q() const {
  if (preformed_) return preformed_->q;
  if (projected_) return project_all(projected_->w.w_q);
  throw ShapeError("empty q/k/v source");
}

ShardedActivation QkvSource::all_k() const {
  if (preformed_) return preformed_->k;
  if (projected_) return project_all(projected_->w.w_k);
  throw ShapeError("empty q/k/v source");
}

ShardedActivation QkvSource::all_v() const {
  if (preformed_) return preformed_->v;
  if (projected_) return project_all(projected_->w.w_v);
  throw ShapeError("empty q/k/v source");
}

ShardedActivation shard_sequence(const Tensor& x, const Mesh& mesh) { return shard_rows(x, mesh.device_count()); }

Tensor run_oracle(const ModelConfig& model, const Tensor& q, const Tensor& k, const Tensor& v, bool causal) {
  const Shape want_q{model.seq_len, model.q_heads, model.head_dim};
  const Shape want_kv{model.seq_len, model.kv_heads, model.head_dim};
  if (q.shape() != want_q || k.shape() != want_kv || v.shape() != want_kv) {
    throw ShapeError("oracle inputs " + shape_to_string(q.shape()) + ", " + shape_to_string(k.shape()) + ", " +
                     shape_to_string(v.shape()) + " do not match the model");
  }
  return reference_attention_forward(q, k, v, model.gqa(), causal).out;
}

}  // namespace cpsim

// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include "cpsim/mem_model.h"

#include <algorithm>
#include <string>

#include "cpsim/error.h"

namespace cpsim {

GqaFactors gqa_factors(std::size_t ratio) {
  if (ratio == 0) throw ConfigError("constraint \"R >= 1\" violated: R=0");
  const double r = static_cast<double>(ratio);
  return GqaFactors{r, 1.0 + 2.0 / r, 4.0 + 4.0 / r};
}

std::string_view method_name(MemoryMethod m) {
  switch (m) {
    case MemoryMethod::ulysses: return "ulysses";
    case MemoryMethod::ulysses_offload: return "ulysses_offload";
    case MemoryMethod::fpdt: return "fpdt";
    case MemoryMethod::upipe: return "upipe";
  }
  return "unknown";
}

MemoryMethod parse_memory_method(std::string_view name) {
  for (auto m : {MemoryMethod::ulysses, MemoryMethod::ulysses_offload, MemoryMethod::fpdt, MemoryMethod::upipe}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown memory method \"" + std::string(name) +
                    "\"; expected ulysses, ulysses_offload, fpdt or upipe");
}

std::string_view direction_name(Direction d) { return d == Direction::forward ? "forward" : "backward"; }

double PhaseMemoryReport::peak() const { return *std::max_element(phases.begin(), phases.end()); }

std::array<std::string_view, 4> PhaseMemoryReport::phase_labels(Direction d) {
  if (d == Direction::forward) return {"before", "inp_a2a", "attn_kernel", "out_a2a"};
  return {"before", "out_a2a", "attn_kernel", "inp_a2a"};
}

namespace {

struct Terms {
  double sc;    // S / C
  double scn;   // S / (C nu)
  double scp;   // S / (C pi)
  double l;
  GqaFactors f;
};

Terms terms(MemoryMethod method, const MemoryParams& p) {
  if (p.seq_len == 0 || p.devices == 0 || p.layers == 0) {
    throw ConfigError("memory model needs positive S, C and L");
  }
  Terms t{};
  t.f = gqa_factors(p.ratio);
  t.sc = static_cast<double>(p.seq_len) / static_cast<double>(p.devices);
  t.l = static_cast<double>(p.layers);
  if (method == MemoryMethod::upipe) {
    if (!p.nu || *p.nu == 0) throw ConfigError("method upipe needs the stage count nu >= 1");
    t.scn = t.sc / static_cast<double>(*p.nu);
  }
  if (method == MemoryMethod::fpdt) {
    if (!p.pi || *p.pi == 0) throw ConfigError("method fpdt needs the chunk count pi >= 1");
    t.scp = t.sc / static_cast<double>(*p.pi);
  }
  return t;
}

}  // namespace

PhaseMemoryReport attn_fwd_peak(MemoryMethod method, const MemoryParams& params) {
  const Terms t = terms(method, params);
  const double g = t.f.gamma;
  PhaseMemoryReport r;
  r.method = method;
  r.direction = Direction::forward;
  r.params = params;
  r.factors = t.f;
  switch (method) {
    case MemoryMethod::ulysses:
      r.phases = {t.l * t.sc, t.l * t.sc + (g + 1) * t.sc, t.l * t.sc + (g + 1) * t.sc, t.l * t.sc + 2 * t.sc};
      break;
    case MemoryMethod::ulysses_offload:
      r.phases = {t.sc, t.sc + (g + 1) * t.sc, t.sc + (g + 1) * t.sc, 3 * t.sc};
      break;
    case MemoryMethod::fpdt:
      r.phases = {t.scp, t.scp + (g + 1) * t.scp, (2 * g + 1) * t.scp, 2 * t.scp};
      break;
    case MemoryMethod::upipe:
      r.phases = {t.sc, 2 * t.sc + (g + 1) * t.scn, 2 * t.sc + g * t.scn, t.sc + 2 * t.scn};
      break;
  }
  return r;
}

PhaseMemoryReport attn_bwd_peak(MemoryMethod method, const MemoryParams& params) {
  const Terms t = terms(method, params);
  const double g = t.f.gamma;
  const double b = t.f.beta;
  PhaseMemoryReport r;
  r.method = method;
  r.direction = Direction::backward;
  r.params = params;
  r.factors = t.f;
  switch (method) {
    case MemoryMethod::ulysses:
      r.phases = {(t.l + 1) * t.sc, (t.l + 2) * t.sc, (t.l + b + 1) * t.sc, (t.l + g + 1) * t.sc};
      break;
    case MemoryMethod::ulysses_offload:
      r.phases = {2 * t.sc, 3 * t.sc, (b + 2) * t.sc, (g + 2) * t.sc};
      break;
    case MemoryMethod::fpdt:
      // The "before" cell carries no factor of two, unlike the other rows.
      r.phases = {t.scp, 3 * t.scp, (b + 2) * t.scp, (g + 2) * t.scp};
      break;
    case MemoryMethod::upipe:
      r.phases = {2 * t.sc, 2 * t.sc + 2 * t.scn, 2 * t.sc + (b + 1) * t.scn, 2 * t.sc + 2 * (g + 1) * t.scn};
      break;
  }
  return r;
}

Table1Breakdown table1_breakdown(const ModelConfig& model, std::size_t bytes_per_element) {
  if (model.seq_len == 0 || model.q_heads == 0 || model.head_dim == 0 || model.ffn_dim == 0 ||
      model.vocab_size == 0 || bytes_per_element == 0) {
    throw ConfigError("stage breakdown needs positive S, H_q, d_head, d_ff, V and element width");
  }
  const double s = static_cast<double>(model.seq_len);
  const double d = static_cast<double>(model.d_model());
  const double bpe = static_cast<double>(bytes_per_element);
  const double heads_x_dim = static_cast<double>(model.q_heads * model.head_dim);

  Table1Breakdown t;
  t.token_id_bytes = 4 * s;
  t.embedding.outputs = bpe * s * d;
  t.embedding.total = t.embedding.outputs;

  t.attention_qkv = 3 * bpe * s * heads_x_dim;
  t.attention_a2a = t.attention_qkv;
  t.attention.inputs = bpe * s * d;
  t.attention.intermediate = t.attention_qkv + t.attention_a2a;
  t.attention.outputs = bpe * s * d;
  t.attention.total = t.attention.inputs + t.attention.intermediate + t.attention.outputs;
  t.lse_bytes = bpe * s * static_cast<double>(model.q_heads);

  t.ffn.inputs = bpe * s * d;
  t.ffn.intermediate = 4 * bpe * s * static_cast<double>(model.ffn_dim);
  t.ffn.outputs = bpe * s * d;
  t.ffn.total = t.ffn.inputs + t.ffn.intermediate + t.ffn.outputs;

  // Logits and log-softmax are fp32 regardless of the element width.
  t.cross_entropy.inputs = bpe * s * d;
  t.cross_entropy.intermediate = 8 * s * static_cast<double>(model.vocab_size);
  t.cross_entropy.outputs = 4;
  t.cross_entropy.total = t.cross_entropy.intermediate;
  return t;
}

UPipeSavings upipe_savings(std::size_t q_heads, std::size_t devices, std::size_t heads_per_stage,
                           std::size_t seq_len, std::size_t head_dim, std::size_t bytes_per_element) {
  if (devices == 0 || heads_per_stage == 0 || heads_per_stage % devices != 0) {
    throw ConfigError("constraint \"U divisible by C\" violated: U=" + std::to_string(heads_per_stage) +
                      ", C=" + std::to_string(devices));
  }
  if (q_heads % heads_per_stage != 0) {
    throw ConfigError("constraint \"H_q divisible by U\" violated: H_q=" + std::to_string(q_heads) +
                      ", U=" + std::to_string(heads_per_stage));
  }
  if (seq_len % devices != 0) {
    throw ConfigError("constraint \"S divisible by C\" violated: S=" + std::to_string(seq_len) +
                      ", C=" + std::to_string(devices));
  }
  // 12 bytes per element pair at bf16 is six elements: Q, K, V and their
  // all-to-all copies.
  const std::uint64_t per_head = 6ull * (seq_len / devices) * head_dim * bytes_per_element;
  UPipeSavings s;
  s.ulysses_bytes = per_head * q_heads;
  s.upipe_bytes = per_head * heads_per_stage;
  s.reduction_ratio = 1.0 - static_cast<double>(heads_per_stage) / static_cast<double>(q_heads);
  return s;
}

}  // namespace cpsim

// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "cpsim/attention.h"
#include "cpsim/error.h"
#include "cpsim/rng.h"
#include "generators.h"
#include "test_oracle.h"

namespace cpsim {
namespace {

using testing::brute_force_attention;

const double kInf = std::numeric_limits<double>::infinity();

Tensor iota(Shape shape) {
  Tensor t(std::move(shape));
  std::iota(t.data().begin(), t.data().end(), 0.0);
  return t;
}

TEST(Tensor, RejectsZeroExtentsAndWrongDataLength) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
}

TEST(Tensor, ConcatInvertsSliceOnEveryAxis) {
  const Tensor t = iota({4, 6, 2});
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const std::size_t n = t.dim(axis);
    std::vector<Tensor> parts{slice(t, axis, 0, 1), slice(t, axis, 1, n - 1)};
    EXPECT_EQ(concat(parts, axis), t) << "axis " << axis;
  }
}

TEST(Tensor, TakeThenScatterRoundTrips) {
  const Tensor t = iota({3, 4, 2});
  const std::vector<std::size_t> idx{3, 1, 0, 2};
  const Tensor taken = take(t, 1, idx);
  EXPECT_EQ(taken.at(0, 0, 1), t.at(0, 3, 1));
  Tensor back({3, 4, 2});
  scatter(back, taken, 1, idx);
  EXPECT_EQ(back, t);
}

TEST(Tensor, ScatterAddAccumulatesRepeatedIndices) {
  const Tensor src = iota({1, 3, 1});
  Tensor dst({1, 2, 1});
  const std::vector<std::size_t> idx{0, 0, 1};
  scatter_add(dst, src, 1, idx);
  EXPECT_EQ(dst.at(0, 0, 0), 0.0 + 1.0);
  EXPECT_EQ(dst.at(0, 1, 0), 2.0);
}

TEST(Tensor, OutOfRangeSliceAndTakeThrow) {
  const Tensor t = iota({2, 2});
  EXPECT_THROW(slice(t, 0, 1, 2), ShapeError);
  EXPECT_THROW(slice(t, 2, 0, 1), ShapeError);
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(take(t, 1, bad), ShapeError);
}

TEST(Rng, SameSeedSameStreamAndUnitInterval) {
  Rng a(42), b(42), c(43);
  const Tensor x = a.uniform({64});
  EXPECT_EQ(x, b.uniform({64}));
  EXPECT_NE(x, c.uniform({64}));
  for (double v : x.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(GqaMap, MapsQueryHeadToGroupAndRejectsIndivisible) {
  const GqaMap m(8, 2);
  EXPECT_EQ(m.ratio(), 4u);
  EXPECT_EQ(m.kv_head(3), 0u);
  EXPECT_EQ(m.kv_head(4), 1u);
  try {
    GqaMap(6, 4);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("H_q divisible by H_kv"), std::string::npos);
  }
}

TEST(AttentionForward, EqualScoresAverageValues) {
  const Tensor q({2, 1, 1}, {1, 1});
  const Tensor v({2, 1, 1}, {2, 4});
  const auto r = reference_attention_forward(q, q, v, GqaMap(1, 1), true);
  EXPECT_DOUBLE_EQ(r.out[0], 2.0);
  EXPECT_DOUBLE_EQ(r.out[1], 3.0);
}

TEST(AttentionForward, ZeroKeysGiveCausalPrefixMeans) {
  Rng rng(3);
  const Tensor q = rng.uniform({5, 1, 2});
  const Tensor k({5, 1, 2});
  const Tensor v = rng.uniform({5, 1, 2});
  const auto r = reference_attention_forward(q, k, v, GqaMap(1, 1), true);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t e = 0; e < 2; ++e) {
      double mean = 0.0;
      for (std::size_t j = 0; j <= i; ++j) mean += v.at(j, 0, e);
      EXPECT_NEAR(r.out.at(i, 0, e), mean / static_cast<double>(i + 1), 1e-15);
    }
  }
}

TEST(AttentionForward, MatchesBruteForceOnSeedSeven) {
  Rng rng(7);
  const Tensor q = rng.uniform({8, 4, 4});
  const Tensor k = rng.uniform({8, 2, 4});
  const Tensor v = rng.uniform({8, 2, 4});
  for (bool causal : {true, false}) {
    const auto got = reference_attention_forward(q, k, v, GqaMap(4, 2), causal);
    const auto want = brute_force_attention(q, k, v, causal);
    EXPECT_LE(max_abs_diff(got.out, want.out), 1e-12);
    EXPECT_LE(max_abs_diff(got.lse, want.lse), 1e-12);
  }
}

TEST(AttentionForward, RejectsShapeMismatchAndNonFiniteInput) {
  const Tensor q({4, 2, 2});
  const Tensor k({4, 1, 3});
  EXPECT_THROW(reference_attention_forward(q, k, k, GqaMap(2, 1), true), ShapeError);
  Tensor bad({4, 1, 2});
  bad[3] = std::nan("");
  EXPECT_THROW(reference_attention_forward(q, bad, Tensor({4, 1, 2}), GqaMap(2, 1), true), ShapeError);
  EXPECT_THROW(reference_attention_forward(q, Tensor({4, 1, 2}), Tensor({4, 1, 2}), GqaMap(4, 1), true),
               ShapeError);
}

TEST(AttentionPartial, FullyMaskedRowsKeepTheSentinel) {
  Rng rng(1);
  const Tensor q = rng.uniform({2, 1, 2});
  const Tensor k = rng.uniform({2, 1, 2});
  // Keys at offset 4 are all in the future of queries at offset 0.
  const auto p = attention_partial(q, k, k, GqaMap(1, 1), CausalWindow{true, 0, 4});
  for (double x : p.lse.data()) EXPECT_EQ(x, -kInf);
  for (double x : p.out.data()) EXPECT_EQ(x, 0.0);
}

// Property: weights re-derived from scores and lse sum to one in every row.
TEST(AttentionForward, LseNormalisesEveryRow) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t s = 1 + seed % 6, d = 1 + seed % 3;
    const Tensor q = rng.uniform({s, 2, d});
    const Tensor k = rng.uniform({s, 1, d});
    const auto r = reference_attention_forward(q, k, k, GqaMap(2, 1), seed % 2 == 0);
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t h = 0; h < 2; ++h) {
        double sum = 0.0;
        for (std::size_t j = 0; j < s; ++j) {
          if (seed % 2 == 0 && j > i) continue;
          double dot = 0.0;
          for (std::size_t e = 0; e < d; ++e) dot += q.at(i, h, e) * k.at(j, 0, e);
          sum += std::exp(dot / std::sqrt(static_cast<double>(d)) - r.lse.at(i, h));
        }
        EXPECT_NEAR(sum, 1.0, 1e-12) << "seed " << seed;
      }
    }
  }
}

// Property: permuting query heads within their kv groups permutes outputs.
TEST(AttentionForward, PermutationEquivariantOverHeads) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Tensor q = rng.uniform({4, 4, 2});
    const Tensor k = rng.uniform({4, 2, 2});
    const Tensor v = rng.uniform({4, 2, 2});
    // Swap the kv groups and, consistently, the query heads of each group.
    const std::vector<std::size_t> qperm{3, 2, 1, 0}, kvperm{1, 0};
    const auto base = reference_attention_forward(q, k, v, GqaMap(4, 2), true);
    const auto perm = reference_attention_forward(take(q, 1, qperm), take(k, 1, kvperm), take(v, 1, kvperm),
                                                  GqaMap(4, 2), true);
    EXPECT_EQ(perm.out, take(base.out, 1, qperm));
  }
}

TEST(MergePartials, EmptyIsIdentityAndSelfMergeAddsLnTwo) {
  Rng rng(5);
  const Tensor q = rng.uniform({3, 2, 2});
  const Tensor k = rng.uniform({3, 1, 2});
  const auto p = reference_attention_forward(q, k, k, GqaMap(2, 1), false);
  const auto e = AttentionPartial::empty(3, 2, 2);
  const auto left = merge_partials(e, p);
  const auto right = merge_partials(p, e);
  EXPECT_EQ(left.out, p.out);
  EXPECT_EQ(right.lse, p.lse);
  const auto twice = merge_partials(p, p);
  EXPECT_LE(max_abs_diff(twice.out, p.out), 1e-15);
  for (std::size_t i = 0; i < p.lse.size(); ++i) EXPECT_NEAR(twice.lse[i], p.lse[i] + std::log(2.0), 1e-15);
  const auto none = merge_partials(e, e);
  for (double x : none.lse.data()) EXPECT_EQ(x, -kInf);
}

TEST(MergePartials, TwoSingleKeyPartialsEqualTwoKeySoftmax) {
  Rng rng(9);
  const Tensor q = rng.uniform({1, 1, 3});
  const Tensor k = rng.uniform({2, 1, 3});
  const Tensor v = rng.uniform({2, 1, 3});
  const auto a = attention_partial(q, slice(k, 0, 0, 1), slice(v, 0, 0, 1), GqaMap(1, 1), {});
  const auto b = attention_partial(q, slice(k, 0, 1, 1), slice(v, 0, 1, 1), GqaMap(1, 1), {});
  const auto merged = merge_partials(a, b);
  const auto want = brute_force_attention(q, k, v, false);
  EXPECT_LE(max_abs_diff(merged.out, want.out), 1e-12);
  EXPECT_LE(max_abs_diff(merged.lse, want.lse), 1e-12);
}

// Property: merge is commutative and associative, and any split of the key
// axis merges back to the whole.
TEST(MergePartials, CommutativeAssociativeAndSplitInvariant) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    testing::Gen g(seed);
    const std::size_t s = 3 + g.below(6), d = 1 + g.below(3);
    Rng rng(seed);
    const Tensor q = rng.uniform({s, 2, d});
    const Tensor k = rng.uniform({s, 2, d});
    const Tensor v = rng.uniform({s, 2, d});
    const std::size_t c1 = 1 + g.below(s - 2), c2 = c1 + 1 + g.below(s - c1 - 1);
    const bool causal = g.coin();
    auto part = [&](std::size_t b, std::size_t n) {
      return attention_partial(q, slice(k, 0, b, n), slice(v, 0, b, n), GqaMap(2, 2), CausalWindow{causal, 0, b});
    };
    const auto a = part(0, c1), b = part(c1, c2 - c1), c = part(c2, s - c2);
    const auto ab = merge_partials(a, b), ba = merge_partials(b, a);
    EXPECT_LE(max_abs_diff(ab.out, ba.out), 1e-12);
    const auto left = merge_partials(ab, c), right = merge_partials(a, merge_partials(b, c));
    EXPECT_LE(max_abs_diff(left.out, right.out), 1e-12);
    EXPECT_LE(max_abs_diff(left.lse, right.lse), 1e-12);
    const auto whole = brute_force_attention(q, k, v, causal);
    EXPECT_LE(max_abs_diff(left.out, whole.out), 1e-12) << "seed " << seed;
  }
}

TEST(MergePartials, ShapeMismatchThrows) {
  EXPECT_THROW(merge_partials(AttentionPartial::empty(2, 1, 2), AttentionPartial::empty(3, 1, 2)), ShapeError);
}

TEST(AttentionBackward, ZeroCotangentGivesZeroGradients) {
  Rng rng(2);
  const Tensor q = rng.uniform({4, 2, 3});
  const Tensor k = rng.uniform({4, 1, 3});
  const auto f = reference_attention_forward(q, k, k, GqaMap(2, 1), true);
  const auto g = reference_attention_backward(q, k, k, f.out, f.lse, Tensor({4, 2, 3}), GqaMap(2, 1), true);
  EXPECT_EQ(max_abs(g.dq) + max_abs(g.dk) + max_abs(g.dv), 0.0);
}

TEST(AttentionBackward, SingleTokenPassesCotangentToValues) {
  Rng rng(4);
  const Tensor q = rng.uniform({1, 2, 3});
  const Tensor k = rng.uniform({1, 1, 3});
  const Tensor v = rng.uniform({1, 1, 3});
  const Tensor dout = rng.uniform({1, 2, 3});
  const auto f = reference_attention_forward(q, k, v, GqaMap(2, 1), true);
  const auto g = reference_attention_backward(q, k, v, f.out, f.lse, dout, GqaMap(2, 1), true);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_DOUBLE_EQ(g.dv.at(0, 0, e), dout.at(0, 0, e) + dout.at(0, 1, e));
  EXPECT_LE(max_abs(g.dq), 1e-16);
  EXPECT_LE(max_abs(g.dk), 1e-16);
}

TEST(AttentionBackward, SeedElevenMatchesFiniteDifferences) {
  Rng rng(11);
  const Tensor q = rng.uniform({6, 2, 3});
  const Tensor k = rng.uniform({6, 1, 3});
  const Tensor v = rng.uniform({6, 1, 3});
  const Tensor g = rng.uniform({6, 2, 3});
  const auto f = reference_attention_forward(q, k, v, GqaMap(2, 1), true);
  const auto an = reference_attention_backward(q, k, v, f.out, f.lse, g, GqaMap(2, 1), true);
  const auto fd = finite_difference_gradients(q, k, v, g, GqaMap(2, 1), true, 1e-5);
  EXPECT_LE(gradient_relative_error(an, fd), 1e-6);
}

TEST(AttentionBackward, MatchesBruteForceJacobian) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    testing::Gen gen(seed);
    const std::size_t s = 1 + gen.below(6), kv = gen.pick({1, 2}), r = gen.pick({1, 2, 3}), d = 1 + gen.below(4);
    const bool causal = gen.coin();
    Rng rng(seed);
    const Tensor q = rng.uniform({s, kv * r, d});
    const Tensor k = rng.uniform({s, kv, d});
    const Tensor v = rng.uniform({s, kv, d});
    const Tensor g = rng.uniform({s, kv * r, d});
    const GqaMap m(kv * r, kv);
    const auto f = reference_attention_forward(q, k, v, m, causal);
    const auto got = reference_attention_backward(q, k, v, f.out, f.lse, g, m, causal);
    const auto want = brute_force_attention(q, k, v, causal, &g);
    EXPECT_LE(gradient_max_abs_diff(got, {want.dq, want.dk, want.dv}), 1e-12) << "seed " << seed;
  }
}

// Property: the full small grid S in {2,4,8}, H_q in {1,2,4}, R in {1,2}.
TEST(AttentionBackward, FiniteDifferenceGrid) {
  std::uint64_t seed = 100;
  for (std::size_t s : {2, 4, 8}) {
    for (std::size_t hq : {1, 2, 4}) {
      for (std::size_t r : {1, 2}) {
        if (hq % r != 0) continue;
        for (bool causal : {true, false}) {
          Rng rng(++seed);
          const Tensor q = rng.uniform({s, hq, 2});
          const Tensor k = rng.uniform({s, hq / r, 2});
          const Tensor v = rng.uniform({s, hq / r, 2});
          const Tensor g = rng.uniform({s, hq, 2});
          const GqaMap m(hq, hq / r);
          const auto f = reference_attention_forward(q, k, v, m, causal);
          const auto an = reference_attention_backward(q, k, v, f.out, f.lse, g, m, causal);
          const auto fd = finite_difference_gradients(q, k, v, g, m, causal, 1e-5);
          EXPECT_LE(gradient_relative_error(an, fd), 1e-6) << "S=" << s << " H_q=" << hq << " R=" << r;
        }
      }
    }
  }
}

TEST(FiniteDifference, LinearProbeIsExactForOneToken) {
  Rng rng(8);
  const Tensor q = rng.uniform({1, 1, 2});
  const Tensor k = rng.uniform({1, 1, 2});
  const Tensor v = rng.uniform({1, 1, 2});
  const Tensor g = rng.uniform({1, 1, 2});
  const auto fd = finite_difference_gradients(q, k, v, g, GqaMap(1, 1), true, 1e-5);
  for (std::size_t e = 0; e < 2; ++e) EXPECT_NEAR(fd.dv[e], g[e], 1e-10);
  EXPECT_LE(max_abs(fd.dq), 1e-10);
}

TEST(FiniteDifference, DoublingTheStepChangesResultAtSecondOrder) {
  Rng rng(12);
  const Tensor q = rng.uniform({4, 1, 2});
  const Tensor k = rng.uniform({4, 1, 2});
  const Tensor v = rng.uniform({4, 1, 2});
  const Tensor g = rng.uniform({4, 1, 2});
  const auto a = finite_difference_gradients(q, k, v, g, GqaMap(1, 1), true, 1e-5);
  const auto b = finite_difference_gradients(q, k, v, g, GqaMap(1, 1), true, 2e-5);
  // Truncation error scales with step^2 ~ 1e-10; roundoff adds ~1e-11.
  EXPECT_LE(gradient_max_abs_diff(a, b), 1e-8);
}

TEST(FiniteDifference, RejectsBadStepAndOversizedSweeps) {
  const Tensor small({2, 1, 1});
  EXPECT_THROW(finite_difference_gradients(small, small, small, small, GqaMap(1, 1), true, 0.0),
               std::invalid_argument);
  const Tensor big({2000, 2, 2});
  const Tensor bigkv({2000, 1, 2});
  EXPECT_THROW(finite_difference_gradients(big, bigkv, bigkv, big, GqaMap(2, 1), true, 1e-5), std::invalid_argument);
}

}  // namespace
}  // namespace cpsim

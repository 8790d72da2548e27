// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "cpsim/engines.h"
#include "cpsim/error.h"
#include "cpsim/rng.h"
#include "generators.h"
#include "test_oracle.h"

namespace cpsim {
namespace {

using testing::brute_force_attention;
using testing::engine_case;

struct Inputs {
  ModelConfig model;
  Tensor q, k, v, g;
};

Inputs inputs(std::size_t s, std::size_t hq, std::size_t hkv, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Inputs in{{s, hq, hkv, d, 0, 0, 1}, {}, {}, {}, {}};
  in.q = rng.uniform({s, hq, d});
  in.k = rng.uniform({s, hkv, d});
  in.v = rng.uniform({s, hkv, d});
  in.g = rng.uniform({s, hq, d});
  return in;
}

QkvSource source(const Inputs& in, const Mesh& m) {
  return QkvSource::preformed(shard_sequence(in.q, m), shard_sequence(in.k, m), shard_sequence(in.v, m));
}

MeshConfig flat(std::size_t c) { return {c, c, 1, 2}; }

AttentionGrads gathered(const ShardedGrads& g) { return {g.dq.gather(), g.dk.gather(), g.dv.gather()}; }

std::vector<std::uint64_t> phase_peaks(const Mesh& m, std::size_t device) {
  const auto& p = m.memory().device(device).phase_peak_total;
  return {p.begin(), p.end()};
}

TEST(ShardSequence, ContiguousBlocksAndExactReconstruction) {
  const Tensor x = Rng(1).uniform({16, 8});
  const Mesh m = create_mesh(flat(4));
  const auto s = shard_sequence(x, m);
  EXPECT_EQ(s.shards[1], slice(x, 0, 4, 4));
  EXPECT_EQ(s.gather(), x);
  const Mesh one = create_mesh(flat(1));
  EXPECT_EQ(shard_sequence(x, one).shards.front(), x);
  const Mesh three = create_mesh(flat(3));
  EXPECT_THROW(shard_sequence(x, three), ConfigError);
}

TEST(Oracle, RejectsShapesThatDisagreeWithTheModel) {
  const auto in = inputs(4, 2, 1, 2, 1);
  EXPECT_LE(max_abs_diff(run_oracle(in.model, in.q, in.k, in.v, true), brute_force_attention(in.q, in.k, in.v, true).out),
            1e-12);
  ModelConfig wrong = in.model;
  wrong.kv_heads = 2;
  EXPECT_THROW(run_oracle(wrong, in.q, in.k, in.v, true), ShapeError);
}

TEST(Ulysses, SeedThreeMatchesOracle) {
  const auto in = inputs(16, 8, 2, 4, 3);
  Mesh m = create_mesh(flat(4));
  const auto f = run_ulysses_forward(m, in.model, source(in, m), true);
  EXPECT_LE(max_abs_diff(f.out.gather(), brute_force_attention(in.q, in.k, in.v, true).out), 1e-9);
}

TEST(Ulysses, DeviceZeroHoldsTheFirstHeadsOverTheWholeSequence) {
  const auto in = inputs(4, 4, 4, 2, 6);
  Mesh m = create_mesh(flat(2));
  const auto f = run_ulysses_forward(m, in.model, source(in, m), false);
  const std::vector<std::size_t> first{0, 1};
  EXPECT_EQ(f.state.q[0], take(in.q, 1, first));
}

TEST(Ulysses, OneDeviceIsBitExactWithTheReference) {
  const auto in = inputs(6, 4, 2, 3, 8);
  Mesh m = create_mesh(flat(1));
  const auto f = run_ulysses_forward(m, in.model, source(in, m), true);
  const auto ref = reference_attention_forward(in.q, in.k, in.v, in.model.gqa(), true);
  EXPECT_EQ(f.out.gather(), ref.out);
  Mesh b = create_mesh(flat(1));
  const auto g = run_ulysses_backward(b, in.model, f.state, shard_sequence(in.g, b));
  const auto rg = reference_attention_backward(in.q, in.k, in.v, ref.out, ref.lse, in.g, in.model.gqa(), true);
  EXPECT_EQ(g.dq.gather(), rg.dq);
  EXPECT_EQ(g.dk.gather(), rg.dk);
  EXPECT_EQ(g.dv.gather(), rg.dv);
}

TEST(Ulysses, MeasuredPhasesFollowTheCountedBuffers) {
  // MHA, S/C = 4 rows, d_model = 8, 2 bytes: one unit is 64 bytes and
  // gamma = 3, so the phases are 1, 5, 5 and 3 units.
  const auto in = inputs(8, 4, 4, 2, 2);
  Mesh m = create_mesh(flat(2));
  run_ulysses_forward(m, in.model, source(in, m), true);
  for (std::size_t d = 0; d < 2; ++d) EXPECT_EQ(phase_peaks(m, d), (std::vector<std::uint64_t>{64, 320, 320, 192}));
}

TEST(Ulysses, BackwardMatchesOracleAndFiniteDifferences) {
  const auto in = inputs(16, 8, 2, 4, 3);
  Mesh m = create_mesh(flat(4));
  const auto f = run_ulysses_forward(m, in.model, source(in, m), true);
  Mesh b = create_mesh(flat(4));
  const auto got = gathered(run_ulysses_backward(b, in.model, f.state, shard_sequence(in.g, b)));
  const auto want = brute_force_attention(in.q, in.k, in.v, true, &in.g);
  EXPECT_LE(gradient_max_abs_diff(got, {want.dq, want.dk, want.dv}), 1e-9);
  const auto fd = finite_difference_gradients(in.q, in.k, in.v, in.g, in.model.gqa(), true, 1e-5);
  EXPECT_LE(gradient_relative_error(got, fd), 1e-6);
}

TEST(Ulysses, ZeroCotangentAndMissingState) {
  const auto in = inputs(8, 4, 2, 2, 4);
  Mesh m = create_mesh(flat(2));
  const auto f = run_ulysses_forward(m, in.model, source(in, m), false);
  Mesh b = create_mesh(flat(2));
  const auto g = gathered(run_ulysses_backward(b, in.model, f.state, shard_sequence(Tensor({8, 4, 2}), b)));
  EXPECT_EQ(max_abs(g.dq) + max_abs(g.dk) + max_abs(g.dv), 0.0);
  EXPECT_THROW(run_ulysses_backward(b, in.model, UlyssesSavedState{}, shard_sequence(in.g, b)), LedgerError);
}

TEST(Ring, TwoBlocksMatchBruteForce) {
  const auto in = inputs(4, 1, 1, 2, 10);
  Mesh m = create_mesh({2, 1, 2, 2});
  const auto out = run_ring_forward(m, in.model, source(in, m), true);
  EXPECT_LE(max_abs_diff(out.gather(), brute_force_attention(in.q, in.k, in.v, true).out), 1e-12);
}

TEST(Ring, ShiftsKeysAndValuesOncePerStep) {
  const auto in = inputs(8, 2, 1, 2, 11);
  Mesh m = create_mesh({4, 1, 4, 2});
  run_ring_forward(m, in.model, source(in, m), false);
  for (std::size_t d = 0; d < 4; ++d) {
    std::size_t k = 0, v = 0;
    for (const auto& e : m.comm().device(d).entries) {
      EXPECT_EQ(e.kind, CollectiveKind::ring_shift);
      k += e.tensor == "k";
      v += e.tensor == "v";
    }
    EXPECT_EQ(k, 3u);
    EXPECT_EQ(v, 3u);
  }
  Mesh one = create_mesh(flat(1));
  const auto out = run_ring_forward(one, in.model, source(in, one), true);
  EXPECT_EQ(one.comm().total_sent(), 0u);
  EXPECT_EQ(out.gather(), reference_attention_forward(in.q, in.k, in.v, in.model.gqa(), true).out);
}

TEST(Hybrid, TwoByTwoSeedNineMatchesOracle) {
  const auto in = inputs(16, 4, 4, 2, 9);
  Mesh m = create_mesh({4, 2, 2, 2});
  const auto out = run_hybrid_forward(m, in.model, source(in, m), true);
  EXPECT_LE(max_abs_diff(out.gather(), brute_force_attention(in.q, in.k, in.v, true).out), 1e-9);
}

TEST(Hybrid, DegenerateFactorisationsReduceToUlyssesAndRing) {
  const auto in = inputs(8, 4, 2, 2, 12);
  Mesh ul = create_mesh(flat(4)), hy = create_mesh(flat(4));
  const auto a = run_ulysses_forward(ul, in.model, source(in, ul), true);
  const auto b = run_hybrid_forward(hy, in.model, source(in, hy), true);
  EXPECT_EQ(a.out.gather(), b.gather());
  EXPECT_EQ(ledger_report(ul), ledger_report(hy));
  Mesh rg = create_mesh({4, 1, 4, 2}), hr = create_mesh({4, 1, 4, 2});
  const auto c = run_ring_forward(rg, in.model, source(in, rg), true);
  const auto d = run_hybrid_forward(hr, in.model, source(in, hr), true);
  EXPECT_LE(max_abs_diff(c.gather(), d.gather()), 1e-12);
}

TEST(GqaSchedule, SixteenFourFourWalkthrough) {
  const auto s = build_gqa_schedule(16, 4, 4, 4);
  ASSERT_EQ(s.stage_count(), 4u);
  EXPECT_TRUE(s.grouped);
  EXPECT_FALSE(s.naive_fallback);
  EXPECT_EQ(s.stages[0].q_heads, (std::vector<std::size_t>{0, 4, 8, 12}));
  EXPECT_EQ(s.stages[0].kv_heads_to_send, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(s.stages[1].q_heads, (std::vector<std::size_t>{1, 5, 9, 13}));
  EXPECT_TRUE(s.stages[1].kv_heads_to_send.empty());
  EXPECT_EQ(s.placement[13], (HeadSlot{1, 3}));
  EXPECT_TRUE(schedule_violations(s).empty());
}

TEST(GqaSchedule, EightKvHeadsOnEightDevicesIsOneSuperStage) {
  const auto s = build_gqa_schedule(32, 8, 8, 8);
  EXPECT_EQ(s.stage_count(), 4u);
  EXPECT_EQ(s.super_stage_length, 4u);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_TRUE(s.stages[i].kv_heads_to_send.empty());
}

TEST(GqaSchedule, MhaEqualsNaiveAndIndivisibleKvFallsBack) {
  EXPECT_EQ(build_gqa_schedule(8, 8, 4, 4), sequential_schedule(8, 8, 4));
  const auto fb = build_gqa_schedule(16, 2, 4, 4);
  EXPECT_TRUE(fb.naive_fallback);
  EXPECT_FALSE(fb.grouped);
  EXPECT_EQ(fb.stages[0].kv_heads_to_send, (std::vector<std::size_t>{0, 0, 0, 0}));
}

// Property: every schedule the engine can pick satisfies the three schedule
// invariants, and grouping beats naive whenever R > 1.
TEST(GqaSchedule, InvariantsHoldAcrossShapes) {
  for (std::size_t c : {1, 2, 4, 8}) {
    for (std::size_t hq : {4, 8, 16, 32}) {
      if (hq % c != 0) continue;
      for (std::size_t hkv = 1; hkv <= hq; hkv *= 2) {
        for (std::size_t u = c; u <= hq; u *= 2) {
          const auto s = upipe_schedule(hq, hkv, c, u);
          const auto v = schedule_violations(s);
          EXPECT_TRUE(v.empty()) << hq << "/" << hkv << "/" << c << " U=" << u << ": " << (v.empty() ? "" : v[0]);
        }
        if (hkv % c == 0 && hq / hkv > 1 && c > 1) {
          EXPECT_LT(gqa_comm_volume(hq, hkv, c, true), gqa_comm_volume(hq, hkv, c, false));
        }
      }
    }
  }
}

TEST(GqaSchedule, ViolationsAreReported) {
  auto s = build_gqa_schedule(16, 4, 4, 4);
  s.stages[1].q_heads[0] = 0;  // head 0 twice, head 1 never
  EXPECT_FALSE(schedule_violations(s).empty());
  auto t = build_gqa_schedule(16, 4, 4, 4);
  t.stages[0].kv_heads_to_send.clear();  // stage 0 relies on unsent key/values
  EXPECT_FALSE(schedule_violations(t).empty());
}

TEST(CommVolume, ClosedForms) {
  EXPECT_EQ(gqa_comm_volume(16, 4, 4, false), 36u);
  EXPECT_EQ(gqa_comm_volume(16, 4, 4, true), 18u);
  EXPECT_EQ(gqa_comm_volume(8, 8, 4, true), gqa_comm_volume(8, 8, 4, false));
  EXPECT_EQ(gqa_comm_volume(8, 2, 1, false), 0u);
}

TEST(UPipe, TwoStagesOnTwoDevicesReuseStageBuffers) {
  const auto in = inputs(8, 4, 4, 2, 13);
  Mesh m = create_mesh(flat(2));
  const auto f = run_upipe_forward(m, in.model, {2}, source(in, m), true);
  EXPECT_EQ(f.schedule.stage_count(), 2u);
  std::size_t q_allocs = 0, q_rebinds = 0;
  for (const auto& e : m.memory().device(0).events) {
    if (e.label != "q_stage") continue;
    q_allocs += e.kind == MemoryEventKind::alloc;
    q_rebinds += e.kind == MemoryEventKind::rebind && e.stage == 1;
  }
  EXPECT_EQ(q_allocs, 1u);
  EXPECT_EQ(q_rebinds, 1u);
  EXPECT_LE(max_abs_diff(f.out.gather(), brute_force_attention(in.q, in.k, in.v, true).out), 1e-9);
}

TEST(UPipe, SeedFiveMatchesOracleAndScalesIntermediatePeak) {
  const auto in = inputs(16, 8, 2, 2, 5);
  Mesh m = create_mesh(flat(2));
  const auto f = run_upipe_forward(m, in.model, {2}, source(in, m), true);
  EXPECT_LE(max_abs_diff(f.out.gather(), brute_force_attention(in.q, in.k, in.v, true).out), 1e-9);
  EXPECT_EQ(measured_head_transfers(m, in.model, 0), gqa_comm_volume(8, 2, 2, true));

  const auto mha = inputs(16, 8, 8, 2, 5);
  Mesh mu = create_mesh(flat(2)), mp = create_mesh(flat(2));
  run_ulysses_forward(mu, mha.model, source(mha, mu), true);
  run_upipe_forward(mp, mha.model, {2}, source(mha, mp), true);
  for (std::size_t d = 0; d < 2; ++d) {
    EXPECT_EQ(mp.memory().device(d).peak_intermediate * 8, mu.memory().device(d).peak_intermediate * 2);
  }
}

TEST(UPipe, MeasuredPhasesFollowTheCountedBuffers) {
  // S/C = 4, d_model = 8, 2 bytes: one unit is 64 bytes. nu = H_q/U = 2, so
  // a stage chunk is 32 bytes: before 1, inp 2 + 4/nu, kernel 2 + 3/nu,
  // out 1 + 2/nu units.
  const auto in = inputs(8, 4, 4, 2, 14);
  Mesh m = create_mesh(flat(2));
  run_upipe_forward(m, in.model, {2}, source(in, m), true);
  for (std::size_t d = 0; d < 2; ++d) {
    EXPECT_EQ(phase_peaks(m, d), (std::vector<std::uint64_t>{64, 128 + 4 * 32, 128 + 3 * 32, 64 + 2 * 32}));
  }
}

TEST(UPipe, GroupedScheduleHalvesTransfersOnSixteenFourFour) {
  const auto in = inputs(8, 16, 4, 1, 15);
  Mesh m = create_mesh(flat(4));
  const auto f = run_upipe_forward(m, in.model, {4}, source(in, m), false);
  EXPECT_TRUE(f.schedule.grouped);
  std::uint64_t total = 0;
  for (std::size_t d = 0; d < 4; ++d) {
    EXPECT_EQ(measured_head_transfers(m, in.model, d), 18u);
    for (const auto& e : m.comm().device(d).entries) {
      if (e.phase == Phase::inp_a2a) total += e.bytes_sent;
    }
  }
  // Mesh-wide bytes equal the count times one full-sequence head.
  EXPECT_EQ(total, 18u * 8 * 1 * 2);
  EXPECT_LE(max_abs_diff(f.out.gather(), brute_force_attention(in.q, in.k, in.v, false).out), 1e-9);
}

TEST(UPipe, AllHeadsInOneStageMatchesUlyssesComm) {
  const auto in = inputs(8, 4, 4, 2, 16);
  Mesh mu = create_mesh(flat(2)), mp = create_mesh(flat(2));
  const auto a = run_ulysses_forward(mu, in.model, source(in, mu), true);
  const auto b = run_upipe_forward(mp, in.model, {4}, source(in, mp), true);
  EXPECT_EQ(a.out.gather(), b.out.gather());
  for (std::size_t d = 0; d < 2; ++d) {
    EXPECT_EQ(mu.comm().device(d).bytes_sent, mp.comm().device(d).bytes_sent);
  }
  Mesh bu = create_mesh(flat(2)), bp = create_mesh(flat(2));
  const auto cot = shard_sequence(in.g, bu);
  const auto gu = gathered(run_ulysses_backward(bu, in.model, a.state, cot));
  const auto gp = gathered(run_upipe_backward(bp, in.model, {4}, b.state, cot));
  EXPECT_EQ(gu.dq, gp.dq);
  EXPECT_EQ(gu.dk, gp.dk);
  EXPECT_EQ(gu.dv, gp.dv);
}

TEST(UPipe, BackwardSeedFiveMatchesOracleAndFiniteDifferences) {
  const auto in = inputs(16, 8, 2, 2, 5);
  Mesh m = create_mesh(flat(2));
  const auto f = run_upipe_forward(m, in.model, {2}, source(in, m), true);
  Mesh b = create_mesh(flat(2));
  const auto got = gathered(run_upipe_backward(b, in.model, {2}, f.state, shard_sequence(in.g, b)));
  const auto want = brute_force_attention(in.q, in.k, in.v, true, &in.g);
  EXPECT_LE(gradient_max_abs_diff(got, {want.dq, want.dk, want.dv}), 1e-9);
  const auto fd = finite_difference_gradients(in.q, in.k, in.v, in.g, in.model.gqa(), true, 1e-5);
  EXPECT_LE(gradient_relative_error(got, fd), 1e-6);

  const auto zero = gathered(run_upipe_backward(b, in.model, {2}, f.state, shard_sequence(Tensor({16, 8, 2}), b)));
  EXPECT_EQ(max_abs(zero.dq) + max_abs(zero.dk) + max_abs(zero.dv), 0.0);
  EXPECT_THROW(run_upipe_backward(b, in.model, {2}, UPipeSavedState{}, shard_sequence(in.g, b)), LedgerError);
}

TEST(UPipe, ConfigViolationsNameTheConstraint) {
  const auto in = inputs(8, 4, 4, 2, 17);
  Mesh m = create_mesh(flat(2));
  try {
    run_upipe_forward(m, in.model, {3}, source(in, m), true);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("U divisible by C"), std::string::npos);
  }
  Mesh m4 = create_mesh(flat(4));
  EXPECT_THROW(run_upipe_forward(m4, {8, 12, 12, 2, 0, 0, 1}, {8}, source(inputs(8, 12, 12, 2, 1), m4), true),
               ConfigError);
}

// Property: later stages of a super-stage never exceed the first stage's
// intermediate peak. Ungrouped schedules form one super-stage.
TEST(UPipe, StageBuffersStayFlatWithinSuperStages) {
  std::size_t checked = 0;
  for (std::uint64_t i = 0; i < 60; ++i) {
    const auto c = engine_case(i);
    if (c.model.q_heads / c.heads_per_stage < 2) continue;
    const auto in = inputs(c.model.seq_len, c.model.q_heads, c.model.kv_heads, c.model.head_dim, c.seed);
    Mesh m = create_mesh(flat(c.devices));
    const auto f = run_upipe_forward(m, in.model, {c.heads_per_stage}, source(in, m), c.causal);
    const auto& events = m.memory().device(0).events;
    const std::size_t len = f.schedule.grouped ? f.schedule.super_stage_length : f.schedule.stage_count();
    for (std::size_t first = 0; first < f.schedule.stage_count(); first += len) {
      std::uint64_t peak0 = 0;
      for (const auto& e : events) {
        if (e.stage == static_cast<int>(first) && e.phase != Phase::out_a2a) peak0 = std::max(peak0, e.live_intermediate);
      }
      for (const auto& e : events) {
        checked += e.stage > static_cast<int>(first) && e.stage < static_cast<int>(first + len);
        if (e.phase == Phase::out_a2a || e.stage <= static_cast<int>(first) ||
            e.stage >= static_cast<int>(first + len)) {
          continue;
        }
        EXPECT_LE(e.live_intermediate, peak0) << c.describe();
      }
    }
  }
  EXPECT_GT(checked, 0u);
}

// Property: every engine agrees with the brute-force oracle on random valid
// configurations, forward and (Ulysses, UPipe) backward.
TEST(Engines, RandomConfigurationsMatchBruteForce) {
  for (std::uint64_t i = 0; i < 80; ++i) {
    const auto c = engine_case(i);
    const auto in = inputs(c.model.seq_len, c.model.q_heads, c.model.kv_heads, c.model.head_dim, c.seed);
    const auto want = brute_force_attention(in.q, in.k, in.v, c.causal, &in.g);
    Mesh mu = create_mesh(flat(c.devices));
    const auto u = run_ulysses_forward(mu, in.model, source(in, mu), c.causal);
    EXPECT_LE(max_abs_diff(u.out.gather(), want.out), 1e-9) << "ulysses " << c.describe();
    Mesh mr = create_mesh({c.devices, 1, c.devices, 2});
    EXPECT_LE(max_abs_diff(run_ring_forward(mr, in.model, source(in, mr), c.causal).gather(), want.out), 1e-9)
        << "ring " << c.describe();
    const std::size_t a = c.devices >= 2 ? 2 : 1;
    Mesh mh = create_mesh({c.devices, a, c.devices / a, 2});
    EXPECT_LE(max_abs_diff(run_hybrid_forward(mh, in.model, source(in, mh), c.causal).gather(), want.out), 1e-9)
        << "hybrid " << c.describe();
    Mesh mp = create_mesh(flat(c.devices));
    const auto p = run_upipe_forward(mp, in.model, {c.heads_per_stage}, source(in, mp), c.causal);
    EXPECT_LE(max_abs_diff(p.out.gather(), want.out), 1e-9) << "upipe " << c.describe();

    const AttentionGrads ref{want.dq, want.dk, want.dv};
    Mesh bu = create_mesh(flat(c.devices));
    const auto cot = shard_sequence(in.g, bu);
    EXPECT_LE(gradient_max_abs_diff(gathered(run_ulysses_backward(bu, in.model, u.state, cot)), ref), 1e-9)
        << "ulysses backward " << c.describe();
    Mesh bp = create_mesh(flat(c.devices));
    EXPECT_LE(gradient_max_abs_diff(gathered(run_upipe_backward(bp, in.model, {c.heads_per_stage}, p.state, cot)),
                                    ref),
              1e-9)
        << "upipe backward " << c.describe();
  }
}

TEST(QkvSource, ProjectedStagesEqualGlobalProjection) {
  const ModelConfig model{8, 4, 2, 2, 0, 0, 1};
  Rng rng(21);
  const Tensor x = rng.uniform({8, 8});
  const Projection w{rng.uniform({8, 8}), rng.uniform({8, 4}), rng.uniform({8, 4})};
  const auto global = project_global(x, w, model);
  const auto want = brute_force_attention(global.q, global.k, global.v, true);
  Mesh m = create_mesh(flat(2));
  const auto src = QkvSource::projected(shard_sequence(x, m), w, 2);
  const auto f = run_upipe_forward(m, model, {2}, src, true);
  EXPECT_LE(max_abs_diff(f.out.gather(), want.out), 1e-9);
  EXPECT_LE(max_abs_diff(src.all_k().gather(), global.k), 1e-12);
  EXPECT_THROW(project_global(Tensor({8, 6}), w, model), ShapeError);
}

}  // namespace
}  // namespace cpsim

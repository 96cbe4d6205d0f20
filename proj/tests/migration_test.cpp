/* Copyright 2026 The Duet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "duet/migration.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "duet/cost.hpp"

namespace duet {
namespace {

std::vector<double> steady(int n, double rate, double t0 = 0.0) {
  std::vector<double> g(n);
  for (int i = 0; i < n; ++i) g[i] = t0 + i / rate;
  return g;
}

// Consumer that reads token i at its slot g_0 + i / r_c, or as soon as it
// exists when generation lags. Walks generation events one at a time and
// returns the first event where the unread backlog reaches B.
int64_t tick_trigger(const std::vector<double>& g, double r_c, int64_t B) {
  int64_t read = 0;
  for (size_t i = 0; i < g.size(); ++i) {
    while (read <= static_cast<int64_t>(i)) {
      double t = std::max(g[static_cast<size_t>(read)], g[0] + static_cast<double>(read) / r_c);
      if (t > g[i]) break;
      ++read;
    }
    if (static_cast<int64_t>(i) + 1 - read >= B) return static_cast<int64_t>(i);
  }
  return -1;
}

double max_gap(const std::vector<double>& d) {
  double m = 0.0;
  for (size_t i = 1; i < d.size(); ++i) m = std::max(m, d[i] - d[i - 1]);
  return m;
}

TEST(MigrationGain, ProductAndZero) {
  EXPECT_DOUBLE_EQ(migration_gain(0.5, 100), 50.0);
  EXPECT_DOUBLE_EQ(migration_gain(0.5, 0), 0.0);
  EXPECT_THROW(migration_gain(0.5, -1), Error);
}

TEST(MigrationGain, BreakEvenExchangeRate) {
  // Server decode at GPT-4o-mini output price against device decode priced
  // through lambda. The gain sign flips at lambda* = c_s * 1e6 / flops.
  const double c_s = 0.60e-6;
  const double flops = static_cast<double>(flops_per_token_total(bloom_1b1(), 128, Phase::kDecode));
  auto delta = [&](double lambda) { return c_s - flops_to_dollars(flops, lambda); };
  double lo = 0.0, hi = 1.0;
  ASSERT_GT(delta(lo), 0.0);
  ASSERT_LT(delta(hi), 0.0);
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    (delta(mid) > 0.0 ? lo : hi) = mid;
  }
  EXPECT_NEAR(lo, c_s * 1e6 / flops, 1e-15);
  EXPECT_GT(migration_gain(delta(0.5 * lo), 100), 0.0);
  EXPECT_LT(delta(2.0 * lo), 0.0);
}

TEST(ShouldMigrate, StrictAndMonotoneSweep) {
  EXPECT_TRUE(should_migrate(50, 10));
  EXPECT_FALSE(should_migrate(10, 10));
  // Overhead is the target prefill of prompt + generated prefix; the gain
  // shrinks as generation proceeds. Find the flip point by sweeping.
  const double dc = 1e-6, prefill = 2e-7;
  const int64_t prompt = 50, out = 128;
  int64_t flips = 0, last_true = -1;
  bool prev = true;
  for (int64_t gen = 0; gen <= out; ++gen) {
    bool go = should_migrate(migration_gain(dc, out - gen), prefill * (prompt + gen));
    if (go) last_true = gen;
    if (go != prev) ++flips;
    if (go) EXPECT_TRUE(prev);
    prev = go;
  }
  EXPECT_EQ(flips, 1);
  // dc (out - g) > prefill (prompt + g)  <=>  g < (dc out - prefill prompt) / (dc + prefill)
  const double g_star = (dc * out - prefill * prompt) / (dc + prefill);
  EXPECT_EQ(last_true, static_cast<int64_t>(std::ceil(g_star)) - 1);
  for (double o = 0.0; o < 1e-4; o += 1e-6) {
    if (!should_migrate(3e-5, o)) EXPECT_FALSE(should_migrate(3e-5, o + 1e-6));
  }
}

TEST(BufferTarget, CeilingArithmetic) {
  EXPECT_EQ(buffer_target(4.0, 0.5), 2);
  EXPECT_EQ(buffer_target(4.0, 0.0), 0);
  EXPECT_EQ(buffer_target(4.5, 1.0), 5);
  EXPECT_EQ(buffer_target(3.0, 0.1 * 10), 3);
  EXPECT_THROW(buffer_target(0.0, 1.0), Error);
}

TEST(PacedDelivery, NeverFasterThanConsumer) {
  auto g = steady(20, 10.0);
  auto d = paced_delivery(g, 4.0);
  for (size_t i = 0; i < d.size(); ++i) {
    EXPECT_NEAR(d[i], 0.25 * static_cast<double>(i), 1e-12);
    EXPECT_GE(d[i], g[i]);
  }
  EXPECT_EQ(paced_delivery(g, 0.0), g);
}

TEST(ScheduleHandoff, TickOracleTrigger) {
  auto g = steady(64, 10.0);
  MigrationParams p{4.0, 10.0, 0.5, 1e-6, 0.0};
  HandoffState s{g, 1, 10.0, std::nullopt};
  auto plan = schedule_handoff(p, s);
  ASSERT_TRUE(plan.migrated);
  EXPECT_EQ(plan.buffer_target, 2);
  const int64_t oracle = tick_trigger(g, 4.0, 2);
  EXPECT_EQ(plan.start_after_token, oracle);
  EXPECT_NEAR(plan.trigger_s, g[static_cast<size_t>(oracle)], 1e-12);
  EXPECT_NEAR(plan.trigger_s, 0.2, 1e-12);
  EXPECT_NEAR(plan.target_ready_s, 0.7, 1e-12);
  // Source keeps producing until the target is live.
  EXPECT_LT(g[static_cast<size_t>(plan.source_stop_token)], plan.target_ready_s);
  EXPECT_GE(g[static_cast<size_t>(plan.source_stop_token) + 1], plan.target_ready_s - 1e-12);
  auto delivered = paced_delivery(plan.gen_s, 4.0);
  EXPECT_LE(max_gap(delivered), 0.25 + 1e-9);
  EXPECT_EQ(plan.delayed_tokens, 0);
  EXPECT_EQ(plan.gen_s.size(), g.size());
}

TEST(ScheduleHandoff, TickOracleOnRandomTimelines) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> rate(5.0, 40.0), tm(0.0, 3.0);
  std::exponential_distribution<double> jitter(50.0);
  for (int trial = 0; trial < 300; ++trial) {
    const double rg = rate(rng);
    std::vector<double> g(128);
    g[0] = 0.3;
    for (size_t i = 1; i < g.size(); ++i) g[i] = g[i - 1] + 1.0 / rg + 0.1 * jitter(rng) / rg;
    MigrationParams p{4.0, rg, tm(rng), 1e-6, 0.0};
    HandoffState s{g, 1, 12.0, std::nullopt};
    auto plan = schedule_handoff(p, s);
    int64_t oracle = tick_trigger(g, 4.0, buffer_target(4.0, p.t_m));
    if (plan.migrated) {
      EXPECT_EQ(plan.start_after_token, oracle);
      // Exact t_m: the buffer covers the gap, no slow deliveries.
      EXPECT_LE(max_gap(paced_delivery(plan.gen_s, 4.0)), 0.25 + 1e-9) << "trial " << trial;
      EXPECT_EQ(plan.delayed_tokens, 0);
    }
  }
}

TEST(ScheduleHandoff, ZeroMigrationTime) {
  auto g = steady(32, 10.0);
  MigrationParams p{4.0, 10.0, 0.0, 1e-6, 0.0};
  auto plan = schedule_handoff(p, HandoffState{g, 1, 10.0, std::nullopt});
  ASSERT_TRUE(plan.migrated);
  EXPECT_EQ(plan.buffer_target, 0);
  EXPECT_EQ(plan.delayed_tokens, 0);
  EXPECT_NEAR(plan.trigger_s, g[0], 1e-12);
}

TEST(ScheduleHandoff, UnderestimatedLatencyStallIsBounded) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> rate(6.0, 40.0), tm(0.05, 2.0);
  for (int trial = 0; trial < 500; ++trial) {
    const double rg = rate(rng), t_m = tm(rng);
    auto g = steady(128, rg, 0.5);
    MigrationParams p{4.0, rg, t_m, 1e-6, 0.0};
    auto plan = schedule_handoff(p, HandoffState{g, 1, rg, 2.0 * t_m});
    if (!plan.migrated) continue;
    EXPECT_LE(plan.delayed_tokens, buffer_target(4.0, t_m) + 1) << "trial " << trial;
  }
}

TEST(ScheduleHandoff, RefusedWithoutSurplusOrWhenSourceFinishes) {
  auto slow = steady(64, 3.0);
  EXPECT_FALSE(schedule_handoff({4.0, 3.0, 0.5, 1, 0}, HandoffState{slow, 1, 10.0, std::nullopt}).migrated);
  auto short_run = steady(4, 10.0);
  EXPECT_FALSE(schedule_handoff({4.0, 10.0, 5.0, 1, 0}, HandoffState{short_run, 1, 10.0, std::nullopt}).migrated);
}

TEST(ScheduleHandoff, SequenceIntegrity) {
  auto g = steady(100, 15.0);
  auto plan = schedule_handoff({4.0, 15.0, 1.2, 1, 0}, HandoffState{g, 1, 8.0, std::nullopt});
  ASSERT_TRUE(plan.migrated);
  ASSERT_EQ(plan.gen_s.size(), g.size());
  for (size_t i = 1; i < plan.gen_s.size(); ++i) EXPECT_GT(plan.gen_s[i], plan.gen_s[i - 1]);
  EXPECT_GE(plan.gen_s[static_cast<size_t>(plan.source_stop_token) + 1], plan.target_ready_s);
}

TEST(TransferPayload, SharedVocabAndFallback) {
  std::vector<GeneratedToken> toks;
  for (int i = 0; i < 12; ++i) toks.push_back({100 + i, "w" + std::to_string(i) + " "});
  auto ids = token_id_payload("r1", "hello", toks, true);
  ASSERT_TRUE(ids.prefix_ids.has_value());
  EXPECT_EQ(ids.prefix_ids->size(), 12u);
  EXPECT_FALSE(ids.prefix_text.has_value());
  EXPECT_EQ(ids.next_index, 12);
  auto text = token_id_payload("r1", "hello", toks, false);
  ASSERT_TRUE(text.prefix_text.has_value());
  EXPECT_EQ(text.prefix_text->substr(0, 6), "w0 w1 ");
  auto back = payload_from_json(to_json(ids));
  EXPECT_EQ(*back.prefix_ids, *ids.prefix_ids);
}

TEST(TransferPayload, SizeLinearInPrefixWithNoState) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int64_t> id(10000, 99999);
  for (int n : {1, 10, 100, 1000}) {
    std::vector<GeneratedToken> toks(n);
    for (auto& t : toks) t.id = id(rng);
    auto j = to_json(token_id_payload("r", "p", toks, true));
    const auto bytes = j.dump().size();
    EXPECT_EQ(bytes, to_json(token_id_payload("r", "p", {}, true)).dump().size() + 6 * n - (n > 0 ? 1 : 0) +
                         std::to_string(n).size() - 1);
    for (const auto& [k, v] : j.items()) {
      EXPECT_TRUE(k == "req_id" || k == "prompt" || k == "next_index" || k == "prefix_ids") << k;
    }
  }
}

}  // namespace
}  // namespace duet

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

// Mid-stream decode migration. A token buffer of B = r_c * t_m tokens
// built from the surplus of generation speed over consumption speed hides
// the time the target endpoint needs to come online.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "duet/error.hpp"

namespace duet {

enum class Endpoint { kDevice, kServer };

inline std::string_view to_string(Endpoint e) { return e == Endpoint::kDevice ? "device" : "server"; }
inline Endpoint other(Endpoint e) { return e == Endpoint::kDevice ? Endpoint::kServer : Endpoint::kDevice; }

struct MigrationParams {
  double r_c = 4.0;                // consumption rate, tokens / s
  double r_g_source = 0.0;         // source generation rate, tokens / s
  double t_m = 0.0;                // estimated time for the target to come online, s
  double delta_decode_cost = 0.0;  // |c^d_s - c^d_d|, $ / token
  double overhead_cost = 0.0;      // $ to bring the target online
};

// C_migration = delta_c * l_remaining
inline double migration_gain(double delta_decode_cost, double l_remaining) {
  if (l_remaining < 0) throw invalid_argument("remaining length must be non-negative");
  return delta_decode_cost * l_remaining;
}

inline bool should_migrate(double gain, double overhead_cost) { return gain > overhead_cost; }

// ceil(r_c * t_m) whole tokens.
inline int64_t buffer_target(double r_c, double t_m) {
  if (!(r_c > 0.0)) throw invalid_argument("consumption rate must be positive");
  if (!(t_m >= 0.0)) throw invalid_argument("migration time must be non-negative");
  double x = r_c * t_m;
  return std::max<int64_t>(0, static_cast<int64_t>(std::ceil(x - 1e-9 * std::max(1.0, x))));
}

// Delivery to the consumer: token i goes out at max(g_i, g_0 + i / r_c), so
// the stream never runs ahead of the reading pace and catches up after a
// stall. r_c <= 0 passes tokens through as generated.
inline std::vector<double> paced_delivery(std::span<const double> gen_s, double r_c) {
  std::vector<double> out(gen_s.begin(), gen_s.end());
  if (out.empty() || !(r_c > 0.0)) return out;
  const double start = gen_s.front();
  for (size_t i = 1; i < out.size(); ++i) {
    out[i] = std::max(gen_s[i], start + static_cast<double>(i) / r_c);
  }
  return out;
}

// Tokens generated more than one pacing slot behind first_token + i / r_c.
inline int64_t count_delayed_tokens(std::span<const double> gen_s, double r_c) {
  if (gen_s.empty() || !(r_c > 0.0)) return 0;
  const double start = gen_s.front();
  int64_t n = 0;
  for (size_t i = 1; i < gen_s.size(); ++i) {
    double slot = start + static_cast<double>(i + 1) / r_c;
    if (gen_s[i] > slot + 1e-9) ++n;
  }
  return n;
}

struct HandoffState {
  // Generation times the source would produce if it ran to completion;
  // entry i is token i.
  std::span<const double> source_gen_s;
  // Tokens already generated when the handoff is planned (>= 1).
  int64_t generated = 1;
  double target_rate = 0.0;  // tokens / s once the target is live
  // Real time the target needs; unset means the estimate t_m is exact.
  std::optional<double> actual_latency_s;
};

struct HandoffPlan {
  bool migrated = false;
  int64_t buffer_target = 0;
  // Last token index in the prefix shipped to the target.
  int64_t start_after_token = -1;
  double trigger_s = 0.0;
  double target_ready_s = 0.0;
  // Last token produced by the source; the target continues from +1.
  int64_t source_stop_token = -1;
  int64_t delayed_tokens = 0;
  // Spliced generation timeline (source prefix then target suffix).
  std::vector<double> gen_s;
};

// Trigger fires at the first generation event where the undelivered buffer
// holds B tokens. The source keeps generating until the target is live, but
// it is released no later than the planned ready time trigger + t_m; if the
// target turns out slower than planned the consumer stalls on the buffer.
inline HandoffPlan schedule_handoff(const MigrationParams& params, const HandoffState& state) {
  if (!(params.r_c > 0.0)) throw invalid_argument("consumption rate must be positive");
  if (!(params.t_m >= 0.0)) throw invalid_argument("migration time must be non-negative");
  if (state.generated < 1) throw invalid_argument("handoff needs at least one generated token");

  HandoffPlan plan;
  plan.buffer_target = buffer_target(params.r_c, params.t_m);
  const auto& g = state.source_gen_s;
  const auto n = static_cast<int64_t>(g.size());
  // No surplus to build a buffer from, or nothing left to hand off.
  if (!(params.r_g_source > params.r_c) || !(state.target_rate > 0.0) || n <= state.generated) {
    return plan;
  }

  const auto pace = paced_delivery(g, params.r_c);
  int64_t delivered = 0;
  int64_t trigger = -1;
  for (int64_t i = state.generated - 1; i < n; ++i) {
    while (delivered <= i && pace[static_cast<size_t>(delivered)] <= g[static_cast<size_t>(i)]) {
      ++delivered;
    }
    if ((i + 1) - delivered >= plan.buffer_target) {
      trigger = i;
      break;
    }
  }
  if (trigger < 0) return plan;

  const double t_trigger = g[static_cast<size_t>(trigger)];
  const double actual = state.actual_latency_s.value_or(params.t_m);
  const double ready = t_trigger + actual;
  const double release = t_trigger + std::min(actual, params.t_m);

  int64_t stop = trigger;
  while (stop + 1 < n && g[static_cast<size_t>(stop + 1)] < release) ++stop;
  if (stop + 1 >= n) return plan;  // source finishes before the target is live

  plan.migrated = true;
  plan.start_after_token = trigger;
  plan.trigger_s = t_trigger;
  plan.target_ready_s = ready;
  plan.source_stop_token = stop;
  plan.gen_s.assign(g.begin(), g.begin() + stop + 1);
  const double first = std::max(ready, g[static_cast<size_t>(stop)] + 1.0 / state.target_rate);
  for (int64_t j = 0; stop + 1 + j < n; ++j) {
    plan.gen_s.push_back(first + static_cast<double>(j) / state.target_rate);
  }
  plan.delayed_tokens = count_delayed_tokens(plan.gen_s, params.r_c);
  return plan;
}

struct GeneratedToken {
  int64_t id = 0;
  std::string text;
};

// What crosses the wire on a handoff: token IDs when both endpoints share a
// vocabulary, detokenized text otherwise. Model state never travels.
struct TransferPayload {
  std::string req_id;
  std::string prompt;
  std::optional<std::vector<int64_t>> prefix_ids;
  std::optional<std::string> prefix_text;
  int64_t next_index = 0;
};

inline TransferPayload token_id_payload(std::string req_id, std::string prompt,
                                        std::span<const GeneratedToken> tokens, bool shared_vocab) {
  TransferPayload p;
  p.req_id = std::move(req_id);
  p.prompt = std::move(prompt);
  p.next_index = static_cast<int64_t>(tokens.size());
  if (shared_vocab) {
    std::vector<int64_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(t.id);
    p.prefix_ids = std::move(ids);
  } else {
    std::string text;
    for (const auto& t : tokens) text += t.text;
    p.prefix_text = std::move(text);
  }
  return p;
}

inline nlohmann::json to_json(const TransferPayload& p) {
  nlohmann::json j = {{"req_id", p.req_id}, {"prompt", p.prompt}, {"next_index", p.next_index}};
  if (p.prefix_ids) j["prefix_ids"] = *p.prefix_ids;
  if (p.prefix_text) j["prefix_text"] = *p.prefix_text;
  return j;
}

inline TransferPayload payload_from_json(const nlohmann::json& j) {
  try {
    TransferPayload p;
    p.req_id = j.at("req_id").get<std::string>();
    p.prompt = j.at("prompt").get<std::string>();
    p.next_index = j.at("next_index").get<int64_t>();
    if (j.contains("prefix_ids")) p.prefix_ids = j.at("prefix_ids").get<std::vector<int64_t>>();
    if (j.contains("prefix_text")) p.prefix_text = j.at("prefix_text").get<std::string>();
    if (!p.prefix_ids && !p.prefix_text) throw ParseError(0, "payload carries no prefix");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("transfer payload: ") + e.what());
  }
}

}  // namespace duet

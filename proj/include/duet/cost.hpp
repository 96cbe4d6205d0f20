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

// Unified cost accounting. Server usage is billed in dollars per token,
// device usage in FLOPs, and the exchange rate lambda ($ per million FLOPs)
// puts both on one scale.

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "duet/error.hpp"

namespace duet {

struct ModelArch {
  std::string name;
  int64_t n_layers = 0;
  int64_t d_model = 0;
  int64_t n_heads = 0;
  int64_t d_ffn = 0;
  int64_t vocab = 0;
};

inline void validate(const ModelArch& a) {
  if (a.n_layers <= 0 || a.d_model <= 0 || a.n_heads <= 0 || a.d_ffn <= 0 || a.vocab <= 0) {
    throw invalid_argument("model arch fields must be positive");
  }
  if (a.d_model % a.n_heads != 0) throw invalid_argument("d_model must be divisible by n_heads");
}

// Layer shapes are the published ones; vocabularies are the tokenizer sizes
// shipped with each checkpoint.
inline ModelArch bloom_1b1() { return {"bloom-1.1b", 24, 1024, 16, 4096, 250880}; }
inline ModelArch bloom_560m() { return {"bloom-560m", 24, 512, 8, 2048, 250880}; }
inline ModelArch qwen15_0b5() { return {"qwen1.5-0.5b", 24, 768, 12, 2048, 151936}; }

inline std::vector<ModelArch> arch_presets() { return {bloom_1b1(), bloom_560m(), qwen15_0b5()}; }

inline ModelArch arch_preset(std::string_view name) {
  for (auto& a : arch_presets()) {
    if (a.name == name) return a;
  }
  throw invalid_argument("unknown model arch preset '" + std::string(name) + "'");
}

enum class Phase { kPrefill, kDecode };

// n_layers * (3d^2 + L^2 d / h + L d + d^2)
inline int64_t flops_attention_prefill(const ModelArch& a, int64_t L) {
  if (L < 1) throw invalid_argument("sequence length must be >= 1");
  const int64_t d = a.d_model;
  return a.n_layers * (3 * d * d + L * L * d / a.n_heads + L * d + d * d);
}

// KV caching removes the quadratic term: n_layers * (3d^2 + L d / h + L d + d^2)
inline int64_t flops_attention_decode(const ModelArch& a, int64_t L) {
  if (L < 1) throw invalid_argument("context length must be >= 1");
  const int64_t d = a.d_model;
  return a.n_layers * (3 * d * d + L * d / a.n_heads + L * d + d * d);
}

struct FlopsBreakdown {
  int64_t attention = 0;
  int64_t ffn = 0;
  int64_t layernorm = 0;
  int64_t embedding = 0;
  int64_t output = 0;

  int64_t total() const { return attention + ffn + layernorm + embedding + output; }
};

// Per-token FLOPs. Only attention has a published closed form; FFN is two
// d x d_ffn projections per layer, LayerNorm 2 * (2d) per layer, and the
// embedding and output projections d * vocab each.
inline FlopsBreakdown flops_breakdown(const ModelArch& a, int64_t L, Phase phase) {
  validate(a);
  FlopsBreakdown f;
  f.attention = phase == Phase::kPrefill ? flops_attention_prefill(a, L) : flops_attention_decode(a, L);
  f.ffn = a.n_layers * 2 * a.d_model * a.d_ffn;
  f.layernorm = a.n_layers * 2 * (2 * a.d_model);
  f.embedding = a.d_model * a.vocab;
  f.output = a.d_model * a.vocab;
  return f;
}

inline int64_t flops_per_token_total(const ModelArch& a, int64_t L, Phase phase) {
  return flops_breakdown(a, L, phase).total();
}

// Per-token rates. Device rates are FLOPs per token; when `arch` is set the
// end-to-end reports use the calculator instead of the constants.
struct CostRates {
  double server_prefill = 0.0;  // $ / token
  double server_decode = 0.0;   // $ / token
  double device_prefill = 0.0;  // FLOPs / token
  double device_decode = 0.0;   // FLOPs / token
  double lambda = 0.0;          // $ / million FLOPs
  std::optional<ModelArch> arch;
};

inline constexpr double kLambdaServerConstrained = 0.3;
inline constexpr double kLambdaDeviceConstrained = 5.0;
inline constexpr int64_t kCostGenerationCap = 128;

inline void validate(const CostRates& r) {
  for (double v : {r.server_prefill, r.server_decode, r.device_prefill, r.device_decode, r.lambda}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw invalid_argument("cost rates must be non-negative");
  }
  if (r.arch) validate(*r.arch);
}

// All four per-token costs in dollars.
struct UnitCosts {
  double server_prefill = 0.0;
  double server_decode = 0.0;
  double device_prefill = 0.0;
  double device_decode = 0.0;
};

inline double flops_to_dollars(double flops, double lambda) { return lambda * flops / 1e6; }

inline UnitCosts unit_costs(const CostRates& r) {
  return {r.server_prefill, r.server_decode, flops_to_dollars(r.device_prefill, r.lambda),
          flops_to_dollars(r.device_decode, r.lambda)};
}

// FLOPs to prefill a whole prompt of `prompt_len` tokens on the device.
inline double device_prefill_flops(const CostRates& r, int64_t prompt_len) {
  if (r.arch) {
    return static_cast<double>(flops_per_token_total(*r.arch, prompt_len, Phase::kPrefill)) *
           static_cast<double>(prompt_len);
  }
  return r.device_prefill * static_cast<double>(prompt_len);
}

// FLOPs for one decode step at context length `context_len`.
inline double device_decode_flops(const CostRates& r, int64_t context_len) {
  if (r.arch) {
    return static_cast<double>(flops_per_token_total(*r.arch, std::max<int64_t>(1, context_len),
                                                     Phase::kDecode));
  }
  return r.device_decode;
}

inline double unified_request_cost(const CostRates& rates, double server_prefill_toks,
                                   double server_decode_toks, double device_prefill_flops,
                                   double device_decode_flops) {
  if (server_prefill_toks < 0 || server_decode_toks < 0 || device_prefill_flops < 0 ||
      device_decode_flops < 0) {
    throw invalid_argument("usage counts must be non-negative");
  }
  return rates.server_prefill * server_prefill_toks + rates.server_decode * server_decode_toks +
         flops_to_dollars(device_prefill_flops + device_decode_flops, rates.lambda);
}

// Per-request usage on both endpoints.
struct UsageLedger {
  double server_prefill_tokens = 0.0;
  double server_decode_tokens = 0.0;
  double device_prefill_flops = 0.0;
  double device_decode_flops = 0.0;

  UsageLedger& operator+=(const UsageLedger& o) {
    server_prefill_tokens += o.server_prefill_tokens;
    server_decode_tokens += o.server_decode_tokens;
    device_prefill_flops += o.device_prefill_flops;
    device_decode_flops += o.device_decode_flops;
    return *this;
  }

  double cost(const CostRates& rates) const {
    return unified_request_cost(rates, server_prefill_tokens, server_decode_tokens,
                                device_prefill_flops, device_decode_flops);
  }
};

inline nlohmann::json to_json(const UsageLedger& u) {
  return {{"server_prefill_tokens", u.server_prefill_tokens},
          {"server_decode_tokens", u.server_decode_tokens},
          {"device_prefill_flops", u.device_prefill_flops},
          {"device_decode_flops", u.device_decode_flops}};
}

enum class ConstraintKind { kDeviceConstrained, kServerConstrained };

inline std::string_view to_string(ConstraintKind k) {
  return k == ConstraintKind::kDeviceConstrained ? "device" : "server";
}

inline ConstraintKind parse_constraint(std::string_view s) {
  if (s == "device" || s == "device-constrained") return ConstraintKind::kDeviceConstrained;
  if (s == "server" || s == "server-constrained") return ConstraintKind::kServerConstrained;
  throw invalid_argument("unknown constraint kind '" + std::string(s) + "'");
}

struct BudgetSpec {
  double b = 0.5;
  double alpha = 0.05;
  ConstraintKind constrained = ConstraintKind::kServerConstrained;
};

inline void validate(const BudgetSpec& s) {
  if (!(s.b >= 0.0 && s.b <= 1.0)) throw invalid_argument("budget ratio b must be in [0, 1]");
  if (!(s.alpha > 0.0 && s.alpha < 1.0)) throw invalid_argument("tail ratio alpha must be in (0, 1)");
}

// Dollars per million tokens, as vendors publish them.
struct PriceEntry {
  std::string model;
  std::string vendor;
  double input_per_mtok = 0.0;
  double output_per_mtok = 0.0;

  double input_per_token() const { return input_per_mtok / 1e6; }
  double output_per_token() const { return output_per_mtok / 1e6; }
};

// Public list prices, October 2024.
inline std::vector<PriceEntry> default_price_table() {
  return {
      {"DeepSeek-V2.5", "DeepSeek", 0.14, 0.28},
      {"GPT-4o-mini", "OpenAI", 0.15, 0.60},
      {"LLaMa-3.1-70b", "Hyperbolic", 0.40, 0.40},
      {"LLaMa-3.1-70b", "Amazon", 0.99, 0.99},
      {"Command", "Cohere", 1.25, 2.00},
      {"GPT-4o", "OpenAI", 2.50, 10.0},
      {"Claude-3.5-Sonnet", "Anthropic", 3.00, 15.0},
      {"o1-preview", "OpenAI", 15.0, 60.0},
  };
}

inline std::vector<PriceEntry> price_table_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ParseError(0, "pricing table must be a JSON array");
  std::vector<PriceEntry> out;
  for (const auto& row : j) {
    try {
      PriceEntry e;
      e.model = row.at("model").get<std::string>();
      e.vendor = row.value("vendor", "");
      e.input_per_mtok = row.at("input_per_mtok").get<double>();
      e.output_per_mtok = row.at("output_per_mtok").get<double>();
      if (e.input_per_mtok < 0 || e.output_per_mtok < 0) throw ParseError(0, "negative price");
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(0, std::string("pricing table: ") + e.what());
    }
  }
  return out;
}

inline PriceEntry find_price(const std::vector<PriceEntry>& table, std::string_view model,
                             std::string_view vendor = {}) {
  for (const auto& e : table) {
    if (e.model == model && (vendor.empty() || e.vendor == vendor)) return e;
  }
  throw invalid_argument("no price for model '" + std::string(model) + "'");
}

// Config block:
//   {"server_model": "GPT-4o-mini"} or
//   {"server_prefill_per_mtok": .., "server_decode_per_mtok": ..},
//   plus "device_arch" and/or "device_prefill_flops" / "device_decode_flops",
//   and "lambda" ($ per million FLOPs).
// With an arch and no explicit FLOPs, the per-token constants are the
// calculator's values at the cost generation cap.
inline CostRates rates_from_json(const nlohmann::json& j) {
  try {
    CostRates r;
    if (j.contains("server_model")) {
      auto p = find_price(default_price_table(), j.at("server_model").get<std::string>(),
                          j.value("server_vendor", ""));
      r.server_prefill = p.input_per_token();
      r.server_decode = p.output_per_token();
    } else {
      r.server_prefill = j.at("server_prefill_per_mtok").get<double>() / 1e6;
      r.server_decode = j.at("server_decode_per_mtok").get<double>() / 1e6;
    }
    if (j.contains("device_arch")) {
      r.arch = arch_preset(j.at("device_arch").get<std::string>());
      r.device_prefill = static_cast<double>(flops_per_token_total(*r.arch, kCostGenerationCap, Phase::kPrefill));
      r.device_decode = static_cast<double>(flops_per_token_total(*r.arch, kCostGenerationCap, Phase::kDecode));
    }
    if (j.contains("device_prefill_flops")) r.device_prefill = j.at("device_prefill_flops").get<double>();
    if (j.contains("device_decode_flops")) r.device_decode = j.at("device_decode_flops").get<double>();
    if (!r.arch && !(j.contains("device_prefill_flops") && j.contains("device_decode_flops"))) {
      throw invalid_argument("rates need device_arch or device_prefill_flops + device_decode_flops");
    }
    r.lambda = j.at("lambda").get<double>();
    validate(r);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw invalid_argument(std::string("rates config: ") + e.what());
  }
}

inline nlohmann::json to_json(const CostRates& r) {
  nlohmann::json j = {{"server_prefill_per_mtok", r.server_prefill * 1e6},
                      {"server_decode_per_mtok", r.server_decode * 1e6},
                      {"device_prefill_flops", r.device_prefill},
                      {"device_decode_flops", r.device_decode},
                      {"lambda", r.lambda}};
  if (r.arch) j["device_arch"] = r.arch->name;
  return j;
}

}  // namespace duet

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

// Dispatch policies. Under a server budget, short prompts run on the device
// alone and long prompts race both endpoints. Under a device budget, every
// request goes to the server and the device joins after a length-dependent
// wait.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "duet/cost.hpp"
#include "duet/error.hpp"
#include "duet/profiles.hpp"
#include "duet/workload.hpp"

namespace duet {

inline constexpr int64_t kNoThreshold = std::numeric_limits<int64_t>::max();
inline constexpr double kNever = std::numeric_limits<double>::infinity();

// Empirical prompt-length distribution p(l). Weights are kept unnormalized
// (sample counts for traces) so token sums stay exact.
class LengthDistribution {
 public:
  LengthDistribution() = default;

  static LengthDistribution from_lengths(std::span<const int64_t> lengths) {
    std::map<int64_t, double> counts;
    for (int64_t l : lengths) {
      if (l < 1) throw invalid_argument("prompt lengths must be positive");
      counts[l] += 1.0;
    }
    return from_map(counts);
  }

  static LengthDistribution from_weights(std::span<const std::pair<int64_t, double>> weighted) {
    std::map<int64_t, double> merged;
    for (const auto& [l, w] : weighted) {
      if (l < 1) throw invalid_argument("prompt lengths must be positive");
      if (!(w >= 0.0) || !std::isfinite(w)) throw invalid_argument("length weights must be non-negative");
      if (w > 0.0) merged[l] += w;
    }
    return from_map(merged);
  }

  static LengthDistribution from_trace(const Trace& trace) {
    auto lengths = prompt_lengths(trace);
    return from_lengths(lengths);
  }

  bool empty() const { return lengths_.empty(); }
  size_t support_size() const { return lengths_.size(); }
  const std::vector<int64_t>& lengths() const { return lengths_; }
  const std::vector<double>& weights() const { return weights_; }
  double total_weight() const { return total_weight_; }
  // sum_l l * w(l)
  double total_tokens() const { return total_tokens_; }
  double prob(size_t i) const { return weights_[i] / total_weight_; }
  double mean() const { return total_tokens_ / total_weight_; }

 private:
  static LengthDistribution from_map(const std::map<int64_t, double>& m) {
    LengthDistribution d;
    for (const auto& [l, w] : m) {
      d.lengths_.push_back(l);
      d.weights_.push_back(w);
      d.total_weight_ += w;
      d.total_tokens_ += static_cast<double>(l) * w;
    }
    return d;
  }

  std::vector<int64_t> lengths_;
  std::vector<double> weights_;
  double total_weight_ = 0.0;
  double total_tokens_ = 0.0;
};

// Algorithm 1: a device-constrained scenario is one where even the cheapest
// device token costs more than the dearest server token. Ties go to the
// server side.
inline ConstraintKind classify(const UnitCosts& u) {
  return std::min(u.device_prefill, u.device_decode) > std::max(u.server_prefill, u.server_decode)
             ? ConstraintKind::kDeviceConstrained
             : ConstraintKind::kServerConstrained;
}

inline ConstraintKind classify(const CostRates& rates) { return classify(unit_costs(rates)); }

// Server-constrained plan: prompts with length <= l_th run on the device
// only, longer prompts race both endpoints.
struct ExecPlan {
  int64_t l_th = kNoThreshold;

  bool concurrent(int64_t prompt_len) const { return prompt_len > l_th; }
};

// l_th is the smallest support length whose cumulative prompt tokens reach
// (1 - b) of the total, i.e. the first point where the server share of the
// remaining longer prompts fits in b. The crossing length itself stays
// device-only, so the server share never exceeds b.
inline ExecPlan plan_server_constrained(const LengthDistribution& dist, double b) {
  if (dist.empty()) throw invalid_argument("length distribution is empty");
  if (!(b >= 0.0 && b <= 1.0)) throw invalid_argument("budget ratio b must be in [0, 1]");
  if (b >= 1.0) return ExecPlan{0};
  if (b <= 0.0) return ExecPlan{kNoThreshold};
  const double total = dist.total_tokens();
  const double allowance = b * total;
  double cum = 0.0;
  for (size_t i = 0; i < dist.support_size(); ++i) {
    cum += static_cast<double>(dist.lengths()[i]) * dist.weights()[i];
    if (total - cum <= allowance) return ExecPlan{dist.lengths()[i]};
  }
  return ExecPlan{dist.lengths().back()};
}

// Device-constrained wait table over the length support.
struct WaitSchedule {
  std::vector<int64_t> lengths;
  std::vector<double> waits;
  double w_tail = 0.0;
  // Largest length that starts the device immediately; 0 when none does.
  int64_t l_th = 0;

  // Nearest tabulated length at or below `prompt_len`. Shorter than the
  // support uses the first entry; longer than the support waits w_tail.
  double wait_for(int64_t prompt_len) const {
    if (lengths.empty()) return w_tail;
    if (prompt_len > lengths.back()) return w_tail;
    auto it = std::upper_bound(lengths.begin(), lengths.end(), prompt_len);
    if (it == lengths.begin()) return waits.front();
    return waits[static_cast<size_t>(it - lengths.begin()) - 1];
  }
};

namespace detail {

// Smallest ECDF grid point w <= w_tail whose extra device spend over the
// tail reservation, p*l*((1 - alpha) - F(w)), fits in `available`.
inline double solve_partial_wait(const ServerTtftEcdf& f, double w_tail, double mass,
                                 double alpha, double available) {
  const auto& s = f.samples();
  auto last = std::upper_bound(s.begin(), s.end(), w_tail);
  auto it = std::partition_point(s.begin(), last, [&](double w) {
    return mass * ((1.0 - alpha) - f.eval(w)) > available;
  });
  return it == last ? w_tail : *it;
}

}  // namespace detail

// Algorithm 2. Phase 1 reserves alpha of the budget for tail protection by
// waiting at most w_tail = F^{-1}(1 - min(alpha, b)). Phase 2 spends the
// remaining (b - alpha) * E[l] greedily on the shortest prompts, giving each
// a zero wait while its p(l) * l * (1 - alpha) still fits, then one partial
// wait for the first length that does not.
inline WaitSchedule plan_device_constrained(const LengthDistribution& dist, const ServerTtftEcdf& f,
                                            double b, double alpha) {
  if (dist.empty()) throw invalid_argument("length distribution is empty");
  if (f.empty()) throw invalid_argument("server TTFT distribution is empty");
  if (!(b >= 0.0 && b <= 1.0)) throw invalid_argument("budget ratio b must be in [0, 1]");
  if (!(alpha > 0.0 && alpha < 1.0)) throw invalid_argument("tail ratio alpha must be in (0, 1)");

  WaitSchedule w;
  w.w_tail = f.quantile(1.0 - std::min(alpha, b));
  w.lengths = dist.lengths();
  w.waits.assign(w.lengths.size(), w.w_tail);
  if (b <= alpha) return w;

  const double mean = dist.mean();
  const double slack = 1e-12 * mean;
  double available = (b - alpha) * mean;
  for (size_t i = 0; i < w.lengths.size(); ++i) {
    const double mass = dist.prob(i) * static_cast<double>(w.lengths[i]);
    const double length_cost = mass * (1.0 - alpha);
    if (available + slack >= length_cost) {
      w.waits[i] = 0.0;
      w.l_th = w.lengths[i];
      available -= length_cost;
    } else {
      w.waits[i] = detail::solve_partial_wait(f, w.w_tail, mass, alpha, available);
      break;
    }
  }
  return w;
}

struct DispatchPolicy {
  ConstraintKind kind = ConstraintKind::kServerConstrained;
  double b = 0.0;
  double alpha = 0.05;
  std::variant<ExecPlan, WaitSchedule> plan;
  // Server-constrained plans keep the support for the audit table.
  std::vector<int64_t> support;
};

inline DispatchPolicy compute_policy(ConstraintKind kind, const LengthDistribution& dist,
                                     const ServerTtftEcdf& f, double b, double alpha) {
  DispatchPolicy p;
  p.kind = kind;
  p.b = b;
  p.alpha = alpha;
  if (kind == ConstraintKind::kServerConstrained) {
    p.plan = plan_server_constrained(dist, b);
    p.support = dist.lengths();
  } else {
    p.plan = plan_device_constrained(dist, f, b, alpha);
  }
  return p;
}

struct DispatchDecision {
  double device_start_delay_s = 0.0;  // kNever: device does not participate
  bool server_issue = true;

  bool device_participates() const { return std::isfinite(device_start_delay_s); }
};

inline DispatchDecision decide(const ExecPlan& plan, int64_t prompt_len) {
  return plan.concurrent(prompt_len) ? DispatchDecision{0.0, true} : DispatchDecision{0.0, false};
}

inline DispatchDecision decide(const WaitSchedule& w, int64_t prompt_len) {
  return DispatchDecision{w.wait_for(prompt_len), true};
}

inline DispatchDecision decide(const DispatchPolicy& policy, const Request& req) {
  return std::visit([&](const auto& plan) { return decide(plan, req.prompt_len); }, policy.plan);
}

inline nlohmann::json to_json(const DispatchPolicy& p) {
  nlohmann::json j;
  j["constraint"] = std::string(to_string(p.kind));
  j["b"] = p.b;
  j["alpha"] = p.alpha;
  if (const auto* plan = std::get_if<ExecPlan>(&p.plan)) {
    j["w_tail"] = nullptr;
    j["l_th"] = plan->l_th == kNoThreshold ? nlohmann::json(nullptr) : nlohmann::json(plan->l_th);
    auto table = nlohmann::json::array();
    for (int64_t l : p.support) {
      table.push_back({{"length", l}, {"mode", plan->concurrent(l) ? "concurrent" : "device"}});
    }
    j["table"] = std::move(table);
  } else {
    const auto& w = std::get<WaitSchedule>(p.plan);
    j["w_tail"] = w.w_tail;
    j["l_th"] = w.l_th;
    auto table = nlohmann::json::array();
    for (size_t i = 0; i < w.lengths.size(); ++i) {
      table.push_back({{"length", w.lengths[i]}, {"wait_s", w.waits[i]}});
    }
    j["table"] = std::move(table);
  }
  return j;
}

}  // namespace duet

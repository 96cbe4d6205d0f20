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

// Trace-driven simulator: races both endpoints per request, applies the
// buffer-based decode migration, bills every token and aggregates metrics
// for the scheduler and its baselines.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "duet/cost.hpp"
#include "duet/dispatch.hpp"
#include "duet/error.hpp"
#include "duet/migration.hpp"
#include "duet/profiles.hpp"
#include "duet/workload.hpp"

namespace duet {

enum class SamplingMode { kBootstrap, kReplay };

inline SamplingMode parse_sampling_mode(std::string_view s) {
  if (s == "bootstrap") return SamplingMode::kBootstrap;
  if (s == "replay") return SamplingMode::kReplay;
  throw invalid_argument("unknown sampling mode '" + std::string(s) + "' (bootstrap|replay)");
}

struct SimConfig {
  double r_c = 4.0;  // consumer pace, tokens / s; <= 0 delivers as generated
  bool migration = true;
  // Server-target migration latency is estimated by this ECDF quantile.
  double tm_quantile = 0.9;
  // Use the realized target latency as the estimate.
  bool oracle_tm = false;
  SamplingMode sampling = SamplingMode::kBootstrap;
};

// Device and server behaviour seen by the simulator.
struct EndpointModel {
  DeviceTtftModel device;
  double device_rate = 0.0;  // decode tokens / s
  ServerTtftEcdf server_ttft;
  std::vector<double> server_tbt;  // empty: fixed interval
  double server_fixed_tbt_s = 0.02;

  static EndpointModel from_profile(const EndpointProfile& p) {
    EndpointModel m;
    m.device = p.device;
    m.device_rate = p.decode.device_rate;
    m.server_ttft = p.server_ttft;
    m.server_tbt = p.decode.server_tbt_samples;
    m.server_fixed_tbt_s = p.decode.server_fixed_tbt_s;
    return m;
  }

  double server_rate() const {
    if (server_tbt.empty()) return 1.0 / server_fixed_tbt_s;
    double s = 0.0;
    for (double x : server_tbt) s += x;
    return static_cast<double>(server_tbt.size()) / s;
  }
};

// Per-request randomness, shared by every method so comparisons are paired.
struct ServerDraw {
  double ttft_s = 0.0;
  std::vector<double> tbt_s;  // output_len - 1 gaps
  double migration_ttft_s = 0.0;
  double coin = 0.0;  // uniform [0, 1) for the stochastic baselines
};

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double pick(std::mt19937_64& rng, const std::vector<double>& v) {
  std::uniform_int_distribution<size_t> u(0, v.size() - 1);
  return v[u(rng)];
}

// Sum of decode FLOPs for `count` steps starting at context `first`. Decode
// cost is affine in context, so the endpoint average is exact.
inline double device_decode_flops_sum(const CostRates& r, int64_t first, int64_t count) {
  if (count <= 0) return 0.0;
  const double a = device_decode_flops(r, first);
  const double b = device_decode_flops(r, first + count - 1);
  return 0.5 * (a + b) * static_cast<double>(count);
}

inline double percentile99(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  return rank_quantile(v, 0.99);
}

}  // namespace detail

inline ServerDraw draw_server(const Request& req, size_t index, const EndpointModel& m,
                              SamplingMode mode, uint64_t seed) {
  std::mt19937_64 rng(detail::splitmix64(seed ^ detail::splitmix64(index + 1)));
  ServerDraw d;
  const double boot = detail::pick(rng, m.server_ttft.samples());
  if (mode == SamplingMode::kReplay) {
    if (!req.ttft_s) throw data_error("replay sampling needs ttft_s on request '" + req.id + "'");
    d.ttft_s = *req.ttft_s;
  } else {
    d.ttft_s = boot;
  }
  const auto gaps = static_cast<size_t>(std::max<int64_t>(0, req.output_len - 1));
  d.tbt_s.resize(gaps);
  for (size_t i = 0; i < gaps; ++i) {
    if (mode == SamplingMode::kReplay && i < req.tbt_s.size()) {
      d.tbt_s[i] = req.tbt_s[i];
    } else {
      d.tbt_s[i] = m.server_tbt.empty() ? m.server_fixed_tbt_s : detail::pick(rng, m.server_tbt);
    }
  }
  d.migration_ttft_s = detail::pick(rng, m.server_ttft.samples());
  d.coin = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return d;
}

struct TokenTimeline {
  std::vector<double> deliver_s;  // relative to arrival
  std::vector<Endpoint> producer;
  int64_t handoff_index = -1;  // first token from the migration target
};

struct RequestOutcome {
  double ttft_s = 0.0;
  TokenTimeline timeline;
  Endpoint winner = Endpoint::kDevice;
  bool migrated = false;
  int64_t delayed_tokens = 0;
  double unified_cost = 0.0;
  UsageLedger usage;
  int64_t prompt_len = 0;
  bool server_issued = false;
  bool device_started = false;
  // Prompt tokens the device actually prefilled (fractional when canceled).
  double device_prefill_tokens = 0.0;
};

// Races the endpoints for one request. The first endpoint to produce a token
// wins and decodes; ties go to the device. The loser is canceled at the
// winner's first token: a canceled server still bills the whole prompt, a
// canceled device bills the prefill fraction it completed.
inline RequestOutcome simulate_request(const Request& req, const DispatchDecision& decision,
                                       const EndpointModel& m, const CostRates& rates,
                                       const SimConfig& cfg, const ServerDraw& draw) {
  if (!decision.server_issue && !decision.device_participates()) {
    throw invalid_argument("dispatch decision runs no endpoint");
  }
  const int64_t l = req.prompt_len;
  const int64_t n = req.output_len;
  const double dev_prefill = m.device.predict(l);
  const double delay = decision.device_start_delay_s;

  RequestOutcome out;
  out.prompt_len = l;
  out.server_issued = decision.server_issue;
  const double srv_first = decision.server_issue ? draw.ttft_s : kNever;
  out.device_started = decision.device_participates() && (!decision.server_issue || srv_first > delay);
  const double dev_first = out.device_started ? delay + dev_prefill : kNever;
  out.winner = dev_first <= srv_first ? Endpoint::kDevice : Endpoint::kServer;

  if (decision.server_issue) out.usage.server_prefill_tokens = static_cast<double>(l);
  if (out.device_started) {
    double frac = 1.0;
    if (out.winner == Endpoint::kServer) frac = std::clamp((srv_first - delay) / dev_prefill, 0.0, 1.0);
    out.device_prefill_tokens = frac * static_cast<double>(l);
    out.usage.device_prefill_flops = frac * device_prefill_flops(rates, l);
  }

  // Source generation timeline if the winner runs to completion.
  std::vector<double> gen(static_cast<size_t>(n));
  gen[0] = std::min(dev_first, srv_first);
  for (int64_t i = 1; i < n; ++i) {
    const double gap = out.winner == Endpoint::kServer ? draw.tbt_s[static_cast<size_t>(i - 1)]
                                                       : 1.0 / m.device_rate;
    gen[static_cast<size_t>(i)] = gen[static_cast<size_t>(i - 1)] + gap;
  }

  auto decode_cost = [&](Endpoint e, int64_t from, int64_t count) {
    if (count <= 0) return 0.0;
    if (e == Endpoint::kServer) return rates.server_decode * static_cast<double>(count);
    return flops_to_dollars(detail::device_decode_flops_sum(rates, l + from, count), rates.lambda);
  };
  auto prefill_cost = [&](Endpoint e, int64_t tokens) {
    if (e == Endpoint::kServer) return rates.server_prefill * static_cast<double>(tokens);
    return flops_to_dollars(device_prefill_flops(rates, tokens), rates.lambda);
  };

  const Endpoint src = out.winner;
  const Endpoint tgt = other(src);
  int64_t stop = n - 1;  // last token produced by the source
  std::vector<double> final_gen;
  HandoffPlan plan;
  if (cfg.migration && cfg.r_c > 0.0 && n > 1 && decode_cost(tgt, 0, 1) < decode_cost(src, 0, 1)) {
    MigrationParams p;
    p.r_c = cfg.r_c;
    p.r_g_source = static_cast<double>(n - 1) / (gen.back() - gen.front());
    const double target_rate = tgt == Endpoint::kServer ? m.server_rate() : m.device_rate;
    HandoffState st{gen, 1, target_rate, std::nullopt};
    if (tgt == Endpoint::kServer) {
      p.t_m = cfg.oracle_tm ? draw.migration_ttft_s : m.server_ttft.quantile(cfg.tm_quantile);
      st.actual_latency_s = draw.migration_ttft_s;
      plan = schedule_handoff(p, st);
    } else {
      // Device prefill time depends on the prefix length at the trigger,
      // which depends on the buffer size; iterate to a fixed point.
      p.t_m = m.device.predict(l + 1);
      for (int it = 0; it < 8; ++it) {
        plan = schedule_handoff(p, st);
        if (!plan.migrated) break;
        const double need = m.device.predict(l + plan.start_after_token + 1);
        if (need <= p.t_m) break;
        p.t_m = need;
      }
      if (plan.migrated) {
        st.actual_latency_s = m.device.predict(l + plan.start_after_token + 1);
        plan = schedule_handoff(p, st);
      }
    }
    if (plan.migrated) {
      const int64_t s = plan.source_stop_token;
      const double gain = decode_cost(src, s + 1, n - 1 - s) - decode_cost(tgt, s + 1, n - 1 - s);
      const double overhead = prefill_cost(tgt, l + plan.start_after_token + 1);
      if (should_migrate(gain, overhead)) {
        out.migrated = true;
        stop = s;
        final_gen = plan.gen_s;
        const double prefix = static_cast<double>(l + plan.start_after_token + 1);
        if (tgt == Endpoint::kServer) {
          out.usage.server_prefill_tokens += prefix;
        } else {
          out.usage.device_prefill_flops += device_prefill_flops(rates, static_cast<int64_t>(prefix));
        }
      }
    }
  }
  if (!out.migrated) final_gen = std::move(gen);

  auto bill_decode = [&](Endpoint e, int64_t from, int64_t count) {
    if (count <= 0) return;
    if (e == Endpoint::kServer) {
      out.usage.server_decode_tokens += static_cast<double>(count);
    } else {
      out.usage.device_decode_flops += detail::device_decode_flops_sum(rates, l + from, count);
    }
  };
  bill_decode(src, 0, stop + 1);
  if (out.migrated) bill_decode(tgt, stop + 1, n - 1 - stop);

  auto& tl = out.timeline;
  tl.deliver_s = paced_delivery(final_gen, cfg.r_c);
  tl.producer.assign(static_cast<size_t>(n), src);
  if (out.migrated) {
    tl.handoff_index = stop + 1;
    std::fill(tl.producer.begin() + stop + 1, tl.producer.end(), tgt);
    out.delayed_tokens = plan.delayed_tokens;
  }
  out.ttft_s = tl.deliver_s.front();
  out.unified_cost = out.usage.cost(rates);
  return out;
}

struct Metrics {
  size_t requests = 0;
  double mean_ttft = 0.0;
  double p99_ttft = 0.0;
  double max_ttft = 0.0;
  double p99_tbt = 0.0;           // all inter-token gaps, pooled
  double p99_tbt_migrated = 0.0;  // gaps of migrated requests; NaN when none
  double mean_delayed = 0.0;      // over migrated requests; NaN when none
  double p99_delayed = 0.0;
  double total_cost = 0.0;
  double migrations = 0.0;
  // Share of prompt tokens prefilled by the constrained endpoint.
  double server_share = 0.0;
  double device_share = 0.0;
};

inline Metrics compute_metrics(std::span<const RequestOutcome> outcomes) {
  if (outcomes.empty()) throw invalid_argument("metrics of an empty run");
  Metrics m;
  m.requests = outcomes.size();
  std::vector<double> ttft, tbt, tbt_mig, delayed;
  ttft.reserve(outcomes.size());
  double prompt = 0.0, server = 0.0, device = 0.0;
  for (const auto& o : outcomes) {
    ttft.push_back(o.ttft_s);
    m.mean_ttft += o.ttft_s;
    m.total_cost += o.unified_cost;
    const auto& d = o.timeline.deliver_s;
    for (size_t i = 1; i < d.size(); ++i) {
      tbt.push_back(d[i] - d[i - 1]);
      if (o.migrated) tbt_mig.push_back(d[i] - d[i - 1]);
    }
    if (o.migrated) {
      m.migrations += 1.0;
      delayed.push_back(static_cast<double>(o.delayed_tokens));
    }
    prompt += static_cast<double>(o.prompt_len);
    if (o.server_issued) server += static_cast<double>(o.prompt_len);
    device += o.device_prefill_tokens;
  }
  m.mean_ttft /= static_cast<double>(outcomes.size());
  m.max_ttft = *std::max_element(ttft.begin(), ttft.end());
  m.p99_ttft = detail::percentile99(std::move(ttft));
  m.p99_tbt = tbt.empty() ? 0.0 : detail::percentile99(std::move(tbt));
  m.p99_tbt_migrated = detail::percentile99(std::move(tbt_mig));
  if (delayed.empty()) {
    m.mean_delayed = std::numeric_limits<double>::quiet_NaN();
  } else {
    double s = 0.0;
    for (double x : delayed) s += x;
    m.mean_delayed = s / static_cast<double>(delayed.size());
  }
  m.p99_delayed = detail::percentile99(std::move(delayed));
  m.server_share = server / prompt;
  m.device_share = device / prompt;
  return m;
}

// Method labels.
inline constexpr std::string_view kDuetS = "duet-s";
inline constexpr std::string_view kDuetD = "duet-d";
inline constexpr std::string_view kDuetSNoMig = "duet-s-nomig";
inline constexpr std::string_view kDuetDNoMig = "duet-d-nomig";
inline constexpr std::string_view kStochS = "stoch-s";
inline constexpr std::string_view kStochD = "stoch-d";
inline constexpr std::string_view kServerOnly = "server-only";
inline constexpr std::string_view kDeviceOnly = "device-only";

inline bool is_known_method(std::string_view s) {
  for (auto k : {kDuetS, kDuetD, kDuetSNoMig, kDuetDNoMig, kStochS, kStochD, kServerOnly, kDeviceOnly}) {
    if (s == k) return true;
  }
  return false;
}

// Stoch-S: concurrent with probability b, else device only.
// Stoch-D: server always, the device joins immediately with probability b.
inline DispatchDecision stoch_decision(ConstraintKind kind, double b, double coin) {
  const bool hit = coin < b;
  if (kind == ConstraintKind::kServerConstrained) return DispatchDecision{0.0, hit};
  return DispatchDecision{hit ? 0.0 : kNever, true};
}

struct ExperimentConfig {
  std::vector<double> budgets;
  ConstraintKind kind = ConstraintKind::kServerConstrained;
  // Extra methods besides the scheduler itself (and its no-migration
  // ablation when migration is enabled).
  std::vector<std::string> baselines;
  int runs = 10;
  uint64_t seed = 0;
  double alpha = 0.05;
  SimConfig sim;
  unsigned threads = 0;  // 0: hardware concurrency
};

struct ReportRow {
  std::string method;
  double b = 0.0;
  Metrics metrics;
};

struct ExperimentReport {
  ConstraintKind kind = ConstraintKind::kServerConstrained;
  uint64_t seed = 0;
  int runs = 0;
  std::vector<ReportRow> rows;

  const ReportRow& row(std::string_view method, double b) const {
    for (const auto& r : rows) {
      if (r.method == method && std::abs(r.b - b) < 1e-12) return r;
    }
    throw invalid_argument("no report row for " + std::string(method));
  }
};

inline std::vector<std::string> experiment_methods(const ExperimentConfig& cfg) {
  const bool srv = cfg.kind == ConstraintKind::kServerConstrained;
  std::vector<std::string> methods = {std::string(srv ? kDuetS : kDuetD)};
  if (cfg.sim.migration) methods.emplace_back(srv ? kDuetSNoMig : kDuetDNoMig);
  for (const auto& b : cfg.baselines) {
    if (!is_known_method(b)) throw invalid_argument("unknown baseline '" + b + "'");
    if (std::find(methods.begin(), methods.end(), b) == methods.end()) methods.push_back(b);
  }
  return methods;
}

namespace detail {

// Mean of each metric across runs; NaN entries are skipped.
inline Metrics average(std::span<const Metrics> ms) {
  Metrics out;
  out.requests = ms.front().requests;
  auto avg = [&](double Metrics::*f) {
    double s = 0.0;
    int k = 0;
    for (const auto& m : ms) {
      if (!std::isnan(m.*f)) {
        s += m.*f;
        ++k;
      }
    }
    return k == 0 ? std::numeric_limits<double>::quiet_NaN() : s / k;
  };
  for (auto f : {&Metrics::mean_ttft, &Metrics::p99_ttft, &Metrics::max_ttft, &Metrics::p99_tbt,
                 &Metrics::p99_tbt_migrated, &Metrics::mean_delayed, &Metrics::p99_delayed,
                 &Metrics::total_cost, &Metrics::migrations, &Metrics::server_share,
                 &Metrics::device_share}) {
    out.*f = avg(f);
  }
  return out;
}

}  // namespace detail

// One policy per budget point, the same paired draws for every method, and
// `runs` repetitions seeded seed + 0 .. seed + runs - 1. Runs execute in
// parallel; results are merged in a fixed order.
inline ExperimentReport run_experiment(const Trace& trace, const EndpointProfile& profile,
                                       const CostRates& rates, const ExperimentConfig& cfg) {
  if (trace.empty()) throw data_error("experiment trace is empty");
  if (cfg.runs < 1) throw invalid_argument("runs must be >= 1");
  for (double b : cfg.budgets) {
    if (!(b >= 0.0 && b <= 1.0)) throw invalid_argument("budget ratio b must be in [0, 1]");
  }
  validate(rates);
  const auto methods = experiment_methods(cfg);
  const auto model = EndpointModel::from_profile(profile);
  const auto dist = LengthDistribution::from_trace(trace);

  std::vector<DispatchPolicy> policies;
  for (double b : cfg.budgets) {
    policies.push_back(compute_policy(cfg.kind, dist, profile.server_ttft, b, cfg.alpha));
  }

  const size_t nb = cfg.budgets.size(), nm = methods.size();
  std::vector<Metrics> cells(static_cast<size_t>(cfg.runs) * nm * nb);
  auto run_one = [&](int run) {
    const uint64_t seed = cfg.seed + static_cast<uint64_t>(run);
    std::vector<ServerDraw> draws;
    draws.reserve(trace.size());
    for (size_t i = 0; i < trace.size(); ++i) {
      draws.push_back(draw_server(trace.requests[i], i, model, cfg.sim.sampling, seed));
    }
    std::vector<RequestOutcome> outcomes(trace.size());
    for (size_t mi = 0; mi < nm; ++mi) {
      const auto& method = methods[mi];
      SimConfig sim = cfg.sim;
      const bool duet = method.rfind("duet", 0) == 0;
      sim.migration = cfg.sim.migration && duet && method.find("nomig") == std::string::npos;
      for (size_t bi = 0; bi < nb; ++bi) {
        const double b = cfg.budgets[bi];
        for (size_t i = 0; i < trace.size(); ++i) {
          const auto& req = trace.requests[i];
          DispatchDecision dec;
          if (duet) {
            dec = decide(policies[bi], req);
          } else if (method == kServerOnly) {
            dec = DispatchDecision{kNever, true};
          } else if (method == kDeviceOnly) {
            dec = DispatchDecision{0.0, false};
          } else {
            dec = stoch_decision(method == kStochS ? ConstraintKind::kServerConstrained
                                                   : ConstraintKind::kDeviceConstrained,
                                 b, draws[i].coin);
          }
          outcomes[i] = simulate_request(req, dec, model, rates, sim, draws[i]);
        }
        cells[(static_cast<size_t>(run) * nm + mi) * nb + bi] = compute_metrics(outcomes);
      }
    }
  };

  unsigned threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(cfg.runs));
  if (threads <= 1) {
    for (int r = 0; r < cfg.runs; ++r) run_one(r);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mu;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (int r = next++; r < cfg.runs; r = next++) {
          try {
            run_one(r);
          } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  ExperimentReport report;
  report.kind = cfg.kind;
  report.seed = cfg.seed;
  report.runs = cfg.runs;
  for (size_t mi = 0; mi < nm; ++mi) {
    for (size_t bi = 0; bi < nb; ++bi) {
      std::vector<Metrics> per_run;
      for (int r = 0; r < cfg.runs; ++r) per_run.push_back(cells[(static_cast<size_t>(r) * nm + mi) * nb + bi]);
      report.rows.push_back({methods[mi], cfg.budgets[bi], detail::average(per_run)});
    }
  }
  return report;
}

namespace detail {

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::vector<std::pair<std::string, double>> metric_fields(const Metrics& m) {
  return {{"mean_ttft_s", m.mean_ttft},
          {"p99_ttft_s", m.p99_ttft},
          {"max_ttft_s", m.max_ttft},
          {"p99_tbt_s", m.p99_tbt},
          {"p99_tbt_migrated_s", m.p99_tbt_migrated},
          {"mean_delayed_tokens", m.mean_delayed},
          {"p99_delayed_tokens", m.p99_delayed},
          {"total_cost", m.total_cost},
          {"migrations", m.migrations},
          {"server_prompt_share", m.server_share},
          {"device_prefill_share", m.device_share}};
}

}  // namespace detail

// Long format: method,b,metric,value.
inline void write_csv(std::ostream& out, const ExperimentReport& report) {
  out << "method,b,metric,value\n";
  for (const auto& row : report.rows) {
    for (const auto& [name, value] : detail::metric_fields(row.metrics)) {
      out << row.method << ',' << detail::format_number(row.b) << ',' << name << ','
          << detail::format_number(value) << '\n';
    }
  }
}

inline nlohmann::json to_json(const ExperimentReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) {
    nlohmann::json metrics;
    for (const auto& [name, value] : detail::metric_fields(row.metrics)) {
      metrics[name] = std::isnan(value) ? nlohmann::json(nullptr) : nlohmann::json(value);
    }
    rows.push_back({{"method", row.method}, {"b", row.b}, {"metrics", std::move(metrics)}});
  }
  return {{"constraint", std::string(to_string(report.kind))},
          {"seed", report.seed},
          {"runs", report.runs},
          {"rows", std::move(rows)}};
}

inline ExperimentReport report_from_json(const nlohmann::json& j) {
  try {
    ExperimentReport r;
    r.kind = parse_constraint(j.at("constraint").get<std::string>());
    r.seed = j.at("seed").get<uint64_t>();
    r.runs = j.at("runs").get<int>();
    for (const auto& row : j.at("rows")) {
      ReportRow out;
      out.method = row.at("method").get<std::string>();
      out.b = row.at("b").get<double>();
      const auto& m = row.at("metrics");
      auto get = [&](const char* name) {
        const auto& v = m.at(name);
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
      };
      out.metrics.mean_ttft = get("mean_ttft_s");
      out.metrics.p99_ttft = get("p99_ttft_s");
      out.metrics.max_ttft = get("max_ttft_s");
      out.metrics.p99_tbt = get("p99_tbt_s");
      out.metrics.p99_tbt_migrated = get("p99_tbt_migrated_s");
      out.metrics.mean_delayed = get("mean_delayed_tokens");
      out.metrics.p99_delayed = get("p99_delayed_tokens");
      out.metrics.total_cost = get("total_cost");
      out.metrics.migrations = get("migrations");
      out.metrics.server_share = get("server_prompt_share");
      out.metrics.device_share = get("device_prefill_share");
      r.rows.push_back(std::move(out));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("report: ") + e.what());
  }
}

}  // namespace duet

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

// Request traces: JSONL ingestion, log-normal fitting and synthetic
// generation with Poisson arrivals.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "duet/error.hpp"

namespace duet {

struct Request {
  std::string id;
  double arrival_s = 0.0;
  int64_t prompt_len = 1;
  int64_t output_len = 1;
  // Recorded server timings, present on measured traces only.
  std::optional<double> ttft_s;
  std::vector<double> tbt_s;
};

struct TraceMeta {
  std::string source;
  int64_t generation_cap = 0;  // 0: uncapped
};

struct Trace {
  std::vector<Request> requests;
  TraceMeta meta;

  size_t size() const { return requests.size(); }
  bool empty() const { return requests.empty(); }
};

enum class TraceFormat { kJsonl };

inline TraceFormat parse_trace_format(std::string_view tag) {
  if (tag == "jsonl" || tag == "JSONL") return TraceFormat::kJsonl;
  throw invalid_argument("unknown trace format '" + std::string(tag) + "'");
}

struct LogNormalSpec {
  double mu = 0.0;
  double sigma = 1.0;
  int64_t n = 1;
  uint64_t seed = 0;
};

inline void validate(const LogNormalSpec& spec) {
  if (!(spec.sigma > 0.0) || !std::isfinite(spec.sigma) ||
      !std::isfinite(spec.mu)) {
    throw invalid_argument("log-normal sigma must be positive and finite");
  }
  if (spec.n < 1) throw invalid_argument("log-normal sample count must be >= 1");
}

namespace detail {

inline Request parse_request_record(const nlohmann::json& row, int64_t line) {
  if (!row.is_object()) throw ParseError(line, "record is not a JSON object");
  Request req;

  auto id_it = row.find("id");
  if (id_it == row.end()) throw ParseError(line, "missing field 'id'");
  if (id_it->is_string()) {
    req.id = id_it->get<std::string>();
  } else if (id_it->is_number_integer()) {
    req.id = std::to_string(id_it->get<int64_t>());
  } else {
    throw ParseError(line, "field 'id' must be a string");
  }

  auto number = [&](const char* key) -> double {
    auto it = row.find(key);
    if (it == row.end()) throw ParseError(line, std::string("missing field '") + key + "'");
    if (!it->is_number()) throw ParseError(line, std::string("field '") + key + "' must be a number");
    return it->get<double>();
  };
  auto integer = [&](const char* key) -> int64_t {
    auto it = row.find(key);
    if (it == row.end()) throw ParseError(line, std::string("missing field '") + key + "'");
    if (it->is_number_integer()) return it->get<int64_t>();
    if (it->is_number_float()) {
      double v = it->get<double>();
      if (v == std::floor(v)) return static_cast<int64_t>(v);
    }
    throw ParseError(line, std::string("field '") + key + "' must be an integer");
  };

  req.arrival_s = number("arrival_s");
  if (!(req.arrival_s >= 0.0) || !std::isfinite(req.arrival_s)) {
    throw ParseError(line, "arrival_s must be non-negative (request '" + req.id + "')");
  }
  req.prompt_len = integer("prompt_len");
  if (req.prompt_len < 1) {
    throw ParseError(line, "prompt_len must be positive (request '" + req.id + "')");
  }
  req.output_len = integer("output_len");
  if (req.output_len < 1) {
    throw ParseError(line, "output_len must be positive (request '" + req.id + "')");
  }

  if (auto it = row.find("ttft_s"); it != row.end() && !it->is_null()) {
    if (!it->is_number() || !(it->get<double>() > 0.0)) {
      throw ParseError(line, "ttft_s must be a positive number");
    }
    req.ttft_s = it->get<double>();
  }
  if (auto it = row.find("tbt_s"); it != row.end() && !it->is_null()) {
    if (!it->is_array()) throw ParseError(line, "tbt_s must be an array");
    for (const auto& v : *it) {
      if (!v.is_number() || !(v.get<double>() > 0.0)) {
        throw ParseError(line, "tbt_s entries must be positive numbers");
      }
      req.tbt_s.push_back(v.get<double>());
    }
  }
  return req;
}

// Lengths drawn from a continuous distribution become token counts by
// ceiling. The relative slack keeps exp(log(100)) from rounding up to 101.
inline int64_t ceil_tokens(double x) {
  double v = std::ceil(x - 1e-9 * std::max(1.0, std::abs(x)));
  return std::max<int64_t>(1, static_cast<int64_t>(v));
}

}  // namespace detail

// Sorts stably by arrival time and checks every trace invariant.
inline void normalize_trace(Trace& trace) {
  if (trace.requests.empty()) throw data_error("trace is empty");
  std::stable_sort(trace.requests.begin(), trace.requests.end(),
                   [](const Request& a, const Request& b) {
                     return a.arrival_s < b.arrival_s;
                   });
  std::unordered_set<std::string> seen;
  for (const auto& r : trace.requests) {
    if (!seen.insert(r.id).second) throw data_error("duplicate request id '" + r.id + "'");
  }
}

inline Trace parse_trace(std::istream& in, TraceFormat format = TraceFormat::kJsonl,
                         std::string source = "stream") {
  (void)format;  // JSONL is the only format.
  Trace trace;
  trace.meta.source = std::move(source);
  std::unordered_set<std::string> ids;
  std::string text;
  int64_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line, std::string("invalid JSON: ") + e.what());
    }
    Request req = detail::parse_request_record(row, line);
    if (!ids.insert(req.id).second) throw ParseError(line, "duplicate request id '" + req.id + "'");
    trace.requests.push_back(std::move(req));
  }
  if (trace.requests.empty()) throw data_error("trace '" + trace.meta.source + "' is empty");
  normalize_trace(trace);
  return trace;
}

inline Trace load_trace(const std::filesystem::path& path,
                        TraceFormat format = TraceFormat::kJsonl) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kRuntime, "cannot open trace '" + path.string() + "'");
  return parse_trace(in, format, path.filename().string());
}

inline nlohmann::json to_json(const Request& r) {
  nlohmann::json j = {{"id", r.id},
                      {"arrival_s", r.arrival_s},
                      {"prompt_len", r.prompt_len},
                      {"output_len", r.output_len}};
  if (r.ttft_s) j["ttft_s"] = *r.ttft_s;
  if (!r.tbt_s.empty()) j["tbt_s"] = r.tbt_s;
  return j;
}

inline void write_trace(std::ostream& out, const Trace& trace) {
  for (const auto& r : trace.requests) out << to_json(r).dump() << '\n';
}

// mu and sigma are the mean and population standard deviation of ln(x).
inline LogNormalSpec fit_lognormal(std::span<const double> samples) {
  if (samples.size() < 2) throw invalid_argument("fit_lognormal needs at least 2 samples");
  double sum = 0.0;
  for (double x : samples) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw invalid_argument("fit_lognormal samples must be positive and finite");
    }
    sum += std::log(x);
  }
  const double n = static_cast<double>(samples.size());
  const double mu = sum / n;
  double ss = 0.0;
  for (double x : samples) {
    double d = std::log(x) - mu;
    ss += d * d;
  }
  const double sigma = std::sqrt(ss / n);
  if (!(sigma > 1e-12 * std::max(1.0, std::abs(mu)))) {
    throw data_error("fit_lognormal: degenerate spec, samples have zero log-variance");
  }
  return LogNormalSpec{mu, sigma, static_cast<int64_t>(samples.size()), 0};
}

inline std::vector<double> sample_lognormal(const LogNormalSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  std::lognormal_distribution<double> dist(spec.mu, spec.sigma);
  std::vector<double> out(static_cast<size_t>(spec.n));
  for (auto& v : out) v = dist(rng);
  return out;
}

// Optional per-request attributes for synthetic traces.
struct SyntheticExtras {
  // Output lengths; when absent every request asks for `generation_cap`.
  std::optional<LogNormalSpec> output;
  int64_t generation_cap = 128;
  // Server TTFT to record into the trace for replay runs.
  std::optional<LogNormalSpec> server_ttft;
  std::string source = "synthetic";
};

// `spec_len.n` requests; lengths are ceil(LogNormal) with floor 1, arrivals
// are a Poisson process with the given mean gap. Only `seed` drives the RNG.
inline Trace gen_synthetic(const LogNormalSpec& spec_len, double mean_interarrival_s,
                           uint64_t seed, const SyntheticExtras& extras = {}) {
  validate(spec_len);
  if (!(mean_interarrival_s > 0.0) || !std::isfinite(mean_interarrival_s)) {
    throw invalid_argument("mean inter-arrival must be positive");
  }
  if (extras.output) validate(*extras.output);
  if (extras.server_ttft) validate(*extras.server_ttft);
  if (extras.generation_cap < 1) throw invalid_argument("generation cap must be >= 1");

  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> gap(1.0 / mean_interarrival_s);
  std::lognormal_distribution<double> len(spec_len.mu, spec_len.sigma);
  std::optional<std::lognormal_distribution<double>> out_len, ttft;
  if (extras.output) out_len.emplace(extras.output->mu, extras.output->sigma);
  if (extras.server_ttft) ttft.emplace(extras.server_ttft->mu, extras.server_ttft->sigma);

  Trace trace;
  trace.meta.source = extras.source;
  trace.meta.generation_cap = extras.generation_cap;
  trace.requests.reserve(static_cast<size_t>(spec_len.n));
  double t = 0.0;
  for (int64_t i = 0; i < spec_len.n; ++i) {
    Request r;
    r.id = "r" + std::to_string(i);
    t += gap(rng);
    r.arrival_s = t;
    r.prompt_len = detail::ceil_tokens(len(rng));
    r.output_len = out_len ? std::min(extras.generation_cap, detail::ceil_tokens((*out_len)(rng)))
                           : extras.generation_cap;
    if (ttft) r.ttft_s = (*ttft)(rng);
    trace.requests.push_back(std::move(r));
  }
  return trace;
}

inline std::vector<int64_t> prompt_lengths(const Trace& trace) {
  std::vector<int64_t> out;
  out.reserve(trace.size());
  for (const auto& r : trace.requests) out.push_back(r.prompt_len);
  return out;
}

}  // namespace duet

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

// Endpoint performance models: a linear device TTFT model, an empirical
// server TTFT distribution, and decode-speed profiles.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "duet/error.hpp"

namespace duet {

// Device prefill latency: ttft(l) = k * l + c.
struct DeviceTtftModel {
  double k = 0.0;  // seconds per prompt token
  double c = 0.0;  // fixed overhead, seconds

  double predict(int64_t prompt_len) const {
    return k * static_cast<double>(prompt_len) + c;
  }
};

inline void validate(const DeviceTtftModel& m) {
  if (!(m.k > 0.0) || !std::isfinite(m.k)) throw invalid_argument("device model k must be positive");
  if (!(m.c >= 0.0) || !std::isfinite(m.c)) throw invalid_argument("device model c must be non-negative");
}

// Least-squares fit of (prompt_len, ttft_s) pairs. A negative intercept is
// clamped to zero and k refit through the means (k = mean(y) / mean(x)).
inline DeviceTtftModel fit_device_linear(std::span<const std::pair<int64_t, double>> pairs) {
  if (pairs.size() < 2) throw invalid_argument("fit_device_linear needs at least 2 pairs");
  const double n = static_cast<double>(pairs.size());
  double mx = 0.0, my = 0.0;
  for (const auto& [l, t] : pairs) {
    if (l < 1) throw invalid_argument("prompt lengths must be positive");
    if (!std::isfinite(t)) throw invalid_argument("ttft values must be finite");
    mx += static_cast<double>(l);
    my += t;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& [l, t] : pairs) {
    double dx = static_cast<double>(l) - mx;
    sxx += dx * dx;
    sxy += dx * (t - my);
  }
  if (sxx == 0.0) throw data_error("fit_device_linear: all prompt lengths are identical");
  DeviceTtftModel m;
  m.k = sxy / sxx;
  m.c = my - m.k * mx;
  if (m.c < 0.0) {
    m.c = 0.0;
    m.k = my / mx;
  }
  if (!(m.k > 0.0)) throw data_error("fit_device_linear: non-positive slope, device TTFT is not linear in length");
  return m;
}

// Order-statistic quantile of an ascending range: the smallest element whose
// rank r satisfies r / n >= q. The 1e-9 slack absorbs q * n products such as
// 0.7 * 10 that land a hair above an integer.
inline double rank_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw invalid_argument("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw invalid_argument("quantile q must be in [0, 1]");
  const double n = static_cast<double>(sorted.size());
  auto rank = static_cast<int64_t>(std::ceil(q * n - 1e-9));
  rank = std::clamp<int64_t>(rank, 1, static_cast<int64_t>(sorted.size()));
  return sorted[static_cast<size_t>(rank - 1)];
}

// Sorted snapshot of observed server TTFTs. Quantiles are order statistics:
// the q-quantile is the smallest sample whose rank r satisfies r / n >= q.
class ServerTtftEcdf {
 public:
  static constexpr size_t kMinSamples = 8;

  ServerTtftEcdf() = default;

  explicit ServerTtftEcdf(std::vector<double> samples) : samples_(std::move(samples)) {
    if (samples_.size() < kMinSamples) {
      throw data_error("server TTFT ECDF needs at least " + std::to_string(kMinSamples) +
                       " samples, got " + std::to_string(samples_.size()));
    }
    for (double s : samples_) {
      if (!(s > 0.0) || !std::isfinite(s)) throw data_error("server TTFT samples must be positive");
    }
    std::sort(samples_.begin(), samples_.end());
  }

  size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const std::vector<double>& samples() const { return samples_; }
  double min() const { return samples_.front(); }
  double max() const { return samples_.back(); }

  // F^{-1}(q)
  double quantile(double q) const { return rank_quantile(samples_, q); }

  // F(t): fraction of samples <= t.
  double eval(double t) const {
    auto it = std::upper_bound(samples_.begin(), samples_.end(), t);
    return static_cast<double>(it - samples_.begin()) / static_cast<double>(samples_.size());
  }

 private:
  std::vector<double> samples_;
};

inline double ecdf_quantile(const ServerTtftEcdf& f, double q) { return f.quantile(q); }
inline double ecdf_eval(const ServerTtftEcdf& f, double t) { return f.eval(t); }

struct DecodeProfile {
  double device_rate = 0.0;  // tokens / s
  // Server inter-token intervals; empty means a fixed interval.
  std::vector<double> server_tbt_samples;
  double server_fixed_tbt_s = 0.02;
};

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw invalid_argument("pearson: length mismatch");
  if (xs.size() < 2) throw invalid_argument("pearson needs at least 2 points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    double dx = xs[i] - mx, dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw data_error("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Everything the policies and the simulator need to know about the two
// endpoints.
struct EndpointProfile {
  DeviceTtftModel device;
  DecodeProfile decode;
  ServerTtftEcdf server_ttft;
};

inline nlohmann::json to_json(const EndpointProfile& p) {
  return {{"device", {{"k", p.device.k}, {"c", p.device.c}, {"decode_rate", p.decode.device_rate}}},
          {"server",
           {{"ttft_samples", p.server_ttft.samples()},
            {"tbt_samples", p.decode.server_tbt_samples}}}};
}

inline EndpointProfile profile_from_json(const nlohmann::json& j) {
  try {
    EndpointProfile p;
    const auto& dev = j.at("device");
    p.device.k = dev.at("k").get<double>();
    p.device.c = dev.at("c").get<double>();
    p.decode.device_rate = dev.at("decode_rate").get<double>();
    const auto& srv = j.at("server");
    p.server_ttft = ServerTtftEcdf(srv.at("ttft_samples").get<std::vector<double>>());
    if (srv.contains("tbt_samples")) {
      p.decode.server_tbt_samples = srv.at("tbt_samples").get<std::vector<double>>();
    }
    validate(p.device);
    if (!(p.decode.device_rate > 0.0)) throw data_error("device decode_rate must be positive");
    for (double s : p.decode.server_tbt_samples) {
      if (!(s > 0.0)) throw data_error("server tbt samples must be positive");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("profile snapshot: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kParse) throw;
    throw ParseError(0, std::string("profile snapshot: ") + e.what());
  }
}

inline EndpointProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kRuntime, "cannot open profile '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, "profile '" + path.string() + "': " + e.what());
  }
  return profile_from_json(j);
}

}  // namespace duet

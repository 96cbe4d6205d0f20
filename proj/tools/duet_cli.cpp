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

// duet: profiling, planning, simulation, replay, serving and reports.
//
// Exit codes: 0 ok, 1 usage or config, 2 data, 3 runtime.

#include <csignal>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "duet/cost.hpp"
#include "duet/dispatch.hpp"
#include "duet/error.hpp"
#include "duet/gateway.hpp"
#include "duet/profiles.hpp"
#include "duet/sim.hpp"
#include "duet/workload.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace duet::cli {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

struct Globals {
  std::string config_path;
  uint64_t seed = 0;
  std::string out_dir;
  json config = json::object();
  fs::path config_dir = ".";
};

// Config values are defaults; explicit flags win.
template <typename T>
void fill(T& target, const Globals& g, const char* key, const CLI::Option* opt) {
  if (opt && opt->count() > 0) return;
  if (g.config.contains(key)) target = g.config.at(key).get<T>();
}

fs::path resolve(const Globals& g, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() || g.config_path.empty() ? path : g.config_dir / path;
}

void fill_path(std::string& target, const Globals& g, const char* key, const CLI::Option* opt) {
  if (opt && opt->count() > 0) return;
  if (g.config.contains(key)) target = resolve(g, g.config.at(key).get<std::string>()).string();
}

void require(const std::string& value, const char* what) {
  if (value.empty()) throw invalid_argument(std::string("missing ") + what);
}

// Writes `name` into the output dir, or to stdout without one.
void emit(const Globals& g, const std::string& name, const std::string& text) {
  if (g.out_dir.empty()) {
    std::cout << text;
    return;
  }
  std::error_code ec;
  fs::create_directories(g.out_dir, ec);
  const fs::path path = fs::path(g.out_dir) / name;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kRuntime, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error(ErrorCode::kRuntime, "write failed for '" + path.string() + "'");
  std::cerr << "wrote " << path.string() << "\n";
}

// "0:1:0.1" (inclusive) or "0.1,0.5,0.9".
std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> out;
  auto num = [&](const std::string& s) {
    try {
      size_t pos = 0;
      double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw invalid_argument("bad number '" + s + "' in budget grid");
    }
  };
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw invalid_argument("grid range must be start:stop:step");
    const double a = num(parts[0]), z = num(parts[1]), step = num(parts[2]);
    if (!(step > 0.0)) throw invalid_argument("grid step must be positive");
    for (int64_t i = 0;; ++i) {
      const double v = std::round((a + static_cast<double>(i) * step) * 1e9) / 1e9;
      if (v > z + 1e-9) break;
      out.push_back(v);
    }
  } else {
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
  }
  if (out.empty()) throw invalid_argument("budget grid is empty");
  for (double b : out) {
    if (!(b >= 0.0 && b <= 1.0)) throw invalid_argument("budget ratio b must be in [0, 1], got " + std::to_string(b));
  }
  return out;
}

CostRates load_rates(const Globals& g) {
  if (!g.config.contains("rates")) throw invalid_argument("config has no \"rates\" section");
  return rates_from_json(g.config.at("rates"));
}

ConstraintKind resolve_kind(const std::string& s, const CostRates& rates) {
  if (s == "auto") return classify(rates);
  return parse_constraint(s);
}

// ----------------------------------------------------------------- profile --

struct ProfileArgs {
  std::string server_trace, device_trace;
  double device_rate = 0.0;
  CLI::Option *server_opt = nullptr, *device_opt = nullptr, *rate_opt = nullptr;
};

int cmd_profile(Globals& g, ProfileArgs& a) {
  fill_path(a.server_trace, g, "server_trace", a.server_opt);
  fill_path(a.device_trace, g, "device_trace", a.device_opt);
  fill(a.device_rate, g, "device_rate", a.rate_opt);
  require(a.server_trace, "--server-trace");
  require(a.device_trace, "--device-trace");

  const Trace server = load_trace(a.server_trace);
  std::vector<double> ttft, tbt;
  for (const auto& r : server.requests) {
    if (r.ttft_s) ttft.push_back(*r.ttft_s);
    tbt.insert(tbt.end(), r.tbt_s.begin(), r.tbt_s.end());
  }
  if (ttft.empty()) throw data_error("server trace has no ttft_s fields");

  const Trace device = load_trace(a.device_trace);
  std::vector<std::pair<int64_t, double>> pairs;
  std::vector<double> xs, ys, dev_tbt;
  for (const auto& r : device.requests) {
    if (!r.ttft_s) continue;
    pairs.emplace_back(r.prompt_len, *r.ttft_s);
    xs.push_back(static_cast<double>(r.prompt_len));
    ys.push_back(*r.ttft_s);
    dev_tbt.insert(dev_tbt.end(), r.tbt_s.begin(), r.tbt_s.end());
  }
  if (pairs.size() < 2) throw data_error("device trace needs at least 2 records with ttft_s");

  EndpointProfile p;
  p.device = fit_device_linear(pairs);
  p.server_ttft = ServerTtftEcdf(ttft);
  p.decode.server_tbt_samples = tbt;
  if (a.device_rate > 0.0) {
    p.decode.device_rate = a.device_rate;
  } else if (!dev_tbt.empty()) {
    double s = 0.0;
    for (double x : dev_tbt) s += x;
    p.decode.device_rate = static_cast<double>(dev_tbt.size()) / s;
  } else {
    throw data_error("device trace has no tbt_s fields; pass --device-rate");
  }

  std::fprintf(stderr, "device fit: k=%.6g s/token c=%.6g s pearson=%.4f decode=%.3f tok/s\n", p.device.k,
               p.device.c, pearson(xs, ys), p.decode.device_rate);
  const auto& f = p.server_ttft;
  std::fprintf(stderr, "server ttft: n=%zu p50=%.4f p95=%.4f p99=%.4f s\n", f.size(), f.quantile(0.5),
               f.quantile(0.95), f.quantile(0.99));
  emit(g, "profile.json", to_json(p).dump(2) + "\n");
  return kOk;
}

// -------------------------------------------------------------------- plan --

struct PlanArgs {
  std::string trace, profile, constraint = "auto";
  double b = -1.0, alpha = 0.05;
  CLI::Option *trace_opt = nullptr, *profile_opt = nullptr, *constraint_opt = nullptr, *b_opt = nullptr,
              *alpha_opt = nullptr;
};

int cmd_plan(Globals& g, PlanArgs& a) {
  fill_path(a.trace, g, "trace", a.trace_opt);
  fill_path(a.profile, g, "profile", a.profile_opt);
  fill(a.constraint, g, "constraint", a.constraint_opt);
  fill(a.b, g, "b", a.b_opt);
  fill(a.alpha, g, "alpha", a.alpha_opt);
  require(a.trace, "--trace");
  require(a.profile, "--profile");
  if (!(a.b >= 0.0 && a.b <= 1.0)) throw invalid_argument("budget ratio b must be in [0, 1]");
  const auto rates = load_rates(g);
  const auto kind = resolve_kind(a.constraint, rates);
  const auto trace = load_trace(a.trace);
  const auto profile = load_profile(a.profile);
  const auto policy = compute_policy(kind, LengthDistribution::from_trace(trace), profile.server_ttft, a.b, a.alpha);
  emit(g, "policy.json", to_json(policy).dump(2) + "\n");
  return kOk;
}

// -------------------------------------------------------- simulate, replay --

struct SimArgs {
  std::string trace, profile, constraint = "auto", budgets = "0:1:0.1", baselines;
  int runs = 10;
  double alpha = 0.05, r_c = 4.0, tm_quantile = 0.9;
  bool no_migration = false, oracle_tm = false;
  unsigned threads = 0;
  CLI::Option *trace_opt = nullptr, *profile_opt = nullptr, *constraint_opt = nullptr, *budgets_opt = nullptr,
              *baselines_opt = nullptr, *runs_opt = nullptr, *alpha_opt = nullptr, *rc_opt = nullptr,
              *tmq_opt = nullptr;
};

int cmd_simulate(Globals& g, SimArgs& a, SamplingMode mode) {
  fill_path(a.trace, g, "trace", a.trace_opt);
  fill_path(a.profile, g, "profile", a.profile_opt);
  fill(a.constraint, g, "constraint", a.constraint_opt);
  fill(a.budgets, g, "budgets", a.budgets_opt);
  fill(a.baselines, g, "baselines", a.baselines_opt);
  fill(a.runs, g, "runs", a.runs_opt);
  fill(a.alpha, g, "alpha", a.alpha_opt);
  fill(a.r_c, g, "r_c", a.rc_opt);
  fill(a.tm_quantile, g, "tm_quantile", a.tmq_opt);
  require(a.trace, "--trace");
  require(a.profile, "--profile");

  ExperimentConfig cfg;
  cfg.budgets = parse_grid(a.budgets);
  const auto rates = load_rates(g);
  cfg.kind = resolve_kind(a.constraint, rates);
  if (a.baselines == "all") {
    cfg.baselines = cfg.kind == ConstraintKind::kServerConstrained
                        ? std::vector<std::string>{std::string(kStochS), std::string(kServerOnly), std::string(kDeviceOnly)}
                        : std::vector<std::string>{std::string(kStochD), std::string(kServerOnly), std::string(kDeviceOnly)};
  } else if (!a.baselines.empty()) {
    std::stringstream ss(a.baselines);
    for (std::string m; std::getline(ss, m, ',');) cfg.baselines.push_back(m);
  }
  cfg.runs = a.runs;
  cfg.seed = g.seed;
  cfg.alpha = a.alpha;
  cfg.threads = a.threads;
  cfg.sim.r_c = a.r_c;
  cfg.sim.migration = !a.no_migration;
  cfg.sim.tm_quantile = a.tm_quantile;
  cfg.sim.oracle_tm = a.oracle_tm;
  cfg.sim.sampling = mode;

  const auto trace = load_trace(a.trace);
  const auto profile = load_profile(a.profile);
  const auto report = run_experiment(trace, profile, rates, cfg);
  std::ostringstream csv;
  write_csv(csv, report);
  emit(g, "report.csv", csv.str());
  if (!g.out_dir.empty()) emit(g, "report.json", to_json(report).dump(2) + "\n");
  return kOk;
}

// ------------------------------------------------------------------ report --

struct ReportArgs {
  std::string input, format = "csv", metric = "mean_ttft_s";
};

int cmd_report(Globals& g, ReportArgs& a) {
  require(a.input, "--in");
  std::ifstream in(a.input);
  if (!in) throw Error(ErrorCode::kRuntime, "cannot open report '" + a.input + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(0, "report '" + a.input + "': " + e.what());
  }
  const auto report = report_from_json(j);
  if (a.format == "csv") {
    std::ostringstream csv;
    write_csv(csv, report);
    emit(g, "report.csv", csv.str());
    return kOk;
  }
  if (a.format != "table") throw invalid_argument("--format must be csv or table");
  // Pivot: one row per b, one column per method.
  std::vector<std::string> methods;
  std::map<double, std::map<std::string, double>> grid;
  for (const auto& row : report.rows) {
    if (std::find(methods.begin(), methods.end(), row.method) == methods.end()) methods.push_back(row.method);
    bool found = false;
    for (const auto& [name, value] : detail::metric_fields(row.metrics)) {
      if (name == a.metric) {
        grid[row.b][row.method] = value;
        found = true;
      }
    }
    if (!found) throw invalid_argument("unknown metric '" + a.metric + "'");
  }
  std::ostringstream out;
  out << "b";
  for (const auto& m : methods) out << '\t' << m;
  out << '\n';
  for (const auto& [b, cols] : grid) {
    out << detail::format_number(b);
    for (const auto& m : methods) {
      auto it = cols.find(m);
      out << '\t' << (it == cols.end() ? "-" : detail::format_number(it->second));
    }
    out << '\n';
  }
  emit(g, a.metric + ".tsv", out.str());
  return kOk;
}

// ------------------------------------------------------------------- synth --

struct SynthArgs {
  int64_t n = 1000;
  double mu = 4.0, sigma = 0.9, gap = 1.0;
  double ttft_mu = NAN, ttft_sigma = NAN, out_mu = NAN, out_sigma = NAN;
  int64_t cap = 128;
};

int cmd_synth(Globals& g, SynthArgs& a) {
  SyntheticExtras extras;
  extras.generation_cap = a.cap;
  if (!std::isnan(a.ttft_mu) || !std::isnan(a.ttft_sigma)) {
    if (std::isnan(a.ttft_mu) || std::isnan(a.ttft_sigma)) throw invalid_argument("--ttft-mu and --ttft-sigma go together");
    extras.server_ttft = LogNormalSpec{a.ttft_mu, a.ttft_sigma, 1, 0};
  }
  if (!std::isnan(a.out_mu) || !std::isnan(a.out_sigma)) {
    if (std::isnan(a.out_mu) || std::isnan(a.out_sigma)) throw invalid_argument("--out-mu and --out-sigma go together");
    extras.output = LogNormalSpec{a.out_mu, a.out_sigma, 1, 0};
  }
  const auto trace = gen_synthetic(LogNormalSpec{a.mu, a.sigma, a.n, g.seed}, a.gap, g.seed, extras);
  std::ostringstream out;
  write_trace(out, trace);
  emit(g, "trace.jsonl", out.str());
  return kOk;
}

// ------------------------------------------------------------------- serve --

struct ServeArgs {
  bool mock = false;
  int port = -1;
  std::string host;
};

MockUpstream::Script mock_script(const json& j) {
  MockUpstream::Script s;
  s.ttft_s = j.value("ttft_s", s.ttft_s);
  s.per_token_prefill_s = j.value("per_token_prefill_s", s.per_token_prefill_s);
  s.resume_ttft_s = j.value("resume_ttft_s", s.resume_ttft_s);
  s.tbt_s = j.value("tbt_s", s.tbt_s);
  s.fail_status = j.value("fail_status", s.fail_status);
  return s;
}

int cmd_serve(Globals& g, ServeArgs& a) {
  if (g.config_path.empty()) throw invalid_argument("serve needs --config");
  if (!g.config.contains("gateway")) throw invalid_argument("config has no \"gateway\" section");
  json gw = g.config.at("gateway");
  if (!gw.contains("rates") && g.config.contains("rates")) gw["rates"] = g.config.at("rates");
  if (!gw.contains("profile") && g.config.contains("profile")) gw["profile"] = g.config.at("profile");
  if (!gw.contains("prompt_lengths") && g.config.contains("trace")) gw["prompt_lengths"] = g.config.at("trace");

  std::unique_ptr<MockUpstream> mock_device, mock_server;
  if (a.mock) {
    const json m = gw.value("mock", json::object());
    mock_device = std::make_unique<MockUpstream>(mock_script(m.value("device", json::object())));
    mock_server = std::make_unique<MockUpstream>(mock_script(m.value("server", json::object())));
    mock_device->start();
    mock_server->start();
    gw["upstreams"] = json::array({{{"name", "mock-device"}, {"url", mock_device->url()}, {"role", "device"}},
                                   {{"name", "mock-server"}, {"url", mock_server->url()}, {"role", "server"}}});
  }
  auto cfg = gateway_config_from_json(gw, g.config_dir);
  if (a.port >= 0) cfg.port = a.port;
  if (!a.host.empty()) cfg.host = a.host;

  // Signals are taken synchronously on this thread.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGINT);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  Gateway gateway(cfg);
  const int port = gateway.start();
  std::printf("listening on http://%s:%d\n", cfg.host.c_str(), port);
  std::fflush(stdout);
  int sig = 0;
  sigwait(&set, &sig);
  std::fprintf(stderr, "signal %d: draining\n", sig);
  const bool clean = gateway.drain(cfg.drain_timeout_s);
  gateway.stop();
  std::fprintf(stderr, clean ? "drained\n" : "drain timed out; open streams were closed with an error event\n");
  return kOk;
}

int run(int argc, char** argv) {
  CLI::App app{"duet: device-server cooperative LLM serving scheduler"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config; its keys are defaults for the flags")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out_dir, "Output directory (stdout when absent)");

  ProfileArgs pa;
  auto* profile = app.add_subcommand("profile", "Fit endpoint profiles from measured traces");
  pa.server_opt = profile->add_option("--server-trace", pa.server_trace, "JSONL trace with server ttft_s / tbt_s");
  pa.device_opt = profile->add_option("--device-trace", pa.device_trace, "JSONL trace with device ttft_s / tbt_s");
  pa.rate_opt = profile->add_option("--device-rate", pa.device_rate, "Device decode tokens/s (overrides tbt_s)");

  PlanArgs pl;
  auto* plan = app.add_subcommand("plan", "Compute the dispatch policy for one budget");
  pl.trace_opt = plan->add_option("--trace", pl.trace, "Trace for the prompt-length distribution");
  pl.profile_opt = plan->add_option("--profile", pl.profile, "Profile snapshot");
  pl.constraint_opt = plan->add_option("--constraint", pl.constraint, "server | device | auto");
  pl.b_opt = plan->add_option("--b", pl.b, "Budget ratio in [0, 1]");
  pl.alpha_opt = plan->add_option("--alpha", pl.alpha, "Tail reserve");

  SimArgs sa, rp;
  auto add_sim = [](CLI::App* c, SimArgs& sa) {
    sa.trace_opt = c->add_option("--trace", sa.trace, "Trace (JSONL)");
    sa.profile_opt = c->add_option("--profile", sa.profile, "Profile snapshot");
    sa.constraint_opt = c->add_option("--constraint", sa.constraint, "server | device | auto");
    sa.budgets_opt = c->add_option("--budgets", sa.budgets, "start:stop:step or a comma list");
    sa.baselines_opt = c->add_option("--baselines", sa.baselines, "Comma list of extra methods, or 'all'");
    sa.runs_opt = c->add_option("--runs", sa.runs, "Repetitions (seeds seed .. seed + runs - 1)");
    sa.alpha_opt = c->add_option("--alpha", sa.alpha, "Tail reserve");
    sa.rc_opt = c->add_option("--r-c", sa.r_c, "Consumer pace, tokens/s (0: no pacing)");
    sa.tmq_opt = c->add_option("--tm-quantile", sa.tm_quantile, "Server TTFT quantile for migration time");
    c->add_flag("--no-migration", sa.no_migration, "Disable decode migration");
    c->add_flag("--oracle-tm", sa.oracle_tm, "Use realized migration latency");
    c->add_option("--threads", sa.threads, "Worker threads (0: all cores)");
  };
  auto* simulate = app.add_subcommand("simulate", "Trace-driven simulation with bootstrap server draws");
  add_sim(simulate, sa);
  auto* replay = app.add_subcommand("replay", "Simulation that replays recorded server timings");
  add_sim(replay, rp);

  ServeArgs se;
  auto* serve = app.add_subcommand("serve", "Run the streaming gateway");
  serve->add_flag("--mock", se.mock, "Start scripted mock upstreams");
  serve->add_option("--port", se.port, "Listen port (0: ephemeral)");
  serve->add_option("--host", se.host, "Listen address");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "Re-emit a JSON report as CSV or a pivot table");
  report->add_option("--in", ra.input, "report.json")->required();
  report->add_option("--format", ra.format, "csv | table");
  report->add_option("--metric", ra.metric, "Metric for the table format");

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic log-normal trace");
  synth->add_option("-n", sy.n, "Requests");
  synth->add_option("--mu", sy.mu, "Log-mean of prompt length");
  synth->add_option("--sigma", sy.sigma, "Log-sd of prompt length");
  synth->add_option("--gap", sy.gap, "Mean inter-arrival, s");
  synth->add_option("--ttft-mu", sy.ttft_mu, "Record server ttft_s with this log-mean");
  synth->add_option("--ttft-sigma", sy.ttft_sigma, "Log-sd of recorded server ttft_s");
  synth->add_option("--out-mu", sy.out_mu, "Log-mean of output length");
  synth->add_option("--out-sigma", sy.out_sigma, "Log-sd of output length");
  synth->add_option("--cap", sy.cap, "Generation cap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    try {
      g.config = json::parse(in);
    } catch (const json::parse_error& e) {
      throw invalid_argument("config '" + g.config_path + "': " + e.what());
    }
    if (!g.config.is_object()) throw invalid_argument("config must be a JSON object");
    g.config_dir = fs::path(g.config_path).parent_path();
    if (g.config_dir.empty()) g.config_dir = ".";
    if (app.get_option("--seed")->count() == 0 && g.config.contains("seed")) g.seed = g.config.at("seed").get<uint64_t>();
  }

  try {
    if (*profile) return cmd_profile(g, pa);
    if (*plan) return cmd_plan(g, pl);
    if (*simulate) return cmd_simulate(g, sa, SamplingMode::kBootstrap);
    if (*replay) return cmd_simulate(g, rp, SamplingMode::kReplay);
    if (*serve) return cmd_serve(g, se);
    if (*report) return cmd_report(g, ra);
    if (*synth) return cmd_synth(g, sy);
  } catch (const json::exception& e) {
    throw invalid_argument(std::string("config: ") + e.what());
  }
  return kUsage;
}

}  // namespace duet::cli

int main(int argc, char** argv) {
  using namespace duet;
  try {
    return cli::run(argc, argv);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    switch (e.code()) {
      case ErrorCode::kInvalidArgument: return cli::kUsage;
      case ErrorCode::kParse:
      case ErrorCode::kData: return cli::kData;
      case ErrorCode::kRuntime: return cli::kRuntime;
    }
    return cli::kRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return cli::kRuntime;
  }
}

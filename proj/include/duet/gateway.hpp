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

// Streaming gateway: an OpenAI-compatible SSE front end that races a device
// upstream against a server upstream, cancels the loser, migrates decode
// once per request and paces delivery to the reader.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "duet/cost.hpp"
#include "duet/dispatch.hpp"
#include "duet/error.hpp"
#include "duet/migration.hpp"
#include "duet/profiles.hpp"
#include "duet/workload.hpp"

namespace duet {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------- config --

struct UpstreamConfig {
  std::string name;
  std::string base_url;  // scheme://host:port
  Endpoint role = Endpoint::kServer;
  std::string auth_env;  // env var holding a bearer token
  double timeout_s = 30.0;
  bool shared_vocab = true;

  std::string auth_token() const {
    if (auth_env.empty()) return {};
    const char* v = std::getenv(auth_env.c_str());
    return v ? v : "";
  }
};

struct GatewayConfig {
  std::vector<UpstreamConfig> upstreams;
  CostRates rates;
  BudgetSpec budget;
  bool auto_constraint = true;  // classify from rates instead of budget.constrained
  double r_c = 4.0;             // <= 0: passthrough
  size_t refresh_window = 64;   // minimum observations for a profile refresh
  size_t window_capacity = 1024;
  double cancel_grace_ms = 50.0;
  double tm_quantile = 0.9;
  int64_t expected_output_len = 128;
  int64_t default_max_tokens = 128;
  EndpointProfile profile;
  std::vector<int64_t> prompt_lengths;
  std::string host = "127.0.0.1";
  int port = 8080;
  int threads = 64;
  double drain_timeout_s = 10.0;
};

inline const UpstreamConfig& upstream_for(const GatewayConfig& cfg, Endpoint role) {
  for (const auto& u : cfg.upstreams) {
    if (u.role == role) return u;
  }
  throw invalid_argument("no upstream configured for role " + std::string(to_string(role)));
}

inline void validate(const GatewayConfig& cfg) {
  int dev = 0, srv = 0;
  for (const auto& u : cfg.upstreams) {
    (u.role == Endpoint::kDevice ? dev : srv) += 1;
    if (u.base_url.empty()) throw invalid_argument("upstream '" + u.name + "' has no url");
    if (!(u.timeout_s > 0.0)) throw invalid_argument("upstream timeout must be positive");
  }
  if (dev != 1 || srv != 1) throw invalid_argument("exactly one device and one server upstream are required");
  validate(cfg.rates);
  validate(cfg.budget);
  validate(cfg.profile.device);
  if (cfg.profile.server_ttft.empty()) throw invalid_argument("profile has no server TTFT samples");
  if (!(cfg.profile.decode.device_rate > 0.0)) throw invalid_argument("device decode rate must be positive");
  if (cfg.prompt_lengths.empty()) throw invalid_argument("prompt length distribution is empty");
  if (cfg.refresh_window < 1) throw invalid_argument("refresh_window must be >= 1");
  if (cfg.window_capacity < cfg.refresh_window) throw invalid_argument("window_capacity < refresh_window");
  if (!(cfg.tm_quantile >= 0.0 && cfg.tm_quantile <= 1.0)) throw invalid_argument("tm_quantile must be in [0, 1]");
  if (cfg.threads < 2) throw invalid_argument("threads must be >= 2");
}

inline Endpoint parse_role(std::string_view s) {
  if (s == "device") return Endpoint::kDevice;
  if (s == "server") return Endpoint::kServer;
  throw invalid_argument("unknown upstream role '" + std::string(s) + "'");
}

// Relative paths inside the config resolve against `base_dir`.
inline GatewayConfig gateway_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  try {
    GatewayConfig c;
    for (const auto& u : j.at("upstreams")) {
      UpstreamConfig up;
      up.name = u.value("name", "");
      up.base_url = u.at("url").get<std::string>();
      up.role = parse_role(u.at("role").get<std::string>());
      up.auth_env = u.value("auth_env", "");
      up.timeout_s = u.value("timeout_s", 30.0);
      up.shared_vocab = u.value("shared_vocab", true);
      c.upstreams.push_back(std::move(up));
    }
    c.rates = rates_from_json(j.at("rates"));
    const auto& b = j.at("budget");
    c.budget.b = b.at("b").get<double>();
    c.budget.alpha = b.value("alpha", 0.05);
    const std::string kind = b.value("constraint", "auto");
    c.auto_constraint = kind == "auto";
    if (!c.auto_constraint) c.budget.constrained = parse_constraint(kind);
    c.r_c = j.value("r_c", 4.0);
    c.refresh_window = j.value("refresh_window", size_t{64});
    c.window_capacity = j.value("window_capacity", std::max<size_t>(1024, c.refresh_window));
    c.cancel_grace_ms = j.value("cancel_grace_ms", 50.0);
    c.tm_quantile = j.value("tm_quantile", 0.9);
    c.expected_output_len = j.value("expected_output_len", int64_t{128});
    c.default_max_tokens = j.value("default_max_tokens", int64_t{128});
    const auto& prof = j.at("profile");
    c.profile = prof.is_string() ? load_profile(resolve(prof.get<std::string>())) : profile_from_json(prof);
    const auto& lens = j.at("prompt_lengths");
    if (lens.is_string()) {
      c.prompt_lengths = prompt_lengths(load_trace(resolve(lens.get<std::string>())));
    } else {
      c.prompt_lengths = lens.get<std::vector<int64_t>>();
    }
    if (j.contains("listen")) {
      const auto& l = j.at("listen");
      c.host = l.value("host", c.host);
      c.port = l.value("port", c.port);
      c.threads = l.value("threads", c.threads);
    }
    c.drain_timeout_s = j.value("drain_timeout_s", c.drain_timeout_s);
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw invalid_argument(std::string("gateway config: ") + e.what());
  }
}

// --------------------------------------------------------------- policies --

struct PolicySnapshot {
  uint64_t id = 0;
  ConstraintKind kind = ConstraintKind::kServerConstrained;
  DispatchPolicy policy;
  ServerTtftEcdf server_ttft;
};

// Immutable policy snapshots swapped under a mutex; sessions hold a
// shared_ptr to the snapshot they started with.
class PolicyStore {
 public:
  explicit PolicyStore(const GatewayConfig& cfg)
      : dist_(LengthDistribution::from_lengths(cfg.prompt_lengths)),
        kind_(cfg.auto_constraint ? classify(cfg.rates) : cfg.budget.constrained),
        b_(cfg.budget.b),
        alpha_(cfg.budget.alpha),
        min_window_(cfg.refresh_window),
        capacity_(cfg.window_capacity) {
    install(cfg.profile.server_ttft);
  }

  std::shared_ptr<const PolicySnapshot> current() const {
    std::lock_guard<std::mutex> lock(mu_);
    return snapshot_;
  }

  ConstraintKind kind() const { return kind_; }

  // Records one server TTFT. Every `min_window` new observations the policy
  // is rebuilt from the window.
  void observe_server_ttft(double ttft_s) {
    std::vector<double> window;
    {
      std::lock_guard<std::mutex> lock(window_mu_);
      window_.push_back(ttft_s);
      while (window_.size() > capacity_) window_.pop_front();
      if (++since_refresh_ < min_window_) return;
      since_refresh_ = 0;
      window.assign(window_.begin(), window_.end());
    }
    refresh_from(window);
  }

  // Rebuilds from the current window. Returns false and keeps the old
  // snapshot when the window is smaller than the minimum.
  bool refresh() {
    std::vector<double> window;
    {
      std::lock_guard<std::mutex> lock(window_mu_);
      window.assign(window_.begin(), window_.end());
      since_refresh_ = 0;
    }
    return refresh_from(window);
  }

  bool refresh_from(std::span<const double> window) {
    if (window.size() < min_window_ || window.size() < ServerTtftEcdf::kMinSamples) return false;
    install(ServerTtftEcdf(std::vector<double>(window.begin(), window.end())));
    return true;
  }

  size_t window_size() const {
    std::lock_guard<std::mutex> lock(window_mu_);
    return window_.size();
  }

 private:
  void install(ServerTtftEcdf f) {
    auto snap = std::make_shared<PolicySnapshot>();
    snap->kind = kind_;
    snap->policy = compute_policy(kind_, dist_, f, b_, alpha_);
    snap->server_ttft = std::move(f);
    std::lock_guard<std::mutex> lock(mu_);
    snap->id = ++next_id_;
    snapshot_ = std::move(snap);
  }

  LengthDistribution dist_;
  ConstraintKind kind_;
  double b_;
  double alpha_;
  size_t min_window_;
  size_t capacity_;

  mutable std::mutex mu_;
  std::shared_ptr<const PolicySnapshot> snapshot_;
  uint64_t next_id_ = 0;

  mutable std::mutex window_mu_;
  std::deque<double> window_;
  size_t since_refresh_ = 0;
};

// -------------------------------------------------------------------- SSE --

// Splits complete `data:` events off the front of `buffer`.
inline std::vector<std::string> take_sse_events(std::string& buffer) {
  std::vector<std::string> out;
  size_t pos;
  while ((pos = buffer.find("\n\n")) != std::string::npos) {
    std::string event = buffer.substr(0, pos);
    buffer.erase(0, pos + 2);
    std::string data;
    size_t start = 0;
    while (start <= event.size()) {
      size_t end = event.find('\n', start);
      if (end == std::string::npos) end = event.size();
      std::string line = event.substr(start, end - start);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.rfind("data:", 0) == 0) {
        std::string v = line.substr(5);
        if (!v.empty() && v.front() == ' ') v.erase(0, 1);
        if (!data.empty()) data += '\n';
        data += v;
      }
      start = end + 1;
    }
    if (!data.empty()) out.push_back(std::move(data));
  }
  return out;
}

inline std::string sse_event(const std::string& data) { return "data: " + data + "\n\n"; }

// One decoded upstream token.
struct UpstreamToken {
  int64_t index = 0;
  std::string text;
};

// Streams one chat completion from an upstream. `on_token` returning false
// aborts the transfer. Returns true iff the stream ended with [DONE].
inline bool stream_upstream(const UpstreamConfig& up, const nlohmann::json& body, int64_t first_index,
                            const std::function<bool(const UpstreamToken&)>& on_token,
                            const std::function<void(std::shared_ptr<httplib::Client>)>& on_client,
                            std::string* error) {
  auto cli = std::make_shared<httplib::Client>(up.base_url);
  const auto timeout = std::chrono::duration<double>(up.timeout_s);
  cli->set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  cli->set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  on_client(cli);

  httplib::Request req;
  req.method = "POST";
  req.path = "/v1/chat/completions";
  req.set_header("Content-Type", "application/json");
  req.set_header("Accept", "text/event-stream");
  if (auto tok = up.auth_token(); !tok.empty()) req.set_header("Authorization", "Bearer " + tok);
  req.body = body.dump();

  std::string buffer;
  int64_t next = first_index;
  bool done = false, aborted = false;
  int status = 0;
  req.response_handler = [&](const httplib::Response& res) {
    status = res.status;
    return res.status == 200;
  };
  req.content_receiver = [&](const char* data, size_t len, uint64_t, uint64_t) {
    buffer.append(data, len);
    for (auto& ev : take_sse_events(buffer)) {
      if (ev == "[DONE]") {
        done = true;
        continue;
      }
      nlohmann::json j = nlohmann::json::parse(ev, nullptr, false);
      if (j.is_discarded() || !j.contains("choices") || j["choices"].empty()) continue;
      const auto& delta = j["choices"][0].value("delta", nlohmann::json::object());
      if (!delta.contains("content") || !delta["content"].is_string()) continue;
      UpstreamToken t;
      t.index = j.contains("x_index") ? j["x_index"].get<int64_t>() : next;
      t.text = delta["content"].get<std::string>();
      next = t.index + 1;
      if (!on_token(t)) {
        aborted = true;
        return false;
      }
    }
    return true;
  };
  auto res = cli->send(req);
  if (done) return true;
  if (error) {
    if (aborted) {
      *error = "canceled";
    } else if (status != 0 && status != 200) {
      *error = "upstream '" + up.name + "' returned HTTP " + std::to_string(status);
    } else if (!res) {
      *error = "upstream '" + up.name + "': " + httplib::to_string(res.error());
    } else {
      *error = "upstream '" + up.name + "' closed the stream without [DONE]";
    }
  }
  return false;
}

// ---------------------------------------------------------------- session --

enum class SessionPhase { kDispatched, kRacing, kDecoding, kMigrating, kDone, kFailed };

inline std::string_view to_string(SessionPhase p) {
  switch (p) {
    case SessionPhase::kDispatched: return "dispatched";
    case SessionPhase::kRacing: return "racing";
    case SessionPhase::kDecoding: return "decoding";
    case SessionPhase::kMigrating: return "migrating";
    case SessionPhase::kDone: return "done";
    case SessionPhase::kFailed: return "failed";
  }
  return "?";
}

// Dispatched -> Racing -> Decoding -> (Migrating -> Decoding)* -> Done, and
// any live phase -> Failed.
inline bool legal_transition(SessionPhase from, SessionPhase to) {
  using P = SessionPhase;
  if (to == P::kFailed) return from != P::kDone && from != P::kFailed;
  switch (from) {
    case P::kDispatched: return to == P::kRacing;
    case P::kRacing: return to == P::kDecoding;
    case P::kDecoding: return to == P::kMigrating || to == P::kDone;
    case P::kMigrating: return to == P::kDecoding;
    default: return false;
  }
}

struct ChatRequest {
  std::string id;
  std::string prompt;
  nlohmann::json messages;
  int64_t max_tokens = 128;
  int64_t prompt_len = 1;
  std::optional<double> lambda;
};

// chars / 4, at least one token.
inline int64_t estimate_prompt_tokens(const std::string& text) {
  return std::max<int64_t>(1, static_cast<int64_t>((text.size() + 3) / 4));
}

inline ChatRequest parse_chat_request(const std::string& body, int64_t default_max_tokens) {
  nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw invalid_argument("request body is not a JSON object");
  if (!j.value("stream", false)) throw invalid_argument("only \"stream\": true is supported");
  if (!j.contains("messages") || !j["messages"].is_array() || j["messages"].empty()) {
    throw invalid_argument("messages must be a non-empty array");
  }
  ChatRequest r;
  r.messages = j["messages"];
  for (const auto& m : r.messages) {
    if (m.contains("content") && m["content"].is_string()) r.prompt += m["content"].get<std::string>();
  }
  if (r.prompt.empty()) throw invalid_argument("prompt is empty");
  r.max_tokens = j.value("max_tokens", default_max_tokens);
  if (r.max_tokens < 1) throw invalid_argument("max_tokens must be >= 1");
  r.prompt_len = estimate_prompt_tokens(r.prompt);
  return r;
}

struct SessionSummary {
  std::string req_id;
  uint64_t policy_id = 0;
  Endpoint winner = Endpoint::kDevice;
  bool migrated = false;
  int64_t handoff_index = -1;
  int64_t delayed_tokens = 0;
  int64_t tokens = 0;
  UsageLedger usage;
  double unified_cost = 0.0;
  std::vector<SessionPhase> phases;
  std::optional<std::string> error;
};

class Gateway;

// One client stream. The handler thread owns the session: it runs the
// paced consumer; upstream threads only push tokens under the lock.
class Session {
 public:
  Session(const GatewayConfig& cfg, PolicyStore& store, std::shared_ptr<const PolicySnapshot> snap,
          ChatRequest req, const std::atomic<bool>& abort)
      : cfg_(cfg), store_(store), snap_(std::move(snap)), req_(std::move(req)), abort_(abort) {
    rates_ = cfg_.rates;
    if (req_.lambda) rates_.lambda = *req_.lambda;
    t0_ = Clock::now();
  }

  ~Session() { shutdown_upstreams(); }

  // Streams SSE text through `write`; returns when the stream is finished.
  SessionSummary run(const std::function<bool(const std::string&)>& write) {
    const auto decision = decide(snap_->policy, Request{req_.id, 0.0, req_.prompt_len, req_.max_tokens});
    {
      std::lock_guard<std::mutex> lock(mu_);
      transition(SessionPhase::kRacing);
      issued_[idx(Endpoint::kServer)] = decision.server_issue;
      issued_[idx(Endpoint::kDevice)] = decision.device_participates();
      attempt_[0] = attempt_[1] = 1;
    }
    if (decision.server_issue) spawn(Endpoint::kServer, 0.0, base_body(), 0, 1);
    if (decision.device_participates()) spawn(Endpoint::kDevice, decision.device_start_delay_s, base_body(), 0, 1);

    const std::string chunk_id = "chatcmpl-" + req_.id;
    int64_t next = 0;
    double first_delivery = 0.0;
    bool client_gone = false;
    std::optional<std::string> error;
    while (true) {
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait_for(lock, std::chrono::milliseconds(20), [&] {
        return next < static_cast<int64_t>(tokens_.size()) || finished_locked() || failed_ || abort_.load();
      });
      if (abort_.load() && !finished_locked()) {
        error = "gateway shutting down";
        break;
      }
      if (next < static_cast<int64_t>(tokens_.size())) {
        if (cfg_.r_c > 0.0 && next > 0) {
          const double due = first_delivery + static_cast<double>(next) / cfg_.r_c;
          const double now = seconds_since(t0_);
          if (now < due) {
            lock.unlock();
            std::this_thread::sleep_for(std::chrono::duration<double>(due - now));
            continue;
          }
        }
        nlohmann::json chunk = {
            {"id", chunk_id},
            {"object", "chat.completion.chunk"},
            {"model", "duet"},
            {"choices", {{{"index", 0}, {"delta", {{"content", tokens_[static_cast<size_t>(next)]}}}, {"finish_reason", nullptr}}}},
            {"x_index", next},
            {"x_endpoint", std::string(to_string(producer_[static_cast<size_t>(next)]))}};
        if (next == 0) first_delivery = seconds_since(t0_);
        ++next;
        delivered_ = next;
        lock.unlock();
        maybe_trigger_migration();
        if (!write(sse_event(chunk.dump()))) {
          client_gone = true;
          break;
        }
        continue;
      }
      if (finished_locked()) break;
      if (failed_) {
        error = failure_reason_;
        break;
      }
    }

    shutdown_upstreams();
    SessionSummary s = summarize(error);
    if (client_gone) return s;
    if (error) {
      nlohmann::json err = {{"error", {{"message", *error}, {"type", "upstream_error"}}}, {"x_index", next}};
      write(sse_event(err.dump()));
    } else {
      nlohmann::json usage = {{"prompt_tokens", req_.prompt_len},
                              {"completion_tokens", s.tokens},
                              {"total_tokens", req_.prompt_len + s.tokens}};
      nlohmann::json phases = nlohmann::json::array();
      for (auto p : s.phases) phases.push_back(std::string(to_string(p)));
      nlohmann::json x = {{"winner", std::string(to_string(s.winner))},
                          {"migrated", s.migrated},
                          {"delayed_tokens", s.delayed_tokens},
                          {"unified_cost", s.unified_cost},
                          {"handoff_index", s.handoff_index},
                          {"policy_snapshot", s.policy_id},
                          {"ledger", to_json(s.usage)},
                          {"phases", phases}};
      nlohmann::json last = {{"id", chunk_id},
                             {"object", "chat.completion.chunk"},
                             {"model", "duet"},
                             {"choices", {{{"index", 0}, {"delta", nlohmann::json::object()}, {"finish_reason", "stop"}}}},
                             {"usage", usage},
                             {"x_disco", x}};
      write(sse_event(last.dump()));
    }
    write(sse_event("[DONE]"));
    return s;
  }

 private:
  static size_t idx(Endpoint e) { return e == Endpoint::kDevice ? 0 : 1; }

  nlohmann::json base_body() const {
    return {{"model", "duet"}, {"messages", req_.messages}, {"stream", true}, {"max_tokens", req_.max_tokens}};
  }

  void transition(SessionPhase to) {
    if (!legal_transition(phase_, to)) {
      throw Error(ErrorCode::kRuntime, "illegal session transition " + std::string(to_string(phase_)) +
                                           " -> " + std::string(to_string(to)));
    }
    phase_ = to;
    phases_.push_back(to);
  }

  bool finished_locked() const {
    return active_ && done_[idx(*active_)] && delivered_ >= static_cast<int64_t>(tokens_.size());
  }

  // Each upstream call is an attempt; a superseded attempt is ignored.
  bool stale_locked(size_t i, int attempt) const { return cancel_[i] || stopping_ || attempt != attempt_[i]; }

  void spawn(Endpoint e, double delay_s, nlohmann::json body, int64_t first_index, int attempt) {
    std::lock_guard<std::mutex> lock(threads_mu_);
    threads_.emplace_back([this, e, delay_s, body = std::move(body), first_index, attempt] {
      upstream_main(e, delay_s, body, first_index, attempt);
    });
  }

  void upstream_main(Endpoint e, double delay_s, const nlohmann::json& body, int64_t first_index, int attempt) {
    const size_t i = idx(e);
    if (delay_s > 0.0) {
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait_for(lock, std::chrono::duration<double>(delay_s), [&] { return stale_locked(i, attempt); });
      if (stale_locked(i, attempt)) return;
    }
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (stale_locked(i, attempt)) return;
      if (attempt == 1) {
        started_at_[i] = seconds_since(t0_);
        started_[i] = true;
      }
    }
    std::string error;
    const auto& up = upstream_for(cfg_, e);
    bool ok = stream_upstream(
        up, body, first_index, [&](const UpstreamToken& t) { return on_token(e, attempt, t); },
        [&](std::shared_ptr<httplib::Client> c) {
          std::lock_guard<std::mutex> lock(mu_);
          if (attempt == attempt_[i]) clients_[i] = std::move(c);
        },
        &error);
    on_end(e, attempt, ok, error);
  }

  // Called from upstream threads. Returning false aborts that upstream.
  bool on_token(Endpoint e, int attempt, const UpstreamToken& t) {
    std::shared_ptr<httplib::Client> to_stop;
    std::optional<double> server_ttft;
    bool accepted = false;
    {
      std::lock_guard<std::mutex> lock(mu_);
      const size_t i = idx(e);
      if (stale_locked(i, attempt)) return false;
      const double now = seconds_since(t0_);
      if (!winner_) {
        winner_ = e;
        active_ = e;
        first_token_at_[i] = now;
        transition(SessionPhase::kDecoding);
        const size_t o = idx(other(e));
        cancel_[o] = true;
        to_stop = clients_[o];
        if (e == Endpoint::kServer) server_ttft = now;
        plan_migration_locked();
      } else if (migration_target_ && e == *migration_target_ && !target_live_) {
        // Stop barrier: the source ends at its last accepted token.
        target_live_ = true;
        first_token_at_[i] = now;
        const size_t s = idx(other(e));
        cancel_[s] = true;
        to_stop = clients_[s];
        handoff_index_ = static_cast<int64_t>(tokens_.size());
        active_ = e;
        transition(SessionPhase::kDecoding);
      }
      if (active_ && e == *active_) {
        if (t.index == static_cast<int64_t>(tokens_.size())) {
          tokens_.push_back(t.text);
          gen_s_.push_back(now);
          producer_.push_back(e);
          decode_tokens_[i] += 1;
          accepted = true;
        } else if (t.index < static_cast<int64_t>(tokens_.size())) {
          dropped_[i] += 1;  // already delivered by the source
          decode_tokens_[i] += 1;
        } else {
          fail_locked("upstream '" + std::string(to_string(e)) + "' skipped token " +
                      std::to_string(tokens_.size()));
          return false;
        }
      } else {
        return false;
      }
    }
    if (to_stop) to_stop->stop();
    if (server_ttft) store_.observe_server_ttft(*server_ttft);
    if (accepted) {
      cv_.notify_all();
      maybe_trigger_migration();
    }
    return true;
  }

  void on_end(Endpoint e, int attempt, bool ok, const std::string& error) {
    std::shared_ptr<httplib::Client> to_stop;
    {
      std::lock_guard<std::mutex> lock(mu_);
      const size_t i = idx(e);
      if (stale_locked(i, attempt)) {
        cv_.notify_all();
        return;
      }
      if (ok) {
        done_[i] = true;
        if (migration_target_ && !target_live_ && e != *migration_target_) {
          // Source finished before the target came online.
          const size_t t = idx(*migration_target_);
          cancel_[t] = true;
          to_stop = clients_[t];
          migration_target_.reset();
          transition(SessionPhase::kDecoding);
        }
      } else {
        failed_ep_[i] = true;
        last_error_ = error;
        if (migration_target_ && e == *migration_target_ && !target_live_) {
          migration_target_.reset();  // keep decoding on the source
          transition(SessionPhase::kDecoding);
        } else if (active_ && e == *active_) {
          fail_locked(error);
        } else if (!winner_) {
          const size_t o = idx(other(e));
          if (!issued_[o] || failed_ep_[o]) fail_locked(error);
        }
      }
    }
    if (to_stop) to_stop->stop();
    cv_.notify_all();
  }

  void fail_locked(const std::string& reason) {
    if (failed_) return;
    failed_ = true;
    failure_reason_ = reason;
    if (legal_transition(phase_, SessionPhase::kFailed)) transition(SessionPhase::kFailed);
  }

  // Evaluated once, right after the prefill winner is known.
  void plan_migration_locked() {
    if (req_.max_tokens <= 1) return;
    const Endpoint src = *winner_;
    const Endpoint tgt = other(src);
    auto decode_unit = [&](Endpoint e) {
      return e == Endpoint::kServer
                 ? rates_.server_decode
                 : flops_to_dollars(device_decode_flops(rates_, req_.prompt_len), rates_.lambda);
    };
    if (!(decode_unit(tgt) < decode_unit(src))) return;
    const double t_m = tgt == Endpoint::kDevice ? cfg_.profile.device.predict(req_.prompt_len + 1)
                                                : snap_->server_ttft.quantile(cfg_.tm_quantile);
    const int64_t b = cfg_.r_c > 0.0 ? buffer_target(cfg_.r_c, t_m) : 0;
    const double l_remaining =
        static_cast<double>(std::max<int64_t>(0, std::min(req_.max_tokens, cfg_.expected_output_len) - 1));
    const int64_t prefix = req_.prompt_len + 1 + b;
    const double overhead = tgt == Endpoint::kServer
                                ? rates_.server_prefill * static_cast<double>(prefix)
                                : flops_to_dollars(device_prefill_flops(rates_, prefix), rates_.lambda);
    if (!should_migrate(migration_gain(decode_unit(src) - decode_unit(tgt), l_remaining), overhead)) return;
    planned_target_ = tgt;
    buffer_target_ = b;
  }

  // Fires the handoff when the undelivered buffer reaches B.
  void maybe_trigger_migration() {
    nlohmann::json body;
    Endpoint tgt;
    int64_t next_index;
    int attempt;
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (!planned_target_ || migration_evaluated_ || phase_ != SessionPhase::kDecoding || failed_) return;
      if (done_[idx(*active_)]) return;
      const auto generated = static_cast<int64_t>(tokens_.size());
      if (generated - delivered_ < buffer_target_ || generated >= req_.max_tokens) return;
      migration_evaluated_ = true;
      tgt = *planned_target_;
      migration_target_ = tgt;
      next_index = generated;
      const size_t ti = idx(tgt);
      attempt = ++attempt_[ti];
      cancel_[ti] = false;
      done_[ti] = false;
      failed_ep_[ti] = false;
      clients_[ti].reset();
      transition(SessionPhase::kMigrating);
      std::vector<GeneratedToken> prefix;
      prefix.reserve(tokens_.size());
      for (size_t k = 0; k < tokens_.size(); ++k) prefix.push_back({static_cast<int64_t>(k), tokens_[k]});
      const auto payload =
          token_id_payload(req_.id, req_.prompt, prefix, upstream_for(cfg_, tgt).shared_vocab);
      std::string prefix_text;
      for (const auto& t : tokens_) prefix_text += t;
      body = base_body();
      body["messages"].push_back({{"role", "assistant"}, {"content", prefix_text}});
      body["x_disco_resume"] = to_json(payload);
      migration_prefix_ = req_.prompt_len + generated;
    }
    spawn(tgt, 0.0, std::move(body), next_index, attempt);
  }

  void shutdown_upstreams() {
    std::vector<std::shared_ptr<httplib::Client>> clients;
    {
      std::lock_guard<std::mutex> lock(mu_);
      stopping_ = true;
      for (size_t i = 0; i < 2; ++i) {
        if (!done_[i]) cancel_[i] = true;
        if (clients_[i]) clients.push_back(clients_[i]);
      }
    }
    cv_.notify_all();
    for (auto& c : clients) c->stop();
    std::vector<std::thread> threads;
    {
      std::lock_guard<std::mutex> lock(threads_mu_);
      threads.swap(threads_);
    }
    for (auto& t : threads) {
      if (t.joinable()) t.join();
    }
  }

  SessionSummary summarize(const std::optional<std::string>& error) {
    std::lock_guard<std::mutex> lock(mu_);
    SessionSummary s;
    s.req_id = req_.id;
    s.policy_id = snap_->id;
    s.winner = winner_.value_or(Endpoint::kDevice);
    s.migrated = target_live_;
    s.handoff_index = target_live_ ? handoff_index_ : -1;
    s.tokens = static_cast<int64_t>(tokens_.size());
    s.error = error;
    if (!error && legal_transition(phase_, SessionPhase::kDone)) transition(SessionPhase::kDone);
    if (error && legal_transition(phase_, SessionPhase::kFailed)) transition(SessionPhase::kFailed);
    s.phases = phases_;
    const int64_t l = req_.prompt_len;
    const size_t d = idx(Endpoint::kDevice), v = idx(Endpoint::kServer);
    if (started_[v]) s.usage.server_prefill_tokens += static_cast<double>(l);
    if (started_[d]) {
      double frac = 1.0;
      if (winner_ != Endpoint::kDevice) {
        const double predicted = cfg_.profile.device.predict(l);
        const double end = first_token_at_[v] > 0.0 ? first_token_at_[v] : seconds_since(t0_);
        frac = std::clamp((end - started_at_[d]) / predicted, 0.0, 1.0);
      }
      s.usage.device_prefill_flops += frac * device_prefill_flops(rates_, l);
    }
    // A resume request is billed its full prefix once issued, even if the
    // source finished first and the target was canceled.
    if (migration_evaluated_ && planned_target_) {
      if (*planned_target_ == Endpoint::kServer) {
        s.usage.server_prefill_tokens += static_cast<double>(migration_prefix_);
      } else {
        s.usage.device_prefill_flops += device_prefill_flops(rates_, migration_prefix_);
      }
    }
    s.usage.server_decode_tokens = static_cast<double>(decode_tokens_[v]);
    s.usage.device_decode_flops =
        static_cast<double>(decode_tokens_[d]) * device_decode_flops(rates_, l + s.tokens / 2);
    s.unified_cost = s.usage.cost(rates_);
    if (s.migrated && cfg_.r_c > 0.0) s.delayed_tokens = count_delayed_tokens(gen_s_, cfg_.r_c);
    return s;
  }

  const GatewayConfig& cfg_;
  PolicyStore& store_;
  std::shared_ptr<const PolicySnapshot> snap_;
  ChatRequest req_;
  const std::atomic<bool>& abort_;
  CostRates rates_;
  Clock::time_point t0_;

  std::mutex mu_;
  std::condition_variable cv_;
  SessionPhase phase_ = SessionPhase::kDispatched;
  std::vector<SessionPhase> phases_ = {SessionPhase::kDispatched};
  std::vector<std::string> tokens_;
  std::vector<double> gen_s_;
  std::vector<Endpoint> producer_;
  int64_t delivered_ = 0;
  std::optional<Endpoint> winner_, active_;
  std::optional<Endpoint> planned_target_, migration_target_;
  int64_t buffer_target_ = 0;
  int64_t migration_prefix_ = 0;
  bool migration_evaluated_ = false;
  bool target_live_ = false;
  int64_t handoff_index_ = -1;
  bool issued_[2] = {false, false};
  bool started_[2] = {false, false};
  double started_at_[2] = {0.0, 0.0};
  double first_token_at_[2] = {0.0, 0.0};
  bool cancel_[2] = {false, false};
  int attempt_[2] = {0, 0};
  bool done_[2] = {false, false};
  bool failed_ep_[2] = {false, false};
  int64_t decode_tokens_[2] = {0, 0};
  int64_t dropped_[2] = {0, 0};
  bool failed_ = false;
  bool stopping_ = false;
  std::string failure_reason_, last_error_;
  std::shared_ptr<httplib::Client> clients_[2];

  std::mutex threads_mu_;
  std::vector<std::thread> threads_;
};

// ---------------------------------------------------------------- gateway --

class Gateway {
 public:
  explicit Gateway(GatewayConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    store_ = std::make_unique<PolicyStore>(cfg_);
    const int threads = cfg_.threads;
    svr_.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<size_t>(threads)); };
    svr_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      auto snap = store_->current();
      nlohmann::json j = {{"status", draining_ ? "draining" : "ok"},
                          {"policy_snapshot", snap->id},
                          {"constraint", std::string(to_string(snap->kind))},
                          {"active_sessions", active_.load()}};
      res.set_content(j.dump(), "application/json");
    });
    svr_.Get("/v1/policy", [this](const httplib::Request&, httplib::Response& res) {
      auto snap = store_->current();
      auto j = to_json(snap->policy);
      j["id"] = snap->id;
      res.set_content(j.dump(), "application/json");
    });
    svr_.Post("/v1/admin/refresh", [this](const httplib::Request&, httplib::Response& res) {
      const bool ok = store_->refresh();
      nlohmann::json j = {{"refreshed", ok}, {"policy_snapshot", store_->current()->id}};
      res.set_content(j.dump(), "application/json");
    });
    svr_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      handle_chat(req, res);
    });
  }

  ~Gateway() { stop(); }

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start() {
    int port = cfg_.port;
    if (port == 0) {
      port = svr_.bind_to_any_port(cfg_.host);
    } else if (!svr_.bind_to_port(cfg_.host, port)) {
      port = -1;
    }
    if (port < 0) throw Error(ErrorCode::kRuntime, "cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
    port_ = port;
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
    return port_;
  }

  // Refuses new streams, waits for in-flight ones, and after the timeout
  // makes the stragglers emit an error event. Returns true on a clean drain.
  bool drain(double timeout_s) {
    draining_ = true;
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(timeout_s));
    while (active_.load() > 0 && Clock::now() < deadline) std::this_thread::sleep_for(std::chrono::milliseconds(10));
    const bool clean = active_.load() == 0;
    if (!clean) {
      abort_ = true;
      const auto hard = Clock::now() + std::chrono::seconds(5);
      while (active_.load() > 0 && Clock::now() < hard) std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    return clean;
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    abort_ = true;
    svr_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  PolicyStore& policies() { return *store_; }
  const GatewayConfig& config() const { return cfg_; }
  int active_sessions() const { return active_.load(); }

  // Most recent session summaries, newest last.
  std::vector<SessionSummary> recent_sessions() const {
    std::lock_guard<std::mutex> lock(log_mu_);
    return {log_.begin(), log_.end()};
  }

 private:
  void handle_chat(const httplib::Request& req, httplib::Response& res) {
    if (draining_) {
      res.status = 503;
      res.set_content(R"({"error":{"message":"gateway is draining"}})", "application/json");
      return;
    }
    ChatRequest chat;
    try {
      chat = parse_chat_request(req.body, cfg_.default_max_tokens);
      if (req.has_header("X-Exchange-Rate")) {
        const double lambda = std::stod(req.get_header_value("X-Exchange-Rate"));
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw invalid_argument("bad X-Exchange-Rate");
        chat.lambda = lambda;
      }
    } catch (const std::exception& e) {
      res.status = 400;
      nlohmann::json j = {{"error", {{"message", e.what()}}}};
      res.set_content(j.dump(), "application/json");
      return;
    }
    chat.id = std::to_string(++next_req_);
    ++active_;
    auto snap = store_->current();
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [this, chat = std::move(chat), snap](size_t, httplib::DataSink& sink) mutable {
          SessionSummary summary;
          try {
            Session session(cfg_, *store_, snap, chat, abort_);
            summary = session.run([&](const std::string& s) { return sink.write(s.data(), s.size()); });
          } catch (const std::exception& e) {
            nlohmann::json err = {{"error", {{"message", e.what()}}}};
            const std::string text = sse_event(err.dump()) + sse_event("[DONE]");
            sink.write(text.data(), text.size());
            summary.error = e.what();
          }
          sink.done();
          {
            std::lock_guard<std::mutex> lock(log_mu_);
            log_.push_back(std::move(summary));
            while (log_.size() > 256) log_.pop_front();
          }
          --active_;
          return true;
        },
        [this, counted = true](bool success) {
          (void)counted;
          (void)success;
        });
  }

  GatewayConfig cfg_;
  std::unique_ptr<PolicyStore> store_;
  httplib::Server svr_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<bool> draining_{false};
  std::atomic<bool> abort_{false};
  std::atomic<bool> stopped_{false};
  std::atomic<int> active_{0};
  std::atomic<uint64_t> next_req_{0};
  mutable std::mutex log_mu_;
  std::deque<SessionSummary> log_;
};

// ------------------------------------------------------------------- mock --

// Timing script for MockUpstream.
struct MockScript {
  double ttft_s = 0.05;
  double per_token_prefill_s = 0.0;  // added per prompt token
  double resume_ttft_s = -1.0;       // < 0: same as ttft_s
  double tbt_s = 0.02;
  int fail_status = 0;               // non-zero: reply with this status
  int64_t drop_after_tokens = -1;    // >= 0: close the stream after this many tokens
};

// Scripted OpenAI-style streaming upstream. Token i is the text "w{i} ".
// A resume request (carrying x_disco_resume) starts at its next_index.
class MockUpstream {
 public:
  using Script = MockScript;


  struct Stats {
    int requests = 0;
    int resumes = 0;
    int canceled = 0;
    int completed = 0;
    std::vector<nlohmann::json> bodies;
  };

  explicit MockUpstream(Script script = {}) : script_(script) {
    svr_.new_task_queue = [] { return new httplib::ThreadPool(32); };
    svr_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      handle(req, res);
    });
  }

  ~MockUpstream() { stop(); }

  int start(const std::string& host = "127.0.0.1") {
    port_ = svr_.bind_to_any_port(host);
    if (port_ < 0) throw Error(ErrorCode::kRuntime, "mock upstream cannot bind");
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
    return port_;
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    svr_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int port() const { return port_; }

  void set_script(const Script& s) {
    std::lock_guard<std::mutex> lock(mu_);
    script_ = s;
  }

  Stats stats() const {
    std::lock_guard<std::mutex> lock(mu_);
    return stats_;
  }

 private:
  // Sleeps in short slices so cancellation and shutdown stay responsive.
  bool nap(double s, httplib::DataSink& sink) {
    const auto until = Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(s));
    while (Clock::now() < until) {
      if (stopped_.load() || !sink.is_writable()) return false;
      std::this_thread::sleep_for(std::min<Clock::duration>(until - Clock::now(), std::chrono::milliseconds(2)));
    }
    return !stopped_.load();
  }

  void handle(const httplib::Request& req, httplib::Response& res) {
    Script script;
    nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
    {
      std::lock_guard<std::mutex> lock(mu_);
      script = script_;
      ++stats_.requests;
      stats_.bodies.push_back(body);
      if (!body.is_discarded() && body.contains("x_disco_resume")) ++stats_.resumes;
    }
    if (script.fail_status != 0) {
      res.status = script.fail_status;
      res.set_content(R"({"error":{"message":"scripted failure"}})", "application/json");
      return;
    }
    if (body.is_discarded()) {
      res.status = 400;
      return;
    }
    int64_t start = 0;
    int64_t prompt_tokens = 0;
    for (const auto& m : body.value("messages", nlohmann::json::array())) {
      if (m.contains("content") && m["content"].is_string()) {
        prompt_tokens += estimate_prompt_tokens(m["content"].get<std::string>());
      }
    }
    const bool resume = body.contains("x_disco_resume");
    if (resume) start = body["x_disco_resume"].value("next_index", int64_t{0});
    const int64_t total = body.value("max_tokens", int64_t{16});
    double ttft = resume && script.resume_ttft_s >= 0.0 ? script.resume_ttft_s : script.ttft_s;
    ttft += script.per_token_prefill_s * static_cast<double>(prompt_tokens);
    res.set_chunked_content_provider(
        "text/event-stream", [this, script, start, total, ttft](size_t, httplib::DataSink& sink) {
          if (!nap(ttft, sink)) return canceled(sink);
          for (int64_t i = start; i < total; ++i) {
            if (i > start && !nap(script.tbt_s, sink)) return canceled(sink);
            if (script.drop_after_tokens >= 0 && i - start >= script.drop_after_tokens) return false;
            nlohmann::json chunk = {
                {"object", "chat.completion.chunk"},
                {"choices", {{{"index", 0}, {"delta", {{"content", "w" + std::to_string(i) + " "}}}}}},
                {"x_index", i}};
            const std::string ev = sse_event(chunk.dump());
            if (!sink.write(ev.data(), ev.size())) return canceled(sink);
          }
          const std::string done = sse_event("[DONE]");
          sink.write(done.data(), done.size());
          sink.done();
          std::lock_guard<std::mutex> lock(mu_);
          ++stats_.completed;
          return true;
        });
  }

  bool canceled(httplib::DataSink&) {
    std::lock_guard<std::mutex> lock(mu_);
    ++stats_.canceled;
    return false;
  }

  mutable std::mutex mu_;
  Script script_;
  Stats stats_;
  httplib::Server svr_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<bool> stopped_{false};
};

}  // namespace duet

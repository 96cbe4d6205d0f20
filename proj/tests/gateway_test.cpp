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

#include "duet/gateway.hpp"

#include <gtest/gtest.h>

#include <random>

namespace duet {
namespace {

using nlohmann::json;

struct Event {
  double t = 0.0;
  std::string data;
};

struct StreamResult {
  int status = 0;
  std::vector<Event> events;
  std::string body;
};

// Posts a streaming chat request; stops reading after `read_limit` events
// when it is non-negative.
StreamResult stream_chat(int port, const std::string& prompt, int64_t max_tokens, int read_limit = -1,
                         httplib::Headers headers = {}) {
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(std::chrono::seconds(30));
  StreamResult out;
  std::string buffer;
  const auto t0 = Clock::now();
  httplib::Request req;
  req.method = "POST";
  req.path = "/v1/chat/completions";
  req.headers = std::move(headers);
  req.set_header("Content-Type", "application/json");
  req.body = json{{"model", "any"},
                  {"stream", true},
                  {"max_tokens", max_tokens},
                  {"messages", {{{"role", "user"}, {"content", prompt}}}}}
                 .dump();
  req.response_handler = [&](const httplib::Response& r) {
    out.status = r.status;
    return true;
  };
  req.content_receiver = [&](const char* d, size_t n, uint64_t, uint64_t) {
    out.body.append(d, n);
    buffer.append(d, n);
    for (auto& e : take_sse_events(buffer)) {
      out.events.push_back({seconds_since(t0), e});
      if (read_limit >= 0 && static_cast<int>(out.events.size()) >= read_limit) return false;
    }
    return true;
  };
  cli.send(req);
  return out;
}

std::vector<json> token_chunks(const StreamResult& r) {
  std::vector<json> out;
  for (const auto& e : r.events) {
    if (e.data == "[DONE]") continue;
    auto j = json::parse(e.data);
    if (j.contains("x_index") && !j.contains("error")) out.push_back(j);
  }
  return out;
}

json final_chunk(const StreamResult& r) {
  for (const auto& e : r.events) {
    if (e.data == "[DONE]") continue;
    auto j = json::parse(e.data);
    if (j.contains("x_disco")) return j;
  }
  return {};
}

// Every stream ends with exactly one [DONE], indices run 0..n-1.
void expect_well_formed(const StreamResult& r, int64_t expected_tokens) {
  ASSERT_EQ(r.status, 200);
  ASSERT_FALSE(r.events.empty());
  int done = 0;
  for (const auto& e : r.events) done += e.data == "[DONE]";
  EXPECT_EQ(done, 1);
  EXPECT_EQ(r.events.back().data, "[DONE]");
  auto toks = token_chunks(r);
  ASSERT_EQ(static_cast<int64_t>(toks.size()), expected_tokens);
  for (size_t i = 0; i < toks.size(); ++i) {
    EXPECT_EQ(toks[i]["x_index"].get<int64_t>(), static_cast<int64_t>(i));
    EXPECT_EQ(toks[i]["choices"][0]["delta"]["content"].get<std::string>(), "w" + std::to_string(i) + " ");
  }
  auto last = final_chunk(r);
  ASSERT_FALSE(last.is_null());
  EXPECT_EQ(last["usage"]["completion_tokens"].get<int64_t>(), expected_tokens);
}

EndpointProfile make_profile(double k, double c, double server_ttft_center, int n = 256) {
  EndpointProfile p;
  p.device = {k, c};
  p.decode.device_rate = 20.0;
  std::vector<double> s(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) s[static_cast<size_t>(i)] = server_ttft_center * (0.5 + static_cast<double>(i) / n);
  p.server_ttft = ServerTtftEcdf(std::move(s));
  return p;
}

// Device decode is cheaper than server decode.
CostRates cheap_device_rates() { return {0.15e-6, 0.6e-6, 8e8, 8e8, 1e-10, std::nullopt}; }
// Device decode is more expensive than server decode.
CostRates dear_device_rates() { return {0.15e-6, 0.6e-6, 8e8, 8e8, 1e-8, std::nullopt}; }

struct Rig {
  std::unique_ptr<MockUpstream> device, server;
  std::unique_ptr<Gateway> gw;
  int port = 0;
};

Rig make_rig(MockUpstream::Script dev, MockUpstream::Script srv, ConstraintKind kind, double b, CostRates rates,
             EndpointProfile profile, double r_c = 10.0) {
  Rig rig;
  rig.device = std::make_unique<MockUpstream>(dev);
  rig.server = std::make_unique<MockUpstream>(srv);
  rig.device->start();
  rig.server->start();
  GatewayConfig cfg;
  cfg.upstreams = {{"dev", rig.device->url(), Endpoint::kDevice, "", 10.0, true},
                   {"srv", rig.server->url(), Endpoint::kServer, "", 10.0, true}};
  cfg.rates = rates;
  cfg.budget = {b, 0.05, kind};
  cfg.auto_constraint = false;
  cfg.r_c = r_c;
  cfg.profile = std::move(profile);
  cfg.prompt_lengths = {4, 8, 8, 16, 32, 64};
  cfg.port = 0;
  cfg.threads = 48;
  rig.gw = std::make_unique<Gateway>(cfg);
  rig.port = rig.gw->start();
  return rig;
}

template <typename F>
bool eventually(F&& f, double timeout_s = 3.0) {
  const auto until = Clock::now() + std::chrono::milliseconds(static_cast<int>(timeout_s * 1000));
  while (Clock::now() < until) {
    if (f()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  return f();
}

const std::string kPrompt = "hello world, tell me a story";  // 28 chars -> 7 tokens

TEST(Sse, TakeEventsHandlesPartialAndMultiline) {
  std::string buf = "data: a\n\ndata: b\ndata: c\n\ndata: par";
  auto ev = take_sse_events(buf);
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev[0], "a");
  EXPECT_EQ(ev[1], "b\nc");
  EXPECT_EQ(buf, "data: par");
  buf += "t\r\n\n";
  ev = take_sse_events(buf);
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_EQ(ev[0], "part");
}

TEST(SessionPhase, TransitionTable) {
  using P = SessionPhase;
  EXPECT_TRUE(legal_transition(P::kDispatched, P::kRacing));
  EXPECT_TRUE(legal_transition(P::kRacing, P::kDecoding));
  EXPECT_TRUE(legal_transition(P::kDecoding, P::kMigrating));
  EXPECT_TRUE(legal_transition(P::kMigrating, P::kDecoding));
  EXPECT_TRUE(legal_transition(P::kDecoding, P::kDone));
  EXPECT_TRUE(legal_transition(P::kRacing, P::kFailed));
  EXPECT_FALSE(legal_transition(P::kDispatched, P::kDecoding));
  EXPECT_FALSE(legal_transition(P::kRacing, P::kDone));
  EXPECT_FALSE(legal_transition(P::kMigrating, P::kDone));
  EXPECT_FALSE(legal_transition(P::kDone, P::kFailed));
  EXPECT_FALSE(legal_transition(P::kDone, P::kRacing));
}

TEST(ChatRequest, Validation) {
  EXPECT_THROW(parse_chat_request("not json", 16), Error);
  EXPECT_THROW(parse_chat_request(R"({"messages":[{"content":"x"}]})", 16), Error);
  EXPECT_THROW(parse_chat_request(R"({"stream":true,"messages":[]})", 16), Error);
  EXPECT_THROW(parse_chat_request(R"({"stream":true,"max_tokens":0,"messages":[{"content":"x"}]})", 16), Error);
  auto r = parse_chat_request(R"({"stream":true,"messages":[{"role":"user","content":"abcdefghi"}]})", 16);
  EXPECT_EQ(r.prompt_len, 3);
  EXPECT_EQ(r.max_tokens, 16);
}

TEST(Gateway, ServerWinsAndDeviceIsCanceledWithPartialPrefill) {
  // Server-constrained at b = 1: every request races from t = 0.
  auto rig = make_rig({.ttft_s = 1.0, .tbt_s = 0.01}, {.ttft_s = 0.1, .tbt_s = 0.01},
                      ConstraintKind::kServerConstrained, 1.0, dear_device_rates(), make_profile(1e-6, 1.0, 0.1));
  auto r = stream_chat(rig.port, kPrompt, 8);
  expect_well_formed(r, 8);
  auto x = final_chunk(r)["x_disco"];
  EXPECT_EQ(x["winner"], "server");
  EXPECT_FALSE(x["migrated"].get<bool>());
  for (const auto& t : token_chunks(r)) EXPECT_EQ(t["x_endpoint"], "server");
  // Device started at 0 and ran about 0.1 s of a 1 s prefill.
  const double full = device_prefill_flops(dear_device_rates(), 7);
  const double billed = x["ledger"]["device_prefill_flops"].get<double>();
  EXPECT_GT(billed, 0.0);
  EXPECT_LT(billed, 0.5 * full);
  EXPECT_DOUBLE_EQ(x["ledger"]["server_prefill_tokens"].get<double>(), 7.0);
  EXPECT_DOUBLE_EQ(x["ledger"]["server_decode_tokens"].get<double>(), 8.0);
  EXPECT_TRUE(eventually([&] { return rig.device->stats().canceled == 1; }));
  EXPECT_EQ(rig.device->stats().completed, 0);
  auto phases = x["phases"];
  EXPECT_EQ(phases.front(), "dispatched");
  EXPECT_EQ(phases.back(), "done");
}

TEST(Gateway, DeviceOnlyBelowThreshold) {
  // b = 0 gives no concurrency: all requests stay on the device.
  auto rig = make_rig({.ttft_s = 0.05, .tbt_s = 0.01}, {.ttft_s = 0.01, .tbt_s = 0.01},
                      ConstraintKind::kServerConstrained, 0.0, cheap_device_rates(), make_profile(0.01, 0.05, 0.1));
  auto r = stream_chat(rig.port, kPrompt, 5);
  expect_well_formed(r, 5);
  EXPECT_EQ(final_chunk(r)["x_disco"]["winner"], "device");
  EXPECT_EQ(rig.server->stats().requests, 0);
}

TEST(Gateway, ServerDownDeviceServesAfterWait) {
  auto rig = make_rig({.ttft_s = 0.02, .tbt_s = 0.01}, {.fail_status = 503},
                      ConstraintKind::kDeviceConstrained, 0.0, dear_device_rates(), make_profile(0.01, 0.02, 0.4));
  const double w = decide(rig.gw->policies().current()->policy, Request{"x", 0.0, 7, 4}).device_start_delay_s;
  ASSERT_GT(w, 0.0);
  auto r = stream_chat(rig.port, kPrompt, 4);
  expect_well_formed(r, 4);
  EXPECT_EQ(final_chunk(r)["x_disco"]["winner"], "device");
  EXPECT_GE(r.events.front().t, w);
  EXPECT_EQ(rig.server->stats().requests, 1);
  EXPECT_EQ(rig.device->stats().completed, 1);
}

TEST(Gateway, BothUpstreamsDownEndsWithErrorEvent) {
  auto rig = make_rig({.fail_status = 500}, {.fail_status = 503}, ConstraintKind::kServerConstrained, 1.0,
                      dear_device_rates(), make_profile(0.01, 0.02, 0.1));
  auto r = stream_chat(rig.port, kPrompt, 4);
  ASSERT_EQ(r.status, 200);
  ASSERT_GE(r.events.size(), 2u);
  EXPECT_TRUE(json::parse(r.events[r.events.size() - 2].data).contains("error"));
  EXPECT_EQ(r.events.back().data, "[DONE]");
}

TEST(Gateway, MigrationKeepsPaceAndSequence) {
  // Server wins the race, device decode is cheaper, so decode moves to the
  // device once B = ceil(r_c * t_m) tokens are buffered.
  const double r_c = 10.0;
  auto rig = make_rig({.ttft_s = 2.0, .resume_ttft_s = 0.2, .tbt_s = 0.02}, {.ttft_s = 0.05, .tbt_s = 0.05},
                      ConstraintKind::kServerConstrained, 1.0, cheap_device_rates(), make_profile(0.01, 0.25, 0.1),
                      r_c);
  const int64_t n = 40;
  auto r = stream_chat(rig.port, kPrompt, n);
  expect_well_formed(r, n);
  auto x = final_chunk(r)["x_disco"];
  EXPECT_EQ(x["winner"], "server");
  ASSERT_TRUE(x["migrated"].get<bool>());
  EXPECT_EQ(x["delayed_tokens"].get<int64_t>(), 0);
  EXPECT_EQ(rig.device->stats().resumes, 1);
  const auto h = x["handoff_index"].get<int64_t>();
  auto toks = token_chunks(r);
  for (int64_t i = 0; i < n; ++i) {
    EXPECT_EQ(toks[static_cast<size_t>(i)]["x_endpoint"], i < h ? "server" : "device") << i;
  }
  // Delivery gaps stay at the reading pace plus scheduling jitter.
  double max_gap = 0.0;
  for (size_t i = 1; i < static_cast<size_t>(n); ++i) max_gap = std::max(max_gap, r.events[i].t - r.events[i - 1].t);
  EXPECT_LE(max_gap, 1.0 / r_c + 0.08);
  // Resume body carries the token-ID payload.
  auto body = rig.device->stats().bodies.back();
  ASSERT_TRUE(body.contains("x_disco_resume"));
  const auto next = body["x_disco_resume"]["next_index"].get<int64_t>();
  EXPECT_EQ(body["x_disco_resume"]["prefix_ids"].size(), static_cast<size_t>(next));
  EXPECT_LE(next, h);
  auto phases = x["phases"];
  EXPECT_NE(std::find(phases.begin(), phases.end(), "migrating"), phases.end());
  EXPECT_TRUE(eventually([&] { return rig.server->stats().canceled == 1; }));
}

TEST(Gateway, DeviceToServerMigration) {
  // Device-only dispatch with dear device decode: decode moves to the server.
  auto rig = make_rig({.ttft_s = 0.05, .tbt_s = 0.05}, {.ttft_s = 0.1, .tbt_s = 0.01},
                      ConstraintKind::kServerConstrained, 0.0, dear_device_rates(), make_profile(0.01, 0.05, 0.1));
  auto r = stream_chat(rig.port, kPrompt, 30);
  expect_well_formed(r, 30);
  auto x = final_chunk(r)["x_disco"];
  EXPECT_EQ(x["winner"], "device");
  ASSERT_TRUE(x["migrated"].get<bool>());
  EXPECT_EQ(rig.server->stats().resumes, 1);
  EXPECT_GT(x["ledger"]["server_prefill_tokens"].get<double>(), 7.0);
  EXPECT_GT(x["ledger"]["server_decode_tokens"].get<double>(), 0.0);
}

TEST(Gateway, NoMigrationWhenTargetDecodeIsDearer) {
  auto rig = make_rig({.ttft_s = 2.0, .tbt_s = 0.02}, {.ttft_s = 0.05, .tbt_s = 0.01},
                      ConstraintKind::kServerConstrained, 1.0, dear_device_rates(), make_profile(0.01, 0.25, 0.1));
  auto r = stream_chat(rig.port, kPrompt, 20);
  expect_well_formed(r, 20);
  EXPECT_FALSE(final_chunk(r)["x_disco"]["migrated"].get<bool>());
  EXPECT_EQ(rig.device->stats().resumes, 0);
}

TEST(Gateway, ClientDisconnectCancelsUpstreams) {
  auto rig = make_rig({.ttft_s = 0.02, .tbt_s = 0.05}, {.ttft_s = 5.0}, ConstraintKind::kServerConstrained, 0.0,
                      dear_device_rates(), make_profile(0.01, 0.02, 0.1), 0.0);
  auto r = stream_chat(rig.port, kPrompt, 200, 2);
  EXPECT_EQ(r.events.size(), 2u);
  EXPECT_TRUE(eventually([&] { return rig.device->stats().canceled == 1; }));
  EXPECT_TRUE(eventually([&] { return rig.gw->active_sessions() == 0; }));
}

TEST(Gateway, ExchangeRateHeaderOverridesLambda) {
  auto rig = make_rig({.ttft_s = 0.02, .tbt_s = 0.01}, {.ttft_s = 1.0}, ConstraintKind::kServerConstrained, 0.0,
                      dear_device_rates(), make_profile(0.01, 0.02, 0.1), 0.0);
  auto a = final_chunk(stream_chat(rig.port, kPrompt, 4))["x_disco"];
  auto b = final_chunk(stream_chat(rig.port, kPrompt, 4, -1, {{"X-Exchange-Rate", "2e-8"}}))["x_disco"];
  // Only the device share scales with lambda; server dollars do not.
  auto device_flops = [](const json& x) {
    return x["ledger"]["device_prefill_flops"].get<double>() + x["ledger"]["device_decode_flops"].get<double>();
  };
  const double lambda = dear_device_rates().lambda;
  ASSERT_DOUBLE_EQ(device_flops(a), device_flops(b));
  const double server_a = a["unified_cost"].get<double>() - lambda * device_flops(a) / 1e6;
  const double server_b = b["unified_cost"].get<double>() - 2e-8 * device_flops(b) / 1e6;
  EXPECT_GT(lambda * device_flops(a) / 1e6, 0.0);
  EXPECT_NEAR(server_a, server_b, 1e-12);
  auto bad = stream_chat(rig.port, kPrompt, 4, -1, {{"X-Exchange-Rate", "-1"}});
  EXPECT_EQ(bad.status, 400);
}

TEST(PolicyStore, RefreshWithSlowerServerGrowsTailWait) {
  GatewayConfig cfg;
  cfg.rates = dear_device_rates();
  cfg.budget = {0.5, 0.05, ConstraintKind::kDeviceConstrained};
  cfg.auto_constraint = false;
  cfg.profile = make_profile(0.01, 0.02, 0.3);
  cfg.prompt_lengths = {4, 8, 16, 32};
  cfg.refresh_window = 64;
  PolicyStore store(cfg);
  auto before = store.current();
  const double w0 = std::get<WaitSchedule>(before->policy.plan).w_tail;
  EXPECT_FALSE(store.refresh());  // empty window
  EXPECT_FALSE(store.refresh_from(std::vector<double>(10, 1.0)));
  EXPECT_EQ(store.current()->id, before->id);
  std::vector<double> slow;
  for (double s : before->server_ttft.samples()) slow.push_back(2.0 * s);
  ASSERT_TRUE(store.refresh_from(slow));
  auto after = store.current();
  EXPECT_GT(after->id, before->id);
  EXPECT_GT(std::get<WaitSchedule>(after->policy.plan).w_tail, w0);
  // The old snapshot is untouched.
  EXPECT_DOUBLE_EQ(std::get<WaitSchedule>(before->policy.plan).w_tail, w0);
}

TEST(PolicyStore, AutoRefreshEveryWindow) {
  GatewayConfig cfg;
  cfg.rates = dear_device_rates();
  cfg.budget = {0.5, 0.05, ConstraintKind::kDeviceConstrained};
  cfg.auto_constraint = false;
  cfg.profile = make_profile(0.01, 0.02, 0.3);
  cfg.prompt_lengths = {4, 8};
  cfg.refresh_window = 64;
  PolicyStore store(cfg);
  const auto id0 = store.current()->id;
  for (int i = 0; i < 63; ++i) store.observe_server_ttft(0.5);
  EXPECT_EQ(store.current()->id, id0);
  store.observe_server_ttft(0.5);
  EXPECT_EQ(store.current()->id, id0 + 1);
}

TEST(Gateway, ConcurrentSessionsDuringRefreshSeeWholeSnapshots) {
  auto rig = make_rig({.ttft_s = 0.01, .tbt_s = 0.005}, {.ttft_s = 0.01, .tbt_s = 0.005},
                      ConstraintKind::kDeviceConstrained, 0.5, dear_device_rates(), make_profile(0.001, 0.01, 0.02),
                      0.0);
  auto& store = rig.gw->policies();
  std::atomic<bool> stop{false};
  std::atomic<int> torn{0};
  std::thread refresher([&] {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> scale(0.5, 3.0);
    while (!stop) {
      const double s = scale(rng);
      std::vector<double> window;
      for (int i = 1; i <= 64; ++i) window.push_back(s * 0.001 * i);
      store.refresh_from(window);
    }
  });
  std::thread checker([&] {
    LengthDistribution dist = LengthDistribution::from_lengths(rig.gw->config().prompt_lengths);
    while (!stop) {
      auto snap = store.current();
      auto expect = compute_policy(snap->kind, dist, snap->server_ttft, 0.5, 0.05);
      if (std::get<WaitSchedule>(expect.plan).waits != std::get<WaitSchedule>(snap->policy.plan).waits) ++torn;
    }
  });
  std::vector<std::thread> clients;
  std::atomic<int> ok{0};
  for (int i = 0; i < 100; ++i) {
    clients.emplace_back([&] {
      auto r = stream_chat(rig.port, kPrompt, 4);
      auto toks = token_chunks(r);
      bool good = r.status == 200 && !r.events.empty() && r.events.back().data == "[DONE]" && toks.size() == 4;
      for (size_t k = 0; good && k < toks.size(); ++k) good = toks[k]["x_index"].get<size_t>() == k;
      auto last = final_chunk(r);
      good = good && !last.is_null() && last["x_disco"]["policy_snapshot"].get<uint64_t>() >= 1;
      if (!good) ADD_FAILURE() << "status " << r.status << " events " << r.events.size() << " last " << (r.events.empty() ? "" : r.events.back().data) << " " << (r.events.size() > 1 ? r.events[r.events.size() - 2].data : "");
      ok += good;
    });
  }
  for (auto& t : clients) t.join();
  stop = true;
  refresher.join();
  checker.join();
  EXPECT_EQ(ok.load(), 100);
  EXPECT_EQ(torn.load(), 0);
  EXPECT_GT(store.current()->id, 1u);
}

TEST(Gateway, HealthAndPolicyEndpoints) {
  auto rig = make_rig({}, {}, ConstraintKind::kServerConstrained, 0.5, dear_device_rates(),
                      make_profile(0.01, 0.02, 0.1));
  httplib::Client cli("127.0.0.1", rig.port);
  auto h = cli.Get("/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  auto j = json::parse(h->body);
  EXPECT_EQ(j["status"], "ok");
  EXPECT_EQ(j["policy_snapshot"], 1);
  EXPECT_EQ(j["constraint"], "server");
  auto p = cli.Get("/v1/policy");
  ASSERT_TRUE(p);
  EXPECT_EQ(json::parse(p->body)["constraint"], "server");
  auto bad = cli.Post("/v1/chat/completions", "{}", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
}

TEST(Gateway, DrainRefusesNewAndFlushesStragglers) {
  auto rig = make_rig({.ttft_s = 0.01, .tbt_s = 0.2}, {.ttft_s = 5.0}, ConstraintKind::kServerConstrained, 0.0,
                      dear_device_rates(), make_profile(0.01, 0.02, 0.1), 0.0);
  StreamResult slow;
  std::thread t([&] { slow = stream_chat(rig.port, kPrompt, 100); });
  ASSERT_TRUE(eventually([&] { return rig.gw->active_sessions() == 1; }));
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  const bool clean = rig.gw->drain(0.3);
  EXPECT_FALSE(clean);
  auto refused = stream_chat(rig.port, kPrompt, 4);
  EXPECT_EQ(refused.status, 503);
  t.join();
  ASSERT_GE(slow.events.size(), 3u);
  EXPECT_EQ(slow.events.back().data, "[DONE]");
  auto err = json::parse(slow.events[slow.events.size() - 2].data);
  ASSERT_TRUE(err.contains("error"));
  // Tokens flushed before the error keep their order.
  auto toks = token_chunks(slow);
  EXPECT_GE(toks.size(), 1u);
  for (size_t i = 0; i < toks.size(); ++i) EXPECT_EQ(toks[i]["x_index"].get<size_t>(), i);
  EXPECT_EQ(err["x_index"].get<size_t>(), toks.size());
}

TEST(Gateway, CleanDrainWhenIdle) {
  auto rig = make_rig({}, {}, ConstraintKind::kServerConstrained, 0.5, dear_device_rates(),
                      make_profile(0.01, 0.02, 0.1));
  EXPECT_TRUE(rig.gw->drain(1.0));
}

TEST(GatewayConfig, FromJsonValidates) {
  json j = {{"upstreams",
             {{{"name", "d"}, {"url", "http://127.0.0.1:1"}, {"role", "device"}},
              {{"name", "s"}, {"url", "http://127.0.0.1:2"}, {"role", "server"}}}},
            {"rates", {{"server_model", "GPT-4o-mini"}, {"device_arch", "bloom-1.1b"}, {"lambda", 1e-10}}},
            {"budget", {{"b", 0.5}}},
            {"profile", to_json(make_profile(0.01, 0.02, 0.1))},
            {"prompt_lengths", {4, 8}}};
  auto cfg = gateway_config_from_json(j, ".");
  EXPECT_TRUE(cfg.auto_constraint);
  EXPECT_EQ(cfg.upstreams.size(), 2u);
  j["budget"]["b"] = 1.5;
  EXPECT_THROW(gateway_config_from_json(j, "."), Error);
  j["budget"]["b"] = 0.5;
  j["upstreams"][1]["role"] = "device";
  EXPECT_THROW(gateway_config_from_json(j, "."), Error);
  j["upstreams"][1]["role"] = "cloud";
  EXPECT_THROW(gateway_config_from_json(j, "."), Error);
}

}  // namespace
}  // namespace duet

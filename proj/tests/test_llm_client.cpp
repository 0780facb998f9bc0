#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "semaug/http_provider.hpp"
#include "semaug/llm_client.hpp"
#include "support.hpp"

using namespace semaug;
using testsupport::TempDir;

namespace {

struct CountingProvider : Provider {
  std::shared_ptr<Provider> inner;
  std::atomic<int> calls{0};

  explicit CountingProvider(std::shared_ptr<Provider> p) : inner(std::move(p)) {}
  ProviderReply complete(const RenderedRequest& req) override {
    ++calls;
    return inner->complete(req);
  }
  std::string name() const override { return inner->name(); }
};

CompletionRequest basic_request() {
  CompletionRequest req;
  req.template_id = TemplateId::explain;
  req.field_values = {{"text", "a meme"}, {"img", "NONE"}};
  req.model_id = "m1";
  req.temperature = 0.7;
  req.run_index = 0;
  return req;
}

RetryPolicy fast_retry(int attempts = 5) { return RetryPolicy{attempts, 0.001, 0.004}; }

}  // namespace

TEST_CASE("request digest identity") {
  const CompletionRequest base = basic_request();
  const std::string d = request_digest(base);
  CHECK(d == request_digest(base));
  CHECK(d.size() == 32);  // two 64-bit hex words

  auto differs = [&](CompletionRequest req) { CHECK(request_digest(req) != d); };

  CompletionRequest r = base;
  r.template_id = TemplateId::explain_triggers;
  differs(r);
  r = base;
  r.model_id = "m2";
  differs(r);
  r = base;
  r.temperature = 0.70000001;
  differs(r);
  r = base;
  r.run_index = 1;
  differs(r);
  r = base;
  r.field_values["img"] = "a dog";
  differs(r);

  // cache_policy is execution detail, not identity
  r = base;
  r.cache_policy = CachePolicy::bypass;
  CHECK(request_digest(r) == d);
}

TEST_CASE("request digest length framing prevents concatenation collisions") {
  CompletionRequest a = basic_request();
  CompletionRequest b = basic_request();
  a.field_values = {{"text", "ab"}, {"img", "x"}};
  b.field_values = {{"text", "a"}, {"img", "bx"}};
  CHECK(request_digest(a) != request_digest(b));

  a.field_values = {{"text", "1;2:"}, {"img", ""}};
  b.field_values = {{"text", "1"}, {"img", ";2:"}};
  CHECK(request_digest(a) != request_digest(b));
}

TEST_CASE("mock scenario validation") {
  CHECK_THROWS_AS(MockProvider::from_json(nlohmann::json::array()), ValidationError);
  CHECK_THROWS_AS(MockProvider::from_json({{"rules", {{{"template", "explain"}}}}}),
                  ValidationError);  // rule without response or status
  CHECK_THROWS_AS(MockProvider::from_json({{"rules", {{{"template", "nope"}, {"response", "x"}}}}}),
                  ValidationError);
  CHECK_THROWS_AS(
      MockProvider::from_json({{"rules", {{{"status", "slow"}, {"response", "x"}}}}}),
      ValidationError);
  CHECK_THROWS_AS(MockProvider::from_file("/nonexistent/scenario.json"), ValidationError);
}

TEST_CASE("mock rule matching") {
  const nlohmann::json scenario = {
      {"strict", true},
      {"rules",
       {
           {{"template", "explain"}, {"prompt_contains", "dogs"}, {"response", "saw dogs"}},
           {{"template", "explain"}, {"run_index", 2}, {"response", "run two"}},
           {{"template", "explain"}, {"model", "m9"}, {"response", "model nine"}},
           {{"template", "explain"}, {"response", "fallback {run_index} {field:img}"}},
           {{"template", "explain"}, {"response", "unreachable"}},
       }}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  LlmClient client(mock, std::nullopt, fast_retry());

  CompletionRequest req = basic_request();
  req.field_values["text"] = "dogs everywhere";
  CHECK(client.complete(req).raw_text == "saw dogs");

  req = basic_request();
  req.run_index = 2;
  CHECK(client.complete(req).raw_text == "run two");

  req = basic_request();
  req.model_id = "m9";
  CHECK(client.complete(req).raw_text == "model nine");

  // first match wins, and substitutions fill run index and fields
  req = basic_request();
  req.run_index = 7;
  req.field_values["img"] = "a cat photo";
  CHECK(client.complete(req).raw_text == "fallback 7 a cat photo");

  // a response referencing a field the request lacks is a hard error
  auto bad = std::make_shared<MockProvider>(MockProvider::from_json(
      {{"strict", true}, {"rules", {{{"response", "{field:missing}"}}}}}));
  LlmClient bad_client(bad, std::nullopt, fast_retry());
  CHECK_THROWS_AS(bad_client.complete(basic_request()), ValidationError);
}

TEST_CASE("mock digest matching") {
  CompletionRequest req = basic_request();
  const std::string d = request_digest(req);
  const nlohmann::json scenario = {
      {"strict", true},
      {"rules",
       {
           {{"digest", d}, {"response", "exact hit"}},
           {{"response", "anything else"}},
       }}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  LlmClient client(mock, std::nullopt, fast_retry());
  CHECK(client.complete(req).raw_text == "exact hit");
  req.run_index = 5;
  CHECK(client.complete(req).raw_text == "anything else");
}

TEST_CASE("strict scenarios reject unmatched requests") {
  auto mock = std::make_shared<MockProvider>(
      MockProvider::from_json({{"strict", true}, {"rules", nlohmann::json::array()}}));
  LlmClient client(mock, std::nullopt, fast_retry());
  CHECK_THROWS_AS(client.complete(basic_request()), ProviderError);
}

TEST_CASE("non-strict scenarios fall back to the default response") {
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(
      {{"strict", false}, {"default_response", "default for run {run_index}"}}));
  LlmClient client(mock, std::nullopt, fast_retry());
  CompletionRequest req = basic_request();
  req.run_index = 3;
  CHECK(client.complete(req).raw_text == "default for run 3");
}

TEST_CASE("retry drains scripted failures") {
  const nlohmann::json scenario = {
      {"strict", true},
      {"rules",
       {
           {{"template", "explain"}, {"status", "rate_limited"}, {"fail_times", 2}},
           {{"template", "explain"}, {"response", "made it"}},
       }}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  auto counting = std::make_shared<CountingProvider>(mock);
  LlmClient client(counting, std::nullopt, fast_retry());

  CHECK(client.complete(basic_request()).raw_text == "made it");
  CHECK(counting->calls == 3);
}

TEST_CASE("a rule with status and response recovers in place") {
  const nlohmann::json scenario = {
      {"strict", true},
      {"rules",
       {
           {{"status", "transient_error"}, {"fail_times", 1}, {"response", "after failure"}},
       }}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  LlmClient client(mock, std::nullopt, fast_retry());
  CHECK(client.complete(basic_request()).raw_text == "after failure");
}

TEST_CASE("attempts exhaust into a provider error") {
  const nlohmann::json scenario = {
      {"strict", true},
      {"rules", {{{"status", "transient_error"}}}}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  auto counting = std::make_shared<CountingProvider>(mock);
  LlmClient client(counting, std::nullopt, fast_retry(3));
  CHECK_THROWS_WITH(client.complete(basic_request()),
                    Catch::Matchers::ContainsSubstring("gave up after 3 attempts"));
  CHECK(counting->calls == 3);
}

TEST_CASE("fatal failures do not retry") {
  const nlohmann::json scenario = {{"strict", true}, {"rules", {{{"status", "auth_error"}}}}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  auto counting = std::make_shared<CountingProvider>(mock);
  LlmClient client(counting, std::nullopt, fast_retry());
  CHECK_THROWS_AS(client.complete(basic_request()), ProviderError);
  CHECK(counting->calls == 1);
}

TEST_CASE("cache round trip") {
  TempDir tmp("cache");
  const nlohmann::json scenario = {{"strict", true},
                                   {"rules", {{{"response", "fresh answer"}}}}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  auto counting = std::make_shared<CountingProvider>(mock);
  LlmClient client(counting, CompletionCache(tmp.path / "c"), fast_retry());

  const CompletionRequest req = basic_request();
  const Completion first = client.complete(req);
  CHECK(first.raw_text == "fresh answer");
  CHECK_FALSE(first.cached);
  CHECK(counting->calls == 1);

  const Completion second = client.complete(req);
  CHECK(second.raw_text == "fresh answer");
  CHECK(second.cached);
  CHECK(second.digest == first.digest);
  CHECK(counting->calls == 1);  // served from disk
}

TEST_CASE("cache refresh overwrites, bypass never touches disk") {
  TempDir tmp("cache");
  const nlohmann::json scenario = {
      {"strict", true},
      {"rules",
       {
           {{"times", 1}, {"response", "first answer"}},
           {{"response", "second answer"}},
       }}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  LlmClient client(mock, CompletionCache(tmp.path / "c"), fast_retry());

  CompletionRequest req = basic_request();
  CHECK(client.complete(req).raw_text == "first answer");

  req.cache_policy = CachePolicy::refresh;  // skips lookup, hits the provider
  CHECK(client.complete(req).raw_text == "second answer");

  req.cache_policy = CachePolicy::use;  // refreshed entry is now authoritative
  const Completion c = client.complete(req);
  CHECK(c.raw_text == "second answer");
  CHECK(c.cached);

  CompletionRequest other = basic_request();
  other.run_index = 9;
  other.cache_policy = CachePolicy::bypass;
  CHECK(client.complete(other).raw_text == "second answer");
  const CompletionCache& cache = *client.cache();
  CHECK_FALSE(std::filesystem::exists(cache.entry_path(other.model_id, request_digest(other))));
}

TEST_CASE("cache detects digest collisions and shrugs off corruption") {
  TempDir tmp("cache");
  const nlohmann::json scenario = {{"strict", true}, {"rules", {{{"response", "v"}}}}};
  auto mock = std::make_shared<MockProvider>(MockProvider::from_json(scenario));
  LlmClient client(mock, CompletionCache(tmp.path / "c"), fast_retry());

  const CompletionRequest req = basic_request();
  client.complete(req);
  const auto path = client.cache()->entry_path(req.model_id, request_digest(req));
  REQUIRE(std::filesystem::exists(path));

  SECTION("stored request mismatch is a hard error") {
    nlohmann::json entry = nlohmann::json::parse(testsupport::read_file(path));
    entry["request"]["fields"]["text"] = "something else entirely";
    testsupport::write_file(path, entry.dump());
    CHECK_THROWS_AS(client.complete(req), StageError);
  }
  SECTION("torn entry is a miss, then gets rewritten") {
    testsupport::write_file(path, "{\"request\": {\"template\"");
    const Completion c = client.complete(req);
    CHECK(c.raw_text == "v");
    CHECK_FALSE(c.cached);
    CHECK(client.complete(req).cached);
  }
}

TEST_CASE("cache paths sanitize model ids") {
  CHECK(CompletionCache::sanitize("gpt/4:preview x") == "gpt_4_preview_x");
  CHECK(CompletionCache::sanitize("") == "_");
  CHECK(CompletionCache::sanitize("mock-model_1.2") == "mock-model_1.2");
}

TEST_CASE("parallel_for covers every index exactly once") {
  for (std::size_t workers : {1, 3, 64}) {
    std::vector<int> hits(257, 0);
    std::mutex mu;
    parallel_for(hits.size(), workers, [&](std::size_t i) {
      std::lock_guard<std::mutex> lock(mu);
      ++hits[i];
    });
    for (std::size_t i = 0; i < hits.size(); ++i) CHECK(hits[i] == 1);
  }
  parallel_for(0, 4, [&](std::size_t) { FAIL("no work expected"); });
}

TEST_CASE("parallel_for propagates the first exception") {
  CHECK_THROWS_AS(parallel_for(64, 4,
                               [&](std::size_t i) {
                                 if (i == 13) throw StageError("boom at 13");
                               }),
                  StageError);
}

TEST_CASE("http provider against a loopback server") {
  httplib::Server srv;
  srv.Post("/v1/completions", [](const httplib::Request& req, httplib::Response& res) {
    const nlohmann::json body = nlohmann::json::parse(req.body);
    const std::string prompt = body.at("prompt").get<std::string>();
    if (req.get_header_value("Authorization") != "Bearer k123") {
      res.status = 401;
      return;
    }
    if (prompt.find("limitme") != std::string::npos) {
      res.status = 429;
      res.set_header("Retry-After", "1");
      return;
    }
    if (prompt.find("dieplz") != std::string::npos) {
      res.status = 500;
      return;
    }
    if (prompt.find("badjson") != std::string::npos) {
      res.set_content("{not json", "application/json");
      return;
    }
    if (prompt.find("notext") != std::string::npos) {
      res.set_content("{\"message\": \"hi\"}", "application/json");
      return;
    }
    const nlohmann::json out = {{"text", "echo ok"},
                                {"model_version", body.at("model").get<std::string>()}};
    res.set_content(out.dump(), "application/json");
  });

  const int port = srv.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread server_thread([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  const std::string endpoint = "http://127.0.0.1:" + std::to_string(port);

  auto request_with_text = [](const std::string& text) {
    RenderedRequest rr;
    rr.template_name = "explain";
    rr.prompt = "prompt: " + text;
    rr.model_id = "remote-model";
    rr.temperature = 0.25;
    rr.run_index = 0;
    rr.digest = "d";
    return rr;
  };

  SECTION("success carries text and meta") {
    HttpProvider p(endpoint, "k123");
    const ProviderReply rep = p.complete(request_with_text("hello"));
    CHECK(rep.status == ProviderReply::Status::ok);
    CHECK(rep.text == "echo ok");
    CHECK(rep.meta.at("model_version") == "remote-model");
  }
  SECTION("missing key maps to fatal") {
    HttpProvider p(endpoint);
    CHECK(p.complete(request_with_text("hello")).status == ProviderReply::Status::fatal);
  }
  SECTION("429 carries the retry hint") {
    HttpProvider p(endpoint, "k123");
    const ProviderReply rep = p.complete(request_with_text("limitme"));
    CHECK(rep.status == ProviderReply::Status::rate_limited);
    CHECK(rep.retry_after_s == 1.0);
  }
  SECTION("500 is transient") {
    HttpProvider p(endpoint, "k123");
    CHECK(p.complete(request_with_text("dieplz")).status ==
          ProviderReply::Status::transient_error);
  }
  SECTION("malformed body is fatal") {
    HttpProvider p(endpoint, "k123");
    CHECK(p.complete(request_with_text("badjson")).status == ProviderReply::Status::fatal);
    CHECK(p.complete(request_with_text("notext")).status == ProviderReply::Status::fatal);
  }
  SECTION("connection refusal is transient") {
    HttpProvider p("http://127.0.0.1:1");
    CHECK(p.complete(request_with_text("hello")).status ==
          ProviderReply::Status::transient_error);
  }

  srv.stop();
  server_thread.join();
}

TEST_CASE("http provider from_env") {
  ::unsetenv("SEMAUG_LLM_ENDPOINT");
  CHECK_THROWS_AS(HttpProvider::from_env(), ProviderError);
  ::setenv("SEMAUG_LLM_ENDPOINT", "http://example.invalid", 1);
  CHECK(HttpProvider::from_env().name() == "http");
  ::unsetenv("SEMAUG_LLM_ENDPOINT");
}

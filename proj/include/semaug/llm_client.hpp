#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "semaug/common.hpp"
#include "semaug/prompts.hpp"

namespace semaug {

// use: consult the cache and store the result.
// refresh: skip the lookup but store the fresh result (overwrites).
// bypass: no cache interaction at all.
enum class CachePolicy { use, refresh, bypass };

struct CompletionRequest {
  TemplateId template_id = TemplateId::explain;
  std::map<std::string, std::string> field_values;
  std::string model_id;
  double temperature = 0.0;
  int run_index = 0;
  CachePolicy cache_policy = CachePolicy::use;
};

// Stable identity of a request. Length-framed fields so no two distinct
// requests can serialize to the same byte string.
inline std::string request_digest(const CompletionRequest& req) {
  auto frame = [](std::string_view s) {
    return std::to_string(s.size()) + ":" + std::string(s) + ";";
  };
  char temp[64];
  std::snprintf(temp, sizeof(temp), "%.17g", req.temperature);
  std::string payload;
  payload += frame(template_name(req.template_id));
  payload += frame(req.model_id);
  payload += frame(temp);
  payload += frame(std::to_string(req.run_index));
  for (const auto& [k, v] : req.field_values) {
    payload += frame(k);
    payload += frame(v);
  }
  return digest128_hex(payload);
}

struct Completion {
  std::string raw_text;
  std::map<std::string, std::string> provider_meta;
  bool cached = false;
  std::string digest;
};

// What a provider actually sees: the rendered prompt plus enough request
// identity to route and substitute. field_values rides along for the mock
// provider; the HTTP provider ignores it.
struct RenderedRequest {
  std::string template_name;
  std::string prompt;
  std::string model_id;
  double temperature = 0.0;
  int run_index = 0;
  std::string digest;
  std::map<std::string, std::string> field_values;
};

struct ProviderReply {
  enum class Status { ok, rate_limited, transient_error, fatal };
  Status status = Status::ok;
  std::string text;          // completion text, or error detail on failure
  double retry_after_s = 0;  // hint from rate limiting, 0 when absent
  std::map<std::string, std::string> meta;
};

class Provider {
 public:
  virtual ~Provider() = default;
  virtual ProviderReply complete(const RenderedRequest& req) = 0;
  virtual std::string name() const = 0;
};

// ----------------------------------------------------------------------------
// Scripted provider driven by a scenario file. Rules are evaluated in order;
// the first rule whose conditions all hold wins.
//
//   {
//     "strict": true,
//     "default_response": "NA",
//     "rules": [
//       {"template": "explain", "prompt_contains": "dogs", "run_index": 1,
//        "response": "run {run_index} saw {field:text}"},
//       {"template": "clean_caption", "status": "rate_limited", "fail_times": 2}
//     ]
//   }
//
// Conditions: template, prompt_contains, digest, run_index, model. Responses
// substitute {run_index} and {field:NAME}. A rule with "status" simulates that
// failure; with "fail_times" it fails that many matches and is skipped after.
// ----------------------------------------------------------------------------
class MockProvider : public Provider {
 public:
  struct Rule {
    std::optional<std::string> template_name;
    std::optional<std::string> prompt_contains;
    std::optional<std::string> digest;
    std::optional<int> run_index;
    std::optional<std::string> model;
    std::optional<std::string> response;
    std::optional<ProviderReply::Status> fail_status;
    std::optional<int> fail_times;
    std::optional<int> times;  // stop matching after this many hits
    int hits = 0;
  };

  static MockProvider from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("mock scenario not readable: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("mock scenario is not valid JSON (" + path + "): " + e.what());
    }
    return from_json(j, path);
  }

  static MockProvider from_json(const nlohmann::json& j, const std::string& origin = "<inline>") {
    MockProvider p;
    if (!j.is_object()) throw ValidationError("mock scenario must be a JSON object: " + origin);
    p.strict_ = j.value("strict", true);
    if (j.contains("default_response")) p.default_response_ = j.at("default_response").get<std::string>();
    for (const auto& rj : j.value("rules", nlohmann::json::array())) {
      Rule r;
      if (rj.contains("template")) {
        r.template_name = rj.at("template").get<std::string>();
        template_from_name(*r.template_name);  // validate early
      }
      if (rj.contains("prompt_contains")) r.prompt_contains = rj.at("prompt_contains").get<std::string>();
      if (rj.contains("digest")) r.digest = rj.at("digest").get<std::string>();
      if (rj.contains("run_index")) r.run_index = rj.at("run_index").get<int>();
      if (rj.contains("model")) r.model = rj.at("model").get<std::string>();
      if (rj.contains("response")) r.response = rj.at("response").get<std::string>();
      if (rj.contains("status")) {
        const std::string s = rj.at("status").get<std::string>();
        if (s == "rate_limited") r.fail_status = ProviderReply::Status::rate_limited;
        else if (s == "transient_error") r.fail_status = ProviderReply::Status::transient_error;
        else if (s == "auth_error" || s == "fatal") r.fail_status = ProviderReply::Status::fatal;
        else throw ValidationError("mock rule status must be rate_limited, transient_error, or auth_error");
      }
      if (rj.contains("fail_times")) r.fail_times = rj.at("fail_times").get<int>();
      if (rj.contains("times")) r.times = rj.at("times").get<int>();
      if (!r.response && !r.fail_status)
        throw ValidationError("mock rule needs a response or a status: " + origin);
      p.rules_.push_back(std::move(r));
    }
    return p;
  }

  ProviderReply complete(const RenderedRequest& req) override {
    std::lock_guard<std::mutex> lock(*mu_);
    for (Rule& r : rules_) {
      if (r.template_name && *r.template_name != req.template_name) continue;
      if (r.prompt_contains && req.prompt.find(*r.prompt_contains) == std::string::npos) continue;
      if (r.digest && *r.digest != req.digest) continue;
      if (r.run_index && *r.run_index != req.run_index) continue;
      if (r.model && *r.model != req.model_id) continue;
      if (r.fail_status) {
        if (!r.fail_times || r.hits < *r.fail_times) {
          ++r.hits;
          ProviderReply rep;
          rep.status = *r.fail_status;
          rep.text = "scripted failure";
          if (rep.status == ProviderReply::Status::rate_limited) rep.retry_after_s = 0.01;
          return rep;
        }
        if (!r.response) continue;  // exhausted failures, no payload: skip rule
      }
      if (r.times && r.hits >= *r.times) continue;
      ++r.hits;
      ProviderReply rep;
      rep.status = ProviderReply::Status::ok;
      rep.text = substitute(*r.response, req);
      rep.meta["mock"] = "1";
      return rep;
    }
    if (!strict_ && default_response_) {
      ProviderReply rep;
      rep.status = ProviderReply::Status::ok;
      rep.text = substitute(*default_response_, req);
      rep.meta["mock"] = "default";
      return rep;
    }
    ProviderReply rep;
    rep.status = ProviderReply::Status::fatal;
    rep.text = "no mock rule matched template '" + req.template_name + "' (run " +
               std::to_string(req.run_index) + ")";
    return rep;
  }

  std::string name() const override { return "mock"; }

 private:
  static std::string substitute(const std::string& tmpl, const RenderedRequest& req) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
      if (tmpl[i] == '{') {
        std::size_t close = tmpl.find('}', i);
        if (close != std::string::npos) {
          const std::string token = tmpl.substr(i + 1, close - i - 1);
          if (token == "run_index") {
            out += std::to_string(req.run_index);
            i = close + 1;
            continue;
          }
          if (token.rfind("field:", 0) == 0) {
            const std::string field = token.substr(6);
            auto it = req.field_values.find(field);
            if (it == req.field_values.end())
              throw ValidationError("mock response references unknown field '" + field + "'");
            out += it->second;
            i = close + 1;
            continue;
          }
        }
      }
      out += tmpl[i++];
    }
    return out;
  }

  bool strict_ = true;
  std::optional<std::string> default_response_;
  std::vector<Rule> rules_;
  // behind a pointer so scripted providers stay movable
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

// ----------------------------------------------------------------------------
// File cache keyed by request digest. One JSON file per completion holding the
// full request so a digest collision is detected instead of silently serving
// the wrong entry. Writes go through a temp file and rename so readers never
// observe a partial entry.
// ----------------------------------------------------------------------------
class CompletionCache {
 public:
  explicit CompletionCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }

  std::filesystem::path entry_path(const std::string& model_id, const std::string& digest) const {
    return dir_ / sanitize(model_id) / (digest + ".json");
  }

  std::optional<Completion> lookup(const CompletionRequest& req, const std::string& digest) const {
    const auto path = entry_path(req.model_id, digest);
    std::ifstream in(path);
    if (!in) return std::nullopt;
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;  // torn or corrupt entry: treat as a miss
    }
    try {
      const nlohmann::json& rj = j.at("request");
      const bool same = rj.at("template").get<std::string>() == template_name(req.template_id) &&
                        rj.at("model").get<std::string>() == req.model_id &&
                        rj.at("temperature").get<double>() == req.temperature &&
                        rj.at("run_index").get<int>() == req.run_index &&
                        rj.at("fields").get<std::map<std::string, std::string>>() == req.field_values;
      if (!same)
        throw StageError("cache digest collision at " + path.string() +
                         "; clear the cache directory");
      Completion c;
      c.raw_text = j.at("response").at("text").get<std::string>();
      if (j.at("response").contains("meta"))
        c.provider_meta = j.at("response").at("meta").get<std::map<std::string, std::string>>();
      c.cached = true;
      c.digest = digest;
      return c;
    } catch (const nlohmann::json::exception& e) {
      throw StageError("malformed cache entry " + path.string() + ": " + e.what());
    }
  }

  void store(const CompletionRequest& req, const std::string& digest, const Completion& c) const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["digest"] = digest;
    j["request"] = {{"template", template_name(req.template_id)},
                    {"model", req.model_id},
                    {"temperature", req.temperature},
                    {"run_index", req.run_index},
                    {"fields", req.field_values}};
    j["response"] = {{"text", c.raw_text}, {"meta", c.provider_meta}};
    j["timestamp"] = iso8601_now();
    const auto path = entry_path(req.model_id, digest);
    std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.parent_path() / (digest + ".tmp." + std::to_string(tmp_counter()++));
    {
      std::ofstream out(tmp);
      if (!out) throw StageError("cannot write cache entry " + tmp.string());
      out << j.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, path);
  }

  static std::string sanitize(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
      const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                      (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
      out += ok ? c : '_';
    }
    return out.empty() ? std::string("_") : out;
  }

 private:
  static std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  static std::atomic<std::uint64_t>& tmp_counter() {
    static std::atomic<std::uint64_t> n{0};
    return n;
  }

  std::filesystem::path dir_;
};

struct RetryPolicy {
  int max_attempts = 5;
  double initial_backoff_s = 0.5;
  double max_backoff_s = 8.0;
};

class LlmClient {
 public:
  LlmClient(std::shared_ptr<Provider> provider, std::optional<CompletionCache> cache = std::nullopt,
            RetryPolicy retry = {})
      : provider_(std::move(provider)), cache_(std::move(cache)), retry_(retry) {
    if (!provider_) throw ValidationError("LlmClient needs a provider");
    if (retry_.max_attempts < 1) throw ValidationError("retry policy needs max_attempts >= 1");
  }

  Provider& provider() { return *provider_; }
  const std::optional<CompletionCache>& cache() const { return cache_; }

  Completion complete(const CompletionRequest& req) {
    const std::string digest = request_digest(req);
    if (cache_ && req.cache_policy == CachePolicy::use) {
      if (auto hit = cache_->lookup(req, digest)) return *hit;
    }
    RenderedRequest rr;
    rr.template_name = template_name(req.template_id);
    rr.prompt = render_prompt(req.template_id, req.field_values);
    rr.model_id = req.model_id;
    rr.temperature = req.temperature;
    rr.run_index = req.run_index;
    rr.digest = digest;
    rr.field_values = req.field_values;

    double backoff = retry_.initial_backoff_s;
    std::string last_error = "no attempts made";
    for (int attempt = 1; attempt <= retry_.max_attempts; ++attempt) {
      ProviderReply rep = provider_->complete(rr);
      if (rep.status == ProviderReply::Status::ok) {
        Completion c{rep.text, rep.meta, false, digest};
        if (cache_ && req.cache_policy != CachePolicy::bypass) cache_->store(req, digest, c);
        return c;
      }
      if (rep.status == ProviderReply::Status::fatal)
        throw ProviderError(provider_->name() + ": " + rep.text);
      last_error = rep.text;
      if (attempt == retry_.max_attempts) break;
      double wait = backoff;
      if (rep.status == ProviderReply::Status::rate_limited)
        wait = std::max(wait, rep.retry_after_s);
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      backoff = std::min(backoff * 2, retry_.max_backoff_s);
    }
    throw ProviderError(provider_->name() + ": gave up after " +
                        std::to_string(retry_.max_attempts) + " attempts: " + last_error);
  }

 private:
  std::shared_ptr<Provider> provider_;
  std::optional<CompletionCache> cache_;
  RetryPolicy retry_;
};

// Runs fn(0..n-1) on a bounded pool. Work items pull from a shared counter so
// ordering is nondeterministic, but callers write results by index, keeping
// outputs deterministic. The first exception wins and is rethrown after join.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::min(std::max<std::size_t>(workers, 1), std::max<std::size_t>(n, 1));
  if (n == 0) return;
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex err_mu;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (!failed.load(std::memory_order_relaxed)) {
        const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
          failed.store(true, std::memory_order_relaxed);
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace semaug

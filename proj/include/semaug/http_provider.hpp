#pragma once

#include <cstdlib>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "semaug/llm_client.hpp"

namespace semaug {

// HTTP provider speaking a minimal completions protocol:
//   POST {path}  {"model": ..., "prompt": ..., "temperature": ...}
//   200          {"text": "..."}
// Configured from SEMAUG_LLM_ENDPOINT, SEMAUG_LLM_API_KEY, SEMAUG_LLM_PATH.
class HttpProvider : public Provider {
 public:
  explicit HttpProvider(std::string endpoint, std::string api_key = "",
                        std::string path = "/v1/completions", int timeout_s = 60,
                        std::size_t max_response_bytes = 1 << 20)
      : endpoint_(std::move(endpoint)),
        api_key_(std::move(api_key)),
        path_(std::move(path)),
        timeout_s_(timeout_s),
        max_response_bytes_(max_response_bytes) {
    if (endpoint_.empty()) throw ProviderError("http provider needs a non-empty endpoint");
  }

  static HttpProvider from_env() {
    const char* ep = std::getenv("SEMAUG_LLM_ENDPOINT");
    if (!ep || !*ep)
      throw ProviderError("SEMAUG_LLM_ENDPOINT is not set; required for the http provider");
    const char* key = std::getenv("SEMAUG_LLM_API_KEY");
    const char* path = std::getenv("SEMAUG_LLM_PATH");
    return HttpProvider(ep, key ? key : "", path && *path ? path : "/v1/completions");
  }

  ProviderReply complete(const RenderedRequest& req) override {
    httplib::Client client(endpoint_);
    client.set_connection_timeout(timeout_s_, 0);
    client.set_read_timeout(timeout_s_, 0);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

    nlohmann::json body = {{"model", req.model_id},
                           {"prompt", req.prompt},
                           {"temperature", req.temperature}};
    auto res = client.Post(path_, headers, body.dump(), "application/json");

    ProviderReply rep;
    if (!res) {
      rep.status = ProviderReply::Status::transient_error;
      rep.text = "connection failed: " + httplib::to_string(res.error());
      return rep;
    }
    if (res->status == 429) {
      rep.status = ProviderReply::Status::rate_limited;
      rep.text = "rate limited";
      if (res->has_header("Retry-After"))
        rep.retry_after_s = std::atof(res->get_header_value("Retry-After").c_str());
      return rep;
    }
    if (res->status == 401 || res->status == 403) {
      rep.status = ProviderReply::Status::fatal;
      rep.text = "authentication failed (HTTP " + std::to_string(res->status) + ")";
      return rep;
    }
    if (res->status == 408 || res->status >= 500) {
      rep.status = ProviderReply::Status::transient_error;
      rep.text = "HTTP " + std::to_string(res->status);
      return rep;
    }
    if (res->status != 200) {
      rep.status = ProviderReply::Status::fatal;
      rep.text = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
      return rep;
    }
    if (res->body.size() > max_response_bytes_) {
      rep.status = ProviderReply::Status::fatal;
      rep.text = "response exceeds " + std::to_string(max_response_bytes_) + " bytes";
      return rep;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      rep.status = ProviderReply::Status::fatal;
      rep.text = std::string("response is not valid JSON: ") + e.what();
      return rep;
    }
    if (!j.is_object() || !j.contains("text") || !j.at("text").is_string()) {
      rep.status = ProviderReply::Status::fatal;
      rep.text = "response JSON lacks a string 'text' field";
      return rep;
    }
    rep.status = ProviderReply::Status::ok;
    rep.text = j.at("text").get<std::string>();
    for (const auto& [k, v] : j.items())
      if (k != "text" && v.is_string()) rep.meta[k] = v.get<std::string>();
    return rep;
  }

  std::string name() const override { return "http"; }

 private:
  std::string endpoint_;
  std::string api_key_;
  std::string path_;
  int timeout_s_;
  std::size_t max_response_bytes_;
};

}  // namespace semaug

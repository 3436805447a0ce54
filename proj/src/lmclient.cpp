#include "debias/lmclient.hpp"

#include <condition_variable>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "debias/util.hpp"

namespace debias::client {

using nlohmann::json;

std::string_view to_string(Role role) {
  switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "?";
}

Role parse_role(std::string_view name) {
  if (name == "system") return Role::system;
  if (name == "user") return Role::user;
  if (name == "assistant") return Role::assistant;
  throw std::invalid_argument("unknown chat role '" + std::string(name) + "'");
}

void ChatRequest::validate() const {
  if (messages.empty()) throw std::invalid_argument("chat request has no messages");
  if (messages.back().role != Role::user) {
    throw std::invalid_argument("last chat message must come from the user");
  }
  if (!(temperature >= 0)) throw std::invalid_argument("temperature must be >= 0");
  if (max_tokens <= 0) throw std::invalid_argument("max_tokens must be > 0");
}

std::string_view to_string(FinishReason reason) {
  switch (reason) {
    case FinishReason::stop: return "stop";
    case FinishReason::length: return "length";
    case FinishReason::error: return "error";
  }
  return "?";
}

FinishReason parse_finish_reason(std::string_view name) {
  if (name == "length") return FinishReason::length;
  if (name == "error") return FinishReason::error;
  return FinishReason::stop;
}

ChatResponse ChatResponse::ok(std::string content, FinishReason reason) {
  return {std::move(content), reason == FinishReason::error ? FinishReason::stop : reason, {}};
}

ChatResponse ChatResponse::failed(std::string error) {
  return {std::nullopt, FinishReason::error, std::move(error)};
}

json request_to_json(const ChatRequest& request) {
  json body;
  body["model"] = request.model_name;
  body["messages"] = json::array();
  for (const auto& m : request.messages) {
    body["messages"].push_back({{"role", to_string(m.role)}, {"content", m.content}});
  }
  body["temperature"] = request.temperature;
  body["max_tokens"] = request.max_tokens;
  if (request.seed) body["seed"] = *request.seed;
  return body;
}

ChatRequest request_from_json(const json& body) {
  ChatRequest r;
  r.model_name = body.at("model").get<std::string>();
  for (const auto& m : body.at("messages")) {
    r.messages.push_back({parse_role(m.at("role").get<std::string>()),
                          m.at("content").get<std::string>()});
  }
  if (auto it = body.find("temperature"); it != body.end()) r.temperature = it->get<double>();
  if (auto it = body.find("max_tokens"); it != body.end()) r.max_tokens = it->get<int>();
  if (auto it = body.find("seed"); it != body.end() && !it->is_null()) {
    r.seed = it->get<std::uint64_t>();
  }
  return r;
}

json response_to_json(const ChatResponse& response) {
  json j;
  j["finish_reason"] = to_string(response.finish_reason);
  if (response.content) j["content"] = *response.content;
  if (response.finish_reason == FinishReason::error) j["error"] = response.error;
  return j;
}

ChatResponse response_from_json(const json& body) {
  const auto reason = parse_finish_reason(body.value("finish_reason", "stop"));
  if (reason == FinishReason::error) return ChatResponse::failed(body.value("error", ""));
  return ChatResponse::ok(body.at("content").get<std::string>(), reason);
}

std::string canonical_json(const ChatRequest& request) {
  // nlohmann::json keeps object keys sorted, and dump() without indent emits no whitespace.
  return request_to_json(request).dump();
}

std::string request_hash(const ChatRequest& request) { return sha256_hex(canonical_json(request)); }

BackendError::BackendError(const std::string& what, int status, int attempts)
    : std::runtime_error(what), status_(status), attempts_(attempts) {}

ReplayMiss::ReplayMiss(std::string hash)
    : BackendError("replay miss: no recorded response for request " + hash), hash_(std::move(hash)) {}

ReplayStore::ReplayStore(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(*path_)) return;
  const auto lines = split_lines(read_file(*path_));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      const json j = json::parse(lines[i]);
      const ChatRequest req = request_from_json(j.at("request"));
      const std::string hash = request_hash(req);
      if (j.contains("hash") && j.at("hash").get<std::string>() != hash) {
        throw std::runtime_error("stored hash does not match request");
      }
      entries_.emplace(hash, Entry{request_to_json(req), response_from_json(j.at("response"))});
    } catch (const std::exception& e) {
      throw std::runtime_error("replay store " + path_->string() + " line " +
                               std::to_string(i + 1) + ": " + e.what());
    }
  }
}

std::optional<ChatResponse> ReplayStore::find(const std::string& hash) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(hash);
  if (it == entries_.end()) return std::nullopt;
  return it->second.response;
}

bool ReplayStore::insert(const ChatRequest& request, const ChatResponse& response, bool force) {
  std::unique_lock lock(mutex_);
  const std::string hash = request_hash(request);
  auto it = entries_.find(hash);
  if (it != entries_.end() && !force) return false;
  entries_[hash] = Entry{request_to_json(request), response};
  persist_locked();
  return true;
}

std::size_t ReplayStore::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

std::string ReplayStore::serialize() const {
  std::string out;
  for (const auto& [hash, e] : entries_) {
    json line;
    line["hash"] = hash;
    line["request"] = e.request;
    line["response"] = response_to_json(e.response);
    out += line.dump() + "\n";
  }
  return out;
}

void ReplayStore::persist_locked() const {
  if (!path_) return;
  const auto tmp = std::filesystem::path(path_->string() + ".tmp");
  write_file(tmp, serialize());
  std::filesystem::rename(tmp, *path_);
}

ReplayBackend::ReplayBackend(std::shared_ptr<const ReplayStore> store, std::size_t max_inflight)
    : store_(std::move(store)), max_inflight_(std::max<std::size_t>(1, max_inflight)) {}

ChatResponse ReplayBackend::complete(const ChatRequest& request) {
  request.validate();
  const std::string hash = request_hash(request);
  auto found = store_->find(hash);
  if (!found) throw ReplayMiss(hash);
  return *found;
}

namespace {

struct UrlParts {
  std::string scheme_host_port;
  std::string path_prefix;
};

UrlParts split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw std::invalid_argument("base_url must include a scheme: '" + url + "'");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  UrlParts parts;
  parts.scheme_host_port = url.substr(0, path_start);
  if (path_start != std::string::npos) parts.path_prefix = url.substr(path_start);
  while (!parts.path_prefix.empty() && parts.path_prefix.back() == '/') {
    parts.path_prefix.pop_back();
  }
  return parts;
}

bool transient_status(int status) {
  return status == 408 || status == 409 || status == 429 || status >= 500;
}

}  // namespace

struct LiveBackend::Impl {
  UrlParts url;
  std::string api_key;
  std::mutex mutex;
  std::condition_variable cv;
  std::size_t inflight = 0;
};

LiveBackend::LiveBackend(LiveConfig config) : config_(std::move(config)), impl_(new Impl) {
  if (config_.base_url.empty()) throw std::invalid_argument("live backend needs base_url");
  if (config_.max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
  impl_->url = split_url(config_.base_url);
  if (const char* key = std::getenv(config_.api_key_env.c_str())) impl_->api_key = key;
}

LiveBackend::~LiveBackend() = default;

ChatResponse LiveBackend::complete(const ChatRequest& request) {
  request.validate();
  {
    std::unique_lock lock(impl_->mutex);
    impl_->cv.wait(lock, [&] { return impl_->inflight < std::max<std::size_t>(1, config_.max_inflight); });
    ++impl_->inflight;
  }
  struct Release {
    Impl& impl;
    ~Release() {
      {
        std::lock_guard lock(impl.mutex);
        --impl.inflight;
      }
      impl.cv.notify_one();
    }
  } release{*impl_};

  httplib::Client http(impl_->url.scheme_host_port);
  http.set_connection_timeout(config_.timeout);
  http.set_read_timeout(config_.timeout);
  http.set_write_timeout(config_.timeout);
  httplib::Headers headers;
  if (!impl_->api_key.empty()) headers.emplace("Authorization", "Bearer " + impl_->api_key);
  const std::string body = request_to_json(request).dump();
  const std::string path = impl_->url.path_prefix + "/chat/completions";

  auto backoff = config_.initial_backoff;
  std::string last_error;
  int last_status = 0;
  for (int attempt = 1; attempt <= config_.max_retries + 1; ++attempt) {
    auto res = http.Post(path, headers, body, "application/json");
    bool retry = false;
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      last_status = 0;
      retry = true;
    } else if (res->status < 200 || res->status >= 300) {
      last_status = res->status;
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 512);
      retry = transient_status(res->status);
    } else {
      try {
        const json j = json::parse(res->body);
        const auto& choice = j.at("choices").at(0);
        const auto& content = choice.at("message").at("content");
        const std::string reason =
            choice.contains("finish_reason") && choice["finish_reason"].is_string()
                ? choice["finish_reason"].get<std::string>()
                : "stop";
        if (!content.is_string()) {
          throw BackendError("response has no text content", res->status, attempt);
        }
        return ChatResponse::ok(content.get<std::string>(), parse_finish_reason(reason));
      } catch (const BackendError&) {
        throw;
      } catch (const std::exception& e) {
        throw BackendError(std::string("malformed chat-completion response: ") + e.what(),
                           res->status, attempt);
      }
    }
    if (!retry) throw BackendError(last_error, last_status, attempt);
    if (attempt <= config_.max_retries) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw BackendError(last_error + " (after " + std::to_string(config_.max_retries + 1) +
                         " attempts)",
                     last_status, config_.max_retries + 1);
}

ChatResponse record(const ChatRequest& request, ChatBackend& live, ReplayStore& store, bool force) {
  request.validate();
  if (!force) {
    if (auto existing = store.find(request_hash(request))) return *existing;
  }
  ChatResponse response = live.complete(request);
  store.insert(request, response, force);
  return response;
}

RecordingBackend::RecordingBackend(ChatBackend& live, std::shared_ptr<ReplayStore> store, bool force)
    : live_(live), store_(std::move(store)), force_(force) {}

ChatResponse RecordingBackend::complete(const ChatRequest& request) {
  return record(request, live_, *store_, force_);
}

}  // namespace debias::client

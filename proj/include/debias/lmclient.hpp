#pragma once

// Chat-completion client used by the prompting pipelines. Backends:
//   LiveBackend      - JSON over HTTP, `POST {base_url}/chat/completions`
//   ReplayBackend    - answers from a ReplayStore keyed by canonical request hash
//   RecordingBackend - forwards to a live backend and persists into a ReplayStore

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace debias::client {

enum class Role { system, user, assistant };

std::string_view to_string(Role role);
Role parse_role(std::string_view name);

struct ChatMessage {
  Role role = Role::user;
  std::string content;
  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct ChatRequest {
  std::string model_name;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 1024;
  /// Sent (and hashed) only when set.
  std::optional<std::uint64_t> seed;

  /// Throws std::invalid_argument unless there is >= 1 message, the last one is
  /// from the user, temperature >= 0 and max_tokens > 0.
  void validate() const;
  friend bool operator==(const ChatRequest&, const ChatRequest&) = default;
};

enum class FinishReason { stop, length, error };

std::string_view to_string(FinishReason reason);
FinishReason parse_finish_reason(std::string_view name);

/// `content` is present iff finish_reason != error.
struct ChatResponse {
  std::optional<std::string> content;
  FinishReason finish_reason = FinishReason::stop;
  std::string error;

  static ChatResponse ok(std::string content, FinishReason reason = FinishReason::stop);
  static ChatResponse failed(std::string error);
  friend bool operator==(const ChatResponse&, const ChatResponse&) = default;
};

/// Wire body: {"model", "messages": [{"role","content"}], "temperature", "max_tokens"[, "seed"]}.
nlohmann::json request_to_json(const ChatRequest& request);
ChatRequest request_from_json(const nlohmann::json& body);
nlohmann::json response_to_json(const ChatResponse& response);
ChatResponse response_from_json(const nlohmann::json& body);

/// Sorted-key, whitespace-free serialization; equal requests give equal bytes
/// regardless of how they were originally serialized.
std::string canonical_json(const ChatRequest& request);
/// SHA-256 hex of canonical_json.
std::string request_hash(const ChatRequest& request);

class BackendError : public std::runtime_error {
 public:
  BackendError(const std::string& what, int status = 0, int attempts = 0);
  int status() const { return status_; }
  int attempts() const { return attempts_; }

 private:
  int status_;
  int attempts_;
};

class ReplayMiss : public BackendError {
 public:
  explicit ReplayMiss(std::string hash);
  const std::string& hash() const { return hash_; }

 private:
  std::string hash_;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  /// Throws BackendError on failure.
  virtual ChatResponse complete(const ChatRequest& request) = 0;
  /// Upper bound on concurrent complete() calls callers should issue.
  virtual std::size_t max_inflight() const { return 1; }
};

/// Map from canonical request hash to recorded response, persisted as JSONL
/// lines {"hash", "request", "response"}. Concurrent lookups, serialized writes.
class ReplayStore {
 public:
  ReplayStore() = default;
  /// Loads `path` if it exists; each insert rewrites the file in hash order.
  explicit ReplayStore(std::filesystem::path path);

  std::optional<ChatResponse> find(const std::string& hash) const;
  /// Keep-first: returns false and leaves the entry alone when the hash exists,
  /// unless `force`, which replaces it and rewrites the file.
  bool insert(const ChatRequest& request, const ChatResponse& response, bool force = false);
  std::size_t size() const;
  /// Canonical file content: one line per entry, in hash order.
  std::string serialize() const;
  const std::optional<std::filesystem::path>& path() const { return path_; }

 private:
  struct Entry {
    nlohmann::json request;
    ChatResponse response;
  };
  void persist_locked() const;

  mutable std::shared_mutex mutex_;
  std::map<std::string, Entry> entries_;
  std::optional<std::filesystem::path> path_;
};

class ReplayBackend final : public ChatBackend {
 public:
  explicit ReplayBackend(std::shared_ptr<const ReplayStore> store, std::size_t max_inflight = 1);
  /// Throws ReplayMiss naming the canonical hash when the request was never recorded.
  ChatResponse complete(const ChatRequest& request) override;
  std::size_t max_inflight() const override { return max_inflight_; }

 private:
  std::shared_ptr<const ReplayStore> store_;
  std::size_t max_inflight_;
};

struct LiveConfig {
  std::string base_url;  // e.g. https://api.example.com/v1
  std::string api_key_env = "DEBIAS_API_KEY";
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::seconds timeout{120};
  std::size_t max_inflight = 4;
};

class LiveBackend final : public ChatBackend {
 public:
  /// Reads the bearer credential from the configured environment variable
  /// (an unset variable sends no Authorization header).
  explicit LiveBackend(LiveConfig config);
  ~LiveBackend() override;

  /// Retries HTTP 408/409/429/5xx and transport failures with exponential
  /// backoff, at most max_retries times; other statuses fail immediately.
  ChatResponse complete(const ChatRequest& request) override;
  std::size_t max_inflight() const override { return config_.max_inflight; }

 private:
  struct Impl;
  LiveConfig config_;
  std::unique_ptr<Impl> impl_;
};

/// Returns the stored response when present (keep-first) unless `force`;
/// otherwise asks `live` and stores the answer before returning it.
ChatResponse record(const ChatRequest& request, ChatBackend& live, ReplayStore& store,
                    bool force = false);

class RecordingBackend final : public ChatBackend {
 public:
  RecordingBackend(ChatBackend& live, std::shared_ptr<ReplayStore> store, bool force = false);
  ChatResponse complete(const ChatRequest& request) override;
  std::size_t max_inflight() const override { return live_.max_inflight(); }

 private:
  ChatBackend& live_;
  std::shared_ptr<ReplayStore> store_;
  bool force_;
};

/// Runs fn(0..n-1) on up to `max_inflight` threads; results keep index order.
template <class Result, class Fn>
std::vector<Result> ordered_parallel_map(std::size_t n, std::size_t max_inflight, Fn&& fn);

}  // namespace debias::client

#include "debias/detail/parallel.hpp"

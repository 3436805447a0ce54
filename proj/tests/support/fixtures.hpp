#pragma once

// Shared builders for tests: toy models and preference sets, scripted chat
// backends and synthetic records.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "debias/corpus.hpp"
#include "debias/cot.hpp"
#include "debias/lmclient.hpp"
#include "debias/preference.hpp"
#include "debias/toylm.hpp"

namespace debias::testing {

std::filesystem::path data_dir();

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "debias");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Vocabulary of `n_symbols` lowercase letters starting at 'a' (plus BOS/EOS).
lm::Vocab letter_vocab(std::size_t n_symbols);

/// Non-BOS tokens; the last one may be EOS.
lm::TokenSeq random_completion(std::mt19937_64& rng, const lm::Vocab& vocab, std::size_t max_len);
/// Prompt tokens drawn from the non-special symbols.
lm::TokenSeq random_prompt(std::mt19937_64& rng, const lm::Vocab& vocab, std::size_t max_len);

/// Pairs whose chosen side uses letters a-f and rejected side m-r; prompts use x-z.
std::vector<PreferencePair> toy_preferences(std::size_t n, std::uint64_t seed);

/// Chat backend answering through a callback; counts calls.
class ScriptedBackend final : public client::ChatBackend {
 public:
  using Handler = std::function<client::ChatResponse(const client::ChatRequest&)>;
  explicit ScriptedBackend(Handler handler, std::size_t max_inflight = 1)
      : handler_(std::move(handler)), max_inflight_(max_inflight) {}
  client::ChatResponse complete(const client::ChatRequest& request) override {
    ++calls_;
    return handler_(request);
  }
  std::size_t max_inflight() const override { return max_inflight_; }
  std::size_t calls() const { return calls_; }

 private:
  Handler handler_;
  std::size_t max_inflight_;
  std::atomic<std::size_t> calls_{0};
};

std::vector<corpus::DetectionRecord> synthetic_detection(std::size_t n);
std::vector<corpus::ClassificationRecord> synthetic_classification(std::size_t n);
std::vector<corpus::MitigationRecord> synthetic_mitigation(std::size_t n);

/// A grammar-compliant response consistent with the record's gold annotation.
std::string compliant_detection(const corpus::DetectionRecord& record);
std::string compliant_classification(const corpus::ClassificationRecord& record);

/// Text of the user message for the first attempt at a record.
client::ChatRequest first_request(const cot::TemplateSet& templates, corpus::Task task,
                                  const std::string& prompt, const cot::PipelineOptions& options);

}  // namespace debias::testing

#include "fixtures.hpp"

#include <atomic>

namespace debias::testing {

namespace fs = std::filesystem;

fs::path data_dir() { return DEBIAS_TEST_DATA_DIR; }

TempDir::TempDir(const std::string& tag) {
  static std::atomic<unsigned> counter{0};
  std::random_device rd;
  for (;;) {
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    if (fs::create_directories(path_)) break;
  }
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

lm::Vocab letter_vocab(std::size_t n_symbols) {
  std::vector<std::string> symbols;
  for (std::size_t i = 0; i < n_symbols; ++i) symbols.emplace_back(1, static_cast<char>('a' + i));
  return lm::Vocab(symbols);
}

lm::TokenSeq random_completion(std::mt19937_64& rng, const lm::Vocab& vocab, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len_dist(1, max_len);
  std::uniform_int_distribution<lm::TokenId> tok(1, static_cast<lm::TokenId>(vocab.size() - 1));
  lm::TokenSeq out;
  const std::size_t len = len_dist(rng);
  for (std::size_t i = 0; i < len; ++i) {
    lm::TokenId t = tok(rng);
    out.push_back(t);
    if (t == lm::Vocab::kEos) break;
  }
  return out;
}

lm::TokenSeq random_prompt(std::mt19937_64& rng, const lm::Vocab& vocab, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len_dist(0, max_len);
  std::uniform_int_distribution<lm::TokenId> tok(2, static_cast<lm::TokenId>(vocab.size() - 1));
  lm::TokenSeq out(len_dist(rng));
  for (auto& t : out) t = tok(rng);
  return out;
}

std::vector<PreferencePair> toy_preferences(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto word = [&](std::string_view alphabet, std::size_t lo, std::size_t hi) {
    std::uniform_int_distribution<std::size_t> len(lo, hi);
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    std::string s;
    for (std::size_t i = len(rng); i > 0; --i) s += alphabet[pick(rng)];
    return s;
  };
  std::vector<PreferencePair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    PreferencePair p;
    p.prompt = word("xyz", 1, 3);
    p.chosen = word("abcdef", 2, 5);
    p.rejected = word("mnopqr", 2, 5);
    p.source_id = "toy" + std::to_string(i);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

namespace {

const char* kSubjects[] = {"women", "men", "girls", "boys", "mothers", "fathers", "wives", "husbands"};
const char* kClaims[] = {"are bad at math", "should stay home", "are natural leaders",
                         "cannot be nurses", "are too emotional", "like cooking",
                         "work in offices", "enjoy reading"};

}  // namespace

std::vector<corpus::DetectionRecord> synthetic_detection(std::size_t n) {
  std::vector<corpus::DetectionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"d" + std::to_string(i),
                   std::string(kSubjects[i % 8]) + " " + kClaims[(i * 3) % 8] + " #" +
                       std::to_string(i),
                   (i % 3) != 0});
  }
  return out;
}

std::vector<corpus::ClassificationRecord> synthetic_classification(std::size_t n) {
  std::vector<corpus::ClassificationRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    corpus::LabelSet labels;
    if (i % 2 == 0) labels.insert(corpus::BiasLabel::AC);
    if (i % 3 == 0) labels.insert(corpus::BiasLabel::DI);
    if (i % 5 == 1) labels.insert(corpus::BiasLabel::ANB);
    out.push_back({"c" + std::to_string(i),
                   std::string(kSubjects[(i + 3) % 8]) + " " + kClaims[(i * 5) % 8] + ", note " +
                       std::to_string(i),
                   labels});
  }
  return out;
}

std::vector<corpus::MitigationRecord> synthetic_mitigation(std::size_t n) {
  std::vector<corpus::MitigationRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"m" + std::to_string(i),
                   std::string(kSubjects[i % 8]) + " " + kClaims[(i * 7) % 8] + " (" +
                       std::to_string(i) + ")",
                   "some people " + std::string(kClaims[(i * 7) % 8]) + " (" +
                       std::to_string(i) + ")"});
  }
  return out;
}

std::string compliant_detection(const corpus::DetectionRecord& record) {
  cot::DetectionResult r;
  r.group = "women";
  r.attribute = "ability: " + record.text;
  r.statement_is_biased = true;
  r.sentence_agrees = record.label;
  r.label = record.label;
  return cot::render_detection_response(r);
}

std::string compliant_classification(const corpus::ClassificationRecord& record) {
  cot::ClassificationResult r;
  for (std::size_t i = 0; i < corpus::kNumLabels; ++i) {
    const auto label = corpus::kAllLabels[i];
    r.judgments[i] = {label, "considering " + std::string(corpus::label_code(label)),
                      record.labels.contains(label)};
  }
  r.final = record.labels;
  return cot::render_classification_response(r);
}

client::ChatRequest first_request(const cot::TemplateSet& templates, corpus::Task task,
                                  const std::string& prompt, const cot::PipelineOptions& options) {
  return cot::build_request(templates, task, prompt, 1, options);
}

}  // namespace debias::testing

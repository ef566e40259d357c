#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mxacl/model.hpp"

namespace mxacl {

struct LabeledText {
  std::string text;  ///< whitespace-separated tokens
  int label = 0;     ///< 0-based class index
  std::size_t line = 0;  ///< 1-based source line, 0 when generated

  /// Compares text and label only.
  bool operator==(const LabeledText& o) const { return text == o.text && label == o.label; }
};

class Vocab {
 public:
  static constexpr std::int32_t kCls = 0;
  static constexpr std::int32_t kPad = 1;
  static constexpr std::int32_t kUnk = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr const char* kSepToken = "[SEP]";

  Vocab();
  /// Reserved tokens, then every token of `records` in first-appearance order.
  static Vocab build(const std::vector<LabeledText>& records);

  std::int32_t id(const std::string& token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  /// Token ids of `text` (no [CLS]); unknown tokens map to [UNK].
  std::vector<std::int32_t> encode(const std::string& text) const;

  nlohmann::json to_json() const { return tokens_; }
  static Vocab from_json(const nlohmann::json& j);

 private:
  void add(const std::string& token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

std::vector<std::string> split_whitespace(const std::string& s);

enum class Difficulty { separable, overlapping };

struct SynthSpec {
  std::string name = "synthetic";
  std::size_t n_classes = 3;
  std::size_t n_train = 2000;
  std::size_t n_eval = 500;
  /// Distinct non-reserved tokens available to the generator (signal + noise).
  std::size_t vocab_size = 60;
  /// Signal tokens per class. In overlapping mode every class draws from the union
  /// of all classes' sets, favouring its own by `preference`.
  std::size_t signal_tokens = 4;
  /// Signal slots per sample.
  std::size_t signal_slots = 3;
  std::size_t min_len = 8;
  std::size_t max_len = 16;
  /// Probability that a signal slot after the first is replaced by noise.
  double noise_rate = 0.0;
  Difficulty difficulty = Difficulty::separable;
  /// Overlapping mode: weight of a class's preferred tokens relative to the rest of the pool.
  double preference = 3.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::string> label_names() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

struct Dataset {
  std::vector<LabeledText> train;
  std::vector<LabeledText> eval;
  std::vector<std::string> label_names;
};

/// Balanced classes (counts differ by at most one), shuffled; deterministic per seed.
Dataset generate_synthetic(const SynthSpec& spec);

/// "label TAB text" or "label TAB text1 TAB text2"; pair segments are joined by [SEP].
/// Labels must be among `label_names`.
std::vector<LabeledText> load_tsv(const std::filesystem::path& path, const std::vector<std::string>& label_names);
void write_tsv(const std::filesystem::path& path, const std::vector<LabeledText>& records,
               const std::vector<std::string>& label_names);

struct Manifest {
  std::string name;
  std::size_t n_classes = 0;
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> label_names;

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

/// Reads train.tsv, eval.tsv and manifest.json from `dir`.
Dataset load_dataset_dir(const std::filesystem::path& dir);

struct Batch {
  TokenBatch tokens;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  ///< positions in the source record list
};

/// [CLS] + tokens, truncated to max_len, padded to the longest row of the batch.
/// With shuffle, the order is a permutation derived from (seed, epoch).
std::vector<Batch> make_batches(const std::vector<LabeledText>& records, const Vocab& vocab, std::size_t batch_size,
                                std::size_t max_len, std::uint64_t seed, std::size_t epoch, bool shuffle);

}  // namespace mxacl

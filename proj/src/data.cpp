#include "mxacl/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace mxacl {
namespace {

const char* kDifficultyNames[] = {"separable", "overlapping"};

Difficulty difficulty_from_string(const std::string& s) {
  if (s == "separable") return Difficulty::separable;
  if (s == "overlapping" || s == "hard") return Difficulty::overlapping;
  throw ValidationError("synth spec: difficulty must be \"separable\" or \"overlapping\", got \"" + s + "\"");
}

std::string signal_token(std::size_t k, std::size_t j) { return "s" + std::to_string(k) + "_" + std::to_string(j); }
std::string noise_token(std::size_t j) { return "w" + std::to_string(j); }

std::vector<LabeledText> generate_split(const SynthSpec& spec, std::size_t n, Rng& rng) {
  const std::size_t K = spec.n_classes, S = spec.signal_tokens;
  const std::size_t n_noise = spec.vocab_size - K * S;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % K);
  rng.shuffle(labels);

  // Cumulative weights over the shared pool for each class (overlapping mode).
  std::vector<std::vector<double>> cdf(K);
  if (spec.difficulty == Difficulty::overlapping) {
    for (std::size_t k = 0; k < K; ++k) {
      double acc = 0.0;
      for (std::size_t c = 0; c < K; ++c)
        for (std::size_t j = 0; j < S; ++j) cdf[k].push_back(acc += (c == k ? spec.preference : 1.0));
    }
  }
  auto draw_signal = [&](int y) {
    if (spec.difficulty == Difficulty::separable) return signal_token(static_cast<std::size_t>(y), rng.below(S));
    const auto& w = cdf[static_cast<std::size_t>(y)];
    const double u = rng.uniform() * w.back();
    const auto idx = static_cast<std::size_t>(std::upper_bound(w.begin(), w.end(), u) - w.begin());
    const std::size_t i = std::min(idx, w.size() - 1);
    return signal_token(i / S, i % S);
  };

  std::vector<LabeledText> out;
  out.reserve(n);
  for (int y : labels) {
    const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    std::vector<std::string> toks(len);
    for (auto& t : toks) t = noise_token(rng.below(n_noise));
    std::vector<std::size_t> pos(len);
    std::iota(pos.begin(), pos.end(), 0);
    rng.shuffle(pos);
    for (std::size_t s = 0; s < spec.signal_slots; ++s) {
      const bool keep = s == 0 || !(rng.uniform() < spec.noise_rate);
      const std::string tok = draw_signal(y);
      if (keep) toks[pos[s]] = tok;
    }
    std::string text;
    for (std::size_t i = 0; i < len; ++i) text += (i ? " " : "") + toks[i];
    out.push_back({std::move(text), y, 0});
  }
  return out;
}

}  // namespace

Vocab::Vocab() {
  for (const char* t : {"[CLS]", "[PAD]", "[UNK]", kSepToken}) add(t);
}

void Vocab::add(const std::string& token) {
  if (ids_.contains(token)) return;
  ids_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<LabeledText>& records) {
  Vocab v;
  for (const auto& r : records)
    for (const auto& t : split_whitespace(r.text)) v.add(t);
  return v;
}

std::int32_t Vocab::id(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::int32_t> Vocab::encode(const std::string& text) const {
  std::vector<std::int32_t> ids;
  for (const auto& t : split_whitespace(text)) ids.push_back(id(t));
  return ids;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() < 4) throw ValidationError("vocab: expected a token array");
  Vocab v;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string t = j[i].get<std::string>();
    if (i < 4) {
      if (t != v.tokens_[i]) throw ValidationError("vocab: reserved token mismatch at " + std::to_string(i));
      continue;
    }
    if (v.ids_.contains(t)) throw ValidationError("vocab: duplicate token \"" + t + "\"");
    v.add(t);
  }
  return v;
}

std::vector<std::string> split_whitespace(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

void SynthSpec::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("synth spec: " + m); };
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (n_train == 0 || n_eval == 0) fail("n_train and n_eval must be positive");
  if (signal_tokens == 0) fail("signal_tokens must be positive");
  if (n_classes * signal_tokens >= vocab_size) fail("vocab_size must exceed n_classes * signal_tokens");
  if (min_len == 0 || min_len > max_len) fail("need 1 <= min_len <= max_len");
  if (signal_slots == 0 || signal_slots > min_len) fail("need 1 <= signal_slots <= min_len");
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) fail("noise_rate must be in [0, 1)");
  if (!(preference >= 1.0)) fail("preference must be >= 1");
}

std::vector<std::string> SynthSpec::label_names() const {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < n_classes; ++k) names.push_back(std::to_string(k));
  return names;
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"n_classes", s.n_classes},
                     {"n_train", s.n_train},
                     {"n_eval", s.n_eval},
                     {"vocab_size", s.vocab_size},
                     {"signal_tokens", s.signal_tokens},
                     {"signal_slots", s.signal_slots},
                     {"min_len", s.min_len},
                     {"max_len", s.max_len},
                     {"noise_rate", s.noise_rate},
                     {"difficulty", kDifficultyNames[static_cast<int>(s.difficulty)]},
                     {"preference", s.preference},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  if (!j.is_object()) throw ValidationError("synth spec must be a JSON object");
  static const std::set<std::string> known{"name",    "n_classes", "n_train",    "n_eval",     "vocab_size",
                                           "signal_tokens", "signal_slots", "min_len", "max_len", "noise_rate",
                                           "difficulty", "preference", "seed"};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ValidationError("synth spec: unknown key \"" + k + "\"");
  try {
    auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) j.at(key).get_to(dst);
    };
    get("name", s.name);
    get("n_classes", s.n_classes);
    get("n_train", s.n_train);
    get("n_eval", s.n_eval);
    get("vocab_size", s.vocab_size);
    get("signal_tokens", s.signal_tokens);
    get("signal_slots", s.signal_slots);
    get("min_len", s.min_len);
    get("max_len", s.max_len);
    get("noise_rate", s.noise_rate);
    get("preference", s.preference);
    get("seed", s.seed);
    if (j.contains("difficulty")) s.difficulty = difficulty_from_string(j.at("difficulty").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("synth spec: ") + e.what());
  }
}

Dataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng train_rng(derive_seed(spec.seed, 1)), eval_rng(derive_seed(spec.seed, 2));
  Dataset d;
  d.train = generate_split(spec, spec.n_train, train_rng);
  d.eval = generate_split(spec, spec.n_eval, eval_rng);
  d.label_names = spec.label_names();
  return d;
}

std::vector<LabeledText> load_tsv(const std::filesystem::path& path, const std::vector<std::string>& label_names) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unordered_map<std::string, int> label_ids;
  for (std::size_t k = 0; k < label_names.size(); ++k) label_ids.emplace(label_names[k], static_cast<int>(k));
  std::vector<LabeledText> out;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& m) {
    throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + m);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      fields.push_back(line.substr(start, tab - start));
    fields.push_back(line.substr(start));
    if (fields.size() < 2 || fields.size() > 3) fail("expected label<TAB>text or label<TAB>text1<TAB>text2");
    const auto it = label_ids.find(fields[0]);
    if (it == label_ids.end()) fail("unknown label \"" + fields[0] + "\"");
    std::string text = fields[1];
    if (fields.size() == 3) text += std::string(" ") + Vocab::kSepToken + " " + fields[2];
    if (split_whitespace(text).empty()) fail("empty text");
    out.push_back({std::move(text), it->second, lineno});
  }
  if (in.bad()) throw IoError("read error on " + path.string());
  return out;
}

void write_tsv(const std::filesystem::path& path, const std::vector<LabeledText>& records,
               const std::vector<std::string>& label_names) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) {
    if (r.label < 0 || static_cast<std::size_t>(r.label) >= label_names.size())
      throw ValidationError("write_tsv: label out of range");
    if (r.text.find_first_of("\t\n") != std::string::npos) throw ValidationError("write_tsv: text contains TAB/newline");
    out << label_names[static_cast<std::size_t>(r.label)] << '\t' << r.text << '\n';
  }
  if (!out) throw IoError("write error on " + path.string());
}

nlohmann::json Manifest::to_json() const {
  return {{"name", name},   {"K", n_classes},          {"n_train", n_train},       {"n_eval", n_eval},
          {"vocab_size", vocab_size}, {"seed", seed}, {"label_names", label_names}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.n_classes = j.at("K").get<std::size_t>();
    m.n_train = j.at("n_train").get<std::size_t>();
    m.n_eval = j.at("n_eval").get<std::size_t>();
    m.vocab_size = j.at("vocab_size").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("label_names")) {
      m.label_names = j.at("label_names").get<std::vector<std::string>>();
    } else {
      for (std::size_t k = 0; k < m.n_classes; ++k) m.label_names.push_back(std::to_string(k));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  if (m.label_names.size() != m.n_classes) throw ValidationError("manifest: label_names does not match K");
  return m;
}

Dataset load_dataset_dir(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest.json: " + std::string(e.what()));
  }
  const Manifest m = Manifest::from_json(j);
  Dataset d;
  d.label_names = m.label_names;
  d.train = load_tsv(dir / "train.tsv", d.label_names);
  d.eval = load_tsv(dir / "eval.tsv", d.label_names);
  return d;
}

std::vector<Batch> make_batches(const std::vector<LabeledText>& records, const Vocab& vocab, std::size_t batch_size,
                                std::size_t max_len, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  if (records.empty()) throw ValidationError("make_batches: empty dataset");
  if (batch_size == 0) throw ValidationError("make_batches: batch_size must be positive");
  if (max_len < 1) throw ValidationError("make_batches: max_len must be >= 1");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    Rng rng(derive_seed(seed, 0x5EED0000ULL + epoch));
    rng.shuffle(order);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    std::vector<std::vector<std::int32_t>> rows;
    std::size_t len = 1;
    Batch b;
    for (std::size_t i = 0; i < n; ++i) {
      const LabeledText& r = records[order[start + i]];
      std::vector<std::int32_t> ids{Vocab::kCls};
      for (std::int32_t id : vocab.encode(r.text)) ids.push_back(id);
      if (ids.size() > max_len) ids.resize(max_len);
      len = std::max(len, ids.size());
      rows.push_back(std::move(ids));
      b.labels.push_back(r.label);
      b.indices.push_back(order[start + i]);
    }
    b.tokens.n = n;
    b.tokens.len = len;
    b.tokens.ids.assign(n * len, Vocab::kPad);
    b.tokens.mask.assign(n * len, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < rows[i].size(); ++t) {
        b.tokens.ids[i * len + t] = rows[i][t];
        b.tokens.mask[i * len + t] = 1;
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace mxacl

#pragma once

#include <array>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mxacl/data.hpp"
#include "mxacl/model.hpp"

namespace mxacl {

struct Prediction {
  std::vector<double> logits;
  std::vector<double> probs;
  int predicted = 0;  ///< argmax; ties go to the lower class index
  std::size_t exit_layer = 0;
};

/// Runs encoder layers 1..m and exit m in eval mode.
std::vector<Prediction> predict_fixed(const MultiExitModel& model, const TokenBatch& batch, std::size_t m);

/// Natural-log entropy of a probability vector.
double entropy(const std::vector<double>& probs);

enum class PolicyKind { fixed, entropy, patience };

struct ExitPolicy {
  PolicyKind kind = PolicyKind::fixed;
  std::size_t layer = 0;    ///< fixed; 0 means the last layer
  double threshold = 0.0;   ///< entropy
  std::size_t patience = 1;  ///< patience

  void validate(std::size_t n_layers) const;
  std::string describe() const;
};

/// Inverse of describe(): "fixed", "fixed:m", "entropy:threshold" or "patience:t". Throws ValidationError.
ExitPolicy parse_policy(const std::string& text);

/// Per-sample outcome of an early-exit policy.
struct ExitDecision {
  std::size_t exit_layer = 0;
  int predicted = 0;
  double entropy_at_exit = 0.0;
  std::vector<double> entropies;  ///< one per executed layer
};

/// First layer whose prediction entropy is below `threshold`, else M.
/// Samples stop executing layers once they exit.
std::vector<ExitDecision> predict_entropy(const MultiExitModel& model, const TokenBatch& batch, double threshold);
/// First layer at which the last `t` exits agree on the argmax, else M.
std::vector<ExitDecision> predict_patience(const MultiExitModel& model, const TokenBatch& batch, std::size_t t);

struct TraceEntry {
  std::size_t sample_id = 0;
  std::size_t exit_layer = 0;
  int predicted = 0;
  int label = 0;
  bool correct = false;
  double entropy_at_exit = 0.0;
  std::vector<double> entropies;
};

struct ExitTrace {
  std::vector<TraceEntry> entries;
  double accuracy = 0.0;
  double avg_exit_layer = 0.0;
  /// Mean over samples of count_flops(chosen layer) / count_flops(M).
  double flops_ratio = 0.0;

  nlohmann::json summary() const;
  /// One JSON object per sample.
  void write_jsonl(std::ostream& os) const;
};

ExitTrace run_policy(const MultiExitModel& model, const std::vector<LabeledText>& records, const Vocab& vocab,
                     const ExitPolicy& policy, std::size_t batch_size = 64);

struct CurvePoint {
  std::size_t exit_layer = 0;
  double score = 0.0;
  std::size_t n_samples = 0;
};

/// Accuracy of predict_fixed at every layer.
std::vector<CurvePoint> layer_score_curve(const MultiExitModel& model, const std::vector<LabeledText>& records,
                                          const Vocab& vocab, std::size_t batch_size = 64);
void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& curve);
/// Whitespace-separated "layer score" rows for gnuplot-style tools.
void write_curve_dat(std::ostream& os, const std::vector<CurvePoint>& curve);

/// Exit-m sample representations h^e with their labels, plus the exit's label embeddings.
struct RepresentationExport {
  std::size_t exit_layer = 0;
  std::vector<std::vector<double>> reps;
  std::vector<int> labels;
  std::vector<std::vector<double>> label_embeddings;
  /// 2-D PCA coordinates of reps followed by the label embeddings, all l2-normalized first.
  std::vector<std::array<double, 2>> pca;

  void write_csv(std::ostream& os) const;
};

RepresentationExport export_representations(const MultiExitModel& model, const std::vector<LabeledText>& records,
                                            const Vocab& vocab, std::size_t m, std::size_t batch_size = 64);

/// Projection of mean-centred rows onto their top two principal axes.
std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& rows);

}  // namespace mxacl

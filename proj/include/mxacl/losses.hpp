#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mxacl/ops.hpp"

namespace mxacl {

/// Entries for a supervised contrastive loss, assembled from blocks of rows.
///
/// Rows are l2-normalized inside the loss. Blocks appended with
/// stop_gradient = true still shape the value (as anchors and contrast terms)
/// but receive no gradient.
class ContrastiveBatch {
 public:
  explicit ContrastiveBatch(double temperature);

  void append(Var reps, std::span<const int> labels, bool stop_gradient = false, bool anchor = true);

  std::size_t size() const { return labels_.size(); }
  double temperature() const { return temperature_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<std::uint8_t>& anchors() const { return anchors_; }
  /// All rows concatenated, [size, d].
  Var reps() const;

 private:
  double temperature_;
  std::vector<Var> blocks_;
  std::vector<int> labels_;
  std::vector<std::uint8_t> anchors_;
};

struct ContrastiveLoss {
  Var value;
  /// Anchors with at least one positive.
  std::size_t valid_anchors = 0;
  /// True when no anchor had a positive; value is then 0.
  bool degenerate() const { return valid_anchors == 0; }
};

/// Mean over the batch of -log softmax(logits)[label].
Var ce_loss(Var logits, std::span<const int> labels);

/// Soft-target cross-entropy at temperature T against fixed teacher logits, mean over the batch.
Var kd_loss(Var student_logits, const Tensor& teacher_logits, double temperature);

/// Supervised contrastive loss:
///   sum over anchors i with N_{y_i} > 1 of
///   -1/(N_{y_i}-1) * sum_{j != i, y_j = y_i} log( exp(z_i.z_j/t) / sum_{k != i} exp(z_i.z_k/t) ).
/// include_self adds k = i to the denominator (the literal written form).
ContrastiveLoss scl_loss(const ContrastiveBatch& batch, bool include_self = false);

/// SCL over the N samples plus the K label embeddings as extra entries labelled 0..K-1
/// (or `embed_labels` if given). label_embeds is [K, d]. Duplicate embedding labels throw.
ContrastiveLoss acl_embed_loss(Var sample_reps, std::span<const int> labels, Var label_embeds, double temperature,
                               std::span<const int> embed_labels = {});

/// Cross-layer variant: student samples and label embeddings plus the teacher's,
/// teacher entries stop-gradient. Batch of 2N + 2K entries.
ContrastiveLoss acl_cl_loss(Var student_reps, Var student_label_embeds, Var teacher_reps, Var teacher_label_embeds,
                            std::span<const int> labels, double temperature);

/// Self-supervised InfoNCE. Pool is the 2N rows [anchors; positives]; anchor i's positive is
/// row N+i and its contrast set is every pool row except itself. Mean over the N anchors.
Var info_nce_loss(Var anchors, Var positives, double temperature);

struct LossBundle {
  Var ce;
  Var contrastive;
  Var combined;
  double lambda_used = 0.0;
};

/// combined = (1 - lambda) * ce + lambda * contrastive. lambda must be in [0, 1].
LossBundle combine(Var ce, Var contrastive, double lambda);

}  // namespace mxacl

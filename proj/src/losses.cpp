#include "mxacl/losses.hpp"

#include <cmath>
#include <map>
#include <set>
#include <string>

namespace mxacl {
namespace {

void check_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw ValidationError("contrastive loss: temperature must be > 0");
}

std::vector<int> iota_labels(std::size_t k) {
  std::vector<int> v(k);
  for (std::size_t i = 0; i < k; ++i) v[i] = static_cast<int>(i);
  return v;
}

}  // namespace

ContrastiveBatch::ContrastiveBatch(double temperature) : temperature_(temperature) { check_temperature(temperature); }

void ContrastiveBatch::append(Var reps, std::span<const int> labels, bool stop_gradient, bool anchor) {
  const Shape& s = reps.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw ShapeError("contrastive batch: reps " + shape_str(s) + " do not match " + std::to_string(labels.size()) +
                     " labels");
  }
  if (!blocks_.empty()) {
    if (&blocks_.front().tape() != &reps.tape()) throw ValidationError("contrastive batch: blocks on different tapes");
    if (blocks_.front().shape()[1] != s[1]) {
      throw ShapeError("contrastive batch: dimension mismatch " + std::to_string(s[1]) + " vs " +
                       std::to_string(blocks_.front().shape()[1]));
    }
  }
  if (s[0] == 0) return;
  blocks_.push_back(stop_gradient ? ops::stop_gradient(reps) : reps);
  labels_.insert(labels_.end(), labels.begin(), labels.end());
  anchors_.insert(anchors_.end(), labels.size(), anchor ? 1 : 0);
}

Var ContrastiveBatch::reps() const {
  if (blocks_.empty()) throw ValidationError("contrastive batch: empty");
  return blocks_.size() == 1 ? blocks_.front() : ops::concat(blocks_, 0);
}

Var ce_loss(Var logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) throw ShapeError("ce_loss: logits do not match labels");
  if (labels.empty()) throw ValidationError("ce_loss: empty batch");
  std::vector<std::size_t> idx(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= s[1]) {
      throw ValidationError("ce_loss: label " + std::to_string(labels[i]) + " out of range for " +
                            std::to_string(s[1]) + " classes");
    }
    idx[i] = static_cast<std::size_t>(labels[i]);
  }
  return ops::scale(ops::mean(ops::pick(ops::log_softmax(logits), idx)), -1.0);
}

Var kd_loss(Var student_logits, const Tensor& teacher_logits, double temperature) {
  check_temperature(temperature);
  if (student_logits.shape() != teacher_logits.shape() || teacher_logits.rank() != 2) {
    throw ShapeError("kd_loss: student and teacher logits differ in shape");
  }
  Tape& tape = student_logits.tape();
  Var teacher_probs = ops::softmax(ops::scale(tape.constant(teacher_logits), 1.0 / temperature));
  Var log_student = ops::log_softmax(ops::scale(student_logits, 1.0 / temperature));
  const double n = static_cast<double>(teacher_logits.dim(0));
  return ops::scale(ops::sum(ops::mul(ops::stop_gradient(teacher_probs), log_student)), -1.0 / n);
}

ContrastiveLoss scl_loss(const ContrastiveBatch& batch, bool include_self) {
  const std::size_t n = batch.size();
  if (n < 2) throw ValidationError("scl_loss: needs at least 2 entries, got " + std::to_string(n));
  const auto& y = batch.labels();
  const auto& anchor = batch.anchors();
  std::map<int, std::size_t> count;
  for (int l : y) ++count[l];

  std::vector<std::uint8_t> include(n * n, 1);
  if (!include_self)
    for (std::size_t i = 0; i < n; ++i) include[i * n + i] = 0;

  Tensor weights({n, n}, 0.0);
  ContrastiveLoss out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t same = count[y[i]];
    if (!anchor[i] || same < 2) continue;
    ++out.valid_anchors;
    const double w = -1.0 / static_cast<double>(same - 1);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && y[j] == y[i]) weights.at(i, j) = w;
  }

  Var z = ops::l2_normalize(batch.reps());
  Var sim = ops::scale(ops::matmul(z, ops::transpose(z)), 1.0 / batch.temperature());
  Var log_prob = ops::masked_log_softmax(sim, include);
  out.value = ops::sum(ops::mul(z.tape().constant(std::move(weights)), log_prob));
  return out;
}

ContrastiveLoss acl_embed_loss(Var sample_reps, std::span<const int> labels, Var label_embeds, double temperature,
                               std::span<const int> embed_labels) {
  const Shape& es = label_embeds.shape();
  if (es.size() != 2) throw ShapeError("acl_embed_loss: label embeddings must be [K, d]");
  std::vector<int> own;
  if (embed_labels.empty()) {
    own = iota_labels(es[0]);
    embed_labels = own;
  }
  if (std::set<int>(embed_labels.begin(), embed_labels.end()).size() != embed_labels.size()) {
    throw ValidationError("acl_embed_loss: duplicate labels among label embeddings");
  }
  ContrastiveBatch batch(temperature);
  batch.append(sample_reps, labels);
  batch.append(label_embeds, embed_labels);
  return scl_loss(batch);
}

ContrastiveLoss acl_cl_loss(Var student_reps, Var student_label_embeds, Var teacher_reps, Var teacher_label_embeds,
                            std::span<const int> labels, double temperature) {
  if (student_reps.shape() != teacher_reps.shape() || student_label_embeds.shape() != teacher_label_embeds.shape()) {
    throw ShapeError("acl_cl_loss: student and teacher representations differ in shape (exit widths must match)");
  }
  const std::vector<int> klabels = iota_labels(student_label_embeds.shape().at(0));
  ContrastiveBatch batch(temperature);
  batch.append(student_reps, labels);
  batch.append(student_label_embeds, klabels);
  batch.append(teacher_reps, labels, /*stop_gradient=*/true);
  batch.append(teacher_label_embeds, klabels, /*stop_gradient=*/true);
  return scl_loss(batch);
}

Var info_nce_loss(Var anchors, Var positives, double temperature) {
  check_temperature(temperature);
  if (anchors.shape() != positives.shape() || anchors.shape().size() != 2) {
    throw ShapeError("info_nce_loss: anchors and positives must both be [N, d]");
  }
  const std::size_t n = anchors.shape()[0];
  if (n < 2) throw ValidationError("info_nce_loss: needs N >= 2");
  Var z = ops::l2_normalize(ops::concat({anchors, positives}, 0));
  Var za = ops::slice(z, 0, 0, n);
  Var sim = ops::scale(ops::matmul(za, ops::transpose(z)), 1.0 / temperature);
  std::vector<std::uint8_t> include(n * 2 * n, 1);
  std::vector<std::size_t> positive(n);
  for (std::size_t i = 0; i < n; ++i) {
    include[i * 2 * n + i] = 0;
    positive[i] = n + i;
  }
  return ops::scale(ops::mean(ops::pick(ops::masked_log_softmax(sim, include), positive)), -1.0);
}

LossBundle combine(Var ce, Var contrastive, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("combine: lambda must be in [0, 1]");
  LossBundle b{ce, contrastive, {}, lambda};
  b.combined = ops::add(ops::scale(ce, 1.0 - lambda), ops::scale(contrastive, lambda));
  return b;
}

}  // namespace mxacl

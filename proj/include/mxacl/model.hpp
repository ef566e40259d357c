#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mxacl/ops.hpp"
#include "mxacl/rng.hpp"
#include "mxacl/tape.hpp"

namespace mxacl {

enum class ExitKind { mha, linear };

std::string to_string(ExitKind k);
ExitKind exit_kind_from_string(const std::string& s);

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t d_exit = 64;
  std::size_t exit_heads = 2;
  std::size_t n_classes = 3;
  std::size_t max_seq_len = 32;
  double dropout = 0.1;
  ExitKind exit_kind = ExitKind::mha;

  /// Throws ValidationError on inconsistent sizes.
  void validate() const;
  /// Width of an exit's sample representation (d_exit for MHA exits, d_model for linear ones).
  std::size_t rep_dim() const { return exit_kind == ExitKind::mha ? d_exit : d_model; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Token ids for a padded batch. Row-major [n, len]; mask is 0 on padding.
struct TokenBatch {
  std::size_t n = 0;
  std::size_t len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
};

/// Identified set of parameters (gradient scope, optimizer group, freeze set).
struct ParamScope {
  std::string id;
  std::vector<Parameter*> params;
  std::size_t numel() const;
};

struct EncoderLayer {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter w1, b1, w2, b2;
  /// Normalizes the residual stream into the layer output H^(m) that exits read.
  Parameter out_gain, out_bias;
};

/// Classifier head attached to encoder layer `layer`.
/// MHA exits: down-projection, tanh, self-attention, [CLS] slot, tanh, classifier.
/// Linear exits: the [CLS] hidden state straight into the classifier.
struct ExitHead {
  std::size_t layer = 0;
  ExitKind kind = ExitKind::mha;
  Parameter down_w, down_b;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  /// [rep_dim, K]; column k is the label embedding of class k.
  Parameter classifier_w, classifier_b;
};

struct ExitOutput {
  Var rep;     ///< [N, rep_dim], not normalized
  Var logits;  ///< [N, K]
};

class MultiExitModel {
 public:
  MultiExitModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Hidden states H^(1..up_to) (0 = all), each shaped [N, L, d_model].
  std::vector<Var> encode(Tape& tape, const TokenBatch& batch, bool train, Rng& rng, std::size_t up_to = 0) const;
  /// Residual stream leaving layers 1..up_to (0 = all), each shaped [N*L, d_model].
  std::vector<Var> encode_residuals(Tape& tape, const TokenBatch& batch, bool train, Rng& rng,
                                    std::size_t up_to = 0) const;
  /// Layer-normalized token + position embeddings, shaped [N*L, d_model].
  Var embed(Tape& tape, const TokenBatch& batch, bool train, Rng& rng) const;
  /// Applies encoder layer `layer` (1-based) to the [N*L, d_model] residual stream.
  Var layer_forward(Tape& tape, std::size_t layer, Var x, const TokenBatch& batch, bool train, Rng& rng) const;
  /// H^(layer) from the residual stream leaving that layer.
  Var layer_output(Tape& tape, std::size_t layer, Var residual) const;
  /// Exit `m` (1-based) on H^(m), given as [N, L, d_model] or [N*L, d_model].
  ExitOutput exit_forward(Tape& tape, std::size_t m, Var hidden, const TokenBatch& batch) const;

  /// Label embeddings of exit m as a [K, rep_dim] tape value that routes gradient into W_c.
  Var label_embedding_var(Tape& tape, std::size_t m) const;
  /// Copies of the K label embeddings of exit m (rows of the result).
  std::vector<std::vector<double>> label_embeddings(std::size_t m) const;

  const ExitHead& exit(std::size_t m) const;
  ExitHead& exit(std::size_t m);
  std::size_t n_layers() const { return config_.n_layers; }

  /// All parameters in registration order: embeddings, layers 1..M, exits 1..M.
  ParamScope scope_all();
  ParamScope scope_backbone();
  ParamScope scope_exit(std::size_t m);
  /// Backbone plus the last exit: what stage 1 trains.
  ParamScope scope_stage1();

  std::vector<const Parameter*> parameters() const;
  Parameter* find(const std::string& name);

  bool stage1_complete() const { return stage1_complete_; }
  void set_stage1_complete(bool v) { stage1_complete_ = v; }

  /// Free-form JSON persisted with checkpoints (vocabulary, label names).
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

 private:
  void check_exit_index(std::size_t m) const;

  ModelConfig config_;
  Parameter token_embedding_;
  Parameter position_embedding_;
  Parameter embedding_ln_gain_, embedding_ln_bias_;
  std::vector<EncoderLayer> layers_;
  std::vector<ExitHead> exits_;
  bool stage1_complete_ = false;
  nlohmann::json metadata_ = nlohmann::json::object();
};

/// Multiply-accumulate counts for one sequence of length L.
struct FlopCount {
  double embedding = 0;
  double attention_projections = 0;
  double attention_scores = 0;
  double feed_forward = 0;
  double exit = 0;
  double total() const { return embedding + attention_projections + attention_scores + feed_forward + exit; }
};

/// Analytic MAC count for embeddings + encoder layers 1..m + exit m.
/// seq_len = 0 uses max_seq_len. Throws ValidationError when m is not in 1..M.
FlopCount count_flops(const ModelConfig& config, std::size_t m, std::size_t seq_len = 0);

/// Analytic number of parameters, split into backbone and all exits.
struct ParamCount {
  std::size_t backbone = 0;
  std::size_t exits = 0;
};
ParamCount count_parameters(const ModelConfig& config);

}  // namespace mxacl

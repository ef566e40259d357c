#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mxacl/data.hpp"
#include "mxacl/grad_align.hpp"
#include "mxacl/model.hpp"

namespace mxacl {

/// Linear warmup from 0 to `peak` over the first warmup_fraction of steps, then linear decay to 0.
struct LrSchedule {
  double peak = 1e-3;
  double warmup_fraction = 0.1;
  std::size_t total_steps = 1;
  bool constant = false;  ///< always `peak`

  std::size_t warmup_steps() const;
  /// Learning rate used by update number t (0-based); at(total_steps) is 0.
  double at(std::size_t t) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW over a fixed parameter scope. Weight decay multiplies the parameter by
/// (1 - lr * wd) and only touches parameters flagged `decay`. Moments and bias
/// correction are kept per parameter, so a parameter without a gradient in a
/// step is left untouched.
class AdamW {
 public:
  AdamW(ParamScope scope, AdamWConfig config, LrSchedule schedule);

  /// Gradients read from `tape`; parameters it did not reach are skipped.
  void step(const Tape& tape);
  /// One gradient per scope parameter; empty optionals are skipped.
  void step(const std::vector<std::optional<Tensor>>& grads);

  std::size_t steps() const { return steps_; }
  double last_lr() const { return last_lr_; }
  const ParamScope& scope() const { return scope_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  ParamScope scope_;
  AdamWConfig config_;
  LrSchedule schedule_;
  std::vector<Tensor> m_, v_;
  std::vector<std::size_t> param_steps_;
  std::size_t steps_ = 0;
  double last_lr_ = 0.0;
};

enum class Regime { single_exit, two_stage, joint, alternating };
enum class Objective { ce, ce_scl, acl_embed, acl_cl };

std::string to_string(Regime r);
std::string to_string(Objective o);
Regime regime_from_string(const std::string& s);
Objective objective_from_string(const std::string& s);

struct RegimeConfig {
  Regime regime = Regime::two_stage;
  /// Stage-2 objective under two_stage; the only objective under single_exit.
  Objective objective = Objective::ce;
  /// Stage-1 objective under two_stage.
  Objective stage1_objective = Objective::ce;
  bool acl_grad = false;
  double lambda = 0.02;
  double temperature = 0.5;
  double gamma_threshold = 90.0;
  bool kd = false;
  double kd_temperature = 2.0;
  double kd_weight = 1.0;
  std::size_t epochs = 15;
  std::size_t stage2_epochs = 15;
  std::size_t batch_size = 10;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;

  /// Throws ValidationError.
  void validate() const;
};

void to_json(nlohmann::json& j, const RegimeConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, RegimeConfig& c);

/// Named rows of the component ablation ladder.
std::vector<std::string> ablation_preset_names();
/// Applies a preset's objectives and flags to `base` (two_stage). Throws ValidationError on an unknown name.
RegimeConfig ablation_preset(const std::string& name, RegimeConfig base);

/// One record per epoch per trained exit.
struct MetricRecord {
  std::string run_id;
  int stage = 1;
  std::size_t epoch = 0;  ///< 1-based within the stage
  std::size_t step = 0;   ///< optimizer steps completed in the stage
  std::size_t exit_layer = 0;
  std::string objective;
  double loss_ce = 0.0;
  std::optional<double> loss_contrastive;
  double lambda_prime = 0.0;  ///< mean over the epoch's steps
  double lr = 0.0;            ///< rate used by the epoch's last step
  double train_acc = 0.0;
  double eval_acc = 0.0;
  std::size_t steps_in_epoch = 0;
  std::size_t gated_steps = 0;

  nlohmann::json to_json() const;
};

struct TrainLog {
  std::string run_id = "run";
  std::vector<MetricRecord> metrics;
  std::vector<AngleRecord> angles;
  /// Context of the step that diverged, set before DivergenceError is thrown.
  std::optional<nlohmann::json> divergence;

  void write_metrics(std::ostream& os) const;
  void write_angles(std::ostream& os) const;
};

/// Backbone and exit M under cfg.stage1_objective (cfg.objective for single_exit).
void train_stage1(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg,
                  TrainLog& log);
/// Exits 1..M-1 on a frozen backbone and exit M. Requires stage1_complete().
void train_stage2(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg,
                  TrainLog& log);
/// Sum of every exit's cross-entropy over all parameters.
void train_jt(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg, TrainLog& log);
/// Odd epochs: exit-M cross-entropy on the backbone and exit M. Even epochs: the joint sum.
void train_alt(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg, TrainLog& log);
/// Dispatches on cfg.regime.
void train(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg, TrainLog& log);

/// Settings for measuring CE vs contrastive gradient angles on fixed parameters.
struct AngleProbe {
  Objective objective = Objective::ce_scl;  ///< contrastive term compared against CE; not ce
  std::size_t exit_layer = 0;               ///< 0 = last exit
  double temperature = 0.5;
  double lambda = 0.02;
  double gamma_threshold = 90.0;
  std::size_t batch_size = 10;
};

/// One report per batch of `records` with at least two samples, in order, without touching the parameters.
/// The last exit is measured over the backbone and its head; a shallower exit over its
/// own head on the fixed backbone. Dropout is off, so the result is deterministic.
std::vector<GradReport> frozen_angle_reports(MultiExitModel& model, const std::vector<LabeledText>& records,
                                             const Vocab& vocab, const AngleProbe& probe);

struct ScoreRow {
  std::uint64_t seed = 0;
  std::size_t exit_layer = 0;
  double score = 0.0;
};

struct ScoreTable {
  std::vector<ScoreRow> rows;
  /// Per seed, the mean over exits.
  std::vector<double> cross_layer_average;
  double mean = 0.0;
  double stddev = 0.0;  ///< sample standard deviation; 0 for one seed

  void write_csv(std::ostream& os) const;
  nlohmann::json summary() const;
};

/// Model sized to `vocab`, initialised from a seed derived from `seed`; vocabulary stored in metadata.
MultiExitModel make_model(ModelConfig config, const Vocab& vocab, std::uint64_t seed);

/// Per-exit eval accuracy of a trained model for one seed.
std::vector<ScoreRow> score_model(const MultiExitModel& model, const Dataset& data, const Vocab& vocab,
                                  std::uint64_t seed);
/// Builds the table statistics from rows grouped by seed, in order of appearance.
ScoreTable make_score_table(std::vector<ScoreRow> rows);

/// Fresh model per seed (initialised from the seed), trained under cfg with cfg.seed replaced.
ScoreTable run_experiment(const ModelConfig& model_cfg, const RegimeConfig& cfg, const Dataset& data,
                          const std::vector<std::uint64_t>& seeds);

}  // namespace mxacl

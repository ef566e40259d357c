#include "mxacl/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>

#include "mxacl/inference.hpp"
#include "mxacl/losses.hpp"

namespace mxacl {

// ---------------------------------------------------------------- optimizer

std::size_t LrSchedule::warmup_steps() const {
  return static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
}

double LrSchedule::at(std::size_t t) const {
  if (constant) return peak;
  if (t >= total_steps) return 0.0;
  const std::size_t w = warmup_steps();
  if (t < w) return peak * static_cast<double>(t) / static_cast<double>(w);
  return peak * static_cast<double>(total_steps - t) / static_cast<double>(total_steps - w);
}

AdamW::AdamW(ParamScope scope, AdamWConfig config, LrSchedule schedule)
    : scope_(std::move(scope)), config_(config), schedule_(schedule), param_steps_(scope_.params.size(), 0) {
  for (const Parameter* p : scope_.params) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::step(const Tape& tape) {
  std::vector<std::optional<Tensor>> grads;
  grads.reserve(scope_.params.size());
  for (const Parameter* p : scope_.params) grads.push_back(tape.param_grad(*p));
  step(grads);
}

void AdamW::step(const std::vector<std::optional<Tensor>>& grads) {
  if (grads.size() != scope_.params.size()) {
    throw ValidationError("AdamW: expected " + std::to_string(scope_.params.size()) + " gradients, got " +
                          std::to_string(grads.size()));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i]) continue;
    if (grads[i]->shape() != scope_.params[i]->value.shape()) {
      throw ShapeError("AdamW: gradient shape " + shape_str(grads[i]->shape()) + " for " + scope_.params[i]->name +
                       " " + shape_str(scope_.params[i]->value.shape()));
    }
    for (double g : grads[i]->data()) {
      if (!std::isfinite(g)) throw NumericError("AdamW: non-finite gradient for " + scope_.params[i]->name);
    }
  }
  const double lr = schedule_.at(steps_);
  const double b1 = config_.beta1, b2 = config_.beta2;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i]) continue;
    Parameter& p = *scope_.params[i];
    const std::size_t t = ++param_steps_[i];
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    const double decay = p.decay ? 1.0 - lr * config_.weight_decay : 1.0;
    auto w = p.value.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    const auto g = grads[i]->data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      w[k] *= decay;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
  }
  last_lr_ = lr;
  ++steps_;
}

// ------------------------------------------------------------------ config

std::string to_string(Regime r) {
  switch (r) {
    case Regime::single_exit: return "single_exit";
    case Regime::two_stage: return "2st";
    case Regime::joint: return "jt";
    case Regime::alternating: return "alt";
  }
  return "?";
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::ce: return "ce";
    case Objective::ce_scl: return "ce_scl";
    case Objective::acl_embed: return "acl_embed";
    case Objective::acl_cl: return "acl_cl";
  }
  return "?";
}

Regime regime_from_string(const std::string& s) {
  if (s == "single_exit") return Regime::single_exit;
  if (s == "2st") return Regime::two_stage;
  if (s == "jt") return Regime::joint;
  if (s == "alt") return Regime::alternating;
  throw ValidationError("unknown regime \"" + s + "\" (expected single_exit, 2st, jt or alt)");
}

Objective objective_from_string(const std::string& s) {
  if (s == "ce") return Objective::ce;
  if (s == "ce_scl" || s == "ce+scl") return Objective::ce_scl;
  if (s == "acl_embed" || s == "acl") return Objective::acl_embed;
  if (s == "acl_cl") return Objective::acl_cl;
  throw ValidationError("unknown objective \"" + s + "\" (expected ce, ce_scl, acl_embed or acl_cl)");
}

void RegimeConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("regime config: " + msg); };
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must be in [0, 1]");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (!(gamma_threshold >= 0.0 && gamma_threshold <= 180.0)) fail("gamma_threshold must be in [0, 180]");
  if (!(kd_temperature > 0.0)) fail("kd_temperature must be positive");
  if (!(kd_weight >= 0.0)) fail("kd_weight must be non-negative");
  if (epochs == 0) fail("epochs must be positive");
  if (regime == Regime::two_stage && stage2_epochs == 0) fail("stage2_epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) fail("warmup_fraction must be in [0, 1)");
  if (kd && regime != Regime::two_stage) fail("kd applies to 2st stage 2 only");
  if (stage1_objective == Objective::acl_cl) fail("acl_cl needs a trained last exit and is a stage-2 objective");
  switch (regime) {
    case Regime::single_exit:
      if (objective == Objective::acl_cl) fail("acl_cl is a stage-2 objective");
      break;
    case Regime::two_stage: break;
    case Regime::joint:
    case Regime::alternating:
      if (objective != Objective::ce || stage1_objective != Objective::ce || acl_grad) {
        fail(to_string(regime) + " trains cross-entropy only");
      }
      break;
  }
}

void to_json(nlohmann::json& j, const RegimeConfig& c) {
  j = {{"regime", to_string(c.regime)},
       {"objective", to_string(c.objective)},
       {"stage1_objective", to_string(c.stage1_objective)},
       {"acl_grad", c.acl_grad},
       {"lambda", c.lambda},
       {"temperature", c.temperature},
       {"gamma_threshold", c.gamma_threshold},
       {"kd", c.kd},
       {"kd_temperature", c.kd_temperature},
       {"kd_weight", c.kd_weight},
       {"epochs", c.epochs},
       {"stage2_epochs", c.stage2_epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"warmup_fraction", c.warmup_fraction},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RegimeConfig& c) {
  if (!j.is_object()) throw ValidationError("regime config must be a JSON object");
  static const std::set<std::string> known{
      "regime", "objective", "stage1_objective", "acl_grad", "lambda",     "temperature",  "gamma_threshold",
      "kd",     "kd_temperature", "kd_weight",   "epochs",   "stage2_epochs", "batch_size", "lr",
      "weight_decay", "warmup_fraction", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ValidationError("regime config: unknown key \"" + k + "\"");
  }
  try {
    auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) j.at(key).get_to(dst);
    };
    if (j.contains("regime")) c.regime = regime_from_string(j.at("regime").get<std::string>());
    if (j.contains("objective")) c.objective = objective_from_string(j.at("objective").get<std::string>());
    if (j.contains("stage1_objective")) {
      c.stage1_objective = objective_from_string(j.at("stage1_objective").get<std::string>());
    }
    get("acl_grad", c.acl_grad);
    get("lambda", c.lambda);
    get("temperature", c.temperature);
    get("gamma_threshold", c.gamma_threshold);
    get("kd", c.kd);
    get("kd_temperature", c.kd_temperature);
    get("kd_weight", c.kd_weight);
    get("epochs", c.epochs);
    get("stage2_epochs", c.stage2_epochs);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("warmup_fraction", c.warmup_fraction);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("regime config: ") + e.what());
  }
}

std::vector<std::string> ablation_preset_names() {
  return {"acl", "ce_backbone", "no_acl_cl", "no_acl_grad", "ce_scl", "2st"};
}

RegimeConfig ablation_preset(const std::string& name, RegimeConfig base) {
  base.regime = Regime::two_stage;
  base.stage1_objective = Objective::ce;
  base.acl_grad = false;
  base.kd = false;
  if (name == "acl") {
    base.stage1_objective = Objective::acl_embed;
    base.objective = Objective::acl_cl;
    base.acl_grad = true;
  } else if (name == "ce_backbone") {
    base.objective = Objective::acl_cl;
    base.acl_grad = true;
  } else if (name == "no_acl_cl") {
    base.objective = Objective::acl_embed;
    base.acl_grad = true;
    base.kd = true;
  } else if (name == "no_acl_grad") {
    base.objective = Objective::acl_embed;
    base.kd = true;
  } else if (name == "ce_scl") {
    base.objective = Objective::ce_scl;
    base.kd = true;
  } else if (name == "2st") {
    base.objective = Objective::ce;
    base.kd = true;
  } else {
    throw ValidationError("unknown ablation preset \"" + name + "\"");
  }
  return base;
}

// ----------------------------------------------------------------- logging

nlohmann::json MetricRecord::to_json() const {
  nlohmann::json j = {{"run_id", run_id},
                      {"stage", stage},
                      {"epoch", epoch},
                      {"step", step},
                      {"exit_layer", exit_layer},
                      {"objective", objective},
                      {"loss_ce", loss_ce},
                      {"loss_contrastive", nullptr},
                      {"lambda_prime", lambda_prime},
                      {"lr", lr},
                      {"train_acc", train_acc},
                      {"eval_acc", eval_acc},
                      {"steps_in_epoch", steps_in_epoch},
                      {"gated_steps", gated_steps}};
  if (loss_contrastive) j["loss_contrastive"] = *loss_contrastive;
  return j;
}

void TrainLog::write_metrics(std::ostream& os) const {
  for (const MetricRecord& r : metrics) os << r.to_json().dump() << '\n';
}

void TrainLog::write_angles(std::ostream& os) const {
  for (const AngleRecord& r : angles) os << r.to_json().dump() << '\n';
}

// ---------------------------------------------------------------- training

namespace {

constexpr std::uint64_t kDropoutStream = 0xD50F0001;
constexpr std::uint64_t kStage1Batches = 1;
constexpr std::uint64_t kStage2Batches = 2;
constexpr std::uint64_t kModelInitStream = 0x1217;

struct Context {
  TrainLog& log;
  int stage;
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::size_t exit = 0;
};

[[noreturn]] void diverge(const Context& c, const std::string& what) {
  c.log.divergence = nlohmann::json{{"run_id", c.log.run_id}, {"stage", c.stage},   {"epoch", c.epoch},
                                    {"step", c.step},         {"exit_layer", c.exit}, {"error", what}};
  throw DivergenceError("divergence at stage " + std::to_string(c.stage) + " epoch " + std::to_string(c.epoch) +
                        " step " + std::to_string(c.step) + " exit " + std::to_string(c.exit) + ": " + what);
}

template <typename F>
auto guarded(const Context& c, F f) {
  try {
    return f();
  } catch (const NumericError& e) {
    diverge(c, e.what());
  }
}

void check_finite(const Context& c, const char* name, Var v) {
  const double x = v.value().item();
  if (!std::isfinite(x)) diverge(c, std::string(name) + " is " + std::to_string(x));
}

/// Running statistics for one exit over one epoch.
struct EpochStats {
  double ce = 0.0;
  double contrastive = 0.0;
  std::size_t n_contrastive = 0;
  double lambda_prime = 0.0;
  std::size_t steps = 0;
  std::size_t gated = 0;
  std::size_t correct = 0;
  std::size_t seen = 0;

  void count_correct(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t k = logits.cols();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (logits.at(i, c) > logits.at(i, best)) best = c;
      correct += static_cast<int>(best) == labels[i];
    }
    seen += labels.size();
  }

  MetricRecord record(const Context& c, const std::string& objective, const AdamW& opt, double eval_acc) const {
    MetricRecord r;
    r.run_id = c.log.run_id;
    r.stage = c.stage;
    r.epoch = c.epoch;
    r.step = opt.steps();
    r.exit_layer = c.exit;
    r.objective = objective;
    const double n = static_cast<double>(std::max<std::size_t>(steps, 1));
    r.loss_ce = ce / n;
    if (n_contrastive > 0) r.loss_contrastive = contrastive / static_cast<double>(n_contrastive);
    r.lambda_prime = lambda_prime / n;
    r.lr = opt.last_lr();
    r.train_acc = seen == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(seen);
    r.eval_acc = eval_acc;
    r.steps_in_epoch = steps;
    r.gated_steps = gated;
    return r;
  }
};

/// Backward and optimizer update for task (+ contrastive) on a fresh tape.
/// Without a contrastive term, or with lambda = 0 and no gate, only the task loss is differentiated.
void update(Tape& tape, Var task, std::optional<Var> contrastive, const RegimeConfig& cfg, AdamW& opt,
            Context& c, EpochStats& st) {
  check_finite(c, "task loss", task);
  st.ce += task.value().item();
  double lambda_prime = 0.0;
  if (contrastive) {
    check_finite(c, "contrastive loss", *contrastive);
    st.contrastive += contrastive->value().item();
    ++st.n_contrastive;
  }
  guarded(c, [&] {
    if (contrastive && cfg.acl_grad) {
      GatedGrads g = gated_step_grads(tape, task, *contrastive, cfg.lambda, cfg.gamma_threshold, opt.scope());
      std::vector<std::optional<Tensor>> grads(g.grads.begin(), g.grads.end());
      opt.step(grads);
      lambda_prime = g.report.lambda_prime;
      AngleRecord a;
      a.step = opt.steps();
      a.stage = c.stage;
      a.exit_layer = c.exit;
      a.angle_defined = g.report.angle_defined;
      a.cos_gamma = g.report.cos_gamma;
      a.gamma_deg = g.report.gamma_deg;
      a.gated = g.report.gated;
      a.lambda_prime = g.report.lambda_prime;
      a.loss_ce = task.value().item();
      a.loss_acl = contrastive->value().item();
      c.log.angles.push_back(a);
      st.gated += g.report.gated;
    } else if (contrastive && cfg.lambda > 0.0) {
      const LossBundle b = combine(task, *contrastive, cfg.lambda);
      tape.backward(b.combined);
      opt.step(tape);
      lambda_prime = cfg.lambda;
    } else {
      tape.backward(task);
      opt.step(tape);
    }
    return 0;
  });
  st.lambda_prime += lambda_prime;
  ++st.steps;
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
  const std::size_t d = rows.empty() ? 0 : rows[0].size();
  Tensor t({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) t.at(r, j) = rows[r][j];
  return t;
}

struct Teacher {
  Tensor reps;
  Tensor label_embeds;
};

std::optional<Var> contrastive_term(Objective objective, Tape& tape, const MultiExitModel& model, std::size_t m,
                                    const ExitOutput& out, const std::vector<int>& labels, double temperature,
                                    const Teacher* teacher) {
  switch (objective) {
    case Objective::ce: return std::nullopt;
    case Objective::ce_scl: {
      ContrastiveBatch b(temperature);
      b.append(out.rep, labels);
      return scl_loss(b).value;
    }
    case Objective::acl_embed:
      return acl_embed_loss(out.rep, labels, model.label_embedding_var(tape, m), temperature).value;
    case Objective::acl_cl:
      if (teacher == nullptr) throw ValidationError("acl_cl requires the last exit as teacher");
      return acl_cl_loss(out.rep, model.label_embedding_var(tape, m), tape.constant(teacher->reps),
                         tape.constant(teacher->label_embeds), labels, temperature)
          .value;
  }
  return std::nullopt;
}

std::size_t batches_per_epoch(const Dataset& data, const RegimeConfig& cfg) {
  if (data.train.empty()) throw ValidationError("training set is empty");
  return (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
}

LrSchedule schedule_for(const RegimeConfig& cfg, std::size_t epochs, std::size_t per_epoch) {
  return LrSchedule{cfg.lr, cfg.warmup_fraction, epochs * per_epoch, false};
}

double accuracy_at(const MultiExitModel& model, const Dataset& data, const Vocab& vocab, std::size_t m) {
  if (data.eval.empty()) return 0.0;
  return run_policy(model, data.eval, vocab, ExitPolicy{PolicyKind::fixed, m, 0.0, 1}).accuracy;
}

std::vector<double> accuracy_all(const MultiExitModel& model, const Dataset& data, const Vocab& vocab) {
  std::vector<double> acc(model.n_layers(), 0.0);
  if (data.eval.empty()) return acc;
  const auto curve = layer_score_curve(model, data.eval, vocab);
  for (std::size_t m = 0; m < acc.size(); ++m) acc[m] = curve[m].score;
  return acc;
}

void check_model_fits(const MultiExitModel& model, const Dataset& data, const Vocab& vocab) {
  if (vocab.size() > model.config().vocab_size) {
    throw ValidationError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model embeds " +
                          std::to_string(model.config().vocab_size));
  }
  for (const auto* split : {&data.train, &data.eval})
    for (const LabeledText& r : *split)
      if (r.label < 0 || static_cast<std::size_t>(r.label) >= model.config().n_classes) {
        throw ValidationError("label " + std::to_string(r.label) + " outside the model's " +
                              std::to_string(model.config().n_classes) + " classes");
      }
}

/// Sum of cross-entropy over exits 1..M with per-exit statistics.
Var joint_ce(Tape& tape, const MultiExitModel& model, const std::vector<Var>& hs, const Batch& b,
             std::vector<EpochStats>& stats) {
  Var total;
  for (std::size_t m = 1; m <= model.n_layers(); ++m) {
    const ExitOutput out = model.exit_forward(tape, m, hs[m - 1], b.tokens);
    const Var ce = ce_loss(out.logits, b.labels);
    stats[m - 1].count_correct(out.logits.value(), b.labels);
    stats[m - 1].ce += ce.value().item();
    ++stats[m - 1].steps;
    total = total.valid() ? ops::add(total, ce) : ce;
  }
  return total;
}

}  // namespace

void train_stage1(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg,
                  TrainLog& log) {
  cfg.validate();
  check_model_fits(model, data, vocab);
  const Objective objective = cfg.regime == Regime::single_exit ? cfg.objective : cfg.stage1_objective;
  if (objective == Objective::acl_cl) throw ValidationError("acl_cl is a stage-2 objective");
  const std::size_t M = model.n_layers();
  const std::size_t per_epoch = batches_per_epoch(data, cfg);
  AdamW opt(model.scope_stage1(), AdamWConfig{.weight_decay = cfg.weight_decay},
            schedule_for(cfg, cfg.epochs, per_epoch));
  Rng dropout_rng(derive_seed(cfg.seed, kDropoutStream + 1));
  Context c{log, 1};
  c.exit = M;
  std::string label = to_string(objective);
  if (cfg.acl_grad && objective != Objective::ce) label += "+grad";
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    c.epoch = epoch;
    EpochStats st;
    for (const Batch& b : make_batches(data.train, vocab, cfg.batch_size, model.config().max_seq_len,
                                       derive_seed(cfg.seed, kStage1Batches), epoch - 1, true)) {
      c.step = opt.steps() + 1;
      Tape tape(true);
      const auto [out, ce, con] = guarded(c, [&] {
        const auto hs = model.encode(tape, b.tokens, true, dropout_rng);
        const ExitOutput out = model.exit_forward(tape, M, hs.back(), b.tokens);
        const Var ce = ce_loss(out.logits, b.labels);
        return std::tuple{out, ce, contrastive_term(objective, tape, model, M, out, b.labels, cfg.temperature, nullptr)};
      });
      st.count_correct(out.logits.value(), b.labels);
      update(tape, ce, con, cfg, opt, c, st);
    }
    log.metrics.push_back(st.record(c, label, opt, accuracy_at(model, data, vocab, M)));
  }
  model.set_stage1_complete(true);
}

void train_stage2(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg,
                  TrainLog& log) {
  cfg.validate();
  if (!model.stage1_complete()) throw ValidationError("stage 2 requires a model whose stage 1 is complete");
  check_model_fits(model, data, vocab);
  const std::size_t M = model.n_layers();
  if (M < 2) return;
  const std::size_t per_epoch = batches_per_epoch(data, cfg);
  std::vector<AdamW> opts;
  for (std::size_t m = 1; m < M; ++m) {
    opts.emplace_back(model.scope_exit(m), AdamWConfig{.weight_decay = cfg.weight_decay},
                      schedule_for(cfg, cfg.stage2_epochs, per_epoch));
  }
  Teacher teacher;
  teacher.label_embeds = rows_to_tensor(model.label_embeddings(M));
  std::string objective = to_string(cfg.objective);
  if (cfg.kd) objective += "+kd";
  if (cfg.acl_grad && cfg.objective != Objective::ce) objective += "+grad";

  // The backbone and exit M are frozen and stage 2 draws no random numbers, so one
  // eval-mode forward per batch serves every exit. Exits have disjoint parameters and
  // their own optimizers, so interleaving them per batch equals training them in turn.
  for (std::size_t epoch = 1; epoch <= cfg.stage2_epochs; ++epoch) {
    std::vector<EpochStats> stats(M - 1);
    std::vector<Context> ctx;
    for (std::size_t m = 1; m < M; ++m) ctx.push_back(Context{log, 2, epoch, 0, m});
    for (const Batch& b : make_batches(data.train, vocab, cfg.batch_size, model.config().max_seq_len,
                                       derive_seed(cfg.seed, kStage2Batches), epoch - 1, true)) {
      Tape frozen(false);
      Rng unused(0);
      const auto res = guarded(ctx[0], [&] { return model.encode_residuals(frozen, b.tokens, false, unused); });
      const ExitOutput t_out = model.exit_forward(frozen, M, model.layer_output(frozen, M, res.back()), b.tokens);
      teacher.reps = t_out.rep.value();
      const Tensor& teacher_logits = t_out.logits.value();
      for (std::size_t m = 1; m < M; ++m) {
        Context& c = ctx[m - 1];
        AdamW& opt = opts[m - 1];
        c.step = opt.steps() + 1;
        Tape tape(true);
        const auto [out, task, con] = guarded(c, [&] {
          const Var h = model.layer_output(tape, m, tape.constant(res[m - 1].value()));
          const ExitOutput out = model.exit_forward(tape, m, h, b.tokens);
          Var task = ce_loss(out.logits, b.labels);
          if (cfg.kd) {
            task = ops::add(task, ops::scale(kd_loss(out.logits, teacher_logits, cfg.kd_temperature), cfg.kd_weight));
          }
          return std::tuple{out, task,
                            contrastive_term(cfg.objective, tape, model, m, out, b.labels, cfg.temperature, &teacher)};
        });
        stats[m - 1].count_correct(out.logits.value(), b.labels);
        update(tape, task, con, cfg, opt, c, stats[m - 1]);
      }
    }
    const std::vector<double> acc = accuracy_all(model, data, vocab);
    for (std::size_t m = 1; m < M; ++m) {
      log.metrics.push_back(stats[m - 1].record(ctx[m - 1], objective, opts[m - 1], acc[m - 1]));
    }
  }
}

namespace {

/// Shared loop of JT and ALT. `joint_epoch(e)` selects the summed objective for epoch e (1-based).
template <typename JointEpoch>
void train_multi(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg,
                 TrainLog& log, JointEpoch joint_epoch) {
  cfg.validate();
  check_model_fits(model, data, vocab);
  const std::size_t M = model.n_layers();
  const std::size_t per_epoch = batches_per_epoch(data, cfg);
  AdamW opt(model.scope_all(), AdamWConfig{.weight_decay = cfg.weight_decay},
            schedule_for(cfg, cfg.epochs, per_epoch));
  Rng dropout_rng(derive_seed(cfg.seed, kDropoutStream + 1));
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool joint = joint_epoch(epoch);
    std::vector<EpochStats> stats(M);
    Context c{log, 1, epoch, 0, M};
    for (const Batch& b : make_batches(data.train, vocab, cfg.batch_size, model.config().max_seq_len,
                                       derive_seed(cfg.seed, kStage1Batches), epoch - 1, true)) {
      c.step = opt.steps() + 1;
      Tape tape(true);
      const Var loss = guarded(c, [&] {
        const auto hs = model.encode(tape, b.tokens, true, dropout_rng);
        if (joint) return joint_ce(tape, model, hs, b, stats);
        const ExitOutput out = model.exit_forward(tape, M, hs.back(), b.tokens);
        const Var ce = ce_loss(out.logits, b.labels);
        stats[M - 1].count_correct(out.logits.value(), b.labels);
        stats[M - 1].ce += ce.value().item();
        ++stats[M - 1].steps;
        return ce;
      });
      check_finite(c, "loss", loss);
      guarded(c, [&] {
        tape.backward(loss);
        opt.step(tape);
        return 0;
      });
    }
    const std::vector<double> acc = accuracy_all(model, data, vocab);
    for (std::size_t m = joint ? 1 : M; m <= M; ++m) {
      c.exit = m;
      log.metrics.push_back(stats[m - 1].record(c, joint ? "ce_joint" : "ce_last", opt, acc[m - 1]));
    }
  }
  model.set_stage1_complete(true);
}

}  // namespace

void train_jt(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg,
              TrainLog& log) {
  train_multi(model, data, vocab, cfg, log, [](std::size_t) { return true; });
}

void train_alt(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg,
               TrainLog& log) {
  train_multi(model, data, vocab, cfg, log, [](std::size_t e) { return e % 2 == 0; });
}

void train(MultiExitModel& model, const Dataset& data, const Vocab& vocab, const RegimeConfig& cfg, TrainLog& log) {
  switch (cfg.regime) {
    case Regime::single_exit: train_stage1(model, data, vocab, cfg, log); break;
    case Regime::two_stage:
      train_stage1(model, data, vocab, cfg, log);
      train_stage2(model, data, vocab, cfg, log);
      break;
    case Regime::joint: train_jt(model, data, vocab, cfg, log); break;
    case Regime::alternating: train_alt(model, data, vocab, cfg, log); break;
  }
}

// ----------------------------------------------------------------- angles

std::vector<GradReport> frozen_angle_reports(MultiExitModel& model, const std::vector<LabeledText>& records,
                                             const Vocab& vocab, const AngleProbe& probe) {
  const std::size_t M = model.config().n_layers;
  const std::size_t m = probe.exit_layer == 0 ? M : probe.exit_layer;
  if (m > M) throw ValidationError("angles: exit layer " + std::to_string(m) + " out of range 1.." + std::to_string(M));
  if (probe.objective == Objective::ce) throw ValidationError("angles: objective must be contrastive");
  if (probe.objective == Objective::acl_cl && m == M) throw ValidationError("angles: acl_cl needs an exit below the last");
  if (probe.batch_size == 0) throw ValidationError("angles: batch_size must be positive");
  if (records.empty()) throw ValidationError("angles: no records");
  const ParamScope scope = m == M ? model.scope_stage1() : model.scope_exit(m);
  Teacher teacher;
  teacher.label_embeds = rows_to_tensor(model.label_embeddings(M));
  std::vector<GradReport> reports;
  Rng unused(0);
  for (const Batch& b : make_batches(records, vocab, probe.batch_size, model.config().max_seq_len, 0, 0, false)) {
    if (b.labels.size() < 2) continue;
    Tape tape(true);
    Var h;
    if (m == M) {
      h = model.encode(tape, b.tokens, false, unused).back();
    } else {
      Tape frozen(false);
      const auto res = model.encode_residuals(frozen, b.tokens, false, unused);
      teacher.reps = model.exit_forward(frozen, M, model.layer_output(frozen, M, res.back()), b.tokens).rep.value();
      h = model.layer_output(tape, m, tape.constant(res[m - 1].value()));
    }
    const ExitOutput out = model.exit_forward(tape, m, h, b.tokens);
    const Var ce = ce_loss(out.logits, b.labels);
    const Var con =
        *contrastive_term(probe.objective, tape, model, m, out, b.labels, probe.temperature, &teacher);
    reports.push_back(gated_step_grads(tape, ce, con, probe.lambda, probe.gamma_threshold, scope).report);
  }
  return reports;
}

// ----------------------------------------------------------------- scoring

MultiExitModel make_model(ModelConfig config, const Vocab& vocab, std::uint64_t seed) {
  config.vocab_size = vocab.size();
  MultiExitModel model(config, derive_seed(seed, kModelInitStream));
  model.metadata()["vocab"] = vocab.to_json();
  return model;
}

std::vector<ScoreRow> score_model(const MultiExitModel& model, const Dataset& data, const Vocab& vocab,
                                  std::uint64_t seed) {
  std::vector<ScoreRow> rows;
  const std::vector<double> acc = accuracy_all(model, data, vocab);
  for (std::size_t m = 1; m <= acc.size(); ++m) rows.push_back({seed, m, acc[m - 1]});
  return rows;
}

ScoreTable make_score_table(std::vector<ScoreRow> rows) {
  ScoreTable t;
  t.rows = std::move(rows);
  std::vector<std::uint64_t> order;
  std::vector<std::pair<double, std::size_t>> acc;
  for (const ScoreRow& r : t.rows) {
    const auto it = std::find(order.begin(), order.end(), r.seed);
    const std::size_t i = static_cast<std::size_t>(it - order.begin());
    if (it == order.end()) {
      order.push_back(r.seed);
      acc.emplace_back(0.0, 0);
    }
    acc[i].first += r.score;
    ++acc[i].second;
  }
  for (const auto& [s, n] : acc) t.cross_layer_average.push_back(s / static_cast<double>(n));
  const double k = static_cast<double>(t.cross_layer_average.size());
  if (k > 0) {
    for (double a : t.cross_layer_average) t.mean += a;
    t.mean /= k;
  }
  if (k > 1) {
    double ss = 0.0;
    for (double a : t.cross_layer_average) ss += (a - t.mean) * (a - t.mean);
    t.stddev = std::sqrt(ss / (k - 1.0));
  }
  return t;
}

void ScoreTable::write_csv(std::ostream& os) const {
  os << "seed,exit_layer,score\n" << std::setprecision(17);
  for (const ScoreRow& r : rows) os << r.seed << ',' << r.exit_layer << ',' << r.score << '\n';
}

nlohmann::json ScoreTable::summary() const {
  return {{"cross_layer_average", cross_layer_average}, {"mean", mean}, {"stddev", stddev}};
}

ScoreTable run_experiment(const ModelConfig& model_cfg, const RegimeConfig& cfg, const Dataset& data,
                          const std::vector<std::uint64_t>& seeds) {
  cfg.validate();
  if (seeds.empty()) throw ValidationError("run_experiment: no seeds");
  const Vocab vocab = Vocab::build(data.train);
  std::vector<ScoreRow> rows;
  for (std::uint64_t seed : seeds) {
    RegimeConfig c = cfg;
    c.seed = seed;
    MultiExitModel model = make_model(model_cfg, vocab, seed);
    TrainLog log;
    log.run_id = "seed" + std::to_string(seed);
    train(model, data, vocab, c, log);
    for (const ScoreRow& r : score_model(model, data, vocab, seed)) rows.push_back(r);
  }
  return make_score_table(std::move(rows));
}

}  // namespace mxacl

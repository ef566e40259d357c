#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "mxacl/checkpoint.hpp"
#include "mxacl/losses.hpp"
#include "mxacl/training.hpp"

namespace mxacl {
namespace {

struct Fixture {
  Dataset data;
  Vocab vocab;
  ModelConfig model_cfg;
  RegimeConfig cfg;

  MultiExitModel model(std::uint64_t seed = 3) const { return make_model(model_cfg, vocab, seed); }
};

Fixture small_setup(std::size_t layers = 3) {
  SynthSpec s;
  s.n_train = 40;
  s.n_eval = 21;
  s.seed = 11;
  Fixture u{generate_synthetic(s), {}, {}, {}};
  u.vocab = Vocab::build(u.data.train);
  u.model_cfg.d_model = 16;
  u.model_cfg.n_heads = 2;
  u.model_cfg.n_layers = layers;
  u.model_cfg.d_ff = 32;
  u.model_cfg.d_exit = 8;
  u.model_cfg.max_seq_len = 17;
  u.cfg.epochs = 2;
  u.cfg.stage2_epochs = 2;
  u.cfg.batch_size = 8;
  u.cfg.seed = 5;
  return u;
}

std::vector<Tensor> snapshot(ParamScope scope) {
  std::vector<Tensor> out;
  for (const Parameter* p : scope.params) out.push_back(p->value);
  return out;
}

void expect_bit_identical(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].vec(), b[i].vec()) << "parameter " << i;
}

bool any_changed(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].vec() != b[i].vec()) return true;
  return false;
}

// ------------------------------------------------------------------ schedule

TEST(Schedule, Endpoints) {
  const LrSchedule s{2e-5, 0.1, 100, false};
  EXPECT_EQ(s.warmup_steps(), 10u);
  EXPECT_EQ(s.at(0), 0.0);
  EXPECT_NEAR(s.at(10), 2e-5, 1e-15);
  EXPECT_NEAR(s.at(5), 1e-5, 1e-15);
  EXPECT_NEAR(s.at(99), 2e-5 / 90.0, 1e-15);
  EXPECT_EQ(s.at(100), 0.0);
  for (std::size_t t = 1; t < 100; ++t) EXPECT_GT(s.at(t), 0.0);
}

TEST(Schedule, NoWarmupStartsAtPeak) {
  const LrSchedule s{1e-3, 0.0, 10, false};
  EXPECT_EQ(s.at(0), 1e-3);
  EXPECT_NEAR(s.at(5), 5e-4, 1e-18);
  const LrSchedule c{1e-3, 0.1, 10, true};
  EXPECT_EQ(c.at(0), 1e-3);
  EXPECT_EQ(c.at(10), 1e-3);
}

// ----------------------------------------------------------------- optimizer

Parameter scalar_param(double v, bool decay = true) { return Parameter{"w", Tensor({1}, v), decay}; }

TEST(AdamWTest, ZeroGradientZeroDecayLeavesParamsUnchanged) {
  Parameter w{"w", Tensor({2, 2}, std::vector<double>{0.1, -0.2, 0.3, -0.4}), true};
  Parameter b{"b", Tensor({2}, std::vector<double>{1.0, 2.0}), false};
  const Tensor w0 = w.value, b0 = b.value;
  AdamW opt(ParamScope{"s", {&w, &b}}, AdamWConfig{.weight_decay = 0.0}, LrSchedule{0.1, 0.0, 10, true});
  for (int i = 0; i < 3; ++i) opt.step({Tensor({2, 2}), Tensor({2})});
  EXPECT_EQ(w.value.vec(), w0.vec());
  EXPECT_EQ(b.value.vec(), b0.vec());
}

TEST(AdamWTest, TwoStepsMatchHandArithmetic) {
  Parameter w = scalar_param(0.5);
  const double lr = 0.1, wd = 0.01, eps = 1e-8;
  AdamW opt(ParamScope{"s", {&w}}, AdamWConfig{.weight_decay = wd}, LrSchedule{lr, 0.0, 10, true});
  opt.step({Tensor({1}, 1.0)});
  // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
  const double w1 = 0.5 * (1.0 - lr * wd) - lr * 1.0 / (1.0 + eps);
  EXPECT_NEAR(w.value[0], w1, 1e-15);
  opt.step({Tensor({1}, -2.0)});
  // m = 0.9*0.1 - 0.2 = -0.11, v = 0.999*0.001 + 0.001*4 = 0.004999
  const double m_hat = -0.11 / (1.0 - 0.81);
  const double v_hat = 0.004999 / (1.0 - 0.998001);
  const double w2 = w1 * (1.0 - lr * wd) - lr * m_hat / (std::sqrt(v_hat) + eps);
  EXPECT_NEAR(w.value[0], w2, 1e-14);
  EXPECT_EQ(opt.steps(), 2u);
}

TEST(AdamWTest, DecayIsMultiplicativeAndSkipsNonDecayParams) {
  Parameter w = scalar_param(2.0, true), g = scalar_param(2.0, false);
  AdamW opt(ParamScope{"s", {&w, &g}}, AdamWConfig{.weight_decay = 0.5}, LrSchedule{0.1, 0.0, 10, true});
  opt.step({Tensor({1}, 0.0), Tensor({1}, 0.0)});
  EXPECT_EQ(w.value[0], 2.0 * (1.0 - 0.1 * 0.5));
  EXPECT_EQ(g.value[0], 2.0);
}

TEST(AdamWTest, MissingGradientSkipsParameter) {
  Parameter a = scalar_param(1.0), b = scalar_param(1.0);
  AdamW opt(ParamScope{"s", {&a, &b}}, AdamWConfig{}, LrSchedule{0.1, 0.0, 10, true});
  opt.step({Tensor({1}, 1.0), std::nullopt});
  EXPECT_NE(a.value[0], 1.0);
  EXPECT_EQ(b.value[0], 1.0);
  EXPECT_EQ(opt.first_moments()[1][0], 0.0);
  EXPECT_EQ(opt.second_moments()[1][0], 0.0);
}

TEST(AdamWTest, NonFiniteGradientRejectedBeforeAnyUpdate) {
  Parameter a = scalar_param(1.0), b = scalar_param(1.0);
  AdamW opt(ParamScope{"s", {&a, &b}}, AdamWConfig{}, LrSchedule{0.1, 0.0, 10, true});
  EXPECT_THROW(opt.step({Tensor({1}, 1.0), Tensor({1}, std::numeric_limits<double>::quiet_NaN())}), NumericError);
  EXPECT_THROW(opt.step({Tensor({1}, std::numeric_limits<double>::infinity()), Tensor({1}, 1.0)}), NumericError);
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(b.value[0], 1.0);
  EXPECT_EQ(opt.steps(), 0u);
  EXPECT_THROW(opt.step({Tensor({2}, 1.0), Tensor({1}, 1.0)}), ShapeError);
  EXPECT_THROW(opt.step({Tensor({1}, 1.0)}), ValidationError);
}

TEST(AdamWTest, UsesScheduleRate) {
  Parameter w = scalar_param(0.0, false);
  AdamW opt(ParamScope{"s", {&w}}, AdamWConfig{}, LrSchedule{0.1, 0.5, 4, false});
  opt.step({Tensor({1}, 1.0)});
  EXPECT_EQ(opt.last_lr(), 0.0);
  EXPECT_EQ(w.value[0], 0.0);
  opt.step({Tensor({1}, 1.0)});
  EXPECT_NEAR(opt.last_lr(), 0.05, 1e-17);
  opt.step({Tensor({1}, 1.0)});
  EXPECT_NEAR(opt.last_lr(), 0.1, 1e-17);
}

// -------------------------------------------------------------------- config

TEST(RegimeConfigTest, DefaultsAndJson) {
  const RegimeConfig d;
  EXPECT_EQ(d.lambda, 0.02);
  EXPECT_EQ(d.temperature, 0.5);
  EXPECT_EQ(d.gamma_threshold, 90.0);
  EXPECT_EQ(d.epochs, 15u);
  EXPECT_EQ(d.weight_decay, 0.01);
  EXPECT_EQ(d.warmup_fraction, 0.1);
  const RegimeConfig from_empty = nlohmann::json::object().get<RegimeConfig>();
  EXPECT_EQ(nlohmann::json(from_empty), nlohmann::json(d));

  RegimeConfig c;
  c.regime = Regime::single_exit;
  c.objective = Objective::acl_embed;
  c.acl_grad = true;
  c.seed = 77;
  const RegimeConfig back = nlohmann::json(c).get<RegimeConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));

  nlohmann::json j = c;
  j["lamda"] = 0.1;
  EXPECT_THROW(j.get<RegimeConfig>(), ValidationError);
  EXPECT_THROW((nlohmann::json{{"regime", "3st"}}.get<RegimeConfig>()), ValidationError);
  EXPECT_THROW((nlohmann::json{{"epochs", "many"}}.get<RegimeConfig>()), ValidationError);
}

TEST(RegimeConfigTest, Validation) {
  auto bad = [](auto edit) {
    RegimeConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), ValidationError);
  };
  bad([](RegimeConfig& c) { c.lambda = 1.5; });
  bad([](RegimeConfig& c) { c.temperature = 0.0; });
  bad([](RegimeConfig& c) { c.batch_size = 0; });
  bad([](RegimeConfig& c) { c.stage1_objective = Objective::acl_cl; });
  bad([](RegimeConfig& c) {
    c.regime = Regime::single_exit;
    c.objective = Objective::acl_cl;
  });
  bad([](RegimeConfig& c) {
    c.regime = Regime::joint;
    c.kd = true;
  });
  bad([](RegimeConfig& c) {
    c.regime = Regime::alternating;
    c.objective = Objective::ce_scl;
  });
  RegimeConfig ok;
  ok.objective = Objective::acl_cl;
  ok.kd = true;
  EXPECT_NO_THROW(ok.validate());
}

TEST(RegimeConfigTest, AblationPresetsAreValid) {
  const auto names = ablation_preset_names();
  ASSERT_EQ(names.size(), 6u);
  for (const auto& n : names) EXPECT_NO_THROW(ablation_preset(n, RegimeConfig{}).validate()) << n;
  const RegimeConfig full = ablation_preset("acl", RegimeConfig{});
  EXPECT_EQ(full.stage1_objective, Objective::acl_embed);
  EXPECT_EQ(full.objective, Objective::acl_cl);
  EXPECT_TRUE(full.acl_grad);
  const RegimeConfig base = ablation_preset("2st", RegimeConfig{});
  EXPECT_EQ(base.objective, Objective::ce);
  EXPECT_TRUE(base.kd);
  EXPECT_THROW(ablation_preset("nope", RegimeConfig{}), ValidationError);
}

// --------------------------------------------------------------------- stage 1

TEST(Stage1, IntermediateExitsStayBitIdentical) {
  const Fixture u = small_setup();
  MultiExitModel m = u.model();
  std::vector<std::vector<Tensor>> before;
  for (std::size_t e = 1; e < 3; ++e) before.push_back(snapshot(m.scope_exit(e)));
  const auto stage1_before = snapshot(m.scope_stage1());
  TrainLog log;
  train_stage1(m, u.data, u.vocab, u.cfg, log);
  for (std::size_t e = 1; e < 3; ++e) expect_bit_identical(before[e - 1], snapshot(m.scope_exit(e)));
  EXPECT_TRUE(any_changed(stage1_before, snapshot(m.scope_stage1())));
  EXPECT_TRUE(m.stage1_complete());
  ASSERT_EQ(log.metrics.size(), 2u);
  EXPECT_EQ(log.metrics[1].step, 10u);
  EXPECT_EQ(log.metrics[1].exit_layer, 3u);
  EXPECT_EQ(log.metrics[0].steps_in_epoch, 5u);
}

TEST(Stage1, LambdaZeroCollapsesToCrossEntropy) {
  const Fixture u = small_setup();
  MultiExitModel ref = u.model();
  TrainLog ref_log;
  RegimeConfig ce = u.cfg;
  ce.regime = Regime::single_exit;
  train_stage1(ref, u.data, u.vocab, ce, ref_log);
  const auto expect = serialize_checkpoint(ref);
  for (Objective o : {Objective::ce_scl, Objective::acl_embed}) {
    for (bool gate : {false, true}) {
      RegimeConfig c = ce;
      c.objective = o;
      c.acl_grad = gate;
      c.lambda = 0.0;
      MultiExitModel m = u.model();
      TrainLog log;
      train_stage1(m, u.data, u.vocab, c, log);
      EXPECT_EQ(serialize_checkpoint(m), expect) << to_string(o) << " gate " << gate;
      EXPECT_EQ(log.angles.size(), gate ? 10u : 0u);
    }
  }
}

TEST(Stage1, NonzeroLambdaChangesTrajectory) {
  const Fixture u = small_setup();
  RegimeConfig c = u.cfg;
  c.regime = Regime::single_exit;
  MultiExitModel a = u.model(), b = u.model();
  TrainLog la, lb;
  train_stage1(a, u.data, u.vocab, c, la);
  c.objective = Objective::acl_embed;
  c.lambda = 0.5;
  train_stage1(b, u.data, u.vocab, c, lb);
  EXPECT_NE(serialize_checkpoint(a), serialize_checkpoint(b));
  ASSERT_TRUE(lb.metrics[0].loss_contrastive.has_value());
  EXPECT_EQ(lb.metrics[0].lambda_prime, 0.5);
  EXPECT_FALSE(la.metrics[0].loss_contrastive.has_value());
}

TEST(Stage1, GateAtZeroDegreesReproducesCrossEntropyExactly) {
  // A threshold of 0 gates every step with a nonzero angle.
  const Fixture u = small_setup();
  RegimeConfig c = u.cfg;
  c.regime = Regime::single_exit;
  MultiExitModel ref = u.model();
  TrainLog ref_log;
  train_stage1(ref, u.data, u.vocab, c, ref_log);
  c.objective = Objective::acl_embed;
  c.acl_grad = true;
  c.lambda = 0.5;
  c.gamma_threshold = 0.0;
  MultiExitModel m = u.model();
  TrainLog log;
  train_stage1(m, u.data, u.vocab, c, log);
  ASSERT_EQ(log.angles.size(), 10u);
  for (const AngleRecord& a : log.angles) {
    EXPECT_TRUE(a.gated);
    EXPECT_EQ(a.lambda_prime, 0.0);
    EXPECT_GE(a.gamma_deg, 0.0);
    EXPECT_LE(a.gamma_deg, 180.0);
  }
  EXPECT_EQ(serialize_checkpoint(m), serialize_checkpoint(ref));
}

TEST(Stage1, GatedFractionRecomputableFromAngleLog) {
  const Fixture u = small_setup();
  RegimeConfig c = u.cfg;
  c.regime = Regime::single_exit;
  c.objective = Objective::acl_embed;
  c.acl_grad = true;
  c.gamma_threshold = 60.0;
  c.epochs = 3;
  MultiExitModel m = u.model();
  TrainLog log;
  train_stage1(m, u.data, u.vocab, c, log);
  std::size_t gated = 0, steps = 0;
  for (const MetricRecord& r : log.metrics) gated += r.gated_steps, steps += r.steps_in_epoch;
  ASSERT_EQ(log.angles.size(), steps);

  std::stringstream ss;
  log.write_angles(ss);
  std::vector<GradReport> reports;
  std::string line;
  while (std::getline(ss, line)) reports.push_back(report_from_record(AngleRecord::from_json(nlohmann::json::parse(line))));
  ASSERT_EQ(reports.size(), steps);
  const AngleHistogram h = angle_histogram(reports);
  EXPECT_EQ(h.gated_fraction, static_cast<double>(gated) / static_cast<double>(steps));
  for (std::size_t i = 0; i < log.angles.size(); ++i) EXPECT_EQ(log.angles[i].step, i + 1);
}

TEST(Stage1, GatedRecordsCarryGateSuffix) {
  const Fixture u = small_setup();
  for (bool gate : {false, true}) {
    RegimeConfig c = u.cfg;
    c.stage1_objective = Objective::acl_embed;
    c.acl_grad = gate;
    MultiExitModel m = u.model();
    TrainLog log;
    train_stage1(m, u.data, u.vocab, c, log);
    for (const MetricRecord& r : log.metrics) EXPECT_EQ(r.objective, gate ? "acl_embed+grad" : "acl_embed");
  }
}

TEST(Stage1, DivergenceAbortsWithDiagnostic) {
  const Fixture u = small_setup();
  MultiExitModel m = u.model();
  m.find("exit3.classifier.weight")->value[0] = std::numeric_limits<double>::quiet_NaN();
  RegimeConfig c = u.cfg;
  c.regime = Regime::single_exit;
  TrainLog log;
  EXPECT_THROW(train_stage1(m, u.data, u.vocab, c, log), DivergenceError);
  ASSERT_TRUE(log.divergence.has_value());
  EXPECT_EQ((*log.divergence)["stage"], 1);
  EXPECT_EQ((*log.divergence)["step"], 1);
}

// --------------------------------------------------------------------- stage 2

TEST(Stage2, RequiresCompletedStage1) {
  const Fixture u = small_setup();
  MultiExitModel m = u.model();
  TrainLog log;
  EXPECT_THROW(train_stage2(m, u.data, u.vocab, u.cfg, log), ValidationError);
}

TEST(Stage2, FreezesBackboneAndLastExit) {
  const Fixture u = small_setup();
  MultiExitModel m = u.model();
  TrainLog log;
  train_stage1(m, u.data, u.vocab, u.cfg, log);
  const auto frozen = snapshot(m.scope_stage1());
  const auto exit1 = snapshot(m.scope_exit(1));
  RegimeConfig c = ablation_preset("acl", u.cfg);
  train_stage2(m, u.data, u.vocab, c, log);
  expect_bit_identical(frozen, snapshot(m.scope_stage1()));
  EXPECT_TRUE(any_changed(exit1, snapshot(m.scope_exit(1))));
  // Two epochs, two intermediate exits.
  std::size_t stage2_records = 0;
  for (const MetricRecord& r : log.metrics) stage2_records += r.stage == 2;
  EXPECT_EQ(stage2_records, 4u);
  for (const AngleRecord& a : log.angles) EXPECT_EQ(a.stage, 2);
  EXPECT_EQ(log.angles.size(), 20u);
}

TEST(Stage2, LambdaZeroCollapsesToTaskLoss) {
  const Fixture u = small_setup();
  MultiExitModel base = u.model();
  TrainLog log;
  train_stage1(base, u.data, u.vocab, u.cfg, log);
  const auto stage1_bytes = serialize_checkpoint(base);
  for (bool kd : {false, true}) {
    RegimeConfig ce = u.cfg;
    ce.kd = kd;
    MultiExitModel ref = deserialize_checkpoint(stage1_bytes);
    train_stage2(ref, u.data, u.vocab, ce, log);
    for (Objective o : {Objective::ce_scl, Objective::acl_embed, Objective::acl_cl}) {
      for (bool gate : {false, true}) {
        RegimeConfig c = ce;
        c.objective = o;
        c.acl_grad = gate;
        c.lambda = 0.0;
        MultiExitModel m = deserialize_checkpoint(stage1_bytes);
        train_stage2(m, u.data, u.vocab, c, log);
        EXPECT_EQ(serialize_checkpoint(m), serialize_checkpoint(ref)) << to_string(o) << " kd " << kd;
      }
    }
  }
}

TEST(Stage2, KdAtFixedPointHasZeroGradient) {
  Tape tape;
  Rng rng(2);
  Tensor x({4, 3});
  for (double& v : x.data()) v = rng.normal();
  const Var s = tape.leaf(x);
  const double t = 2.0;
  const Var kd = kd_loss(s, x, t);
  tape.backward(kd);
  const Tensor grad = tape.grad(s);
  for (double g : grad.data()) EXPECT_NEAR(g, 0.0, 1e-15);
  double ent = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double z = 0.0, mx = -1e300;
    for (std::size_t c = 0; c < 3; ++c) mx = std::max(mx, x.at(i, c) / t);
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(x.at(i, c) / t - mx);
    for (std::size_t c = 0; c < 3; ++c) {
      const double p = std::exp(x.at(i, c) / t - mx) / z;
      ent -= p * std::log(p);
    }
  }
  EXPECT_NEAR(kd.value().item(), ent / 4.0, 1e-14);
}

// --------------------------------------------------------------------- JT/ALT

TEST(Joint, SingleLayerEqualsStage1CrossEntropy) {
  const Fixture u = small_setup(1);
  RegimeConfig c = u.cfg;
  c.regime = Regime::single_exit;
  MultiExitModel a = u.model(), b = u.model();
  TrainLog la, lb;
  train_stage1(a, u.data, u.vocab, c, la);
  c.regime = Regime::joint;
  train_jt(b, u.data, u.vocab, c, lb);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
}

TEST(Joint, ExitGradientEqualsItsOwnCrossEntropyGradient) {
  const Fixture u = small_setup();
  const MultiExitModel m = u.model();
  const Batch b = make_batches(u.data.train, u.vocab, 8, 17, 0, 0, false)[0];
  auto exit_grads = [&](bool joint, std::size_t e) {
    Tape tape;
    Rng unused(0);
    const auto hs = m.encode(tape, b.tokens, false, unused);
    Var total;
    for (std::size_t k = 1; k <= 3; ++k) {
      if (!joint && k != e) continue;
      const Var ce = ce_loss(m.exit_forward(tape, k, hs[k - 1], b.tokens).logits, b.labels);
      total = total.valid() ? ops::add(total, ce) : ce;
    }
    tape.backward(total);
    return flatten_grads(tape, const_cast<MultiExitModel&>(m).scope_exit(e));
  };
  for (std::size_t e = 1; e <= 3; ++e) EXPECT_EQ(exit_grads(true, e), exit_grads(false, e));
}

TEST(Alternating, OneEpochEqualsOneEpochOfStage1) {
  const Fixture u = small_setup();
  RegimeConfig c = u.cfg;
  c.epochs = 1;
  c.regime = Regime::single_exit;
  MultiExitModel a = u.model(), b = u.model();
  TrainLog la, lb;
  train_stage1(a, u.data, u.vocab, c, la);
  c.regime = Regime::alternating;
  train_alt(b, u.data, u.vocab, c, lb);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
}

TEST(Alternating, EpochParityBookkeeping) {
  const Fixture u = small_setup();
  RegimeConfig c = u.cfg;
  c.regime = Regime::alternating;
  c.epochs = 4;
  MultiExitModel m = u.model();
  const auto exits_before = snapshot(m.scope_exit(1));
  TrainLog log;
  train_alt(m, u.data, u.vocab, c, log);
  std::size_t odd = 0, even = 0;
  for (std::size_t e = 1; e <= 4; ++e) {
    std::size_t last = 0, joint = 0;
    for (const MetricRecord& r : log.metrics) {
      if (r.epoch != e) continue;
      last += r.objective == "ce_last";
      joint += r.objective == "ce_joint";
    }
    if (e % 2 == 1) {
      EXPECT_EQ(last, 1u);
      EXPECT_EQ(joint, 0u);
      odd += last;
    } else {
      EXPECT_EQ(joint, 3u);
      EXPECT_EQ(last, 0u);
      even += joint > 0;
    }
  }
  EXPECT_EQ(odd, 2u);
  EXPECT_EQ(even, 2u);
  EXPECT_TRUE(any_changed(exits_before, snapshot(m.scope_exit(1))));
}

// ------------------------------------------------------------------ angles

// Independent recomputation: one tape per objective, flattened over the same scope.
std::vector<double> objective_grad(MultiExitModel& model, const Batch& b, bool scl, double temperature) {
  const ParamScope scope = model.scope_stage1();
  Rng unused(0);
  Tape tape(true);
  const ExitOutput out = model.exit_forward(tape, 3, model.encode(tape, b.tokens, false, unused).back(), b.tokens);
  if (scl) {
    ContrastiveBatch cb(temperature);
    cb.append(out.rep, b.labels);
    tape.backward(scl_loss(cb).value);
  } else {
    tape.backward(ce_loss(out.logits, b.labels));
  }
  return flatten_grads(tape, scope, true);
}

TEST(FrozenAngles, MatchSeparateBackwardPasses) {
  const Fixture u = small_setup();
  MultiExitModel model = u.model();
  const auto before = snapshot(model.scope_all());
  AngleProbe probe;
  probe.batch_size = 8;
  const auto reports = frozen_angle_reports(model, u.data.train, u.vocab, probe);
  expect_bit_identical(before, snapshot(model.scope_all()));
  const auto batches = make_batches(u.data.train, u.vocab, 8, 17, 0, 0, false);
  ASSERT_EQ(reports.size(), batches.size());
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const std::vector<double> a = objective_grad(model, batches[i], false, 0.5);
    const std::vector<double> c = objective_grad(model, batches[i], true, 0.5);
    double dot = 0.0, na = 0.0, nc = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      dot += a[j] * c[j];
      na += a[j] * a[j];
      nc += c[j] * c[j];
    }
    const double want = std::acos(dot / std::sqrt(na * nc)) * 180.0 / std::acos(-1.0);
    ASSERT_TRUE(reports[i].angle_defined);
    EXPECT_NEAR(reports[i].gamma_deg, want, 1e-7);
    EXPECT_GE(reports[i].gamma_deg, 0.0);
    EXPECT_LE(reports[i].gamma_deg, 180.0);
    EXPECT_EQ(reports[i].gated, reports[i].gamma_deg > 90.0);
  }
}

TEST(FrozenAngles, ShallowExitsAndDeterminism) {
  const Fixture u = small_setup();
  MultiExitModel model = u.model();
  for (Objective o : {Objective::ce_scl, Objective::acl_embed, Objective::acl_cl}) {
    AngleProbe probe;
    probe.objective = o;
    probe.exit_layer = 1;
    const auto a = frozen_angle_reports(model, u.data.eval, u.vocab, probe);
    const auto b = frozen_angle_reports(model, u.data.eval, u.vocab, probe);
    ASSERT_EQ(a.size(), 2u);  // 21 records in batches of 10; the single-sample batch is skipped
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].gamma_deg, b[i].gamma_deg);
      EXPECT_EQ(a[i].param_scope, "exit1");
    }
  }
}

TEST(FrozenAngles, RejectsInvalidProbes) {
  const Fixture u = small_setup();
  MultiExitModel model = u.model();
  AngleProbe p;
  p.objective = Objective::ce;
  EXPECT_THROW(frozen_angle_reports(model, u.data.eval, u.vocab, p), ValidationError);
  p.objective = Objective::acl_cl;
  EXPECT_THROW(frozen_angle_reports(model, u.data.eval, u.vocab, p), ValidationError);
  p.exit_layer = 4;
  EXPECT_THROW(frozen_angle_reports(model, u.data.eval, u.vocab, p), ValidationError);
}

// ------------------------------------------------------------- determinism
TEST(Determinism, SameConfigSameBytes) {
  const Fixture u = small_setup();
  RegimeConfig c = ablation_preset("acl", u.cfg);
  auto run = [&] {
    MultiExitModel m = u.model();
    TrainLog log;
    train(m, u.data, u.vocab, c, log);
    std::ostringstream metrics, angles;
    log.write_metrics(metrics);
    log.write_angles(angles);
    return std::tuple{serialize_checkpoint(m), metrics.str(), angles.str()};
  };
  EXPECT_EQ(run(), run());
}

TEST(Experiment, SameSeedSameTable) {
  const Fixture u = small_setup(2);
  RegimeConfig c = u.cfg;
  c.epochs = 1;
  c.stage2_epochs = 1;
  const ScoreTable a = run_experiment(u.model_cfg, c, u.data, {4});
  const ScoreTable b = run_experiment(u.model_cfg, c, u.data, {4});
  ASSERT_EQ(a.rows.size(), 2u);
  for (std::size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].score, b.rows[i].score);
  EXPECT_EQ(a.mean, b.mean);
  std::ostringstream os;
  a.write_csv(os);
  EXPECT_EQ(os.str().substr(0, 23), "seed,exit_layer,score\n4");
}

TEST(Experiment, CrossLayerAverageOfConstantScores) {
  const ScoreTable t = make_score_table({{1, 1, 0.7}, {1, 2, 0.7}, {1, 3, 0.7}, {2, 1, 0.7}, {2, 2, 0.7}, {2, 3, 0.7}});
  ASSERT_EQ(t.cross_layer_average.size(), 2u);
  EXPECT_DOUBLE_EQ(t.cross_layer_average[0], 0.7);
  EXPECT_DOUBLE_EQ(t.mean, 0.7);
  EXPECT_NEAR(t.stddev, 0.0, 1e-15);
  const ScoreTable v = make_score_table({{1, 1, 0.5}, {1, 2, 0.7}, {2, 1, 0.9}, {2, 2, 0.9}});
  EXPECT_DOUBLE_EQ(v.cross_layer_average[0], 0.6);
  EXPECT_DOUBLE_EQ(v.mean, 0.75);
  EXPECT_NEAR(v.stddev, std::sqrt(0.045), 1e-15);
}

TEST(Joint, LearnsSeparableTaskAtEveryExit) {
  SynthSpec s;
  s.n_train = 300;
  s.n_eval = 150;
  s.seed = 2;
  const Dataset d = generate_synthetic(s);
  const Vocab v = Vocab::build(d.train);
  ModelConfig mc;
  mc.d_model = 32;
  mc.n_heads = 2;
  mc.n_layers = 2;
  mc.d_ff = 64;
  mc.d_exit = 16;
  mc.max_seq_len = 17;
  RegimeConfig c;
  c.regime = Regime::joint;
  c.epochs = 6;
  MultiExitModel m = make_model(mc, v, 1);
  TrainLog log;
  train_jt(m, d, v, c, log);
  for (const ScoreRow& r : score_model(m, d, v, 1)) EXPECT_GE(r.score, 0.95) << "exit " << r.exit_layer;
}

}  // namespace
}  // namespace mxacl

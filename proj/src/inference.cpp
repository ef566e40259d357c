#include "mxacl/inference.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <Eigen/Dense>

namespace mxacl {
namespace {

Prediction make_prediction(const Tensor& logits, std::size_t row, std::size_t layer) {
  const std::size_t k = logits.cols();
  Prediction p;
  p.exit_layer = layer;
  p.logits.assign(logits.data().begin() + row * k, logits.data().begin() + (row + 1) * k);
  const double mx = *std::max_element(p.logits.begin(), p.logits.end());
  double z = 0.0;
  p.probs.resize(k);
  for (std::size_t c = 0; c < k; ++c) z += (p.probs[c] = std::exp(p.logits[c] - mx));
  for (double& v : p.probs) v /= z;
  p.predicted = static_cast<int>(std::max_element(p.logits.begin(), p.logits.end()) - p.logits.begin());
  return p;
}

TokenBatch subset(const TokenBatch& b, const std::vector<std::size_t>& rows) {
  TokenBatch s{rows.size(), b.len, {}, {}};
  for (std::size_t r : rows) {
    s.ids.insert(s.ids.end(), b.ids.begin() + r * b.len, b.ids.begin() + (r + 1) * b.len);
    s.mask.insert(s.mask.end(), b.mask.begin() + r * b.len, b.mask.begin() + (r + 1) * b.len);
  }
  return s;
}

Tensor subset_rows(const Tensor& x, const std::vector<std::size_t>& samples, std::size_t len) {
  const std::size_t d = x.cols();
  Tensor out({samples.size() * len, d});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy_n(x.data().begin() + samples[i] * len * d, len * d, out.data().begin() + i * len * d);
  }
  return out;
}

/// Layer-by-layer evaluation where `decide(i, layer, prediction, entropy)` says whether
/// active sample i (original index) exits now.
template <typename Decide>
std::vector<ExitDecision> early_exit(const MultiExitModel& model, const TokenBatch& batch, Decide decide) {
  const std::size_t M = model.n_layers();
  std::vector<ExitDecision> out(batch.n);
  std::vector<std::size_t> active(batch.n);
  for (std::size_t i = 0; i < batch.n; ++i) active[i] = i;
  Rng unused(0);
  Tensor x;
  {
    Tape tape(false);
    x = model.embed(tape, batch, false, unused).value();
  }
  TokenBatch cur = batch;
  for (std::size_t l = 1; l <= M && !active.empty(); ++l) {
    Tape tape(false);
    Var h = model.layer_forward(tape, l, tape.constant(std::move(x)), cur, false, unused);
    const Tensor logits = model.exit_forward(tape, l, model.layer_output(tape, l, h), cur).logits.value();
    std::vector<std::size_t> keep_local, still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      const Prediction p = make_prediction(logits, a, l);
      const double e = entropy(p.probs);
      out[i].entropies.push_back(e);
      if (l == M || decide(i, l, p, e)) {
        out[i].exit_layer = l;
        out[i].predicted = p.predicted;
        out[i].entropy_at_exit = e;
      } else {
        keep_local.push_back(a);
        still.push_back(i);
      }
    }
    if (still.empty()) break;
    x = subset_rows(h.value(), keep_local, cur.len);
    cur = subset(cur, keep_local);
    active = std::move(still);
  }
  return out;
}

template <typename F>
void for_each_batch(const std::vector<LabeledText>& records, const Vocab& vocab, std::size_t batch_size,
                    std::size_t max_len, F f) {
  for (const Batch& b : make_batches(records, vocab, batch_size, max_len, 0, 0, false)) f(b);
}

}  // namespace

std::vector<Prediction> predict_fixed(const MultiExitModel& model, const TokenBatch& batch, std::size_t m) {
  if (m < 1 || m > model.n_layers()) {
    throw ValidationError("predict_fixed: layer " + std::to_string(m) + " out of range 1.." +
                          std::to_string(model.n_layers()));
  }
  Tape tape(false);
  Rng unused(0);
  const auto hs = model.encode(tape, batch, false, unused, m);
  const Tensor& logits = model.exit_forward(tape, m, hs.back(), batch).logits.value();
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < batch.n; ++i) out.push_back(make_prediction(logits, i, m));
  return out;
}

double entropy(const std::vector<double>& probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

void ExitPolicy::validate(std::size_t n_layers) const {
  switch (kind) {
    case PolicyKind::fixed:
      if (layer > n_layers) throw ValidationError("policy: fixed layer out of range");
      break;
    case PolicyKind::entropy:
      if (!(threshold > 0.0)) throw ValidationError("policy: entropy threshold must be > 0");
      break;
    case PolicyKind::patience:
      if (patience < 1 || patience > n_layers) throw ValidationError("policy: patience must be in 1..M");
      break;
  }
}

ExitPolicy parse_policy(const std::string& text) {
  const std::size_t colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  const auto bad = [&] { return ValidationError("policy: cannot parse \"" + text + "\""); };
  ExitPolicy p;
  std::size_t used = 0;
  try {
    if (kind == "fixed") {
      p.kind = PolicyKind::fixed;
      if (colon == std::string::npos) return p;
      if (arg.empty() || arg[0] == '-') throw bad();
      p.layer = std::stoull(arg, &used);
    } else if (kind == "entropy") {
      p.kind = PolicyKind::entropy;
      p.threshold = std::stod(arg, &used);
    } else if (kind == "patience") {
      p.kind = PolicyKind::patience;
      if (arg.empty() || arg[0] == '-') throw bad();
      p.patience = std::stoull(arg, &used);
    } else {
      throw bad();
    }
  } catch (const std::logic_error&) {
    throw bad();
  }
  if (used != arg.size()) throw bad();
  return p;
}

std::string ExitPolicy::describe() const {
  switch (kind) {
    case PolicyKind::fixed:
      return "fixed:" + std::to_string(layer);
    case PolicyKind::entropy: {
      std::ostringstream os;
      os << "entropy:" << threshold;
      return os.str();
    }
    case PolicyKind::patience:
      return "patience:" + std::to_string(patience);
  }
  return "";
}

std::vector<ExitDecision> predict_entropy(const MultiExitModel& model, const TokenBatch& batch, double threshold) {
  if (!(threshold > 0.0)) throw ValidationError("predict_entropy: threshold must be > 0");
  return early_exit(model, batch, [&](std::size_t, std::size_t, const Prediction&, double e) { return e < threshold; });
}

std::vector<ExitDecision> predict_patience(const MultiExitModel& model, const TokenBatch& batch, std::size_t t) {
  if (t < 1 || t > model.n_layers()) throw ValidationError("predict_patience: t must be in 1..M");
  std::vector<int> last(batch.n, -1);
  std::vector<std::size_t> run(batch.n, 0);
  return early_exit(model, batch, [&](std::size_t i, std::size_t, const Prediction& p, double) {
    run[i] = p.predicted == last[i] ? run[i] + 1 : 1;
    last[i] = p.predicted;
    return run[i] >= t;
  });
}

nlohmann::json ExitTrace::summary() const {
  return {{"n_samples", entries.size()},
          {"accuracy", accuracy},
          {"avg_exit_layer", avg_exit_layer},
          {"flops_ratio", flops_ratio}};
}

void ExitTrace::write_jsonl(std::ostream& os) const {
  for (const TraceEntry& e : entries) {
    os << nlohmann::json{{"sample_id", e.sample_id},
                         {"exit_layer", e.exit_layer},
                         {"predicted", e.predicted},
                         {"correct", e.correct},
                         {"entropy_at_exit", e.entropy_at_exit}}
              .dump()
       << '\n';
  }
}

ExitTrace run_policy(const MultiExitModel& model, const std::vector<LabeledText>& records, const Vocab& vocab,
                     const ExitPolicy& policy, std::size_t batch_size) {
  const std::size_t M = model.n_layers();
  policy.validate(M);
  ExitTrace trace;
  trace.entries.resize(records.size());
  for_each_batch(records, vocab, batch_size, model.config().max_seq_len, [&](const Batch& b) {
    std::vector<ExitDecision> ds;
    if (policy.kind == PolicyKind::fixed) {
      const std::size_t m = policy.layer == 0 ? M : policy.layer;
      for (const Prediction& p : predict_fixed(model, b.tokens, m)) {
        const double e = entropy(p.probs);
        ds.push_back({m, p.predicted, e, {e}});
      }
    } else if (policy.kind == PolicyKind::entropy) {
      ds = predict_entropy(model, b.tokens, policy.threshold);
    } else {
      ds = predict_patience(model, b.tokens, policy.patience);
    }
    for (std::size_t i = 0; i < b.tokens.n; ++i) {
      TraceEntry& e = trace.entries[b.indices[i]];
      e.sample_id = b.indices[i];
      e.exit_layer = ds[i].exit_layer;
      e.predicted = ds[i].predicted;
      e.label = b.labels[i];
      e.correct = e.predicted == e.label;
      e.entropy_at_exit = ds[i].entropy_at_exit;
      e.entropies = std::move(ds[i].entropies);
    }
  });
  const double full = count_flops(model.config(), M).total();
  std::vector<double> per_layer(M + 1);
  for (std::size_t m = 1; m <= M; ++m) per_layer[m] = count_flops(model.config(), m).total() / full;
  double correct = 0.0, layers = 0.0, flops = 0.0;
  for (const TraceEntry& e : trace.entries) {
    correct += e.correct ? 1.0 : 0.0;
    layers += static_cast<double>(e.exit_layer);
    flops += per_layer[e.exit_layer];
  }
  const double n = static_cast<double>(trace.entries.size());
  trace.accuracy = correct / n;
  trace.avg_exit_layer = layers / n;
  trace.flops_ratio = flops / n;
  return trace;
}

std::vector<CurvePoint> layer_score_curve(const MultiExitModel& model, const std::vector<LabeledText>& records,
                                          const Vocab& vocab, std::size_t batch_size) {
  const std::size_t M = model.n_layers();
  std::vector<std::size_t> correct(M + 1, 0);
  for_each_batch(records, vocab, batch_size, model.config().max_seq_len, [&](const Batch& b) {
    // One encoder pass serves every exit.
    Tape tape(false);
    Rng unused(0);
    const auto hs = model.encode(tape, b.tokens, false, unused);
    for (std::size_t m = 1; m <= M; ++m) {
      const Tensor& logits = model.exit_forward(tape, m, hs[m - 1], b.tokens).logits.value();
      for (std::size_t i = 0; i < b.tokens.n; ++i)
        correct[m] += make_prediction(logits, i, m).predicted == b.labels[i] ? 1 : 0;
    }
  });
  std::vector<CurvePoint> curve;
  for (std::size_t m = 1; m <= M; ++m) {
    curve.push_back({m, static_cast<double>(correct[m]) / static_cast<double>(records.size()), records.size()});
  }
  return curve;
}

void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& curve) {
  os << "exit_layer,score,n_samples\n" << std::setprecision(17);
  for (const CurvePoint& p : curve) os << p.exit_layer << ',' << p.score << ',' << p.n_samples << '\n';
}

void write_curve_dat(std::ostream& os, const std::vector<CurvePoint>& curve) {
  os << "# exit_layer score\n" << std::setprecision(17);
  for (const CurvePoint& p : curve) os << p.exit_layer << ' ' << p.score << '\n';
}

std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  const std::size_t n = rows.size(), d = rows[0].size();
  Eigen::MatrixXd X(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) X(i, j) = rows[i][j];
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd cov = X.transpose() * X / static_cast<double>(std::max<std::size_t>(1, n - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  // Eigenvalues ascend; take the last two columns and fix each axis's sign.
  Eigen::MatrixXd axes(d, 2);
  for (int c = 0; c < 2; ++c) {
    const int col = static_cast<int>(d) - 1 - c;
    Eigen::VectorXd v = col >= 0 ? Eigen::VectorXd(es.eigenvectors().col(col)) : Eigen::VectorXd::Zero(d);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(c) = v;
  }
  const Eigen::MatrixXd proj = X * axes;
  std::vector<std::array<double, 2>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {proj(i, 0), proj(i, 1)};
  return out;
}

RepresentationExport export_representations(const MultiExitModel& model, const std::vector<LabeledText>& records,
                                            const Vocab& vocab, std::size_t m, std::size_t batch_size) {
  if (m < 1 || m > model.n_layers()) throw ValidationError("export_representations: layer out of range");
  RepresentationExport ex;
  ex.exit_layer = m;
  ex.reps.resize(records.size());
  ex.labels.resize(records.size());
  for_each_batch(records, vocab, batch_size, model.config().max_seq_len, [&](const Batch& b) {
    Tape tape(false);
    Rng unused(0);
    const auto hs = model.encode(tape, b.tokens, false, unused, m);
    const Tensor& rep = model.exit_forward(tape, m, hs.back(), b.tokens).rep.value();
    const std::size_t d = rep.cols();
    for (std::size_t i = 0; i < b.tokens.n; ++i) {
      ex.reps[b.indices[i]].assign(rep.data().begin() + i * d, rep.data().begin() + (i + 1) * d);
      ex.labels[b.indices[i]] = b.labels[i];
    }
  });
  ex.label_embeddings = model.label_embeddings(m);
  std::vector<std::vector<double>> all = ex.reps;
  all.insert(all.end(), ex.label_embeddings.begin(), ex.label_embeddings.end());
  for (auto& r : all) {
    double s = 0.0;
    for (double v : r) s += v * v;
    const double norm = std::sqrt(s);
    if (norm > 0.0)
      for (double& v : r) v /= norm;
  }
  ex.pca = pca_2d(all);
  return ex;
}

void RepresentationExport::write_csv(std::ostream& os) const {
  os << "kind,index,label,pc1,pc2";
  const std::size_t d = reps.empty() ? 0 : reps[0].size();
  for (std::size_t j = 0; j < d; ++j) os << ",h" << j;
  os << '\n' << std::setprecision(17);
  auto row = [&](const char* kind, std::size_t idx, int label, const std::vector<double>& v, std::size_t pi) {
    os << kind << ',' << idx << ',' << label << ',' << pca[pi][0] << ',' << pca[pi][1];
    for (double x : v) os << ',' << x;
    os << '\n';
  };
  for (std::size_t i = 0; i < reps.size(); ++i) row("sample", i, labels[i], reps[i], i);
  for (std::size_t k = 0; k < label_embeddings.size(); ++k)
    row("label", k, static_cast<int>(k), label_embeddings[k], reps.size() + k);
}

}  // namespace mxacl

#include "mxacl/model.hpp"

#include <cmath>
#include <set>

namespace mxacl {
namespace {

Parameter weight(const std::string& name, Shape shape, Rng& rng, double std = 0.02) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.truncated_normal(std);
  return Parameter{name, std::move(t), true};
}

/// Exit matrices: truncated normal with std 1/sqrt(fan_in).
Parameter exit_weight(const std::string& name, Shape shape, Rng& rng) {
  const double std = 1.0 / std::sqrt(static_cast<double>(shape.at(0)));
  return weight(name, std::move(shape), rng, std);
}

Parameter zeros(const std::string& name, Shape shape) { return Parameter{name, Tensor(std::move(shape), 0.0), false}; }
Parameter ones(const std::string& name, Shape shape) { return Parameter{name, Tensor(std::move(shape), 1.0), false}; }

Var linear(Tape& tape, Var x, const Parameter& w, const Parameter& b) {
  return ops::add_row(ops::matmul(x, tape.param(w)), tape.param(b));
}

std::vector<std::size_t> cls_rows(const TokenBatch& batch) {
  std::vector<std::size_t> idx(batch.n);
  for (std::size_t i = 0; i < batch.n; ++i) idx[i] = i * batch.len;
  return idx;
}

void push_layer(std::vector<Parameter*>& out, EncoderLayer& l) {
  for (Parameter* p : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                       &l.ln2_gain, &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2}) {
    out.push_back(p);
  }
}

void push_exit(std::vector<Parameter*>& out, ExitHead& e) {
  if (e.kind == ExitKind::mha) {
    for (Parameter* p : {&e.down_w, &e.down_b, &e.wq, &e.bq, &e.wk, &e.bk, &e.wv, &e.bv, &e.wo, &e.bo}) {
      out.push_back(p);
    }
  }
  out.push_back(&e.classifier_w);
  out.push_back(&e.classifier_b);
}

}  // namespace

std::string to_string(ExitKind k) { return k == ExitKind::mha ? "mha" : "linear"; }

ExitKind exit_kind_from_string(const std::string& s) {
  if (s == "mha") return ExitKind::mha;
  if (s == "linear") return ExitKind::linear;
  throw ValidationError("exit_kind must be \"mha\" or \"linear\", got \"" + s + "\"");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (vocab_size < 4) fail("vocab_size must be >= 4 (reserved ids)");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_ff == 0) fail("d_ff must be positive");
  if (exit_kind == ExitKind::mha && (d_exit == 0 || exit_heads == 0 || d_exit % exit_heads != 0)) {
    fail("d_exit must be divisible by exit_heads");
  }
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (max_seq_len < 1) fail("max_seq_len must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"d_exit", c.d_exit},
                     {"exit_heads", c.exit_heads}, {"n_classes", c.n_classes},     {"max_seq_len", c.max_seq_len},
                     {"dropout", c.dropout},       {"exit_kind", to_string(c.exit_kind)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  static const std::set<std::string> known{"vocab_size", "d_model",   "n_layers",    "n_heads",
                                           "d_ff",       "d_exit",    "exit_heads",  "n_classes",
                                           "max_seq_len", "dropout",  "exit_kind"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ValidationError("model config: unknown key \"" + k + "\"");
  }
  try {
    auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) j.at(key).get_to(dst);
    };
    get("vocab_size", c.vocab_size);
    get("d_model", c.d_model);
    get("n_layers", c.n_layers);
    get("n_heads", c.n_heads);
    get("d_ff", c.d_ff);
    get("d_exit", c.d_exit);
    get("exit_heads", c.exit_heads);
    get("n_classes", c.n_classes);
    get("max_seq_len", c.max_seq_len);
    get("dropout", c.dropout);
    if (j.contains("exit_kind")) c.exit_kind = exit_kind_from_string(j.at("exit_kind").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
}

std::size_t ParamScope::numel() const {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

MultiExitModel::MultiExitModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(seed, 0x1417));
  const std::size_t d = config_.d_model, ff = config_.d_ff;
  token_embedding_ = weight("embed.token", {config_.vocab_size, d}, rng);
  position_embedding_ = weight("embed.position", {config_.max_seq_len, d}, rng);
  embedding_ln_gain_ = ones("embed.ln.gain", {d});
  embedding_ln_bias_ = zeros("embed.ln.bias", {d});
  for (std::size_t l = 1; l <= config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    EncoderLayer L;
    L.ln1_gain = ones(p + "ln1.gain", {d});
    L.ln1_bias = zeros(p + "ln1.bias", {d});
    L.wq = weight(p + "attn.q.weight", {d, d}, rng);
    L.bq = zeros(p + "attn.q.bias", {d});
    L.wk = weight(p + "attn.k.weight", {d, d}, rng);
    L.bk = zeros(p + "attn.k.bias", {d});
    L.wv = weight(p + "attn.v.weight", {d, d}, rng);
    L.bv = zeros(p + "attn.v.bias", {d});
    L.wo = weight(p + "attn.out.weight", {d, d}, rng);
    L.bo = zeros(p + "attn.out.bias", {d});
    L.ln2_gain = ones(p + "ln2.gain", {d});
    L.ln2_bias = zeros(p + "ln2.bias", {d});
    L.w1 = weight(p + "ffn.in.weight", {d, ff}, rng);
    L.b1 = zeros(p + "ffn.in.bias", {ff});
    L.w2 = weight(p + "ffn.out.weight", {ff, d}, rng);
    L.b2 = zeros(p + "ffn.out.bias", {d});
    L.out_gain = ones(p + "out_ln.gain", {d});
    L.out_bias = zeros(p + "out_ln.bias", {d});
    layers_.push_back(std::move(L));
  }
  const std::size_t de = config_.d_exit, k = config_.n_classes, rep = config_.rep_dim();
  for (std::size_t m = 1; m <= config_.n_layers; ++m) {
    const std::string p = "exit" + std::to_string(m) + ".";
    ExitHead e;
    e.layer = m;
    e.kind = config_.exit_kind;
    if (e.kind == ExitKind::mha) {
      e.down_w = exit_weight(p + "down.weight", {d, de}, rng);
      e.down_b = zeros(p + "down.bias", {de});
      e.wq = exit_weight(p + "attn.q.weight", {de, de}, rng);
      e.bq = zeros(p + "attn.q.bias", {de});
      e.wk = exit_weight(p + "attn.k.weight", {de, de}, rng);
      e.bk = zeros(p + "attn.k.bias", {de});
      e.wv = exit_weight(p + "attn.v.weight", {de, de}, rng);
      e.bv = zeros(p + "attn.v.bias", {de});
      e.wo = exit_weight(p + "attn.out.weight", {de, de}, rng);
      e.bo = zeros(p + "attn.out.bias", {de});
    }
    e.classifier_w = exit_weight(p + "classifier.weight", {rep, k}, rng);
    e.classifier_b = zeros(p + "classifier.bias", {k});
    exits_.push_back(std::move(e));
  }
}

Var MultiExitModel::embed(Tape& tape, const TokenBatch& batch, bool train, Rng& rng) const {
  if (batch.len == 0 || batch.n == 0) throw ValidationError("encode: empty batch");
  if (batch.len > config_.max_seq_len) {
    throw ValidationError("encode: sequence length " + std::to_string(batch.len) + " exceeds max_seq_len " +
                          std::to_string(config_.max_seq_len));
  }
  if (batch.ids.size() != batch.n * batch.len || batch.mask.size() != batch.ids.size()) {
    throw ShapeError("encode: token batch buffers do not match n*len");
  }
  std::vector<std::int32_t> positions(batch.n * batch.len);
  for (std::size_t i = 0; i < batch.n; ++i)
    for (std::size_t t = 0; t < batch.len; ++t) positions[i * batch.len + t] = static_cast<std::int32_t>(t);
  Var tok = ops::embedding(tape.param(token_embedding_), batch.ids);
  Var pos = ops::embedding(tape.param(position_embedding_), positions);
  Var x = ops::layer_norm(ops::add(tok, pos), tape.param(embedding_ln_gain_), tape.param(embedding_ln_bias_));
  return ops::dropout(x, config_.dropout, rng, train);
}

Var MultiExitModel::layer_forward(Tape& tape, std::size_t layer, Var x, const TokenBatch& batch, bool train,
                                  Rng& rng) const {
  if (layer < 1 || layer > layers_.size()) throw ValidationError("layer index out of range");
  const EncoderLayer& L = layers_[layer - 1];
  Var h = ops::layer_norm(x, tape.param(L.ln1_gain), tape.param(L.ln1_bias));
  Var q = linear(tape, h, L.wq, L.bq);
  Var k = linear(tape, h, L.wk, L.bk);
  Var v = linear(tape, h, L.wv, L.bv);
  Var a = ops::attention(q, k, v, batch.mask, batch.n, batch.len, batch.len, config_.n_heads);
  x = ops::add(x, ops::dropout(linear(tape, a, L.wo, L.bo), config_.dropout, rng, train));
  Var h2 = ops::layer_norm(x, tape.param(L.ln2_gain), tape.param(L.ln2_bias));
  Var f = linear(tape, ops::gelu(linear(tape, h2, L.w1, L.b1)), L.w2, L.b2);
  return ops::add(x, ops::dropout(f, config_.dropout, rng, train));
}

Var MultiExitModel::layer_output(Tape& tape, std::size_t layer, Var residual) const {
  if (layer < 1 || layer > layers_.size()) throw ValidationError("layer index out of range");
  const EncoderLayer& L = layers_[layer - 1];
  return ops::layer_norm(residual, tape.param(L.out_gain), tape.param(L.out_bias));
}

std::vector<Var> MultiExitModel::encode_residuals(Tape& tape, const TokenBatch& batch, bool train, Rng& rng,
                                                  std::size_t up_to) const {
  if (up_to == 0) up_to = config_.n_layers;
  if (up_to > config_.n_layers) throw ValidationError("encode: up_to exceeds n_layers");
  std::vector<Var> out;
  Var x = embed(tape, batch, train, rng);
  for (std::size_t l = 1; l <= up_to; ++l) {
    x = layer_forward(tape, l, x, batch, train, rng);
    out.push_back(x);
  }
  return out;
}

std::vector<Var> MultiExitModel::encode(Tape& tape, const TokenBatch& batch, bool train, Rng& rng,
                                        std::size_t up_to) const {
  std::vector<Var> out = encode_residuals(tape, batch, train, rng, up_to);
  for (std::size_t l = 1; l <= out.size(); ++l) {
    out[l - 1] = ops::reshape(layer_output(tape, l, out[l - 1]), {batch.n, batch.len, config_.d_model});
  }
  return out;
}

ExitOutput MultiExitModel::exit_forward(Tape& tape, std::size_t m, Var hidden, const TokenBatch& batch) const {
  check_exit_index(m);
  const ExitHead& e = exits_[m - 1];
  const Shape& hs = hidden.shape();
  const bool ok3 = hs.size() == 3 && hs[0] == batch.n && hs[1] == batch.len && hs[2] == config_.d_model;
  const bool ok2 = hs.size() == 2 && hs[0] == batch.n * batch.len && hs[1] == config_.d_model;
  if (!ok3 && !ok2) throw ShapeError("exit_forward: hidden state shape " + shape_str(hs) + " does not match batch");
  Var x = ok3 ? ops::reshape(hidden, {batch.n * batch.len, config_.d_model}) : hidden;
  const std::vector<std::size_t> cls = cls_rows(batch);
  Var rep;
  if (e.kind == ExitKind::linear) {
    rep = ops::select_rows(x, cls);
  } else {
    Var down = ops::tanh(linear(tape, x, e.down_w, e.down_b));
    Var q = linear(tape, ops::select_rows(down, cls), e.wq, e.bq);
    Var k = linear(tape, down, e.wk, e.bk);
    Var v = linear(tape, down, e.wv, e.bv);
    Var a = ops::attention(q, k, v, batch.mask, batch.n, 1, batch.len, config_.exit_heads);
    rep = ops::tanh(linear(tape, a, e.wo, e.bo));
  }
  Var logits = linear(tape, rep, e.classifier_w, e.classifier_b);
  return {rep, logits};
}

Var MultiExitModel::label_embedding_var(Tape& tape, std::size_t m) const {
  check_exit_index(m);
  return ops::transpose(tape.param(exits_[m - 1].classifier_w));
}

std::vector<std::vector<double>> MultiExitModel::label_embeddings(std::size_t m) const {
  check_exit_index(m);
  const Tensor& w = exits_[m - 1].classifier_w.value;
  const std::size_t rep = w.dim(0), k = w.dim(1);
  std::vector<std::vector<double>> out(k, std::vector<double>(rep));
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t r = 0; r < rep; ++r) out[c][r] = w.at(r, c);
  return out;
}

const ExitHead& MultiExitModel::exit(std::size_t m) const {
  check_exit_index(m);
  return exits_[m - 1];
}

ExitHead& MultiExitModel::exit(std::size_t m) {
  check_exit_index(m);
  return exits_[m - 1];
}

void MultiExitModel::check_exit_index(std::size_t m) const {
  if (m < 1 || m > exits_.size()) {
    throw ValidationError("exit index " + std::to_string(m) + " out of range 1.." + std::to_string(exits_.size()));
  }
}

ParamScope MultiExitModel::scope_backbone() {
  ParamScope s{"backbone", {&token_embedding_, &position_embedding_, &embedding_ln_gain_, &embedding_ln_bias_}};
  for (EncoderLayer& l : layers_) push_layer(s.params, l);
  return s;
}

ParamScope MultiExitModel::scope_exit(std::size_t m) {
  check_exit_index(m);
  ParamScope s{"exit" + std::to_string(m), {&layers_[m - 1].out_gain, &layers_[m - 1].out_bias}};
  push_exit(s.params, exits_[m - 1]);
  return s;
}

ParamScope MultiExitModel::scope_stage1() {
  ParamScope s = scope_backbone();
  s.id = "backbone+exit" + std::to_string(config_.n_layers);
  for (Parameter* p : scope_exit(config_.n_layers).params) s.params.push_back(p);
  return s;
}

ParamScope MultiExitModel::scope_all() {
  ParamScope s = scope_backbone();
  s.id = "all";
  for (std::size_t m = 1; m <= exits_.size(); ++m)
    for (Parameter* p : scope_exit(m).params) s.params.push_back(p);
  return s;
}

std::vector<const Parameter*> MultiExitModel::parameters() const {
  auto s = const_cast<MultiExitModel*>(this)->scope_all();
  return {s.params.begin(), s.params.end()};
}

Parameter* MultiExitModel::find(const std::string& name) {
  for (Parameter* p : scope_all().params)
    if (p->name == name) return p;
  return nullptr;
}

FlopCount count_flops(const ModelConfig& c, std::size_t m, std::size_t seq_len) {
  if (m < 1 || m > c.n_layers) {
    throw ValidationError("count_flops: layer " + std::to_string(m) + " out of range 1.." + std::to_string(c.n_layers));
  }
  const double L = static_cast<double>(seq_len == 0 ? c.max_seq_len : seq_len);
  const double d = static_cast<double>(c.d_model), ff = static_cast<double>(c.d_ff);
  const double layers = static_cast<double>(m);
  FlopCount f;
  f.embedding = L * d;  // position add
  f.attention_projections = layers * 4.0 * L * d * d;
  f.attention_scores = layers * 2.0 * L * L * d;
  f.feed_forward = layers * 2.0 * L * d * ff;
  const double k = static_cast<double>(c.n_classes);
  if (c.exit_kind == ExitKind::linear) {
    f.exit = d * k;
  } else {
    const double de = static_cast<double>(c.d_exit);
    // down-projection and K/V over all tokens; Q, output projection and the
    // attention read for the [CLS] slot only; classifier.
    f.exit = L * d * de + 2.0 * L * de * de + 2.0 * de * de + 2.0 * L * de + de * k;
  }
  return f;
}

ParamCount count_parameters(const ModelConfig& c) {
  const std::size_t d = c.d_model, ff = c.d_ff;
  ParamCount p;
  p.backbone = c.vocab_size * d + c.max_seq_len * d + 2 * d;
  p.backbone += c.n_layers * (4 * d + 4 * (d * d + d) + d * ff + ff + ff * d + d);
  const std::size_t rep = c.rep_dim(), de = c.d_exit;
  std::size_t per_exit = 2 * d + rep * c.n_classes + c.n_classes;
  if (c.exit_kind == ExitKind::mha) per_exit += d * de + de + 4 * (de * de + de);
  p.exits = c.n_layers * per_exit;
  return p;
}

}  // namespace mxacl

#pragma once

// The SetFlow velocity network v(x, t, y, s):
//
//   c   = Linear(concat(time_emb(t), label_table[y], stream_table[s]))
//   h   = SiLU(LN(FiLM_1(Linear_in(x), c)))
//   out = Linear_out(SiLU(LN(FiLM_2(TokenMLP(h) + ISAB(h), c))))
//
// Tokens of all bags in a batch are padded to a common length; padded rows
// never influence real rows and are zeroed in the output.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "setflow/autodiff.hpp"
#include "setflow/data.hpp"
#include "setflow/rng.hpp"

namespace setflow {

struct SetFlowConfig {
  std::size_t d_in = 128;
  std::size_t d_hidden = 512;
  std::size_t d_isab = 32;
  std::size_t num_inducing = 4;
  std::size_t num_heads = 4;
  std::size_t d_cond_part = 16;
  std::size_t d_cond = 48;
  std::size_t mlp_depth = 3;
  std::size_t num_classes = 2;
  double ln_eps = 1e-5;

  void validate() const {
    if (!d_in || !d_hidden || !d_isab || !num_inducing || !num_heads ||
        !d_cond_part || !d_cond || !mlp_depth || !num_classes) {
      throw Error("SetFlowConfig: all dimensions must be positive");
    }
    if (d_isab % num_heads != 0) {
      throw Error("SetFlowConfig: d_isab " + std::to_string(d_isab) +
                  " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (d_cond_part % 2 != 0) {
      throw Error("SetFlowConfig: d_cond_part must be even for the sinusoidal time encoding");
    }
  }
};

inline void to_json(json& j, const SetFlowConfig& c) {
  j = {{"d_in", c.d_in},           {"d_hidden", c.d_hidden},
       {"d_isab", c.d_isab},       {"num_inducing", c.num_inducing},
       {"num_heads", c.num_heads}, {"d_cond_part", c.d_cond_part},
       {"d_cond", c.d_cond},       {"mlp_depth", c.mlp_depth},
       {"num_classes", c.num_classes}, {"ln_eps", c.ln_eps}};
}

inline void from_json(const json& j, SetFlowConfig& c) {
  SetFlowConfig d;
  c.d_in = j.value("d_in", d.d_in);
  c.d_hidden = j.value("d_hidden", d.d_hidden);
  c.d_isab = j.value("d_isab", d.d_isab);
  c.num_inducing = j.value("num_inducing", d.num_inducing);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.d_cond_part = j.value("d_cond_part", d.d_cond_part);
  c.d_cond = j.value("d_cond", d.d_cond);
  c.mlp_depth = j.value("mlp_depth", d.mlp_depth);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

struct SetFlowModel {
  SetFlowConfig config;
  ParamStore params;
};

namespace detail {

inline void add_linear(ParamStore& ps, const std::string& name, std::size_t fan_in,
                       std::size_t fan_out, Rng& rng, bool zero = false) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w({fan_in, fan_out});
  Tensor b({fan_out});
  if (!zero) {
    for (double& v : w.values()) v = dist(rng);
    for (double& v : b.values()) v = dist(rng);
  }
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", std::move(b));
}

inline void add_norm(ParamStore& ps, const std::string& name, std::size_t d) {
  ps.add(name + ".gamma", Tensor({d}, 1.0));
  ps.add(name + ".beta", Tensor({d}, 0.0));
}

inline void add_mab(ParamStore& ps, const std::string& name, std::size_t d, Rng& rng) {
  for (const char* p : {"q", "k", "v", "o"}) add_linear(ps, name + "." + p, d, d, rng);
  add_norm(ps, name + ".norm0", d);
  add_linear(ps, name + ".ff1", d, d, rng);
  add_linear(ps, name + ".ff2", d, d, rng);
  add_norm(ps, name + ".norm1", d);
}

}  // namespace detail

// Freshly initialized network. FiLM generators start at zero so both
// modulations begin as the identity.
inline SetFlowModel make_setflow_model(const SetFlowConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  SetFlowModel m{cfg, {}};
  ParamStore& ps = m.params;
  std::normal_distribution<double> emb(0.0, 0.02);
  Tensor label_table({cfg.num_classes, cfg.d_cond_part});
  for (double& v : label_table.values()) v = emb(rng);
  Tensor stream_table({kNumStreams, cfg.d_cond_part});
  for (double& v : stream_table.values()) v = emb(rng);
  ps.add("cond.label_table", std::move(label_table));
  ps.add("cond.stream_table", std::move(stream_table));
  detail::add_linear(ps, "cond.proj", 3 * cfg.d_cond_part, cfg.d_cond, rng);
  detail::add_linear(ps, "in", cfg.d_in, cfg.d_hidden, rng);
  detail::add_linear(ps, "film1", cfg.d_cond, 2 * cfg.d_hidden, rng, true);
  detail::add_norm(ps, "norm1", cfg.d_hidden);
  for (std::size_t i = 0; i < cfg.mlp_depth; ++i) {
    detail::add_linear(ps, "mlp." + std::to_string(i), cfg.d_hidden, cfg.d_hidden, rng);
  }
  detail::add_linear(ps, "isab.down", cfg.d_hidden, cfg.d_isab, rng);
  Tensor inducing({cfg.num_inducing, cfg.d_isab});
  for (double& v : inducing.values()) v = standard_normal(rng);
  ps.add("isab.inducing", std::move(inducing));
  detail::add_mab(ps, "isab.mab0", cfg.d_isab, rng);
  detail::add_mab(ps, "isab.mab1", cfg.d_isab, rng);
  detail::add_linear(ps, "isab.up", cfg.d_isab, cfg.d_hidden, rng);
  detail::add_linear(ps, "film2", cfg.d_cond, 2 * cfg.d_hidden, rng, true);
  detail::add_norm(ps, "norm2", cfg.d_hidden);
  detail::add_linear(ps, "out", cfg.d_hidden, cfg.d_in, rng);
  return m;
}

// Padded batch of bags at one flow time per bag.
struct BatchedBags {
  Tensor tokens;                      // [B x T x d_in], zero at padding
  std::vector<std::uint8_t> mask;     // [B*T], 1 = real token
  std::vector<std::size_t> streams;   // [B*T]
  std::vector<std::size_t> labels;    // [B]
  std::vector<double> t;              // [B]

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }

  void validate(std::size_t d_in, std::size_t num_classes) const {
    if (tokens.rank() != 3 || tokens.dim(2) != d_in) {
      throw Error("batch tokens " + shape_str(tokens.shape()) + " do not match d_in " +
                  std::to_string(d_in));
    }
    const std::size_t B = batch(), T = length();
    if (mask.size() != B * T || streams.size() != B * T || labels.size() != B || t.size() != B) {
      throw Error("batch side arrays do not match tokens " + shape_str(tokens.shape()));
    }
    for (std::size_t b = 0; b < B; ++b) {
      if (labels[b] >= num_classes) {
        throw Error("label " + std::to_string(labels[b]) + " out of range for " +
                    std::to_string(num_classes) + " classes");
      }
      bool any = false;
      for (std::size_t i = 0; i < T; ++i) {
        any = any || mask[b * T + i];
        if (streams[b * T + i] >= kNumStreams) {
          throw Error("stream id " + std::to_string(streams[b * T + i]) + " out of range");
        }
      }
      if (!any) throw Error("bag " + std::to_string(b) + " in batch has no tokens");
    }
  }

  std::size_t real_tokens() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

// Pads the given bags into one batch; every bag gets flow time `t[b]`.
inline BatchedBags make_batch(const std::vector<EmbeddingBag>& bags, std::size_t d_in,
                              const std::vector<double>& t) {
  if (bags.empty()) throw Error("make_batch: no bags");
  if (bags.size() != t.size()) throw Error("make_batch: one time per bag required");
  std::size_t T = 1;
  for (const auto& b : bags) T = std::max(T, b.size());
  const std::size_t B = bags.size();
  BatchedBags out;
  out.tokens = Tensor({B, T, d_in});
  out.mask.assign(B * T, 0);
  out.streams.assign(B * T, 0);
  out.labels.resize(B);
  out.t = t;
  for (std::size_t b = 0; b < B; ++b) {
    out.labels[b] = index_of(bags[b].label);
    for (std::size_t i = 0; i < bags[b].size(); ++i) {
      const auto& inst = bags[b].instances[i];
      if (inst.vector.size() != d_in) {
        throw Error("make_batch: instance dim " + std::to_string(inst.vector.size()) +
                    " != " + std::to_string(d_in));
      }
      std::copy(inst.vector.begin(), inst.vector.end(), &out.tokens.at(b, i, 0));
      out.mask[b * T + i] = 1;
      out.streams[b * T + i] = index_of(inst.stream);
    }
  }
  return out;
}

// Sinusoidal encoding of t in [0,1], interleaved (sin, cos) pairs with
// frequencies 10000^(-2k/dim) applied to 1000 t.
inline std::vector<double> time_embedding(double t, std::size_t dim) {
  if (dim % 2 != 0) throw Error("time_embedding: dim must be even");
  std::vector<double> e(dim);
  const double ts = 1000.0 * t;
  for (std::size_t k = 0; k < dim / 2; ++k) {
    const double w = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
    e[2 * k] = std::sin(w * ts);
    e[2 * k + 1] = std::cos(w * ts);
  }
  return e;
}

namespace detail {

// Conditions are shared by all tokens of one (bag, stream) pair, so they are
// computed once per pair: row b * kNumStreams + s.
inline Var condition_table(Tape& tape, const SetFlowModel& model, const BatchedBags& batch) {
  const auto& cfg = model.config;
  const std::size_t B = batch.batch(), p = cfg.d_cond_part, S = kNumStreams;
  Tensor temb({B * S, p});
  std::vector<std::size_t> label_rows(B * S), stream_rows(B * S);
  for (std::size_t b = 0; b < B; ++b) {
    const auto e = time_embedding(batch.t[b], p);
    for (std::size_t s = 0; s < S; ++s) {
      std::copy(e.begin(), e.end(), temb.data() + (b * S + s) * p);
      label_rows[b * S + s] = batch.labels[b];
      stream_rows[b * S + s] = s;
    }
  }
  Var lab = gather_rows(tape.param(model.params, "cond.label_table"), std::move(label_rows));
  Var str = gather_rows(tape.param(model.params, "cond.stream_table"), std::move(stream_rows));
  Var cat = concat_last({tape.constant(std::move(temb)), lab, str});
  return linear(cat, tape.param(model.params, "cond.proj.w"), tape.param(model.params, "cond.proj.b"));
}

// Padded row index (b * T + i) of every real token, in order.
inline std::vector<std::size_t> real_rows(const BatchedBags& batch) {
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < batch.mask.size(); ++r) {
    if (batch.mask[r]) rows.push_back(r);
  }
  return rows;
}

// Condition-table row of every real token.
inline std::vector<std::size_t> condition_rows(const BatchedBags& batch,
                                               const std::vector<std::size_t>& rows) {
  const std::size_t T = batch.length();
  std::vector<std::size_t> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out[i] = (rows[i] / T) * kNumStreams + batch.streams[rows[i]];
  }
  return out;
}

}  // namespace detail

// Per-token conjoint condition c, shape [B*T x d_cond] (padding rows included).
inline Var make_condition(Tape& tape, const SetFlowModel& model, const BatchedBags& batch) {
  const std::size_t B = batch.batch(), T = batch.length();
  std::vector<std::size_t> rows(B * T);
  for (std::size_t r = 0; r < B * T; ++r) rows[r] = (r / T) * kNumStreams + batch.streams[r];
  return gather_rows(detail::condition_table(tape, model, batch), std::move(rows));
}

// Condition vector of a single token.
inline std::vector<double> condition_vector(const SetFlowModel& model, double t,
                                            std::size_t label, std::size_t stream) {
  if (label >= model.config.num_classes || stream >= kNumStreams) {
    throw Error("condition_vector: label or stream out of range");
  }
  BatchedBags one;
  one.tokens = Tensor({1, 1, model.config.d_in});
  one.mask = {1};
  one.streams = {stream};
  one.labels = {label};
  one.t = {t};
  Tape tape;
  const Tensor& c = make_condition(tape, model, one).value();
  return {c.values().begin(), c.values().end()};
}

namespace detail {

inline Var lin(Tape& tape, const ParamStore& ps, const std::string& name, Var x) {
  return linear(x, tape.param(ps, name + ".w"), tape.param(ps, name + ".b"));
}

inline Var norm(Tape& tape, const ParamStore& ps, const std::string& name, Var x, double eps) {
  return layer_norm(x, tape.param(ps, name + ".gamma"), tape.param(ps, name + ".beta"), eps);
}

}  // namespace detail

// Multihead attention block MAB(A, B) = LN(Z + FF(Z)), Z = LN(A + MHA(A, B, B)).
// `a` is [Bt x n x d], `b` is [Bt x m x d]; `mask` flags valid keys per logit
// ([Bt x n x m]).
inline Var attention_block(Tape& tape, const SetFlowModel& model, const std::string& name,
                           Var a, Var b, const std::vector<std::uint8_t>& mask) {
  const auto& ps = model.params;
  const std::size_t d = model.config.d_isab, heads = model.config.num_heads, dh = d / heads;
  Var q = detail::lin(tape, ps, name + ".q", a);
  Var k = detail::lin(tape, ps, name + ".k", b);
  Var v = detail::lin(tape, ps, name + ".v", b);
  std::vector<Var> outs;
  outs.reserve(heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_last(q, h * dh, (h + 1) * dh);
    Var kh = slice_last(k, h * dh, (h + 1) * dh);
    Var vh = slice_last(v, h * dh, (h + 1) * dh);
    Var att = masked_softmax(scale(batched_matmul(qh, kh, true), inv), mask);
    outs.push_back(batched_matmul(att, vh));
  }
  Var mh = detail::lin(tape, ps, name + ".o", heads == 1 ? outs[0] : concat_last(outs));
  Var z = detail::norm(tape, ps, name + ".norm0", add(a, mh), model.config.ln_eps);
  Var ff = detail::lin(tape, ps, name + ".ff2", silu(detail::lin(tape, ps, name + ".ff1", z)));
  return detail::norm(tape, ps, name + ".norm1", add(z, ff), model.config.ln_eps);
}

// Induced set attention over each bag: inducing points attend to the bag's
// real tokens, then every token attends to the inducing summaries.
// `h` holds the real tokens only ([R x d_hidden], in mask order); returns the
// same layout.
inline Var isab_branch(Tape& tape, const SetFlowModel& model, Var h, std::size_t B,
                       std::size_t T, const std::vector<std::uint8_t>& token_mask) {
  const auto& cfg = model.config;
  const std::size_t k = cfg.num_inducing, d = cfg.d_isab;
  if (token_mask.size() != B * T) throw Error("isab_branch: mask size mismatch");
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (std::size_t i = 0; i < T; ++i) {
      if (!token_mask[b * T + i]) continue;
      any = true;
      rows.push_back(b * T + i);
    }
    if (!any) throw Error("isab_branch: bag " + std::to_string(b) + " is fully masked");
  }
  if (h.value().rank() != 2 || h.value().dim(0) != rows.size()) {
    throw Error("isab_branch: expected " + std::to_string(rows.size()) + " token rows, got " +
                shape_str(h.shape()));
  }
  Var down = detail::lin(tape, model.params, "isab.down", h);
  Var x = reshape(scatter_rows(down, rows, B * T), {B, T, d});
  Var ind = broadcast_batch(tape.param(model.params, "isab.inducing"), B);

  std::vector<std::uint8_t> key_mask(B * k * T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < k; ++r)
      std::copy_n(token_mask.begin() + static_cast<std::ptrdiff_t>(b * T), T,
                  key_mask.begin() + static_cast<std::ptrdiff_t>((b * k + r) * T));
  Var summary = attention_block(tape, model, "isab.mab0", ind, x, key_mask);
  Var out = attention_block(tape, model, "isab.mab1", x, summary,
                            std::vector<std::uint8_t>(B * T * k, 1));
  return detail::lin(tape, model.params, "isab.up", gather_rows(reshape(out, {B * T, d}), rows));
}

// Velocity for every token of the batch, [B x T x d_in]; padding rows are 0.
inline Var velocity_forward(Tape& tape, const SetFlowModel& model, const BatchedBags& batch) {
  const auto& cfg = model.config;
  batch.validate(cfg.d_in, cfg.num_classes);
  const auto& ps = model.params;
  const std::size_t B = batch.batch(), T = batch.length();
  const auto rows = detail::real_rows(batch);
  const auto cond_rows = detail::condition_rows(batch, rows);

  Tensor packed({rows.size(), cfg.d_in});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(batch.tokens.data() + rows[i] * cfg.d_in, cfg.d_in, packed.data() + i * cfg.d_in);
  }
  Var c = detail::condition_table(tape, model, batch);
  Var h = detail::lin(tape, ps, "in", tape.constant(std::move(packed)));
  h = film(h, gather_rows(detail::lin(tape, ps, "film1", c), cond_rows));
  h = silu(detail::norm(tape, ps, "norm1", h, cfg.ln_eps));

  Var mlp = h;
  for (std::size_t i = 0; i < cfg.mlp_depth; ++i) {
    mlp = elu(detail::lin(tape, ps, "mlp." + std::to_string(i), mlp));
  }
  Var inter = isab_branch(tape, model, h, B, T, batch.mask);

  Var s = film(add(mlp, inter), gather_rows(detail::lin(tape, ps, "film2", c), cond_rows));
  s = silu(detail::norm(tape, ps, "norm2", s, cfg.ln_eps));
  Var out = detail::lin(tape, ps, "out", s);
  return reshape(scatter_rows(out, rows, B * T), {B, T, cfg.d_in});
}

// Forward pass without keeping the tape.
inline Tensor velocity(const SetFlowModel& model, const BatchedBags& batch) {
  Tape tape;
  return velocity_forward(tape, model, batch).value();
}

// --- checkpoints ------------------------------------------------------------
//
// JSON document:
//   {"format": "setflow-checkpoint-v1",
//    "config": {<SetFlowConfig fields>},
//    "params": {"<name>": {"shape": [...], "data": [<f64>...]}, ...},
//    "meta":   {...}}

inline constexpr const char* kCheckpointFormat = "setflow-checkpoint-v1";

inline json checkpoint_to_json(const SetFlowModel& model, const json& meta = json::object()) {
  json params = json::object();
  for (const auto& p : model.params) {
    params[p.name] = {{"shape", p.value.shape()}, {"data", p.value.to_vector()}};
  }
  return {{"format", kCheckpointFormat}, {"config", model.config}, {"params", params}, {"meta", meta}};
}

inline SetFlowModel checkpoint_from_json(const json& j) {
  if (j.value("format", std::string()) != kCheckpointFormat) {
    throw Error("not a setflow checkpoint (format tag missing or wrong)");
  }
  SetFlowModel model = make_setflow_model(j.at("config").get<SetFlowConfig>(), 0);
  const json& params = j.at("params");
  if (params.size() != model.params.size()) {
    throw Error("checkpoint holds " + std::to_string(params.size()) + " tensors, config implies " +
                std::to_string(model.params.size()));
  }
  for (auto& p : model.params) {
    if (!params.contains(p.name)) throw Error("checkpoint is missing parameter '" + p.name + "'");
    const json& e = params.at(p.name);
    Tensor v(e.at("shape").get<Shape>(), e.at("data").get<std::vector<double>>());
    if (v.shape() != p.value.shape()) {
      throw Error("checkpoint parameter '" + p.name + "' has shape " + shape_str(v.shape()) +
                  ", expected " + shape_str(p.value.shape()));
    }
    p.value = std::move(v);
  }
  return model;
}

inline void save_checkpoint(const SetFlowModel& model, const std::string& path,
                            const json& meta = json::object()) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << checkpoint_to_json(model, meta).dump() << '\n';
}

inline SetFlowModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  return checkpoint_from_json(json::parse(in));
}

}  // namespace setflow

#pragma once

// Gated-attention MIL classifier used to score downstream usefulness of
// generated bags. Each stream is encoded and attention-pooled on its own;
// the two pooled vectors are concatenated before a single logit.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "setflow/adam.hpp"
#include "setflow/autodiff.hpp"
#include "setflow/data.hpp"
#include "setflow/rng.hpp"

namespace setflow {

struct MilConfig {
  std::size_t hidden = 32;
  std::size_t attention = 16;
  double lr = 1e-3;
  std::size_t max_iters = 600;
  std::size_t eval_interval = 10;
  std::size_t patience = 15;
  std::uint64_t seed = 0;
};

inline void to_json(json& j, const MilConfig& c) {
  j = {{"hidden", c.hidden},       {"attention", c.attention},
       {"lr", c.lr},               {"max_iters", c.max_iters},
       {"eval_interval", c.eval_interval}, {"patience", c.patience},
       {"seed", c.seed}};
}

inline void from_json(const json& j, MilConfig& c) {
  MilConfig d;
  c.hidden = j.value("hidden", d.hidden);
  c.attention = j.value("attention", d.attention);
  c.lr = j.value("lr", d.lr);
  c.max_iters = j.value("max_iters", d.max_iters);
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.patience = j.value("patience", d.patience);
  c.seed = j.value("seed", d.seed);
}

struct MilClassifier {
  MilConfig config;
  std::size_t dim = 0;
  ParamStore params;
};

inline const char* stream_key(Stream s) { return s == Stream::Global ? "global" : "local"; }

inline MilClassifier make_mil_classifier(std::size_t dim, const MilConfig& cfg) {
  if (dim == 0 || cfg.hidden == 0 || cfg.attention == 0) {
    throw Error("MIL classifier: dimensions must be positive");
  }
  Rng rng(cfg.seed);
  MilClassifier m{cfg, dim, {}};
  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out, bool bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w({in, out});
    for (double& v : w.values()) v = dist(rng);
    m.params.add(name + ".w", std::move(w));
    if (bias) {
      Tensor b({out});
      for (double& v : b.values()) v = dist(rng);
      m.params.add(name + ".b", std::move(b));
    }
  };
  for (Stream s : {Stream::Global, Stream::Local}) {
    const std::string k = stream_key(s);
    add_linear("enc." + k, dim, cfg.hidden, true);
    add_linear("attn." + k + ".V", cfg.hidden, cfg.attention, true);
    add_linear("attn." + k + ".U", cfg.hidden, cfg.attention, true);
    add_linear("attn." + k + ".w", cfg.attention, 1, false);
  }
  add_linear("head", 2 * cfg.hidden, 1, true);
  return m;
}

namespace detail {

struct StreamBatch {
  Tensor x;                              // [B x T x dim]
  std::vector<std::uint8_t> attend;      // [B*T], softmax support
  Tensor keep;                           // [B x T x hidden], 0 on padding
};

// Pads one stream of every bag. A bag without instances of the stream gets a
// single attendable slot whose features are forced to zero, which makes its
// pooled vector exactly zero.
inline StreamBatch pad_stream(const std::vector<const EmbeddingBag*>& bags, Stream s,
                              std::size_t dim, std::size_t hidden) {
  const std::size_t B = bags.size();
  std::size_t T = 1;
  for (const auto* b : bags) T = std::max(T, b->count(s));
  StreamBatch sb{Tensor({B, T, dim}), std::vector<std::uint8_t>(B * T, 0), Tensor({B, T, hidden})};
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t n = 0;
    for (const auto& inst : bags[b]->instances) {
      if (inst.stream != s) continue;
      std::copy(inst.vector.begin(), inst.vector.end(), sb.x.data() + (b * T + n) * dim);
      sb.attend[b * T + n] = 1;
      std::fill_n(sb.keep.data() + (b * T + n) * hidden, hidden, 1.0);
      ++n;
    }
    if (n == 0) sb.attend[b * T] = 1;
  }
  return sb;
}

struct PoolResult {
  Var pooled;   // [B x hidden]
  Var weights;  // [B x T]
};

inline PoolResult pool_stream(Tape& tape, const MilClassifier& m, Stream s, const StreamBatch& sb) {
  const std::string k = stream_key(s);
  const std::size_t B = sb.x.dim(0), T = sb.x.dim(1), H = m.config.hidden;
  auto P = [&](const std::string& n) { return tape.param(m.params, n); };
  Var h = mul(elu(linear(tape.constant(sb.x), P("enc." + k + ".w"), P("enc." + k + ".b"))),
              tape.constant(sb.keep));
  Var gate = mul(activation(linear(h, P("attn." + k + ".V.w"), P("attn." + k + ".V.b")), Activation::Tanh),
                 activation(linear(h, P("attn." + k + ".U.w"), P("attn." + k + ".U.b")), Activation::Sigmoid));
  Var logits = linear(gate, P("attn." + k + ".w.w"), tape.constant(Tensor({1})));
  Var a = masked_softmax(reshape(logits, {B, T}), sb.attend);
  Var pooled = reshape(batched_matmul(reshape(a, {B, 1, T}), h), {B, H});
  return {pooled, a};
}

}  // namespace detail

// Bag logits, shape [B x 1].
inline Var mil_forward(Tape& tape, const MilClassifier& m, const std::vector<const EmbeddingBag*>& bags) {
  if (bags.empty()) throw Error("mil_forward: no bags");
  std::vector<Var> pooled;
  for (Stream s : {Stream::Global, Stream::Local}) {
    auto sb = detail::pad_stream(bags, s, m.dim, m.config.hidden);
    pooled.push_back(detail::pool_stream(tape, m, s, sb).pooled);
  }
  return linear(concat_last(pooled), tape.param(m.params, "head.w"), tape.param(m.params, "head.b"));
}

inline std::vector<const EmbeddingBag*> bag_pointers(const BagDataset& ds) {
  std::vector<const EmbeddingBag*> out;
  for (const auto& b : ds.bags) out.push_back(&b);
  return out;
}

// Positive-class probabilities for every bag.
inline std::vector<double> predict_scores(const MilClassifier& m, const BagDataset& ds) {
  Tape tape;
  const Tensor& logits = mil_forward(tape, m, bag_pointers(ds)).value();
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(logits[i]);
  return out;
}

struct AttentionPool {
  std::vector<double> pooled;
  std::vector<double> weights;
};

// Attention-pooled encoding of one stream's instances; empty input pools to
// the zero vector.
inline AttentionPool attention_pool(const MilClassifier& m, Stream s,
                                    const std::vector<std::vector<double>>& instances) {
  EmbeddingBag bag;
  for (const auto& v : instances) bag.instances.push_back({v, s});
  Tape tape;
  auto sb = detail::pad_stream({&bag}, s, m.dim, m.config.hidden);
  auto r = detail::pool_stream(tape, m, s, sb);
  AttentionPool out;
  out.pooled.assign(r.pooled.value().values().begin(), r.pooled.value().values().end());
  if (!instances.empty()) {
    out.weights.assign(r.weights.value().values().begin(),
                       r.weights.value().values().begin() + static_cast<std::ptrdiff_t>(instances.size()));
  }
  return out;
}

// --- metrics ----------------------------------------------------------------

struct ClassifierMetrics {
  double auc = 0.0;
  double bacc = 0.0;
  double spec_at_sens90 = 0.0;
};

inline void to_json(json& j, const ClassifierMetrics& m) {
  j = {{"auc", m.auc}, {"bacc", m.bacc}, {"spec_at_sens90", m.spec_at_sens90}};
}

namespace detail {

inline void require_both_classes(const std::vector<double>& scores, const std::vector<int>& labels,
                                 const char* what) {
  if (scores.size() != labels.size()) throw Error(std::string(what) + ": scores/labels size mismatch");
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<long>(labels.size())) {
    throw Error(std::string(what) + ": both classes must be present");
  }
}

}  // namespace detail

// Mann-Whitney rank statistic with tied scores given their average rank.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  detail::require_both_classes(scores, labels, "roc_auc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos_rank = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      pos_rank += rank[i];
      n_pos += 1.0;
    }
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  return (pos_rank - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

inline double balanced_accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                                double threshold = 0.5) {
  detail::require_both_classes(scores, labels, "balanced_accuracy");
  double tp = 0, tn = 0, p = 0, n = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      p += 1;
      tp += pred;
    } else {
      n += 1;
      tn += !pred;
    }
  }
  return 0.5 * (tp / p + tn / n);
}

// Specificity at the largest score threshold whose sensitivity reaches
// `target_sensitivity` (bags scoring >= threshold are called positive).
inline double specificity_at_sensitivity(const std::vector<double>& scores, const std::vector<int>& labels,
                                         double target_sensitivity) {
  detail::require_both_classes(scores, labels, "specificity_at_sensitivity");
  std::vector<double> thresholds = scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double p = 0, n = 0;
  for (int l : labels) (l == 1 ? p : n) += 1;
  for (double thr : thresholds) {
    double tp = 0, tn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool pred = scores[i] >= thr;
      if (labels[i] == 1) tp += pred;
      else tn += !pred;
    }
    if (tp / p >= target_sensitivity) return tn / n;
  }
  return 0.0;
}

inline std::vector<int> labels_of(const BagDataset& ds) {
  std::vector<int> out;
  for (const auto& b : ds.bags) out.push_back(static_cast<int>(index_of(b.label)));
  return out;
}

inline ClassifierMetrics evaluate(const MilClassifier& m, const BagDataset& test) {
  const auto scores = predict_scores(m, test);
  const auto labels = labels_of(test);
  detail::require_both_classes(scores, labels, "evaluate");
  return {roc_auc(scores, labels), balanced_accuracy(scores, labels, 0.5),
          specificity_at_sensitivity(scores, labels, 0.9)};
}

// Full-batch BCE training with Adam; returns the parameters with the best
// validation AUC seen at an evaluation point.
inline MilClassifier train_classifier(const BagDataset& train_set, const BagDataset& val_set,
                                      const MilConfig& cfg) {
  if (train_set.count(Label::Positive) == 0 || train_set.count(Label::Negative) == 0) {
    throw Error("train_classifier: training set must contain both classes");
  }
  if (cfg.eval_interval == 0 || cfg.patience == 0) {
    throw Error("train_classifier: eval_interval and patience must be positive");
  }
  MilClassifier model = make_mil_classifier(train_set.dim, cfg);
  MilClassifier best = model;
  const auto bags = bag_pointers(train_set);
  std::vector<double> targets;
  for (const auto* b : bags) targets.push_back(b->label == Label::Positive ? 1.0 : 0.0);
  const auto val_labels = labels_of(val_set);
  const bool val_ok = std::count(val_labels.begin(), val_labels.end(), 1) > 0 &&
                      std::count(val_labels.begin(), val_labels.end(), 0) > 0;
  AdamState adam(model.params, {cfg.lr, 0.9, 0.999, 1e-8});
  double best_auc = -1.0;
  std::size_t stale = 0;
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    Tape tape;
    Var loss = bce_with_logits(mil_forward(tape, model, bags), targets);
    tape.backward(loss);
    adam_step(model.params, tape.param_grads(model.params), adam);
    if (it % cfg.eval_interval != 0 && it != cfg.max_iters) continue;
    if (!val_ok) {
      best = model;
      continue;
    }
    const double auc = roc_auc(predict_scores(model, val_set), val_labels);
    if (auc > best_auc) {
      best_auc = auc;
      best = model;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  return best;
}

// --- downstream protocol ----------------------------------------------------

// Produces `count` bags of class `label`; `seed` selects the draw.
using BagGenerator = std::function<std::vector<EmbeddingBag>(Label label, std::size_t count, std::uint64_t seed)>;

struct ProtocolResult {
  ClassifierMetrics original, combined, synthetic;
  std::size_t added_positive = 0, added_negative = 0;
  std::size_t synthetic_positive = 0, synthetic_negative = 0;
  std::size_t test_size = 0;
  // Hash of the serialized test split each arm was scored on.
  std::vector<std::size_t> test_fingerprints;
};

inline void to_json(json& j, const ProtocolResult& r) {
  j = {{"original", r.original},
       {"combined", r.combined},
       {"synthetic", r.synthetic},
       {"added_positive", r.added_positive},
       {"added_negative", r.added_negative},
       {"synthetic_positive", r.synthetic_positive},
       {"synthetic_negative", r.synthetic_negative},
       {"test_size", r.test_size}};
}

inline std::size_t augmentation_count(std::size_t class_count, double fraction) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(class_count)));
}

inline std::size_t dataset_fingerprint(const BagDataset& ds) {
  std::string blob;
  for (const auto& b : ds.bags) blob += bag_to_json(b).dump();
  return std::hash<std::string>{}(blob);
}

// Trains the classifier on (a) the original train split, (b) the train split
// plus `synthetic_fraction` extra generated bags per class and (c) generated
// bags only, matching the train split's class counts. Validation and test
// splits are original data and shared by all arms.
inline ProtocolResult run_protocol(const BagDataset& train_set, const BagDataset& val_set,
                                   const BagDataset& test_set, const BagGenerator& generator,
                                   const MilConfig& cfg, double synthetic_fraction = 0.2,
                                   std::uint64_t seed = 0) {
  ProtocolResult r;
  r.test_size = test_set.size();
  auto score = [&](const BagDataset& tr) {
    const auto model = train_classifier(tr, val_set, cfg);
    r.test_fingerprints.push_back(dataset_fingerprint(test_set));
    return evaluate(model, test_set);
  };
  auto generated = [&](Label y, std::size_t n, std::uint64_t s) {
    BagDataset ds;
    ds.dim = train_set.dim;
    if (n == 0) return ds;
    ds.bags = generator(y, n, s);
    if (ds.bags.size() != n) throw Error("run_protocol: generator returned the wrong bag count");
    for (const auto& b : ds.bags) {
      if (b.label != y) throw Error("run_protocol: generator returned a bag with the wrong label");
    }
    ds.validate();
    return ds;
  };

  r.original = score(train_set);

  BagDataset combined = train_set;
  r.added_positive = augmentation_count(train_set.count(Label::Positive), synthetic_fraction);
  r.added_negative = augmentation_count(train_set.count(Label::Negative), synthetic_fraction);
  for (auto [y, n, s] : {std::tuple{Label::Negative, r.added_negative, 0}, std::tuple{Label::Positive, r.added_positive, 1}}) {
    auto g = generated(y, n, derive_seed(seed, static_cast<std::uint64_t>(s)));
    combined.bags.insert(combined.bags.end(), g.bags.begin(), g.bags.end());
  }
  r.combined = score(combined);

  BagDataset synthetic;
  synthetic.dim = train_set.dim;
  r.synthetic_negative = train_set.count(Label::Negative);
  r.synthetic_positive = train_set.count(Label::Positive);
  for (auto [y, n, s] : {std::tuple{Label::Negative, r.synthetic_negative, 2}, std::tuple{Label::Positive, r.synthetic_positive, 3}}) {
    auto g = generated(y, n, derive_seed(seed, static_cast<std::uint64_t>(s)));
    synthetic.bags.insert(synthetic.bags.end(), g.bags.begin(), g.bags.end());
  }
  r.synthetic = score(synthetic);
  return r;
}

inline std::string format_protocol_table(const ProtocolResult& r) {
  std::ostringstream o;
  o << std::left << std::setw(16) << "Metric" << std::right << std::setw(9) << "Orig."
    << std::setw(9) << "Comb." << std::setw(9) << "Synth." << '\n'
    << std::fixed << std::setprecision(3);
  auto row = [&](const char* name, double a, double b, double c) {
    o << std::left << std::setw(16) << name << std::right << std::setw(9) << a << std::setw(9) << b
      << std::setw(9) << c << '\n';
  };
  row("AUC", r.original.auc, r.combined.auc, r.synthetic.auc);
  row("bACC", r.original.bacc, r.combined.bacc, r.synthetic.bacc);
  row("Spec@Sens=0.9", r.original.spec_at_sens90, r.combined.spec_at_sens90, r.synthetic.spec_at_sens90);
  return o.str();
}

}  // namespace setflow

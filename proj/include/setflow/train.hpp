#pragma once

// Flow-matching training: linear noise-to-data paths, velocity regression,
// full-dataset Adam steps and early stopping on the Frechet distance of
// generated bags to the validation split.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "setflow/adam.hpp"
#include "setflow/eval.hpp"
#include "setflow/net.hpp"
#include "setflow/sampler.hpp"

namespace setflow {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t max_iters = 200000;
  std::size_t fid_eval_interval = 20000;
  std::size_t patience = 3;
  std::uint64_t seed = 0;
  std::size_t rk2_steps = 200;
  std::size_t fid_monitor_sample_count = 256;
  double divergence_threshold = 1e6;

  void validate() const {
    if (fid_eval_interval == 0) throw Error("TrainConfig: fid_eval_interval must be positive");
    if (patience == 0) throw Error("TrainConfig: patience must be >= 1");
    if (rk2_steps == 0) throw Error("TrainConfig: rk2_steps must be positive");
    if (fid_monitor_sample_count == 0) throw Error("TrainConfig: fid_monitor_sample_count must be positive");
    if (!(lr > 0)) throw Error("TrainConfig: lr must be positive");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"max_iters", c.max_iters},
       {"fid_eval_interval", c.fid_eval_interval},
       {"patience", c.patience},
       {"seed", c.seed},
       {"rk2_steps", c.rk2_steps},
       {"fid_monitor_sample_count", c.fid_monitor_sample_count},
       {"divergence_threshold", c.divergence_threshold}};
}

inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.max_iters = j.value("max_iters", d.max_iters);
  c.fid_eval_interval = j.value("fid_eval_interval", d.fid_eval_interval);
  c.patience = j.value("patience", d.patience);
  c.seed = j.value("seed", d.seed);
  c.rk2_steps = j.value("rk2_steps", d.rk2_steps);
  c.fid_monitor_sample_count = j.value("fid_monitor_sample_count", d.fid_monitor_sample_count);
  c.divergence_threshold = j.value("divergence_threshold", d.divergence_threshold);
}

struct PathSample {
  Tensor x0;
  Tensor xt;
  Tensor target;
};

// x0 ~ N(0, I); x_t = (1 - t) x0 + t x1; target = x1 - x0.
inline PathSample sample_path(const Tensor& x1, double t, Rng& rng) {
  if (t < 0.0 || t > 1.0) throw Error("sample_path: t must lie in [0,1]");
  PathSample p{Tensor(x1.shape()), Tensor(x1.shape()), Tensor(x1.shape())};
  for (std::size_t i = 0; i < x1.size(); ++i) {
    const double z = standard_normal(rng);
    p.x0[i] = z;
    p.xt[i] = (1.0 - t) * z + t * x1[i];
    p.target[i] = x1[i] - z;
  }
  return p;
}

// Mean over real token coordinates of (v - target)^2.
inline Var fm_loss(Var prediction, const Tensor& target, const std::vector<std::uint8_t>& mask) {
  Tape& tape = prediction.tape();
  const Tensor& pv = prediction.value();
  if (pv.shape() != target.shape() || pv.rank() != 3 || mask.size() != pv.dim(0) * pv.dim(1)) {
    throw Error("fm_loss: prediction " + shape_str(pv.shape()) + " vs target " +
                shape_str(target.shape()));
  }
  const std::size_t d = pv.dim(2);
  Tensor weights(pv.shape());
  std::size_t real = 0;
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (!mask[r]) continue;
    ++real;
    std::fill_n(weights.data() + r * d, d, 1.0);
  }
  if (real == 0) throw Error("fm_loss: no real tokens");
  Var diff = sub(prediction, tape.constant(target));
  Var loss = scale(sum(mul(mul(diff, diff), tape.constant(std::move(weights)))),
                   1.0 / static_cast<double>(real * d));
  if (!std::isfinite(loss.value()[0])) throw Error("fm_loss: non-finite loss");
  return loss;
}

inline Var fm_loss(Tape& tape, const SetFlowModel& model, const BatchedBags& batch,
                   const Tensor& target) {
  return fm_loss(velocity_forward(tape, model, batch), target, batch.mask);
}

struct FidPoint {
  std::size_t evaluation = 0;
  std::size_t iteration = 0;
  double fid = 0.0;                 // generated vs validation
  double internal_synthetic = 0.0;  // split-half of the generated corpus
};

struct TrainLog {
  std::vector<double> loss;  // loss[i] is the loss of iteration i + 1
  std::vector<FidPoint> fid;
  std::optional<std::size_t> best_evaluation;
};

enum class TrainStatus { Completed, EarlyStopped, Diverged };

inline const char* to_string(TrainStatus s) {
  switch (s) {
    case TrainStatus::Completed: return "completed";
    case TrainStatus::EarlyStopped: return "early_stopped";
    case TrainStatus::Diverged: return "diverged";
  }
  return "";
}

struct TrainResult {
  SetFlowModel best;
  TrainLog log;
  TrainStatus status = TrainStatus::Completed;
  std::string message;
};

// Frechet distance between bags generated from `model` and the validation
// corpus, with class counts proportional to the validation split.
inline FidPoint monitor_fid(const SetFlowModel& model, const BagShapeStats& stats,
                            const BagDataset& val, std::size_t count, std::size_t steps,
                            std::uint64_t seed) {
  const double frac_pos = static_cast<double>(val.count(Label::Positive)) / static_cast<double>(val.size());
  auto n_pos = static_cast<std::size_t>(std::llround(frac_pos * static_cast<double>(count)));
  BagDataset gen;
  gen.dim = model.config.d_in;
  for (Label y : {Label::Negative, Label::Positive}) {
    const std::size_t n = y == Label::Positive ? n_pos : count - n_pos;
    if (n == 0) continue;
    auto bags = generate_bags({y, n, steps, derive_seed(seed, index_of(y))}, stats, model);
    gen.bags.insert(gen.bags.end(), bags.begin(), bags.end());
  }
  const Eigen::MatrixXd g = stack_instances(gen);
  FidPoint p;
  p.fid = frechet_distance(g, stack_instances(val));
  p.internal_synthetic = g.rows() >= 4 ? detail::split_half_distance(g, seed, "generated") : 0.0;
  return p;
}

using TrainProgress = std::function<void(std::size_t iteration, double loss, const FidPoint* eval)>;

inline TrainResult train(SetFlowModel model, const BagDataset& train_set, const BagDataset& val_set,
                         const TrainConfig& cfg, const TrainProgress& progress = {}) {
  cfg.validate();
  if (train_set.bags.empty() || val_set.bags.empty()) throw Error("train: empty dataset");
  if (train_set.dim != model.config.d_in || val_set.dim != model.config.d_in) {
    throw Error("train: dataset dim does not match model d_in " + std::to_string(model.config.d_in));
  }
  TrainResult result{model, {}, TrainStatus::Completed, {}};
  if (cfg.max_iters == 0) return result;

  const BagShapeStats stats = fit_bag_shape_stats(train_set);
  const std::uint64_t monitor_seed = derive_seed(cfg.seed, 0xF1D);
  AdamState adam(model.params, {cfg.lr, 0.9, 0.999, 1e-8});
  Rng rng(cfg.seed);

  const std::size_t B = train_set.size();
  BatchedBags batch = make_batch(train_set.bags, model.config.d_in, std::vector<double>(B, 0.0));
  const Tensor data = batch.tokens;
  const std::size_t T = batch.length(), d = model.config.d_in;

  double best_fid = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::size_t evaluation = 0;
  auto evaluate = [&](std::size_t iteration) {
    FidPoint p = monitor_fid(model, stats, val_set, cfg.fid_monitor_sample_count, cfg.rk2_steps,
                             monitor_seed);
    p.evaluation = evaluation++;
    p.iteration = iteration;
    result.log.fid.push_back(p);
    if (p.fid < best_fid) {
      best_fid = p.fid;
      result.best = model;
      result.log.best_evaluation = p.evaluation;
      stale = 0;
    } else {
      ++stale;
    }
    if (progress) progress(iteration, result.log.loss.empty() ? 0.0 : result.log.loss.back(), &p);
    return stale >= cfg.patience;
  };

  if (evaluate(0)) {
    result.status = TrainStatus::EarlyStopped;
    return result;
  }
  Tensor target(data.shape());
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    for (std::size_t b = 0; b < B; ++b) {
      const double t = uniform01(rng);
      batch.t[b] = t;
      const std::size_t n = train_set.bags[b].size();
      const std::size_t off = b * T * d;
      for (std::size_t i = 0; i < n * d; ++i) {
        const double x0 = standard_normal(rng);
        const double x1 = data[off + i];
        batch.tokens[off + i] = (1.0 - t) * x0 + t * x1;
        target[off + i] = x1 - x0;
      }
    }
    double loss_value = 0.0;
    try {
      Tape tape;
      Var loss = fm_loss(tape, model, batch, target);
      loss_value = loss.value()[0];
      if (loss_value > cfg.divergence_threshold) {
        throw Error("loss " + std::to_string(loss_value) + " exceeds divergence threshold");
      }
      tape.backward(loss);
      adam_step(model.params, tape.param_grads(model.params), adam);
    } catch (const Error& e) {
      result.status = TrainStatus::Diverged;
      result.message = "iteration " + std::to_string(it) + ": " + e.what();
      return result;
    }
    result.log.loss.push_back(loss_value);
    const bool eval_now = it % cfg.fid_eval_interval == 0 || it == cfg.max_iters;
    if (progress && !eval_now) progress(it, loss_value, nullptr);
    if (eval_now && evaluate(it)) {
      result.status = TrainStatus::EarlyStopped;
      return result;
    }
  }
  return result;
}

inline std::string loss_csv(const TrainLog& log) {
  std::ostringstream o;
  o << "iteration,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < log.loss.size(); ++i) o << i + 1 << ',' << log.loss[i] << '\n';
  return o.str();
}

inline std::string fid_csv(const TrainLog& log) {
  std::ostringstream o;
  o << "evaluation,iteration,fid,internal_synthetic\n" << std::setprecision(17);
  for (const auto& p : log.fid) {
    o << p.evaluation << ',' << p.iteration << ',' << p.fid << ',' << p.internal_synthetic << '\n';
  }
  return o.str();
}

}  // namespace setflow

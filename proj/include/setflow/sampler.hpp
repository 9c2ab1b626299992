#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "setflow/data.hpp"
#include "setflow/net.hpp"
#include "setflow/rng.hpp"

namespace setflow {

struct SampleRequest {
  Label label = Label::Negative;
  std::size_t count = 1;
  std::size_t steps = 200;
  std::uint64_t seed = 0;
};

struct BagShape {
  std::size_t n_global = 0;
  std::size_t n_local = 0;
};

// Global count from the empirical histogram; local count from a Gaussian
// local/global ratio truncated at zero, rounded half away from zero.
inline BagShape sample_bag_shape(const BagShapeStats& stats, Rng& rng) {
  if (stats.global_count_probs.empty()) throw Error("sample_bag_shape: empty histogram");
  BagShape s;
  s.n_global = detail::draw_from_histogram(stats.global_count_probs, rng);
  const double r = std::max(0.0, stats.ratio_mean + stats.ratio_std * standard_normal(rng));
  s.n_local = static_cast<std::size_t>(std::round(r * static_cast<double>(s.n_global)));
  return s;
}

inline BagShape sample_bag_shape(const BagShapeStats& stats, std::uint64_t seed) {
  Rng rng(seed);
  return sample_bag_shape(stats, rng);
}

// Midpoint RK2 over t in [0,1] with h = 1/steps:
//   k1 = v(x, t); k2 = v(x + h/2 k1, t + h/2); x <- x + h k2.
// `field(x, t)` must return a tensor shaped like x.
template <class Field>
Tensor rk2_integrate(Tensor x, Field&& field, std::size_t steps) {
  if (steps < 1) throw Error("rk2_integrate: steps must be >= 1");
  const double h = 1.0 / static_cast<double>(steps);
  Tensor mid(x.shape());
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) * h;
    const Tensor k1 = field(x, t);
    for (std::size_t j = 0; j < x.size(); ++j) mid[j] = x[j] + 0.5 * h * k1[j];
    const Tensor k2 = field(mid, t + 0.5 * h);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += h * k2[j];
    if (!x.all_finite()) {
      throw Error("rk2_integrate: non-finite state after step " + std::to_string(i + 1));
    }
  }
  return x;
}

// Transports the noise tokens of `batch` through the learned field with the
// batch's labels and streams held fixed. Returns [B x T x d_in].
inline Tensor rk2_integrate(const SetFlowModel& model, BatchedBags batch, std::size_t steps) {
  Tensor x0 = batch.tokens;
  return rk2_integrate(std::move(x0), [&](const Tensor& x, double t) {
    batch.tokens = x;
    std::fill(batch.t.begin(), batch.t.end(), t);
    return velocity(model, batch);
  }, steps);
}

// Generates req.count bags of class req.label. Bag i draws its shape and
// noise from its own stream seeded by (req.seed, i).
inline std::vector<EmbeddingBag> generate_bags(const SampleRequest& req, const BagShapeStats& stats,
                                               const SetFlowModel& model,
                                               std::size_t max_batch = 256) {
  if (req.steps < 1) throw Error("generate_bags: steps must be >= 1");
  const std::size_t d = model.config.d_in;
  std::vector<EmbeddingBag> noise(req.count);
  for (std::size_t i = 0; i < req.count; ++i) {
    Rng rng(derive_seed(req.seed, i));
    const BagShape shape = sample_bag_shape(stats, rng);
    auto& bag = noise[i];
    bag.label = req.label;
    for (std::size_t n = 0; n < shape.n_global + shape.n_local; ++n) {
      Instance inst;
      inst.stream = n < shape.n_global ? Stream::Global : Stream::Local;
      inst.vector.resize(d);
      for (double& v : inst.vector) v = standard_normal(rng);
      bag.instances.push_back(std::move(inst));
    }
  }
  std::vector<EmbeddingBag> out;
  out.reserve(req.count);
  for (std::size_t start = 0; start < req.count; start += max_batch) {
    const std::size_t stop = std::min(req.count, start + max_batch);
    std::vector<EmbeddingBag> chunk(noise.begin() + static_cast<std::ptrdiff_t>(start),
                                    noise.begin() + static_cast<std::ptrdiff_t>(stop));
    const Tensor x1 = rk2_integrate(model, make_batch(chunk, d, std::vector<double>(chunk.size(), 0.0)),
                                    req.steps);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      auto& bag = chunk[b];
      for (std::size_t n = 0; n < bag.size(); ++n) {
        std::copy_n(x1.data() + (b * x1.dim(1) + n) * d, d, bag.instances[n].vector.begin());
      }
      out.push_back(std::move(bag));
    }
  }
  return out;
}

}  // namespace setflow

#pragma once

// Latent-space Frechet distance reports and nearest-neighbour spread analysis.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "setflow/data.hpp"
#include "setflow/rng.hpp"

namespace setflow {

struct GaussianMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t n = 0;
};

// Sample mean and unbiased (1/(N-1)) covariance of the rows of x.
inline GaussianMoments fit_moments(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) {
    throw Error("fit_moments: need at least 2 vectors, got " + std::to_string(x.rows()));
  }
  GaussianMoments g;
  g.n = static_cast<std::size_t>(x.rows());
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - g.mean.transpose();
  g.cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  return g;
}

namespace detail {

// Symmetric PSD square root; eigenvalues below zero are clamped to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), clamped at 0.
inline double frechet_distance(const GaussianMoments& a, const GaussianMoments& b) {
  if (a.mean.size() != b.mean.size()) {
    throw Error("frechet_distance: dim " + std::to_string(a.mean.size()) + " vs " +
                std::to_string(b.mean.size()));
  }
  const double mean_term = (a.mean - b.mean).squaredNorm();
  const Eigen::MatrixXd sa = detail::psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = sa * b.cov * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  return std::max(0.0, fd);
}

inline double frechet_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  return frechet_distance(fit_moments(x), fit_moments(y));
}

struct FidReport {
  double internal_original = 0, internal_synthetic = 0;
  double interstream_original = 0, interstream_synthetic = 0;
  double interclass_original = 0, interclass_synthetic = 0;
  double wrt_original = 0;
};

inline void to_json(json& j, const FidReport& r) {
  j = {{"internal_original", r.internal_original},
       {"internal_synthetic", r.internal_synthetic},
       {"interstream_original", r.interstream_original},
       {"interstream_synthetic", r.interstream_synthetic},
       {"interclass_original", r.interclass_original},
       {"interclass_synthetic", r.interclass_synthetic},
       {"wrt_original", r.wrt_original}};
}

namespace detail {

inline Eigen::MatrixXd subgroup(const BagDataset& ds, const std::string& corpus,
                                const std::string& what,
                                const std::function<bool(const EmbeddingBag&, const Instance&)>& keep) {
  Eigen::MatrixXd x = stack_instances(ds, keep);
  if (x.rows() < 2) {
    throw Error("fid_report: " + corpus + " corpus has " + std::to_string(x.rows()) + " " +
                what + " instances, need at least 2");
  }
  return x;
}

// Frechet distance between the two halves of a seeded random split of the rows.
inline double split_half_distance(const Eigen::MatrixXd& x, std::uint64_t seed,
                                  const std::string& corpus) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (n < 4) throw Error("fid_report: " + corpus + " corpus needs at least 4 instances");
  std::vector<Eigen::Index> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t half = n / 2;
  Eigen::MatrixXd a(half, x.cols()), b(n - half, x.cols());
  for (std::size_t i = 0; i < half; ++i) a.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  for (std::size_t i = half; i < n; ++i) b.row(static_cast<Eigen::Index>(i - half)) = x.row(idx[i]);
  return frechet_distance(a, b);
}

}  // namespace detail

inline FidReport fid_report(const BagDataset& original, const BagDataset& synthetic,
                            std::uint64_t seed) {
  if (original.bags.empty() || synthetic.bags.empty()) throw Error("fid_report: empty corpus");
  if (original.dim != synthetic.dim) {
    throw Error("fid_report: dims differ (" + std::to_string(original.dim) + " vs " +
                std::to_string(synthetic.dim) + ")");
  }
  auto all = [](const EmbeddingBag&, const Instance&) { return true; };
  auto global = [](const EmbeddingBag&, const Instance& i) { return i.stream == Stream::Global; };
  auto local = [](const EmbeddingBag&, const Instance& i) { return i.stream == Stream::Local; };
  auto global_pos = [](const EmbeddingBag& b, const Instance& i) {
    return i.stream == Stream::Global && b.label == Label::Positive;
  };
  auto global_neg = [](const EmbeddingBag& b, const Instance& i) {
    return i.stream == Stream::Global && b.label == Label::Negative;
  };

  FidReport r;
  const Eigen::MatrixXd orig_all = detail::subgroup(original, "original", "pooled", all);
  const Eigen::MatrixXd syn_all = detail::subgroup(synthetic, "synthetic", "pooled", all);
  r.internal_original = detail::split_half_distance(orig_all, derive_seed(seed, 0), "original");
  r.internal_synthetic = detail::split_half_distance(syn_all, derive_seed(seed, 1), "synthetic");
  r.interstream_original = frechet_distance(detail::subgroup(original, "original", "global", global),
                                            detail::subgroup(original, "original", "local", local));
  r.interstream_synthetic = frechet_distance(detail::subgroup(synthetic, "synthetic", "global", global),
                                             detail::subgroup(synthetic, "synthetic", "local", local));
  r.interclass_original =
      frechet_distance(detail::subgroup(original, "original", "positive-bag global", global_pos),
                       detail::subgroup(original, "original", "negative-bag global", global_neg));
  r.interclass_synthetic =
      frechet_distance(detail::subgroup(synthetic, "synthetic", "positive-bag global", global_pos),
                       detail::subgroup(synthetic, "synthetic", "negative-bag global", global_neg));
  r.wrt_original = frechet_distance(syn_all, orig_all);
  return r;
}

struct NnReport {
  double internal_original = 0;
  double internal_synthetic = 0;
  double original_to_synthetic = 0;
  double synthetic_to_original = 0;
};

inline void to_json(json& j, const NnReport& r) {
  j = {{"internal_original", r.internal_original},
       {"internal_synthetic", r.internal_synthetic},
       {"original_to_synthetic", r.original_to_synthetic},
       {"synthetic_to_original", r.synthetic_to_original}};
}

// Mean over rows of `query` of the Euclidean distance to the nearest row of
// `reference`. With `exclude_self`, query and reference are the same corpus
// and row i never matches itself.
inline double mean_nn_distance(const Eigen::MatrixXd& query, const Eigen::MatrixXd& reference,
                               bool exclude_self) {
  if (query.rows() == 0 || reference.rows() == 0) throw Error("nearest neighbour: empty corpus");
  if (exclude_self && reference.rows() < 2) {
    throw Error("nearest neighbour: internal distance needs at least 2 instances");
  }
  const Eigen::MatrixXd ref_t = reference.transpose();
  double total = 0.0;
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    const Eigen::VectorXd q = query.row(i).transpose();
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < ref_t.cols(); ++j) {
      if (exclude_self && i == j) continue;
      best = std::min(best, (ref_t.col(j) - q).squaredNorm());
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(query.rows());
}

inline NnReport nn_report(const BagDataset& original, const BagDataset& synthetic) {
  if (original.dim != synthetic.dim) throw Error("nn_report: dims differ");
  const Eigen::MatrixXd o = stack_instances(original);
  const Eigen::MatrixXd s = stack_instances(synthetic);
  if (o.rows() < 2 || s.rows() < 2) throw Error("nn_report: each corpus needs at least 2 instances");
  NnReport r;
  r.internal_original = mean_nn_distance(o, o, true);
  r.internal_synthetic = mean_nn_distance(s, s, true);
  r.original_to_synthetic = mean_nn_distance(o, s, false);
  r.synthetic_to_original = mean_nn_distance(s, o, false);
  return r;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream oss;
  if (v != 0.0 && (std::abs(v) < 1e-3 || std::abs(v) >= 1e4)) {
    oss << std::scientific << std::setprecision(2) << v;
  } else {
    oss << std::fixed << std::setprecision(4) << v;
  }
  return oss.str();
}

}  // namespace detail

inline std::string format_fid_table(const FidReport& r) {
  std::ostringstream o;
  o << std::left << std::setw(18) << "FID" << std::right << std::setw(12) << "Original"
    << std::setw(12) << "Synthetic" << '\n';
  auto row = [&](const char* name, const std::string& a, const std::string& b) {
    o << std::left << std::setw(18) << name << std::right << std::setw(12) << a << std::setw(12)
      << b << '\n';
  };
  row("Internal", detail::fmt(r.internal_original), detail::fmt(r.internal_synthetic));
  row("Interstream", detail::fmt(r.interstream_original), detail::fmt(r.interstream_synthetic));
  row("Interclass", detail::fmt(r.interclass_original), detail::fmt(r.interclass_synthetic));
  row("W.r.t. original", "--", detail::fmt(r.wrt_original));
  return o.str();
}

inline std::string format_nn_table(const NnReport& r) {
  std::ostringstream o;
  auto row = [&](const char* name, double v) {
    o << std::left << std::setw(24) << name << std::right << std::setw(10) << detail::fmt(v) << '\n';
  };
  o << std::left << std::setw(24) << "Metric" << std::right << std::setw(10) << "Mean NN" << '\n';
  row("Internal (original)", r.internal_original);
  row("Internal (synthetic)", r.internal_synthetic);
  row("Original -> Synthetic", r.original_to_synthetic);
  row("Synthetic -> Original", r.synthetic_to_original);
  return o.str();
}

}  // namespace setflow

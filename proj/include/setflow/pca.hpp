#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "setflow/data.hpp"

namespace setflow {

struct PcaModel {
  Eigen::RowVectorXd mean;        // [D]
  Eigen::MatrixXd components;     // [D x d], orthonormal columns
  Eigen::VectorXd explained_variance;  // [d], non-increasing
  bool standardize = false;

  std::size_t source_dim() const { return static_cast<std::size_t>(components.rows()); }
  std::size_t target_dim() const { return static_cast<std::size_t>(components.cols()); }
};

// Top-d principal axes of the centered rows of `x`, from a thin SVD of the
// centered data. Each axis is signed so its largest-magnitude entry is positive.
inline PcaModel fit_pca(const Eigen::MatrixXd& x, std::size_t d, bool standardize = false) {
  const auto N = static_cast<std::size_t>(x.rows());
  const auto D = static_cast<std::size_t>(x.cols());
  if (N < 2) throw Error("fit_pca: need at least 2 samples, got " + std::to_string(N));
  if (d < 1 || d > std::min(N - 1, D)) {
    throw Error("fit_pca: target dim " + std::to_string(d) + " outside [1, " +
                std::to_string(std::min(N - 1, D)) + "]");
  }
  PcaModel m;
  m.standardize = standardize;
  m.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - m.mean;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (!(sv.size() > 0 && sv[0] > 0.0)) throw Error("fit_pca: data has zero variance");
  const auto di = static_cast<Eigen::Index>(d);
  m.components = svd.matrixV().leftCols(di);
  m.explained_variance = sv.head(di).array().square() / static_cast<double>(N - 1);
  for (Eigen::Index c = 0; c < di; ++c) {
    Eigen::Index arg = 0;
    m.components.col(c).cwiseAbs().maxCoeff(&arg);
    if (m.components(arg, c) < 0) m.components.col(c) *= -1.0;
  }
  if (standardize && (m.explained_variance.array() <= 0.0).any()) {
    throw Error("fit_pca: cannot standardize a zero-variance component");
  }
  return m;
}

inline Eigen::MatrixXd pca_transform(const PcaModel& m, const Eigen::MatrixXd& x) {
  if (static_cast<std::size_t>(x.cols()) != m.source_dim()) {
    throw Error("pca transform: input has " + std::to_string(x.cols()) +
                " columns, model expects " + std::to_string(m.source_dim()));
  }
  Eigen::MatrixXd z = (x.rowwise() - m.mean) * m.components;
  if (m.standardize) {
    z = z.array().rowwise() / m.explained_variance.transpose().array().sqrt();
  }
  return z;
}

inline Eigen::MatrixXd pca_inverse_transform(const PcaModel& m, const Eigen::MatrixXd& z) {
  if (static_cast<std::size_t>(z.cols()) != m.target_dim()) {
    throw Error("pca inverse_transform: input has " + std::to_string(z.cols()) +
                " columns, model expects " + std::to_string(m.target_dim()));
  }
  Eigen::MatrixXd zz = z;
  if (m.standardize) {
    zz = zz.array().rowwise() * m.explained_variance.transpose().array().sqrt();
  }
  return (zz * m.components.transpose()).rowwise() + m.mean;
}

// Applies the projection to every instance of a dataset.
inline BagDataset pca_transform(const PcaModel& m, const BagDataset& ds) {
  if (ds.dim != m.source_dim()) {
    throw Error("pca transform: dataset dim " + std::to_string(ds.dim) +
                " does not match model source dim " + std::to_string(m.source_dim()));
  }
  const Eigen::MatrixXd z = pca_transform(m, stack_instances(ds));
  BagDataset out;
  out.dim = m.target_dim();
  out.meta = ds.meta;
  out.meta["pca_dim"] = out.dim;
  Eigen::Index r = 0;
  for (const auto& bag : ds.bags) {
    EmbeddingBag nb;
    nb.label = bag.label;
    for (const auto& inst : bag.instances) {
      std::vector<double> v(out.dim);
      for (std::size_t j = 0; j < out.dim; ++j) v[j] = z(r, static_cast<Eigen::Index>(j));
      nb.instances.push_back({std::move(v), inst.stream});
      ++r;
    }
    out.bags.push_back(std::move(nb));
  }
  return out;
}

inline json pca_to_json(const PcaModel& m) {
  std::vector<double> comps;
  comps.reserve(static_cast<std::size_t>(m.components.size()));
  for (Eigen::Index i = 0; i < m.components.rows(); ++i)
    for (Eigen::Index j = 0; j < m.components.cols(); ++j) comps.push_back(m.components(i, j));
  return {{"schema", "setflow-pca-v1"},
          {"source_dim", m.source_dim()},
          {"target_dim", m.target_dim()},
          {"standardize", m.standardize},
          {"mean", std::vector<double>(m.mean.data(), m.mean.data() + m.mean.size())},
          {"components", comps},
          {"explained_variance",
           std::vector<double>(m.explained_variance.data(),
                               m.explained_variance.data() + m.explained_variance.size())}};
}

inline PcaModel pca_from_json(const json& j) {
  PcaModel m;
  const auto D = j.at("source_dim").get<Eigen::Index>();
  const auto d = j.at("target_dim").get<Eigen::Index>();
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto comps = j.at("components").get<std::vector<double>>();
  const auto ev = j.at("explained_variance").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(mean.size()) != D ||
      static_cast<Eigen::Index>(comps.size()) != D * d ||
      static_cast<Eigen::Index>(ev.size()) != d) {
    throw Error("pca json: array sizes inconsistent with dims");
  }
  m.standardize = j.value("standardize", false);
  m.mean = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), D);
  m.components.resize(D, d);
  for (Eigen::Index i = 0; i < D; ++i)
    for (Eigen::Index k = 0; k < d; ++k) m.components(i, k) = comps[static_cast<std::size_t>(i * d + k)];
  m.explained_variance = Eigen::Map<const Eigen::VectorXd>(ev.data(), d);
  return m;
}

inline void save_pca(const PcaModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << pca_to_json(m).dump(1) << '\n';
}

inline PcaModel load_pca(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open PCA model '" + path + "'");
  return pca_from_json(json::parse(in));
}

}  // namespace setflow

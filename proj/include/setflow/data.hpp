#pragma once

// MIL bag representation, JSONL persistence, stratified splitting, the
// synthetic toy-bag generator and empirical bag-shape statistics.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "setflow/rng.hpp"
#include "setflow/tensor.hpp"

namespace setflow {

using json = nlohmann::json;

inline constexpr const char* kBagSchema = "setflow-bags-v1";

enum class Stream : std::uint8_t { Global = 0, Local = 1 };
enum class Label : std::uint8_t { Negative = 0, Positive = 1 };

inline constexpr std::size_t kNumStreams = 2;

inline std::size_t index_of(Stream s) { return static_cast<std::size_t>(s); }
inline std::size_t index_of(Label y) { return static_cast<std::size_t>(y); }

inline const char* to_string(Stream s) {
  return s == Stream::Global ? "global" : "local";
}

inline Stream parse_stream(const std::string& s) {
  if (s == "global") return Stream::Global;
  if (s == "local") return Stream::Local;
  throw Error("unknown stream '" + s + "'");
}

inline Label label_from_int(long v) {
  if (v == 0) return Label::Negative;
  if (v == 1) return Label::Positive;
  throw Error("label must be 0 or 1, got " + std::to_string(v));
}

struct Instance {
  std::vector<double> vector;
  Stream stream = Stream::Global;

  friend bool operator==(const Instance&, const Instance&) = default;
};

struct EmbeddingBag {
  std::vector<Instance> instances;
  Label label = Label::Negative;

  std::size_t size() const { return instances.size(); }

  std::size_t count(Stream s) const {
    return static_cast<std::size_t>(std::count_if(
        instances.begin(), instances.end(),
        [s](const Instance& i) { return i.stream == s; }));
  }

  friend bool operator==(const EmbeddingBag&, const EmbeddingBag&) = default;
};

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "";
}

struct BagDataset {
  std::vector<EmbeddingBag> bags;
  std::size_t dim = 0;
  json meta = json::object();

  std::size_t size() const { return bags.size(); }

  std::size_t count(Label y) const {
    return static_cast<std::size_t>(std::count_if(
        bags.begin(), bags.end(), [y](const EmbeddingBag& b) { return b.label == y; }));
  }

  std::size_t instance_count() const {
    std::size_t n = 0;
    for (const auto& b : bags) n += b.size();
    return n;
  }

  // Checks every bag invariant; throws naming the first offending bag.
  void validate() const {
    if (dim == 0) throw Error("dataset dim must be positive");
    for (std::size_t i = 0; i < bags.size(); ++i) {
      const auto& bag = bags[i];
      if (bag.instances.empty()) {
        throw Error("bag " + std::to_string(i) + " has no instances");
      }
      if (bag.count(Stream::Global) == 0) {
        throw Error("bag " + std::to_string(i) + " has no global instance");
      }
      for (const auto& inst : bag.instances) {
        if (inst.vector.size() != dim) {
          throw Error("bag " + std::to_string(i) + " has an instance of dim " +
                      std::to_string(inst.vector.size()) + ", dataset dim is " +
                      std::to_string(dim));
        }
        for (double v : inst.vector) {
          if (!std::isfinite(v)) {
            throw Error("bag " + std::to_string(i) + " has a non-finite value");
          }
        }
      }
    }
  }

  friend bool operator==(const BagDataset& a, const BagDataset& b) {
    return a.dim == b.dim && a.bags == b.bags;
  }
};

// --- persistence ----------------------------------------------------------

inline json bag_to_json(const EmbeddingBag& bag) {
  json inst = json::array();
  for (const auto& i : bag.instances) {
    inst.push_back({{"stream", to_string(i.stream)}, {"v", i.vector}});
  }
  return {{"label", static_cast<int>(bag.label)}, {"instances", std::move(inst)}};
}

inline void save_dataset(const BagDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  json header = {{"schema", kBagSchema}, {"dim", ds.dim}, {"meta", ds.meta}};
  out << header.dump() << '\n';
  for (const auto& bag : ds.bags) out << bag_to_json(bag).dump() << '\n';
  if (!out) throw Error("write to '" + path + "' failed");
}

inline BagDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  BagDataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(where + ": malformed JSON (" + e.what() + ")");
    }
    try {
      if (!have_header) {
        if (j.value("schema", std::string()) != kBagSchema) {
          throw Error(where + ": expected header with schema '" + kBagSchema + "'");
        }
        ds.dim = j.at("dim").get<std::size_t>();
        if (ds.dim == 0) throw Error(where + ": dim must be positive");
        ds.meta = j.value("meta", json::object());
        have_header = true;
        continue;
      }
      EmbeddingBag bag;
      bag.label = label_from_int(j.at("label").get<long>());
      for (const auto& ji : j.at("instances")) {
        Instance inst;
        inst.stream = parse_stream(ji.at("stream").get<std::string>());
        inst.vector = ji.at("v").get<std::vector<double>>();
        bag.instances.push_back(std::move(inst));
      }
      const std::size_t idx = ds.bags.size();
      for (const auto& inst : bag.instances) {
        if (inst.vector.size() != ds.dim) {
          throw Error(where + ": bag " + std::to_string(idx) + " has dim " +
                      std::to_string(inst.vector.size()) + ", expected " +
                      std::to_string(ds.dim));
        }
      }
      ds.bags.push_back(std::move(bag));
    } catch (const json::exception& e) {
      throw Error(where + ": invalid record (" + e.what() + ")");
    } catch (const Error& e) {
      const std::string msg = e.what();
      if (msg.rfind(where, 0) == 0) throw;
      throw Error(where + ": " + msg);
    }
  }
  if (!have_header) throw Error(path + ": missing header line");
  ds.validate();
  return ds;
}

// --- splitting ------------------------------------------------------------

struct DatasetSplits {
  BagDataset train, val, test;
  // Indices into the source dataset, ascending within each split.
  std::vector<std::size_t> train_ids, val_ids, test_ids;
};

inline DatasetSplits split_dataset(const BagDataset& ds,
                                   std::array<double, 3> fractions,
                                   std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw Error("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw Error("split fractions sum to " + std::to_string(total) + ", not 1");
  }
  Rng rng(seed);
  std::array<std::vector<std::size_t>, 3> ids;
  for (Label y : {Label::Negative, Label::Positive}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.bags.size(); ++i) {
      if (ds.bags[i].label == y) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < 3) {
      throw Error("class " + std::to_string(index_of(y)) + " has " +
                  std::to_string(members.size()) + " bags, fewer than 3 splits");
    }
    std::shuffle(members.begin(), members.end(), rng);
    // Largest-remainder apportionment, then at least one bag per split.
    const double n = static_cast<double>(members.size());
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double exact = fractions[s] * n;
      counts[s] = static_cast<std::size_t>(std::floor(exact));
      rem[s] = exact - std::floor(exact);
      assigned += counts[s];
    }
    while (assigned < members.size()) {
      const auto s = static_cast<std::size_t>(
          std::max_element(rem.begin(), rem.end()) - rem.begin());
      counts[s] += 1;
      rem[s] = -1.0;
      assigned += 1;
    }
    for (int s = 0; s < 3; ++s) {
      while (counts[s] == 0) {
        auto big = std::max_element(counts.begin(), counts.end());
        *big -= 1;
        counts[s] += 1;
      }
    }
    std::size_t off = 0;
    for (int s = 0; s < 3; ++s) {
      ids[s].insert(ids[s].end(), members.begin() + off, members.begin() + off + counts[s]);
      off += counts[s];
    }
  }
  DatasetSplits out;
  std::array<BagDataset*, 3> dst = {&out.train, &out.val, &out.test};
  std::array<std::vector<std::size_t>*, 3> dst_ids = {&out.train_ids, &out.val_ids, &out.test_ids};
  const std::array<Split, 3> tags = {Split::Train, Split::Val, Split::Test};
  for (int s = 0; s < 3; ++s) {
    std::sort(ids[s].begin(), ids[s].end());
    dst[s]->dim = ds.dim;
    dst[s]->meta = ds.meta;
    dst[s]->meta["split"] = to_string(tags[s]);
    for (std::size_t i : ids[s]) dst[s]->bags.push_back(ds.bags[i]);
    *dst_ids[s] = ids[s];
  }
  return out;
}

// --- toy generator --------------------------------------------------------

// Controlled stand-in for encoder embeddings. Structure lives in a
// `latent_dim` subspace of `dim`, embedded by a random orthonormal map:
//   global = mu_G + y * class_shift * c + global_scale * eps
//   local  = mu_L + local_scale * (sqrt(rho) * anchor_bag + sqrt(1-rho) * eps)
//            (+ signal_shift * s for the first `signal_locals` locals of a
//             positive bag)
// with mu_G = +stream_offset/2 * u and mu_L = -stream_offset/2 * u.
struct ToySpec {
  std::size_t num_bags = 500;
  std::size_t dim = 32;
  std::size_t latent_dim = 6;
  double positive_fraction = 0.5;
  double class_shift = 4.0;
  double stream_offset = 10.0;
  double global_scale = 0.5;
  double local_scale = 0.7;
  double local_correlation = 0.7;
  std::size_t signal_locals = 1;
  double signal_shift = 2.0;
  double noise_scale = 0.05;
  std::map<std::size_t, double> global_count_probs = {{1, 0.3}, {2, 0.7}};
  double local_ratio_mean = 1.5;
  double local_ratio_std = 0.5;

  void validate() const {
    if (num_bags == 0 || dim == 0 || latent_dim == 0 || latent_dim > dim) {
      throw Error("toy spec: counts/dims must be positive with latent_dim <= dim");
    }
    if (positive_fraction < 0.0 || positive_fraction > 1.0) {
      throw Error("toy spec: positive_fraction must lie in [0,1]");
    }
    if (local_correlation < 0.0 || local_correlation > 1.0) {
      throw Error("toy spec: local_correlation must lie in [0,1]");
    }
    if (global_scale < 0 || local_scale < 0 || noise_scale < 0 || local_ratio_std < 0) {
      throw Error("toy spec: scales must be nonnegative");
    }
    double mass = 0.0;
    for (auto [k, p] : global_count_probs) {
      if (k == 0 || p < 0) throw Error("toy spec: invalid global count histogram");
      mass += p;
    }
    if (!(mass > 0)) throw Error("toy spec: global count histogram has no mass");
  }
};

inline void to_json(json& j, const ToySpec& s) {
  json hist = json::object();
  for (auto [k, p] : s.global_count_probs) hist[std::to_string(k)] = p;
  j = {{"num_bags", s.num_bags},
       {"dim", s.dim},
       {"latent_dim", s.latent_dim},
       {"positive_fraction", s.positive_fraction},
       {"class_shift", s.class_shift},
       {"stream_offset", s.stream_offset},
       {"global_scale", s.global_scale},
       {"local_scale", s.local_scale},
       {"local_correlation", s.local_correlation},
       {"signal_locals", s.signal_locals},
       {"signal_shift", s.signal_shift},
       {"noise_scale", s.noise_scale},
       {"global_count_probs", hist},
       {"local_ratio_mean", s.local_ratio_mean},
       {"local_ratio_std", s.local_ratio_std}};
}

inline void from_json(const json& j, ToySpec& s) {
  ToySpec d;
  s.num_bags = j.value("num_bags", d.num_bags);
  s.dim = j.value("dim", d.dim);
  s.latent_dim = j.value("latent_dim", d.latent_dim);
  s.positive_fraction = j.value("positive_fraction", d.positive_fraction);
  s.class_shift = j.value("class_shift", d.class_shift);
  s.stream_offset = j.value("stream_offset", d.stream_offset);
  s.global_scale = j.value("global_scale", d.global_scale);
  s.local_scale = j.value("local_scale", d.local_scale);
  s.local_correlation = j.value("local_correlation", d.local_correlation);
  s.signal_locals = j.value("signal_locals", d.signal_locals);
  s.signal_shift = j.value("signal_shift", d.signal_shift);
  s.noise_scale = j.value("noise_scale", d.noise_scale);
  s.local_ratio_mean = j.value("local_ratio_mean", d.local_ratio_mean);
  s.local_ratio_std = j.value("local_ratio_std", d.local_ratio_std);
  if (j.contains("global_count_probs")) {
    s.global_count_probs.clear();
    for (auto& [k, v] : j.at("global_count_probs").items()) {
      s.global_count_probs[std::stoul(k)] = v.get<double>();
    }
  } else {
    s.global_count_probs = d.global_count_probs;
  }
}

namespace detail {

inline std::size_t draw_from_histogram(const std::map<std::size_t, double>& hist,
                                       Rng& rng) {
  double mass = 0.0;
  for (auto [k, p] : hist) mass += p;
  double u = uniform01(rng) * mass;
  for (auto [k, p] : hist) {
    if (u < p) return k;
    u -= p;
  }
  return hist.rbegin()->first;
}

inline Eigen::VectorXd random_unit(std::size_t n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = standard_normal(rng);
  return v.normalized();
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

}  // namespace detail

inline BagDataset make_toy_dataset(const ToySpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const std::size_t D = spec.dim, m = spec.latent_dim;

  Eigen::MatrixXd gauss(D, m);
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t j = 0; j < m; ++j) gauss(i, j) = standard_normal(rng);
  const Eigen::MatrixXd embed =
      Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ() * Eigen::MatrixXd::Identity(D, m);

  const Eigen::VectorXd u = detail::random_unit(m, rng);
  Eigen::VectorXd c = detail::random_unit(m, rng);
  if (m > 1) c = (c - c.dot(u) * u).normalized();
  const Eigen::VectorXd s = detail::random_unit(m, rng);

  const Eigen::VectorXd mu_g = 0.5 * spec.stream_offset * u;
  const Eigen::VectorXd mu_l = -0.5 * spec.stream_offset * u;
  const Eigen::VectorXd shift_y = spec.class_shift * c;
  const Eigen::VectorXd shift_sig = spec.signal_shift * s;

  const auto n_pos = static_cast<std::size_t>(
      std::llround(spec.positive_fraction * static_cast<double>(spec.num_bags)));
  std::vector<Label> labels(spec.num_bags, Label::Negative);
  std::fill_n(labels.begin(), n_pos, Label::Positive);
  std::shuffle(labels.begin(), labels.end(), rng);

  const double sq_rho = std::sqrt(spec.local_correlation);
  const double sq_1rho = std::sqrt(1.0 - spec.local_correlation);

  auto lift = [&](const Eigen::VectorXd& z) {
    Eigen::VectorXd x = embed * z;
    for (std::size_t i = 0; i < D; ++i) x[i] += spec.noise_scale * standard_normal(rng);
    return detail::to_std(x);
  };
  auto noise = [&](std::size_t n) {
    Eigen::VectorXd e(n);
    for (std::size_t i = 0; i < n; ++i) e[i] = standard_normal(rng);
    return e;
  };

  BagDataset ds;
  ds.dim = D;
  for (std::size_t b = 0; b < spec.num_bags; ++b) {
    EmbeddingBag bag;
    bag.label = labels[b];
    const double y = bag.label == Label::Positive ? 1.0 : 0.0;
    const std::size_t n_global = detail::draw_from_histogram(spec.global_count_probs, rng);
    const double ratio = std::max(0.0, spec.local_ratio_mean + spec.local_ratio_std * standard_normal(rng));
    const auto n_local = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_global)));
    for (std::size_t g = 0; g < n_global; ++g) {
      Eigen::VectorXd z = mu_g + y * shift_y + spec.global_scale * noise(m);
      bag.instances.push_back({lift(z), Stream::Global});
    }
    const Eigen::VectorXd anchor = noise(m);
    for (std::size_t l = 0; l < n_local; ++l) {
      Eigen::VectorXd z = mu_l + spec.local_scale * (sq_rho * anchor + sq_1rho * noise(m));
      if (y > 0 && l < spec.signal_locals) z += shift_sig;
      bag.instances.push_back({lift(z), Stream::Local});
    }
    ds.bags.push_back(std::move(bag));
  }

  json truth = {
      {"global_mean", detail::to_std(embed * mu_g)},
      {"local_mean", detail::to_std(embed * mu_l)},
      {"class_shift_vector", detail::to_std(embed * shift_y)},
      {"signal_shift_vector", detail::to_std(embed * shift_sig)},
  };
  ds.meta = {{"generator", "toy"}, {"seed", seed}, {"spec", spec}, {"truth", truth}};
  return ds;
}

// --- bag-shape statistics -------------------------------------------------

struct BagShapeStats {
  std::map<std::size_t, double> global_count_probs;
  double ratio_mean = 0.0;
  double ratio_std = 0.0;
};

inline void to_json(json& j, const BagShapeStats& s) {
  json hist = json::object();
  for (auto [k, p] : s.global_count_probs) hist[std::to_string(k)] = p;
  j = {{"global_count_probs", hist}, {"ratio_mean", s.ratio_mean}, {"ratio_std", s.ratio_std}};
}

inline void from_json(const json& j, BagShapeStats& s) {
  s.global_count_probs.clear();
  for (auto& [k, v] : j.at("global_count_probs").items()) {
    s.global_count_probs[std::stoul(k)] = v.get<double>();
  }
  s.ratio_mean = j.at("ratio_mean").get<double>();
  s.ratio_std = j.at("ratio_std").get<double>();
}

inline BagShapeStats fit_bag_shape_stats(const BagDataset& ds) {
  if (ds.bags.empty()) throw Error("fit_bag_shape_stats: empty dataset");
  BagShapeStats st;
  std::map<std::size_t, std::size_t> counts;
  std::vector<double> ratios;
  for (const auto& bag : ds.bags) {
    const std::size_t g = bag.count(Stream::Global);
    if (g == 0) throw Error("fit_bag_shape_stats: bag without global instance");
    counts[g] += 1;
    ratios.push_back(static_cast<double>(bag.count(Stream::Local)) / static_cast<double>(g));
  }
  const double n = static_cast<double>(ds.bags.size());
  for (auto [k, c] : counts) st.global_count_probs[k] = static_cast<double>(c) / n;
  double mean = 0.0;
  for (double r : ratios) mean += r;
  mean /= n;
  double ss = 0.0;
  for (double r : ratios) ss += (r - mean) * (r - mean);
  st.ratio_mean = mean;
  st.ratio_std = ratios.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return st;
}

// --- helpers ----------------------------------------------------------------

// Row-stacks the vectors of every instance accepted by `keep`.
inline Eigen::MatrixXd stack_instances(
    const BagDataset& ds,
    const std::function<bool(const EmbeddingBag&, const Instance&)>& keep = {}) {
  std::size_t n = 0;
  for (const auto& bag : ds.bags)
    for (const auto& inst : bag.instances)
      if (!keep || keep(bag, inst)) ++n;
  Eigen::MatrixXd out(n, ds.dim);
  std::size_t r = 0;
  for (const auto& bag : ds.bags)
    for (const auto& inst : bag.instances)
      if (!keep || keep(bag, inst)) {
        for (std::size_t j = 0; j < ds.dim; ++j) out(r, j) = inst.vector[j];
        ++r;
      }
  return out;
}

}  // namespace setflow

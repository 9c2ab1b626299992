// Acceptance gate: one PASS/FAIL line per criterion; exit status 1 if any fail.
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <utility>

#include "setflow/setflow.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace setflow;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const std::string& title, Outcome& o) {
  if (!o.pass) ++failures;
  std::cout << "criterion " << id << " (" << title << "): " << (o.pass ? "PASS" : "FAIL") << " |"
            << o.detail.str() << std::endl;
}

template <class F>
void run(int id, const std::string& title, F&& body) {
  Outcome o;
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  report(id, title, o);
}

std::pair<SetFlowModel, BatchedBags> gradient_network_case(std::uint64_t seed) {
  SetFlowModel m = testing::randomized_model(testing::tiny_config(), derive_seed(seed, 7));
  Rng rng(derive_seed(seed, 8));
  BatchedBags b = make_batch({testing::random_bag(2 + rng() % 3, 3, Label::Positive, rng),
                              testing::random_bag(2 + rng() % 4, 3, Label::Negative, rng)},
                             3, {uniform01(rng), uniform01(rng)});
  return {std::move(m), std::move(b)};
}

void gradients(Outcome& o) {
  const auto t0 = Clock::now();
  double worst_op = 0.0, worst_net = 0.0;
  std::string worst_name;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (auto& c : testing::op_gradient_cases(seed)) {
      const double e = testing::gradient_check(c.f, c.inputs);
      if (e > worst_op) {
        worst_op = e;
        worst_name = c.name;
      }
    }
    const auto [m, b] = gradient_network_case(seed);
    worst_net = std::max(worst_net, testing::network_gradient_check(m, b, seed));
  }
  const double secs = seconds_since(t0);
  // Reported only: the same network cases against an extrapolated difference
  // with h = 1e-3, which is not limited by roundoff on tiny derivatives.
  double worst_extrapolated = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [m, b] = gradient_network_case(seed);
    worst_extrapolated = std::max(worst_extrapolated, testing::network_gradient_check(m, b, seed, 1e-3, true));
  }
  o.detail << " max rel err ops " << worst_op << " (" << worst_name << "), network " << worst_net
           << ", 100 seeds in " << secs << " s; network vs extrapolated difference " << worst_extrapolated;
  o.require(worst_op < 1e-4, "op error < 1e-4");
  o.require(worst_net < 1e-4, "network error < 1e-4");
  o.require(secs < 120.0, "runtime < 2 min");
}

void equivariance(Outcome& o) {
  SetFlowConfig cfg;
  cfg.d_in = 8;
  cfg.d_hidden = 64;
  cfg.d_isab = 16;
  const SetFlowModel m = testing::randomized_model(cfg, 11);
  Rng rng(12);
  double worst_perm = 0.0, worst_pad = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 11;
    const EmbeddingBag bag = testing::random_bag(n, 8, trial % 2 ? Label::Positive : Label::Negative, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    EmbeddingBag pb;
    pb.label = bag.label;
    for (std::size_t i : perm) pb.instances.push_back(bag.instances[i]);
    const double t = uniform01(rng);
    const Tensor a = velocity(m, make_batch({bag}, 8, {t}));
    const Tensor b = velocity(m, make_batch({pb}, 8, {t}));
    const EmbeddingBag longer = testing::random_bag(n + 1 + rng() % 6, 8, Label::Positive, rng);
    const Tensor padded = velocity(m, make_batch({longer, bag}, 8, {uniform01(rng), t}));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < 8; ++k) {
        worst_perm = std::max(worst_perm, std::abs(b.at(0, i, k) - a.at(0, perm[i], k)));
        worst_pad = std::max(worst_pad, std::abs(padded.at(1, i, k) - a.at(0, i, k)));
      }
  }
  o.detail << " 50 bags, max permutation deviation " << worst_perm << ", max padding deviation " << worst_pad;
  o.require(worst_perm < 1e-9, "permutation < 1e-9");
  o.require(worst_pad < 1e-9, "padding < 1e-9");
}

void fid_oracles(Outcome& o) {
  Rng rng(21);
  auto spd = [&](Eigen::Index d) {
    Eigen::MatrixXd a(d, d);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = standard_normal(rng);
    return Eigen::MatrixXd(a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d));
  };
  auto vec = [&](Eigen::Index d) {
    Eigen::VectorXd v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = standard_normal(rng);
    return v;
  };
  double identical = 0, shift = 0, rotation = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index d = 2 + trial % 7;
    const GaussianMoments a{vec(d), spd(d), 10};
    identical = std::max(identical, frechet_distance(a, a));
    const Eigen::VectorXd delta = vec(d);
    const GaussianMoments s{a.mean + delta, a.cov, 10};
    shift = std::max(shift, std::abs(frechet_distance(a, s) - delta.squaredNorm()));
    const GaussianMoments b{vec(d), spd(d), 10};
    Eigen::MatrixXd g(d, d);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = standard_normal(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    const GaussianMoments ra{q * a.mean, q * a.cov * q.transpose(), 10};
    const GaussianMoments rb{q * b.mean, q * b.cov * q.transpose(), 10};
    rotation = std::max(rotation, std::abs(frechet_distance(ra, rb) - frechet_distance(a, b)));
  }
  const GaussianMoments one{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 1.0), 10};
  const GaussianMoments four{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 4.0), 10};
  const double scalar = std::abs(frechet_distance(one, four) - 1.0);
  o.detail << " identical " << identical << ", shift err " << shift << ", 1-D err " << scalar << ", rotation err "
           << rotation;
  o.require(identical <= 1e-8, "identical moments");
  o.require(shift <= 1e-8, "mean shift");
  o.require(scalar <= 1e-10, "1-D closed form");
  o.require(rotation <= 1e-6, "rotation invariance");
}

void rk2(Outcome& o) {
  auto decay = [](std::size_t steps) {
    const Tensor x = rk2_integrate(Tensor({1}, 1.0), [](const Tensor& v, double) {
      Tensor out(v.shape());
      out[0] = -v[0];
      return out;
    }, steps);
    return std::abs(x[0] - std::exp(-1.0));
  };
  const double e200 = decay(200), e100 = decay(100);
  o.detail << " |x(1) - 1/e| = " << e200 << " at 200 steps, error ratio 100/200 steps = " << e100 / e200;
  o.require(e200 < 1e-4, "error < 1e-4");
  o.require(e100 / e200 >= 3.0 && e100 / e200 <= 5.0, "ratio in [3,5]");
}

void pca(Outcome& o) {
  double recon = 0, ortho = 0;
  bool monotone = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Eigen::Index n = 300, D = 24, r = 3 + static_cast<Eigen::Index>(seed % 5);
    Eigen::MatrixXd z(n, r), basis(r, D), offset(1, D);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = standard_normal(rng);
    for (Eigen::Index i = 0; i < basis.size(); ++i) basis.data()[i] = standard_normal(rng);
    for (Eigen::Index i = 0; i < D; ++i) offset(0, i) = 5.0 * standard_normal(rng);
    const Eigen::MatrixXd x = (z * basis).rowwise() + offset.row(0);
    const PcaModel m = fit_pca(x, static_cast<std::size_t>(r));
    recon = std::max(recon, (pca_inverse_transform(m, pca_transform(m, x)) - x).cwiseAbs().maxCoeff());
    ortho = std::max(ortho, (m.components.transpose() * m.components - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff());
    for (Eigen::Index k = 1; k < r; ++k) monotone = monotone && m.explained_variance[k] <= m.explained_variance[k - 1];
  }
  o.detail << " max reconstruction err " << recon << ", orthonormality err " << ortho
           << ", variance monotone " << (monotone ? "yes" : "no");
  o.require(recon < 1e-6, "reconstruction < 1e-6");
  o.require(ortho < 1e-8, "orthonormality < 1e-8");
  o.require(monotone, "monotone explained variance");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

int main() {
  std::cout.precision(4);
  run(1, "gradient correctness", gradients);
  run(2, "permutation equivariance", equivariance);
  run(3, "FID oracles", fid_oracles);
  run(4, "RK2 integrator", rk2);

  const fs::path config = fs::path(SETFLOW_SOURCE_DIR) / "configs" / "toy.json";
  const fs::path base = fs::temp_directory_path() / "setflow_acceptance";
  fs::remove_all(base);
  json summary[2];
  double run_secs[2] = {0, 0};
  std::string run_error;
  for (int i = 0; i < 2; ++i) {
    const auto t0 = Clock::now();
    try {
      Pipeline p(config_from_json(read_json_file(config.string())), base / ("run" + std::to_string(i)));
      summary[i] = p.full_run();
    } catch (const std::exception& e) {
      run_error = e.what();
      break;
    }
    run_secs[i] = seconds_since(t0);
  }
  auto need_run = [&](Outcome& o) {
    if (!run_error.empty()) throw Error("full-run failed: " + run_error);
    (void)o;
  };

  run(5, "toy end-to-end", [&](Outcome& o) {
    need_run(o);
    const json& tr = summary[0]["train"];
    const FidReport f = [&] {
      const json& j = summary[0]["fid"];
      auto v = [&](const char* k) { return j.at(k).get<double>(); };
      return FidReport{v("internal_original"), v("internal_synthetic"), v("interstream_original"),
                       v("interstream_synthetic"), v("interclass_original"), v("interclass_synthetic"),
                       v("wrt_original")};
    }();
    const double reduction = tr["fid_reduction"].get<double>();
    o.detail << " run " << run_secs[0] << " s, monitored FID " << tr["fid_initial"].get<double>() << " -> "
             << tr["fid_best"].get<double>() << " (reduction " << 100 * reduction << "%)";
    o.require(run_secs[0] <= 600.0, "runtime <= 10 min");
    o.require(reduction >= 0.8, "FID reduction >= 80%");
    const double tiers[2][3] = {{f.internal_original, f.interclass_original, f.interstream_original},
                                {f.internal_synthetic, f.interclass_synthetic, f.interstream_synthetic}};
    const char* names[2] = {"original", "synthetic"};
    for (int c = 0; c < 2; ++c) {
      const double r1 = tiers[c][1] / tiers[c][0], r2 = tiers[c][2] / tiers[c][1];
      o.detail << "; " << names[c] << " internal " << tiers[c][0] << " interclass " << tiers[c][1]
               << " interstream " << tiers[c][2] << " (tier ratios " << r1 << ", " << r2 << ")";
      o.require(r1 >= 3.0 && r2 >= 3.0, std::string(names[c]) + " tier ratios >= 3");
    }
    const double rc = f.interclass_synthetic / f.interclass_original;
    const double rs = f.interstream_synthetic / f.interstream_original;
    o.detail << "; synthetic/original interclass " << rc << " interstream " << rs;
    o.require(rc >= 0.1 && rc <= 10.0 && rs >= 0.1 && rs <= 10.0, "same order of magnitude");
  });

  run(6, "NN diversity pattern", [&](Outcome& o) {
    need_run(o);
    const json& n = summary[0]["nn"];
    const double io = n.at("internal_original").get<double>(), is = n.at("internal_synthetic").get<double>(),
                 so = n.at("synthetic_to_original").get<double>();
    o.detail << " internal original " << io << ", internal synthetic " << is << ", synthetic->original " << so;
    o.require(is >= io, "internal synthetic >= internal original");
    o.require(so >= io, "synthetic->original >= internal original");
  });

  run(7, "downstream protocol", [&](Outcome& o) {
    need_run(o);
    const json& c = summary[0]["classifier"];
    const double a = c.at("original").at("auc").get<double>(), b = c.at("combined").at("auc").get<double>(),
                 s = c.at("synthetic").at("auc").get<double>();
    o.detail << " AUC original " << a << ", combined " << b << ", synthetic " << s << " (+"
             << c["added_positive"].get<std::size_t>() << " pos / +" << c["added_negative"].get<std::size_t>()
             << " neg)";
    o.require(a >= 0.9, "original AUC >= 0.9");
    o.require(b >= a - 0.03, "combined >= original - 0.03");
    o.require(s >= a - 0.10, "synthetic >= original - 0.10");
  });

  run(8, "PCA", pca);

  run(9, "determinism", [&](Outcome& o) {
    need_run(o);
    const fs::path a = base / "run0", b = base / "run1";
    std::size_t files = 0;
    for (const char* f : {"dataset.jsonl", "train.jsonl", "val.jsonl", "test.jsonl", "synthetic.jsonl", "pca.json",
                          "checkpoint.json", "shape_stats.json", "train_loss.csv", "train_fid.csv"}) {
      const std::string x = slurp(a / f);
      o.require(!x.empty() && x == slurp(b / f), std::string(f) + " bit-identical");
      ++files;
    }
    std::size_t reports = 0;
    for (const char* f : {"fid_report.json", "nn_report.json", "classifier_metrics.json", "train_log.json",
                          "summary.json"}) {
      o.require(read_json_file((a / f).string()) == read_json_file((b / f).string()), std::string(f) + " equal");
      ++reports;
    }
    o.require(summary[0] == summary[1], "in-memory summaries equal");
    o.detail << " " << files << " data files byte-identical, " << reports << " reports value-identical"
             << " (second run " << run_secs[1] << " s)";
  });

  if (failures == 0) fs::remove_all(base);
  std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}

#include <gtest/gtest.h>

#include "setflow/eval.hpp"
#include "setflow/rng.hpp"

namespace setflow {
namespace {

Eigen::MatrixXd gaussian(Eigen::Index n, Eigen::Index d, Rng& rng) {
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = standard_normal(rng);
  return x;
}

GaussianMoments moments(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
  return {std::move(mean), std::move(cov), 100};
}

Eigen::MatrixXd random_spd(Eigen::Index d, Rng& rng) {
  const Eigen::MatrixXd a = gaussian(d, d, rng);
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

Eigen::MatrixXd random_rotation(Eigen::Index d, Rng& rng) {
  return Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(d, d, rng)).householderQ();
}

TEST(Moments, TwoPoints) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(2, 3);
  x(0, 0) = 1;
  x(1, 0) = -1;
  const GaussianMoments g = fit_moments(x);
  EXPECT_EQ(g.n, 2u);
  EXPECT_TRUE(g.mean.isZero(0));
  Eigen::MatrixXd expect = Eigen::MatrixXd::Zero(3, 3);
  expect(0, 0) = 2;
  EXPECT_EQ(g.cov, expect);
}

TEST(Moments, DuplicatedDataset) {
  Rng rng(1);
  const Eigen::Index N = 37;
  const Eigen::MatrixXd x = gaussian(N, 4, rng);
  Eigen::MatrixXd dup(2 * N, 4);
  dup << x, x;
  const GaussianMoments a = fit_moments(x), b = fit_moments(dup);
  EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-14);
  const double factor = 2.0 * (N - 1) / (2.0 * N - 1);
  EXPECT_LT((b.cov - factor * a.cov).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Moments, StandardNormalCovariance) {
  Rng rng(2);
  const GaussianMoments g = fit_moments(gaussian(100000, 5, rng));
  EXPECT_LT((g.cov - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff(), 0.05);
  EXPECT_LT(g.mean.cwiseAbs().maxCoeff(), 0.02);
  EXPECT_LT((g.cov - g.cov.transpose()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Moments, RequiresTwoRows) {
  EXPECT_THROW(fit_moments(Eigen::MatrixXd::Zero(1, 3)), Error);
}

TEST(Frechet, IdenticalMomentsGiveZero) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = moments(gaussian(6, 1, rng), random_spd(6, rng));
    EXPECT_NEAR(frechet_distance(m, m), 0.0, 1e-8);
  }
}

TEST(Frechet, MeanShiftWithEqualCovariances) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd cov = random_spd(5, rng);
    const Eigen::VectorXd mu = gaussian(5, 1, rng), delta = gaussian(5, 1, rng);
    EXPECT_NEAR(frechet_distance(moments(mu, cov), moments(mu + delta, cov)), delta.squaredNorm(), 1e-8);
  }
}

TEST(Frechet, OneDimensionalClosedForm) {
  const auto a = moments(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 1.0));
  const auto b = moments(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 4.0));
  EXPECT_NEAR(frechet_distance(a, b), 1.0, 1e-10);
  const auto c = moments(Eigen::VectorXd::Constant(1, 0.5), Eigen::MatrixXd::Constant(1, 1, 2.25));
  const auto d = moments(Eigen::VectorXd::Constant(1, -1.0), Eigen::MatrixXd::Constant(1, 1, 0.36));
  EXPECT_NEAR(frechet_distance(c, d), 1.5 * 1.5 + (1.5 - 0.6) * (1.5 - 0.6), 1e-10);
}

TEST(Frechet, CommutingCovariancesMatchPerAxisFormula) {
  const Eigen::Vector3d va(1.0, 9.0, 0.25), vb(4.0, 1.0, 0.25);
  Rng rng(5);
  const Eigen::MatrixXd q = random_rotation(3, rng);
  const auto a = moments(Eigen::Vector3d::Zero(), q * va.asDiagonal() * q.transpose());
  const auto b = moments(Eigen::Vector3d::Zero(), q * vb.asDiagonal() * q.transpose());
  const double expect = (va.cwiseSqrt() - vb.cwiseSqrt()).squaredNorm();  // 1 + 4 + 0
  EXPECT_NEAR(frechet_distance(a, b), expect, 1e-9);
}

TEST(Frechet, SymmetricAndRotationInvariant) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = moments(gaussian(6, 1, rng), random_spd(6, rng));
    const auto b = moments(gaussian(6, 1, rng), random_spd(6, rng));
    const double ab = frechet_distance(a, b);
    EXPECT_NEAR(ab, frechet_distance(b, a), 1e-8);
    const Eigen::MatrixXd q = random_rotation(6, rng);
    const auto ra = moments(q * a.mean, q * a.cov * q.transpose());
    const auto rb = moments(q * b.mean, q * b.cov * q.transpose());
    EXPECT_NEAR(frechet_distance(ra, rb), ab, 1e-6);
  }
}

TEST(Frechet, SingularCovariancesAreClamped) {
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(3, 3);
  cov(0, 0) = 1.0;
  const auto a = moments(Eigen::Vector3d::Zero(), cov);
  const double fd = frechet_distance(a, a);
  EXPECT_GE(fd, 0.0);
  EXPECT_NEAR(fd, 0.0, 1e-8);
}

TEST(Frechet, DimensionMismatchRejected) {
  const auto a = moments(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  const auto b = moments(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3));
  EXPECT_THROW(frechet_distance(a, b), Error);
}

// Each bag holds one Global and one Local instance drawn by `draw`.
template <class Draw>
BagDataset two_stream_dataset(std::size_t bags, std::size_t d, Draw draw) {
  BagDataset ds;
  ds.dim = d;
  for (std::size_t b = 0; b < bags; ++b) {
    EmbeddingBag bag;
    bag.label = b % 2 ? Label::Positive : Label::Negative;
    for (Stream s : {Stream::Global, Stream::Local}) bag.instances.push_back({draw(bag.label, s), s});
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

TEST(FidReport, SelfComparison) {
  Rng rng(7);
  const BagDataset ds = two_stream_dataset(300, 4, [&](Label, Stream) {
    std::vector<double> v(4);
    for (double& x : v) x = standard_normal(rng);
    return v;
  });
  const FidReport r = fid_report(ds, ds, 1);
  EXPECT_LT(r.wrt_original, r.internal_original + 1e-6);
  EXPECT_NEAR(r.wrt_original, 0.0, 1e-8);
  EXPECT_EQ(r.interstream_original, r.interstream_synthetic);
  EXPECT_EQ(r.interclass_original, r.interclass_synthetic);
}

TEST(FidReport, NullStreamsMatchSplitNoise) {
  Rng rng(8);
  const BagDataset ds = two_stream_dataset(1000, 4, [&](Label, Stream) {
    std::vector<double> v(4);
    for (double& x : v) x = standard_normal(rng);
    return v;
  });
  const FidReport r = fid_report(ds, ds, 2);
  EXPECT_LT(r.interstream_original, 2.0 * r.internal_original);
  EXPECT_LT(r.internal_original, 0.05);
}

TEST(FidReport, LargeClassShiftDominatesSplitNoise) {
  Rng rng(9);
  const BagDataset ds = two_stream_dataset(400, 4, [&](Label y, Stream) {
    std::vector<double> v(4);
    for (double& x : v) x = standard_normal(rng);
    if (y == Label::Positive) v[0] += 5.0;
    return v;
  });
  const FidReport r = fid_report(ds, ds, 3);
  EXPECT_GT(r.interclass_original, 10.0 * r.internal_original);
  EXPECT_NEAR(r.interclass_original, 25.0, 2.5);
}

TEST(FidReport, MissingSubgroupIsNamed) {
  Rng rng(10);
  BagDataset ds = two_stream_dataset(20, 2, [&](Label, Stream) {
    return std::vector<double>{standard_normal(rng), standard_normal(rng)};
  });
  BagDataset negatives = ds;
  for (auto& b : negatives.bags) b.label = Label::Negative;
  try {
    fid_report(ds, negatives, 0);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("synthetic"), std::string::npos) << msg;
    EXPECT_NE(msg.find("positive-bag global"), std::string::npos) << msg;
  }
  BagDataset no_local = ds;
  for (auto& b : no_local.bags) b.instances.pop_back();
  try {
    fid_report(no_local, ds, 0);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("local"), std::string::npos) << e.what();
  }
  BagDataset wide = ds;
  wide.dim = 3;
  EXPECT_THROW(fid_report(ds, wide, 0), Error);
  EXPECT_THROW(fid_report(ds, BagDataset{{}, 2}, 0), Error);
}

TEST(FidReport, SplitSeedChangesInternalOnly) {
  Rng rng(11);
  const BagDataset ds = two_stream_dataset(200, 3, [&](Label, Stream) {
    return std::vector<double>{standard_normal(rng), standard_normal(rng), standard_normal(rng)};
  });
  const FidReport a = fid_report(ds, ds, 1), b = fid_report(ds, ds, 2);
  EXPECT_NE(a.internal_original, b.internal_original);
  EXPECT_EQ(a.interstream_original, b.interstream_original);
  EXPECT_EQ(a.interclass_original, b.interclass_original);
}

BagDataset single_bag(const Eigen::MatrixXd& x) {
  BagDataset ds;
  ds.dim = static_cast<std::size_t>(x.cols());
  EmbeddingBag bag;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::RowVectorXd row = x.row(i);
    bag.instances.push_back({std::vector<double>(row.data(), row.data() + row.size()), Stream::Global});
  }
  ds.bags.push_back(bag);
  return ds;
}

TEST(NearestNeighbour, IdenticalPointsHaveZeroInternalDistance) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Constant(2, 3, 1.5);
  EXPECT_EQ(mean_nn_distance(x, x, true), 0.0);
}

TEST(NearestNeighbour, ShiftedCopyHasCrossDistanceL) {
  Eigen::MatrixXd x(4, 2);
  x << 0, 0, 100, 0, 0, 100, 100, 100;
  const Eigen::RowVector2d shift(3.0, 4.0);
  const Eigen::MatrixXd y = x.rowwise() + shift;
  const NnReport r = nn_report(single_bag(x), single_bag(y));
  EXPECT_NEAR(r.original_to_synthetic, 5.0, 1e-12);
  EXPECT_NEAR(r.synthetic_to_original, 5.0, 1e-12);
  EXPECT_NEAR(r.internal_original, 100.0, 1e-12);
  EXPECT_NEAR(r.internal_synthetic, 100.0, 1e-12);
}

double brute_force_mean_nn(const Eigen::MatrixXd& q, const Eigen::MatrixXd& ref, bool exclude_self) {
  double total = 0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double best = std::numeric_limits<double>::max();
    for (Eigen::Index j = 0; j < ref.rows(); ++j) {
      if (exclude_self && i == j) continue;
      double d2 = 0;
      for (Eigen::Index k = 0; k < q.cols(); ++k) d2 += (q(i, k) - ref(j, k)) * (q(i, k) - ref(j, k));
      best = std::min(best, std::sqrt(d2));
    }
    total += best;
  }
  return total / static_cast<double>(q.rows());
}

TEST(NearestNeighbour, MatchesBruteForce) {
  Rng rng(12);
  const Eigen::MatrixXd a = gaussian(500, 6, rng), b = gaussian(300, 6, rng);
  EXPECT_NEAR(mean_nn_distance(a, a, true), brute_force_mean_nn(a, a, true), 1e-12);
  EXPECT_NEAR(mean_nn_distance(a, b, false), brute_force_mean_nn(a, b, false), 1e-12);
  EXPECT_NEAR(mean_nn_distance(b, a, false), brute_force_mean_nn(b, a, false), 1e-12);
}

TEST(NearestNeighbour, SwapSymmetry) {
  Rng rng(13);
  const BagDataset a = single_bag(gaussian(50, 3, rng)), b = single_bag(gaussian(70, 3, rng));
  const NnReport ab = nn_report(a, b), ba = nn_report(b, a);
  EXPECT_EQ(ab.original_to_synthetic, ba.synthetic_to_original);
  EXPECT_EQ(ab.synthetic_to_original, ba.original_to_synthetic);
  EXPECT_EQ(ab.internal_original, ba.internal_synthetic);
  EXPECT_GE(ab.original_to_synthetic, 0.0);
  EXPECT_GE(ab.synthetic_to_original, 0.0);
}

TEST(NearestNeighbour, RejectsTinyCorpora) {
  Rng rng(14);
  EXPECT_THROW(nn_report(single_bag(gaussian(1, 2, rng)), single_bag(gaussian(5, 2, rng))), Error);
  EXPECT_THROW(mean_nn_distance(Eigen::MatrixXd(0, 2), gaussian(3, 2, rng), false), Error);
}

TEST(Reports, TablesListEveryRow) {
  const std::string fid = format_fid_table(FidReport{0.1, 0.2, 30, 31, 5, 6, 0.3});
  for (const char* row : {"Internal", "Interstream", "Interclass", "W.r.t. original"}) {
    EXPECT_NE(fid.find(row), std::string::npos) << row;
  }
  const std::string nn = format_nn_table(NnReport{1, 2, 3, 4});
  for (const char* row : {"Internal (original)", "Internal (synthetic)", "Original -> Synthetic",
                          "Synthetic -> Original"}) {
    EXPECT_NE(nn.find(row), std::string::npos) << row;
  }
}

}  // namespace
}  // namespace setflow

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "setflow/data.hpp"
#include "setflow/sampler.hpp"
#include "test_util.hpp"

using namespace setflow;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "setflow_tests";
  fs::create_directories(dir);
  return dir / name;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << '\n';
}

BagDataset random_dataset(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  BagDataset ds;
  ds.dim = d;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t size = 1 + static_cast<std::size_t>(uniform01(rng) * 6);
    ds.bags.push_back(setflow::testing::random_bag(size, d, i % 2 ? Label::Positive : Label::Negative, rng));
  }
  return ds;
}

EmbeddingBag shaped_bag(std::size_t g, std::size_t l) {
  EmbeddingBag b;
  for (std::size_t i = 0; i < g; ++i) b.instances.push_back({{0.0}, Stream::Global});
  for (std::size_t i = 0; i < l; ++i) b.instances.push_back({{0.0}, Stream::Local});
  return b;
}

}  // namespace

TEST(Dataset, LoadMinimalFile) {
  const auto p = temp_path("minimal.jsonl");
  write_lines(p, {R"({"schema":"setflow-bags-v1","dim":4,"meta":{}})",
                  R"({"label":1,"instances":[{"stream":"global","v":[1,2,3,4]}]})"});
  const BagDataset ds = load_dataset(p.string());
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.dim, 4u);
  EXPECT_EQ(ds.bags[0].label, Label::Positive);
  EXPECT_EQ(ds.bags[0].instances[0].vector, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Dataset, MixedDimsNameOffendingBag) {
  const auto p = temp_path("mixed.jsonl");
  write_lines(p, {R"({"schema":"setflow-bags-v1","dim":4,"meta":{}})",
                  R"({"label":0,"instances":[{"stream":"global","v":[1,2,3,4]}]})",
                  R"({"label":0,"instances":[{"stream":"global","v":[1,2,3,4,5]}]})"});
  try {
    load_dataset(p.string());
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bag 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find(":3"), std::string::npos) << msg;
  }
}

TEST(Dataset, MalformedLineReportsLineNumber) {
  const auto p = temp_path("malformed.jsonl");
  write_lines(p, {R"({"schema":"setflow-bags-v1","dim":2,"meta":{}})",
                  R"({"label":0,"instances":[{"stream":"global","v":[1,2]}]})", R"({"label":0,"inst)"});
  try {
    load_dataset(p.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
}

TEST(Dataset, BagWithoutGlobalInstanceRejected) {
  const auto p = temp_path("noglobal.jsonl");
  write_lines(p, {R"({"schema":"setflow-bags-v1","dim":1,"meta":{}})",
                  R"({"label":0,"instances":[{"stream":"local","v":[1]}]})"});
  EXPECT_THROW(load_dataset(p.string()), Error);
}

TEST(Dataset, RoundTripIsLossless) {
  BagDataset ds = random_dataset(100, 5, 1);
  ds.bags[3].instances[0].vector[0] = 0.1 + 0.2;  // not exactly representable in short decimal
  ds.bags[4].instances[0].vector[1] = 1e-300;
  ds.meta = {{"note", "x"}};
  const auto p = temp_path("roundtrip.jsonl");
  save_dataset(ds, p.string());
  const BagDataset back = load_dataset(p.string());
  EXPECT_TRUE(back == ds);
  EXPECT_EQ(back.meta, ds.meta);
}

TEST(Split, ExactStratification) {
  BagDataset ds = random_dataset(100, 2, 2);
  const auto sp = split_dataset(ds, {0.8, 0.1, 0.1}, 7);
  EXPECT_EQ(sp.train.size(), 80u);
  EXPECT_EQ(sp.val.size(), 10u);
  EXPECT_EQ(sp.test.size(), 10u);
  EXPECT_EQ(sp.train.count(Label::Positive), 40u);
  EXPECT_EQ(sp.val.count(Label::Positive), 5u);
  EXPECT_EQ(sp.test.count(Label::Positive), 5u);
  EXPECT_EQ(sp.train.meta["split"], "train");
}

TEST(Split, DeterministicAndPartition) {
  BagDataset ds = random_dataset(57, 2, 3);
  const auto a = split_dataset(ds, {0.7, 0.15, 0.15}, 11);
  const auto b = split_dataset(ds, {0.7, 0.15, 0.15}, 11);
  EXPECT_EQ(a.train_ids, b.train_ids);
  EXPECT_EQ(a.val_ids, b.val_ids);
  EXPECT_EQ(a.test_ids, b.test_ids);
  std::vector<std::size_t> all;
  for (const auto* ids : {&a.train_ids, &a.val_ids, &a.test_ids}) all.insert(all.end(), ids->begin(), ids->end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(ds.size());
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = i;
  EXPECT_EQ(all, expect);
  for (std::size_t k = 0; k < a.train_ids.size(); ++k) EXPECT_TRUE(a.train.bags[k] == ds.bags[a.train_ids[k]]);
}

TEST(Split, ProportionsWithinOneBag) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    BagDataset ds = random_dataset(83 + seed * 7, 1, seed);
    const double pos_frac = static_cast<double>(ds.count(Label::Positive)) / static_cast<double>(ds.size());
    const auto sp = split_dataset(ds, {0.6, 0.2, 0.2}, seed);
    for (const BagDataset* part : {&sp.train, &sp.val, &sp.test}) {
      EXPECT_LE(std::abs(static_cast<double>(part->count(Label::Positive)) -
                         pos_frac * static_cast<double>(part->size())),
                1.0 + 1e-9);
    }
  }
}

TEST(Split, Errors) {
  BagDataset ds = random_dataset(10, 1, 4);
  EXPECT_THROW(split_dataset(ds, {0.5, 0.3, 0.3}, 0), Error);
  EXPECT_THROW(split_dataset(ds, {1.0, 0.0, 0.0}, 0), Error);
  BagDataset tiny = random_dataset(4, 1, 5);  // 2 bags per class
  EXPECT_THROW(split_dataset(tiny, {0.4, 0.3, 0.3}, 0), Error);
}

TEST(Toy, NoSignalNullHasEqualClassMeans) {
  ToySpec spec;
  spec.num_bags = 2000;
  spec.class_shift = 0.0;
  spec.local_correlation = 0.0;
  const BagDataset ds = make_toy_dataset(spec, 3);
  auto pos = stack_instances(ds, [](const EmbeddingBag& b, const Instance& i) {
    return i.stream == Stream::Global && b.label == Label::Positive;
  });
  auto neg = stack_instances(ds, [](const EmbeddingBag& b, const Instance& i) {
    return i.stream == Stream::Global && b.label == Label::Negative;
  });
  const Eigen::RowVectorXd diff = pos.colwise().mean() - neg.colwise().mean();
  for (Eigen::Index j = 0; j < diff.size(); ++j) {
    const double sd = std::sqrt(
        (pos.col(j).array() - pos.col(j).mean()).square().sum() / static_cast<double>(pos.rows() - 1));
    const double se = sd * std::sqrt(1.0 / static_cast<double>(pos.rows()) + 1.0 / static_cast<double>(neg.rows()));
    EXPECT_LT(std::abs(diff[j]), 3.0 * se + 1e-12) << "coordinate " << j;
  }
}

TEST(Toy, ClassShiftRecoveredWithinThreeStandardErrors) {
  ToySpec spec;
  spec.num_bags = 2000;
  const BagDataset ds = make_toy_dataset(spec, 4);
  const auto truth = ds.meta["truth"]["class_shift_vector"].get<std::vector<double>>();
  auto pos = stack_instances(ds, [](const EmbeddingBag& b, const Instance& i) {
    return i.stream == Stream::Global && b.label == Label::Positive;
  });
  auto neg = stack_instances(ds, [](const EmbeddingBag& b, const Instance& i) {
    return i.stream == Stream::Global && b.label == Label::Negative;
  });
  const Eigen::RowVectorXd diff = pos.colwise().mean() - neg.colwise().mean();
  for (Eigen::Index j = 0; j < diff.size(); ++j) {
    auto var = [&](const Eigen::MatrixXd& x) {
      return (x.col(j).array() - x.col(j).mean()).square().sum() / static_cast<double>(x.rows() - 1);
    };
    const double se = std::sqrt(var(pos) / static_cast<double>(pos.rows()) + var(neg) / static_cast<double>(neg.rows()));
    EXPECT_LT(std::abs(diff[j] - truth[static_cast<std::size_t>(j)]), 3.0 * se) << "coordinate " << j;
  }
}

TEST(Toy, WithinBagLocalCorrelationExceedsAcrossBag) {
  ToySpec spec;
  spec.num_bags = 1000;
  spec.local_correlation = 0.9;
  spec.signal_locals = 0;
  const BagDataset ds = make_toy_dataset(spec, 5);
  const auto mu = ds.meta["truth"]["local_mean"].get<std::vector<double>>();
  // Correlation of centered local vectors: within-bag pairs vs pairs of
  // locals from consecutive bags.
  auto centered = [&](const Instance& i) {
    std::vector<double> v = i.vector;
    for (std::size_t k = 0; k < v.size(); ++k) v[k] -= mu[k];
    return v;
  };
  auto corr = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      ab += a[k] * b[k];
      aa += a[k] * a[k];
      bb += b[k] * b[k];
    }
    return ab / std::sqrt(aa * bb);
  };
  double within = 0, across = 0;
  std::size_t nw = 0, na = 0;
  const Instance* prev = nullptr;
  for (const auto& bag : ds.bags) {
    std::vector<const Instance*> locals;
    for (const auto& i : bag.instances)
      if (i.stream == Stream::Local) locals.push_back(&i);
    for (std::size_t a = 0; a < locals.size(); ++a)
      for (std::size_t b = a + 1; b < locals.size(); ++b, ++nw) within += corr(centered(*locals[a]), centered(*locals[b]));
    if (prev && !locals.empty()) {
      across += corr(centered(*prev), centered(*locals[0]));
      ++na;
    }
    if (!locals.empty()) prev = locals.back();
  }
  ASSERT_GT(nw, 100u);
  ASSERT_GT(na, 100u);
  EXPECT_GT(within / static_cast<double>(nw), across / static_cast<double>(na) + 0.3);
}

TEST(Toy, BitDeterministic) {
  ToySpec spec;
  spec.num_bags = 50;
  const auto a = make_toy_dataset(spec, 9), b = make_toy_dataset(spec, 9);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == make_toy_dataset(spec, 10));
  a.validate();
}

TEST(ShapeStats, ConstantShapes) {
  BagDataset ds;
  ds.dim = 1;
  for (int i = 0; i < 5; ++i) ds.bags.push_back(shaped_bag(2, 4));
  const auto st = fit_bag_shape_stats(ds);
  EXPECT_EQ(st.global_count_probs, (std::map<std::size_t, double>{{2, 1.0}}));
  EXPECT_EQ(st.ratio_mean, 2.0);
  EXPECT_EQ(st.ratio_std, 0.0);
}

TEST(ShapeStats, SingleBagHasZeroStd) {
  BagDataset ds;
  ds.dim = 1;
  ds.bags.push_back(shaped_bag(3, 1));
  const auto st = fit_bag_shape_stats(ds);
  EXPECT_EQ(st.ratio_std, 0.0);
  EXPECT_DOUBLE_EQ(st.ratio_mean, 1.0 / 3.0);
}

TEST(ShapeStats, HandComputedTenBags) {
  // (global, local): ratios 0.5, 1, 2, 0, 1.5, 1, 3, 0.5, 2, 1
  const std::vector<std::pair<int, int>> shapes = {{2, 1}, {1, 1}, {1, 2}, {3, 0}, {2, 3},
                                                   {2, 2}, {1, 3}, {2, 1}, {1, 2}, {3, 3}};
  BagDataset ds;
  ds.dim = 1;
  for (auto [g, l] : shapes) ds.bags.push_back(shaped_bag(g, l));
  const auto st = fit_bag_shape_stats(ds);
  // Mean = 12.5 / 10; squared deviations from 1.25 sum to 7.125.
  EXPECT_DOUBLE_EQ(st.ratio_mean, 1.25);
  EXPECT_NEAR(st.ratio_std, std::sqrt(7.125 / 9.0), 1e-15);
  EXPECT_DOUBLE_EQ(st.global_count_probs.at(1), 0.4);
  EXPECT_DOUBLE_EQ(st.global_count_probs.at(2), 0.4);
  EXPECT_DOUBLE_EQ(st.global_count_probs.at(3), 0.2);
}

#pragma once

// Config-driven experiment stages. Every stage reads and writes files in one
// output directory so stages can be run separately or chained by full_run().

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "setflow/data.hpp"
#include "setflow/eval.hpp"
#include "setflow/mil.hpp"
#include "setflow/net.hpp"
#include "setflow/pca.hpp"
#include "setflow/sampler.hpp"
#include "setflow/train.hpp"

namespace setflow {

namespace fs = std::filesystem;

struct Seeds {
  std::uint64_t toy = 1;
  std::uint64_t split = 2;
  std::uint64_t model_init = 3;
  std::uint64_t train = 4;
  std::uint64_t sample = 5;
  std::uint64_t eval = 6;
  std::uint64_t classifier = 7;

  // Replaces every seed by a distinct stream of `master`.
  void override_all(std::uint64_t master) {
    std::uint64_t i = 0;
    for (std::uint64_t* s : {&toy, &split, &model_init, &train, &sample, &eval, &classifier}) {
      *s = derive_seed(master, i++);
    }
  }
};

struct ExperimentConfig {
  Seeds seeds;
  ToySpec toy;
  std::array<double, 3> split_fractions{0.7, 0.15, 0.15};
  std::size_t pca_dim = 8;
  bool pca_standardize = false;
  SetFlowConfig model;
  TrainConfig train;
  std::size_t sample_steps = 200;
  std::size_t sample_max_batch = 256;
  MilConfig classifier;
  double synthetic_fraction = 0.2;
  std::string dataset_path;  // empty: <out>/dataset.jsonl

  // Applies cross-section constraints: the network input is the PCA space and
  // stage seeds come from the seeds section.
  void resolve() {
    model.d_in = pca_dim;
    train.seed = seeds.train;
    classifier.seed = seeds.classifier;
    model.validate();
    train.validate();
    toy.validate();
    if (pca_dim == 0) throw Error("config: pca.dim must be positive");
    if (sample_steps == 0 || sample_max_batch == 0) throw Error("config: sample steps/max_batch must be positive");
    if (synthetic_fraction < 0) throw Error("config: classifier.synthetic_fraction must be nonnegative");
  }
};

inline void to_json(json& j, const ExperimentConfig& c) {
  j = {{"seeds",
        {{"toy", c.seeds.toy},
         {"split", c.seeds.split},
         {"model_init", c.seeds.model_init},
         {"train", c.seeds.train},
         {"sample", c.seeds.sample},
         {"eval", c.seeds.eval},
         {"classifier", c.seeds.classifier}}},
       {"toy", c.toy},
       {"split", {{"fractions", c.split_fractions}}},
       {"pca", {{"dim", c.pca_dim}, {"standardize", c.pca_standardize}}},
       {"model", c.model},
       {"train", c.train},
       {"sample", {{"steps", c.sample_steps}, {"max_batch", c.sample_max_batch}}},
       {"classifier", c.classifier},
       {"paths", {{"dataset", c.dataset_path}}}};
  j["classifier"]["synthetic_fraction"] = c.synthetic_fraction;
}

inline ExperimentConfig config_from_json(const json& j) {
  static const std::set<std::string> known = {"seeds", "toy",   "split",      "pca",  "model",
                                              "train", "sample", "classifier", "paths"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw Error("config: unknown section '" + k + "'");
  }
  ExperimentConfig c;
  const json seeds = j.value("seeds", json::object());
  c.seeds.toy = seeds.value("toy", c.seeds.toy);
  c.seeds.split = seeds.value("split", c.seeds.split);
  c.seeds.model_init = seeds.value("model_init", c.seeds.model_init);
  c.seeds.train = seeds.value("train", c.seeds.train);
  c.seeds.sample = seeds.value("sample", c.seeds.sample);
  c.seeds.eval = seeds.value("eval", c.seeds.eval);
  c.seeds.classifier = seeds.value("classifier", c.seeds.classifier);
  if (j.contains("toy")) c.toy = j.at("toy").get<ToySpec>();
  if (j.contains("split")) c.split_fractions = j.at("split").value("fractions", c.split_fractions);
  if (j.contains("pca")) {
    c.pca_dim = j.at("pca").value("dim", c.pca_dim);
    c.pca_standardize = j.at("pca").value("standardize", c.pca_standardize);
  }
  if (j.contains("model")) c.model = j.at("model").get<SetFlowConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("sample")) {
    c.sample_steps = j.at("sample").value("steps", c.sample_steps);
    c.sample_max_batch = j.at("sample").value("max_batch", c.sample_max_batch);
  }
  if (j.contains("classifier")) {
    c.classifier = j.at("classifier").get<MilConfig>();
    c.synthetic_fraction = j.at("classifier").value("synthetic_fraction", c.synthetic_fraction);
  }
  if (j.contains("paths")) c.dataset_path = j.at("paths").value("dataset", c.dataset_path);
  if (j.contains("model") && j.at("model").contains("d_in") &&
      j.at("model").at("d_in").get<std::size_t>() != c.pca_dim) {
    throw Error("config: model.d_in must equal pca.dim");
  }
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path + ": " + e.what());
  }
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline void write_json_file(const fs::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// Paths of every artifact in an output directory.
struct RunLayout {
  fs::path dir;
  fs::path config() const { return dir / "config.resolved.json"; }
  fs::path dataset() const { return dir / "dataset.jsonl"; }
  fs::path pca() const { return dir / "pca.json"; }
  fs::path train() const { return dir / "train.jsonl"; }
  fs::path val() const { return dir / "val.jsonl"; }
  fs::path test() const { return dir / "test.jsonl"; }
  fs::path checkpoint() const { return dir / "checkpoint.json"; }
  fs::path shape_stats() const { return dir / "shape_stats.json"; }
  fs::path train_log() const { return dir / "train_log.json"; }
  fs::path loss_csv() const { return dir / "train_loss.csv"; }
  fs::path fid_csv() const { return dir / "train_fid.csv"; }
  fs::path synthetic() const { return dir / "synthetic.jsonl"; }
  fs::path fid_json() const { return dir / "fid_report.json"; }
  fs::path fid_txt() const { return dir / "fid_report.txt"; }
  fs::path nn_json() const { return dir / "nn_report.json"; }
  fs::path nn_txt() const { return dir / "nn_report.txt"; }
  fs::path classifier_json() const { return dir / "classifier_metrics.json"; }
  fs::path classifier_txt() const { return dir / "classifier_metrics.txt"; }
  fs::path summary() const { return dir / "summary.json"; }
  fs::path failed(const std::string& stage) const { return dir / (stage + ".failed"); }
};

inline void require_file(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw Error("missing " + p.string() + " (run " + producer + " first)");
}

using Log = std::function<void(const std::string&)>;

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, fs::path out, Log log = {})
      : cfg_(std::move(cfg)), layout_{std::move(out)}, log_(std::move(log)) {
    cfg_.resolve();
    fs::create_directories(layout_.dir);
    write_json_file(layout_.config(), json(cfg_));
  }

  const ExperimentConfig& config() const { return cfg_; }
  const RunLayout& layout() const { return layout_; }

  json gen_toy() {
    const BagDataset ds = make_toy_dataset(cfg_.toy, cfg_.seeds.toy);
    save_dataset(ds, layout_.dataset().string());
    say("gen-toy: " + std::to_string(ds.size()) + " bags, " + std::to_string(ds.instance_count()) +
        " instances, dim " + std::to_string(ds.dim));
    return {{"bags", ds.size()}, {"instances", ds.instance_count()}, {"dim", ds.dim},
            {"positive", ds.count(Label::Positive)}, {"negative", ds.count(Label::Negative)}};
  }

  // Splits the raw dataset, fits PCA on the train split only and writes the
  // three reduced splits.
  json fit_pca_stage() {
    const fs::path src = cfg_.dataset_path.empty() ? layout_.dataset() : fs::path(cfg_.dataset_path);
    require_file(src, "gen-toy");
    const BagDataset raw = load_dataset(src.string());
    const DatasetSplits sp = split_dataset(raw, cfg_.split_fractions, cfg_.seeds.split);
    const PcaModel pca = fit_pca(stack_instances(sp.train), cfg_.pca_dim, cfg_.pca_standardize);
    save_pca(pca, layout_.pca().string());
    save_dataset(pca_transform(pca, sp.train), layout_.train().string());
    save_dataset(pca_transform(pca, sp.val), layout_.val().string());
    save_dataset(pca_transform(pca, sp.test), layout_.test().string());
    const Eigen::MatrixXd x = stack_instances(sp.train);
    const double total_var = cfg_.pca_standardize
                                 ? static_cast<double>(x.cols())
                                 : (x.rowwise() - x.colwise().mean()).squaredNorm() / static_cast<double>(x.rows() - 1);
    const double kept = pca.explained_variance.sum();
    say("fit-pca: " + std::to_string(cfg_.pca_dim) + " components keep " +
        std::to_string(total_var > 0 ? kept / total_var : 0.0) + " of train variance");
    return {{"train_bags", sp.train.size()},
            {"val_bags", sp.val.size()},
            {"test_bags", sp.test.size()},
            {"explained_variance", std::vector<double>(pca.explained_variance.data(),
                                                       pca.explained_variance.data() + pca.explained_variance.size())},
            {"explained_variance_fraction", total_var > 0 ? kept / total_var : 0.0}};
  }

  json train_stage() {
    require_file(layout_.train(), "fit-pca");
    const BagDataset tr = load_dataset(layout_.train().string());
    const BagDataset va = load_dataset(layout_.val().string());
    const BagShapeStats stats = fit_bag_shape_stats(tr);
    write_json_file(layout_.shape_stats(), json(stats));
    SetFlowModel init = make_setflow_model(cfg_.model, cfg_.seeds.model_init);
    const TrainResult r = train(std::move(init), tr, va, cfg_.train,
                                [&](std::size_t it, double loss, const FidPoint* p) {
                                  if (!p) return;
                                  std::ostringstream o;
                                  o << "train: iter " << it;
                                  if (it > 0) o << " loss " << loss;
                                  o << " fid " << p->fid
                                    << " internal " << p->internal_synthetic;
                                  say(o.str());
                                });
    write_text_file(layout_.loss_csv(), loss_csv(r.log));
    write_text_file(layout_.fid_csv(), fid_csv(r.log));
    json summary = train_summary(r);
    write_json_file(layout_.train_log(), summary);
    if (r.status == TrainStatus::Diverged) throw Error("training diverged: " + r.message);
    json meta = {{"best_evaluation", summary["best_evaluation"]}, {"best_iteration", summary["best_iteration"]},
                 {"seed", cfg_.seeds.train}};
    save_checkpoint(r.best, layout_.checkpoint().string(), meta);
    say(std::string("train: ") + to_string(r.status) + " after " + std::to_string(r.log.loss.size()) +
        " iterations");
    return summary;
  }

  // Generates a synthetic corpus with the train split's per-class bag counts.
  json sample_stage() {
    require_file(layout_.checkpoint(), "train");
    const SetFlowModel model = load_checkpoint(layout_.checkpoint().string());
    const BagShapeStats stats = read_json_file(layout_.shape_stats().string()).get<BagShapeStats>();
    const BagDataset tr = load_dataset(layout_.train().string());
    BagDataset syn;
    syn.dim = model.config.d_in;
    for (Label y : {Label::Negative, Label::Positive}) {
      const std::size_t n = tr.count(y);
      if (n == 0) continue;
      auto bags = generate_bags({y, n, cfg_.sample_steps, derive_seed(cfg_.seeds.sample, index_of(y))},
                                stats, model, cfg_.sample_max_batch);
      syn.bags.insert(syn.bags.end(), bags.begin(), bags.end());
    }
    syn.meta = {{"generator", "setflow"},
                {"checkpoint", layout_.checkpoint().filename().string()},
                {"steps", cfg_.sample_steps},
                {"seed", cfg_.seeds.sample}};
    syn.validate();
    save_dataset(syn, layout_.synthetic().string());
    say("sample: " + std::to_string(syn.size()) + " bags, " + std::to_string(syn.instance_count()) +
        " instances");
    return {{"bags", syn.size()}, {"instances", syn.instance_count()}};
  }

  json eval_fid_stage(const std::string& original = {}, const std::string& synthetic = {}) {
    auto [o, s] = eval_inputs(original, synthetic);
    const FidReport r = fid_report(o, s, cfg_.seeds.eval);
    write_json_file(layout_.fid_json(), json(r));
    const std::string table = format_fid_table(r);
    write_text_file(layout_.fid_txt(), table);
    say("eval-fid:\n" + table);
    return r;
  }

  json eval_nn_stage(const std::string& original = {}, const std::string& synthetic = {}) {
    auto [o, s] = eval_inputs(original, synthetic);
    const NnReport r = nn_report(o, s);
    write_json_file(layout_.nn_json(), json(r));
    const std::string table = format_nn_table(r);
    write_text_file(layout_.nn_txt(), table);
    say("eval-nn:\n" + table);
    return r;
  }

  json classify_stage() {
    require_file(layout_.checkpoint(), "train");
    const SetFlowModel model = load_checkpoint(layout_.checkpoint().string());
    const BagShapeStats stats = read_json_file(layout_.shape_stats().string()).get<BagShapeStats>();
    const BagDataset tr = load_dataset(layout_.train().string());
    const BagDataset va = load_dataset(layout_.val().string());
    const BagDataset te = load_dataset(layout_.test().string());
    BagGenerator gen = [&](Label y, std::size_t n, std::uint64_t seed) {
      return generate_bags({y, n, cfg_.sample_steps, seed}, stats, model, cfg_.sample_max_batch);
    };
    const ProtocolResult r = run_protocol(tr, va, te, gen, cfg_.classifier, cfg_.synthetic_fraction,
                                          derive_seed(cfg_.seeds.sample, 0xC1A5));
    write_json_file(layout_.classifier_json(), json(r));
    const std::string table = format_protocol_table(r);
    write_text_file(layout_.classifier_txt(), table);
    say("classify:\n" + table);
    return r;
  }

  json full_run() {
    json summary;
    summary["config"] = json(cfg_);
    summary["dataset"] = run_stage("gen-toy", [&] { return gen_toy(); });
    summary["pca"] = run_stage("fit-pca", [&] { return fit_pca_stage(); });
    summary["train"] = run_stage("train", [&] { return train_stage(); });
    summary["sample"] = run_stage("sample", [&] { return sample_stage(); });
    summary["fid"] = run_stage("eval-fid", [&] { return eval_fid_stage(); });
    summary["nn"] = run_stage("eval-nn", [&] { return eval_nn_stage(); });
    summary["classifier"] = run_stage("classify", [&] { return classify_stage(); });
    write_json_file(layout_.summary(), summary);
    return summary;
  }

  // Runs one stage; on failure leaves `<stage>.failed` holding the cause and
  // rethrows. A successful run clears a stale marker.
  json run_stage(const std::string& stage, const std::function<json()>& fn) {
    const fs::path marker = layout_.failed(stage);
    try {
      json out = fn();
      fs::remove(marker);
      return out;
    } catch (const std::exception& e) {
      const std::string cause = stage + ": " + e.what();
      std::ofstream(marker) << cause << '\n';
      throw Error(cause);
    }
  }

 private:
  void say(const std::string& msg) const {
    if (log_) log_(msg);
  }

  json train_summary(const TrainResult& r) const {
    json j;
    j["status"] = to_string(r.status);
    j["message"] = r.message;
    j["iterations"] = r.log.loss.size();
    j["first_loss"] = r.log.loss.empty() ? json(nullptr) : json(r.log.loss.front());
    j["last_loss"] = r.log.loss.empty() ? json(nullptr) : json(r.log.loss.back());
    j["fid_initial"] = r.log.fid.empty() ? json(nullptr) : json(r.log.fid.front().fid);
    if (r.log.best_evaluation) {
      const FidPoint& b = r.log.fid[*r.log.best_evaluation];
      j["best_evaluation"] = b.evaluation;
      j["best_iteration"] = b.iteration;
      j["fid_best"] = b.fid;
      j["fid_reduction"] = r.log.fid.front().fid > 0 ? 1.0 - b.fid / r.log.fid.front().fid : 0.0;
    } else {
      j["best_evaluation"] = nullptr;
      j["best_iteration"] = nullptr;
    }
    json fids = json::array();
    for (const auto& p : r.log.fid) {
      fids.push_back({{"iteration", p.iteration}, {"fid", p.fid}, {"internal_synthetic", p.internal_synthetic}});
    }
    j["evaluations"] = fids;
    return j;
  }

  std::pair<BagDataset, BagDataset> eval_inputs(const std::string& original, const std::string& synthetic) const {
    const fs::path o = original.empty() ? layout_.train() : fs::path(original);
    const fs::path s = synthetic.empty() ? layout_.synthetic() : fs::path(synthetic);
    require_file(o, "fit-pca");
    require_file(s, "sample");
    return {load_dataset(o.string()), load_dataset(s.string())};
  }

  ExperimentConfig cfg_;
  RunLayout layout_;
  Log log_;
};

}  // namespace setflow

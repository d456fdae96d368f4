// SPDX-License-Identifier: Apache-2.0
// Command-line front end: data generation, training, evaluation, checks and
// offset dumps.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dmf/check/gradcheck_suite.hpp"
#include "dmf/check/oracle_suite.hpp"
#include "dmf/dmf.hpp"

namespace fs = std::filesystem;
using namespace dmf;

namespace {

// Explicit --data / --spec override the source recorded in the checkpoint.
Dataset dataset_for(const Checkpoint& ck, const std::string& data, const std::string& spec_path) {
  if (!data.empty()) return load_dataset(data);
  if (!spec_path.empty()) return generate_synthetic(synthetic_spec_from_json(load_json(spec_path)));
  if (ck.data.is_null()) return generate_synthetic(SyntheticSpec{});
  return load_data_source(ck.data);
}

int cmd_gen_data(const std::string& spec_path, const std::string& out) {
  const SyntheticSpec spec = spec_path.empty() ? SyntheticSpec{} : synthetic_spec_from_json(load_json(spec_path));
  const Dataset ds = generate_synthetic(spec);
  save_dataset(out, ds);
  std::cout << nlohmann::json{{"out", out},
                              {"classes", ds.classes.size()},
                              {"meta_train", ds.meta_train},
                              {"meta_val", ds.meta_val},
                              {"meta_test", ds.meta_test}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_train(const std::string& config_path) {
  const RunConfig rc = run_config_from_json(load_json(config_path));
  const Dataset ds = load_data_source(data_source(rc));
  fs::create_directories(rc.out_dir);
  std::ofstream metrics(fs::path(rc.out_dir) / "metrics.jsonl");
  auto emit = [&](const nlohmann::json& j) {
    metrics << j.dump() << '\n';
    metrics.flush();
    std::cout << j.dump() << '\n';
  };
  TrainResult result;
  try {
    result = train(rc.train, ds, [&](const EpochMetrics& m) { emit(to_json(m)); });
  } catch (const DivergenceError& e) {
    std::cerr << e.what() << '\n';
    return 3;
  }
  save_checkpoint(fs::path(rc.out_dir) / "checkpoint", result.model, result.params, data_source(rc));
  EvalConfig ec;
  ec.episodes = rc.eval_episodes;
  ec.N = rc.train.N;
  ec.K = rc.train.K;
  ec.Q = rc.train.Q;
  ec.seed = rc.train.seed;
  ec.threads = rc.eval_threads;
  if (ec.episodes > 0) emit(to_json(evaluate(result.model, result.params, ds, ec)));
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& spec_path,
             const EvalConfig& ec) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = dataset_for(ck, data, spec_path);
  std::cout << to_json(evaluate(ck.model, ck.params, ds, ec)).dump() << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& op) {
  const auto results = check::run_gradcheck_suite(op);
  if (results.empty()) {
    std::cerr << "unknown op '" << op << "'; available:";
    for (const auto& c : check::gradcheck_cases()) std::cerr << ' ' << c.name;
    std::cerr << '\n';
    return 2;
  }
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed();
    std::cout << nlohmann::json{{"op", r.name},
                                {"rel_error", r.rel_error},
                                {"tolerance", r.tolerance},
                                {"worst", r.worst},
                                {"coordinates", r.coordinates},
                                {"pass", r.passed()}}
                     .dump()
              << '\n';
  }
  return ok ? 0 : 1;
}

int cmd_oracle(index_t instances) {
  bool ok = true;
  for (const auto& r : check::run_oracle_suite(instances)) {
    ok = ok && r.passed();
    std::cout << nlohmann::json{{"op", r.op},
                                {"instances", r.instances},
                                {"max_rel_error", r.max_rel_error},
                                {"tolerance", r.tolerance},
                                {"pass", r.passed()}}
                     .dump()
              << '\n';
  }
  return ok ? 0 : 1;
}

int cmd_dump_offsets(const std::string& checkpoint, const std::string& data, const std::string& spec_path,
                     std::uint64_t episode_seed, const std::string& out, index_t slot, index_t query) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = dataset_for(ck, data, spec_path);
  std::mt19937_64 rng(episode_seed);
  const Episode ep = sample_episode(ds, Split::meta_test, 5, 1, 1, rng);
  const EpisodeInput in = episode_input(ds, ep);
  NoRecordScope off;
  const OffsetField field = episode_offsets(ck.model, ck.params, in, slot, query);
  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot write " + out);
  dump_offsets(os, field);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic meta-filter alignment for few-shot classification"};
  app.require_subcommand(1);

  std::string spec_path, out_dir = "data";
  auto* gen = app.add_subcommand("gen-data", "Generate and save a synthetic few-shot dataset");
  gen->add_option("--spec", spec_path, "SyntheticSpec JSON (defaults if omitted)");
  gen->add_option("--out", out_dir, "Output directory")->required();

  std::string config_path;
  auto* tr = app.add_subcommand("train", "Episodic training, checkpoint and final evaluation");
  tr->add_option("--config", config_path, "Run config JSON")->required();

  std::string checkpoint, data;
  EvalConfig ec;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on meta-test episodes");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--episodes", ec.episodes)->default_val(500);
  ev->add_option("--n", ec.N)->default_val(5);
  ev->add_option("--k", ec.K)->default_val(1);
  ev->add_option("--q", ec.Q)->default_val(6);
  ev->add_option("--seed", ec.seed)->default_val(0);
  ev->add_option("--threads", ec.threads)->default_val(1);
  ev->add_option("--data", data, "Dataset directory from gen-data");
  ev->add_option("--spec", spec_path, "SyntheticSpec JSON to regenerate the dataset");

  std::string op;
  auto* gc = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
  gc->add_option("--op", op, "Run a single named check");

  index_t instances = 25;
  auto* orc = app.add_subcommand("oracle", "Kernels vs direct-loop references");
  orc->add_option("--instances", instances)->default_val(25);

  std::uint64_t episode_seed = 0;
  std::string out_file;
  index_t slot = 0, query = 0;
  auto* dump = app.add_subcommand("dump-offsets", "Write per-position sampling points as JSON lines");
  dump->add_option("--checkpoint", checkpoint)->required();
  dump->add_option("--episode-seed", episode_seed)->required();
  dump->add_option("--out", out_file)->required();
  dump->add_option("--data", data);
  dump->add_option("--spec", spec_path);
  dump->add_option("--slot", slot)->default_val(0);
  dump->add_option("--query", query)->default_val(0);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(spec_path, out_dir);
    if (*tr) return cmd_train(config_path);
    if (*ev) return cmd_eval(checkpoint, data, spec_path, ec);
    if (*gc) return cmd_gradcheck(op);
    if (*orc) return cmd_oracle(instances);
    if (*dump) return cmd_dump_offsets(checkpoint, data, spec_path, episode_seed, out_file, slot, query);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

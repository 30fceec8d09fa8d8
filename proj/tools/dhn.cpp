// dhn: data generation, training, evaluation, ablation grids and gradient audits.

#include "dhn/config.hpp"
#include "dhn/gradcheck.hpp"
#include "dhn/pipeline.hpp"
#include "dhn/synthdata.hpp"

#include <CLI11.hpp>
#include <spdlog/cfg/env.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

namespace {

using namespace dhn;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string split = "test";
  std::optional<std::size_t> topk;
};

RunConfig load(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.topk) c.eval.topk = *o.topk;
  c.validate();
  return c;
}

int cmd_gen_data(const Options& o) {
  RunConfig c = load(o);
  if (o.seed) c.data.seed = *o.seed;
  const std::filesystem::path dir = o.out.empty() ? c.data.dir : std::filesystem::path(o.out);
  const DatasetManifest m =
      generate_dataset(c.data.seed, c.data.n_patients, c.data.scans_per_patient, c.data.synth, dir);
  std::cout << "wrote " << dir.string() << ":";
  for (const auto& split : kSplits) std::cout << ' ' << split << '=' << m.scans.at(split).size();
  std::cout << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  RunConfig c = load(o);
  if (o.seed) c.train.seed = *o.seed;
  const TrainResult r = run_training(c, o.out.empty() ? "runs/train" : o.out);
  if (r.topk) {
    std::cout << "top-" << r.topk->selected.size() << " test metrics (mean +- std):\n";
    for (const auto& name : kMetricNames) {
      const auto& s = r.topk->metrics.at(name);
      std::cout << "  " << std::left << std::setw(18) << name << s.mean << " +- " << s.std << '\n';
    }
  }
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "eval needs a checkpoint");
  const RunConfig c = load(o);
  DhnModel model = make_model(c.model, 0);
  load_checkpoint(model.params, o.checkpoint);
  const auto scans = load_split(c.data.dir, o.split);
  const EvalReport r = evaluate(model, scans, c.eval);

  const std::filesystem::path out = o.out.empty() ? std::filesystem::path("runs/eval") : std::filesystem::path(o.out);
  std::filesystem::create_directories(out);
  std::ofstream table(out / ("metrics_" + o.split + ".csv"));
  table << "metric,value,error\n";
  table << std::setprecision(10);
  for (const auto& name : kMetricNames) {
    const double v = r.metrics.at(name);
    const auto err = r.errors.find(name);
    table << name << ',' << (std::isnan(v) ? std::string("nan") : std::to_string(v)) << ','
          << (err == r.errors.end() ? "" : err->second) << '\n';
    std::cout << std::left << std::setw(18) << name << v;
    if (err != r.errors.end()) std::cout << "  (" << err->second << ')';
    std::cout << '\n';
  }
  if (!r.froc.x.empty()) write_curve_csv(r.froc, out / ("froc_" + o.split + ".csv"));
  if (!r.afroc.x.empty()) write_curve_csv(r.afroc, out / ("afroc_" + o.split + ".csv"));
  return 0;
}

int cmd_ablation(const Options& o) {
  const RunConfig c = load(o);
  const auto rows = run_ablation(c, o.out.empty() ? "runs/ablation" : o.out);
  for (const auto& r : rows) {
    std::cout << r.phi_g << '/' << r.phi_l << ": ";
    if (r.status != "ok") {
      std::cout << r.status << '\n';
      continue;
    }
    const auto& roc = r.metrics.at("roc_auc");
    std::cout << "roc_auc " << roc.mean << " +- " << roc.std << '\n';
  }
  return 0;
}

int cmd_gradcheck(const Options& o) {
  GradcheckOptions options;
  if (o.seed) options.seed = *o.seed;
  const auto cases = standard_gradcheck_cases();
  bool ok = true;
  for (const auto& r : run_gradcheck(cases, options)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(24) << r.op << " max_rel_err "
              << r.max_relative_error << " over " << r.instances << " instances";
    if (!r.passed) std::cout << "  (" << r.detail << ')';
    std::cout << '\n';
    ok = ok && r.passed;
  }
  const IsolationReport iso = gradient_isolation_check(10, options.seed);
  std::cout << (iso.passed() ? "PASS " : "FAIL ") << "isolation over " << iso.steps
            << " steps: max |dL_g/d(local)| = " << iso.max_local_grad_from_global
            << ", max |dL_l/d(global)| = " << iso.max_global_grad_from_local
            << ", trunk coupling rel err = " << iso.max_coupling_error << '\n';
  return ok && iso.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::cfg::load_env_levels();
  CLI::App app{"Dual head network with per-head augmentation: synthetic data, training and evaluation"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", o.config, "INI run configuration"); };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", o.seed, "override the seed"); };
  auto add_out = [&](CLI::App* sub) { sub->add_option("--out", o.out, "output directory"); };
  auto add_topk = [&](CLI::App* sub) { sub->add_option("--topk", o.topk, "checkpoints in the top-k report"); };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_config(gen);
  add_seed(gen);
  add_out(gen);
  auto* train = app.add_subcommand("train", "train with DHA and evaluate every checkpoint");
  add_config(train);
  add_seed(train);
  add_out(train);
  add_topk(train);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_config(eval);
  add_out(eval);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  eval->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  auto* ablation = app.add_subcommand("ablation", "train every (phi_g, phi_l) cell with every seed");
  add_config(ablation);
  add_out(ablation);
  add_topk(ablation);
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference and gradient-isolation audit");
  add_seed(gradcheck);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*ablation) return cmd_ablation(o);
    if (*gradcheck) return cmd_gradcheck(o);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 1;
}

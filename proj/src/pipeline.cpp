#include "dhn/pipeline.hpp"

#include "dhn/synthdata.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dhn {

using json = nlohmann::json;

EvalReport evaluate(const DhnModel& model, std::span<const Scan> scans, const EvalSection& eval) {
  EvalReport r;
  std::vector<Tensor> images;
  for (const Scan& s : scans) images.push_back(s.image);
  const std::vector<Inference> out = infer(model, images);
  std::vector<int> labels;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    labels.push_back(scans[i].global_label);
    r.probabilities.push_back(out[i].global_probability);
    r.records.push_back({scans[i].scan_id, out[i].detections, scans[i].gt_boxes});
  }

  auto attempt = [&](const std::string& name, auto&& fn) {
    try {
      r.metrics[name] = fn();
    } catch (const std::exception& e) {
      r.metrics[name] = NAN;
      r.errors[name] = e.what();
    }
  };
  attempt("roc_auc", [&] { return roc_auc(labels, r.probabilities); });
  attempt("pr_auc", [&] { return pr_auc(labels, r.probabilities); });
  attempt("froc_auc", [&] {
    r.froc = froc(r.records, eval.iou_threshold, eval.fppi_max);
    return r.froc.auc;
  });
  attempt("afroc_auc", [&] {
    r.afroc = afroc(r.records, eval.iou_threshold);
    return r.afroc.auc;
  });
  attempt("map", [&] { return map_at_iou(r.records, eval.iou_threshold); });
  attempt("froc_sensitivity", [&] { return froc_sensitivity_at(r.records, eval.fppi_max, eval.iou_threshold); });
  return r;
}

namespace {

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

json breakdown_json(const LossBreakdown& b) {
  return {{"l_obj", b.l_obj}, {"l_reg", b.l_reg}, {"l_cls", b.l_cls}, {"l_bbox", b.l_bbox},
          {"L_l", b.L_l},     {"L_g", b.L_g},     {"L", b.L},          {"grad_norm", b.grad_norm}};
}

std::string checkpoint_name(int epoch) {
  std::ostringstream os;
  os << "epoch_" << std::setw(3) << std::setfill('0') << epoch;
  return os.str();
}

void write_topk_csv(const TopkReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::string selected;
  for (const auto& s : report.selected) selected += (selected.empty() ? "" : ";") + s;
  out << "metric,mean,std,k,selected\n";
  for (const auto& name : kMetricNames) {
    const auto it = report.metrics.find(name);
    const MetricSummary s = it == report.metrics.end() ? MetricSummary{NAN, NAN} : it->second;
    out << name << ',' << csv_number(s.mean) << ',' << csv_number(s.std) << ',' << report.selected.size() << ','
        << selected << '\n';
  }
}

}  // namespace

void write_metrics_csv(std::span<const CheckpointMetrics> table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "checkpoint";
  for (const char* split : {"val", "test"}) {
    for (const auto& m : kMetricNames) out << ',' << split << '_' << m;
  }
  out << '\n';
  for (const auto& row : table) {
    out << row.checkpoint;
    for (const auto* metrics : {&row.validation, &row.test}) {
      for (const auto& m : kMetricNames) {
        const auto it = metrics->find(m);
        out << ',' << csv_number(it == metrics->end() ? NAN : it->second);
      }
    }
    out << '\n';
  }
}

TrainResult run_training(const RunConfig& config, const std::filesystem::path& run_dir) {
  config.validate();
  TrainResult result;
  result.run_dir = run_dir;
  std::filesystem::create_directories(run_dir / "checkpoints");
  {
    std::ofstream echo(run_dir / "config.ini");
    echo << "; dhn " << DHN_VERSION << '\n' << to_ini(config);
    if (!echo) throw std::runtime_error("cannot write " + (run_dir / "config.ini").string());
  }

  const auto train = load_split(config.data.dir, "train");
  const auto val = load_split(config.data.dir, "val");
  const auto test = load_split(config.data.dir, "test");
  if (train.empty()) throw std::runtime_error("no training scans under " + config.data.dir.string());
  for (const Scan& s : train) {
    if (s.height() != config.model.image_size || s.width() != config.model.image_size) {
      throw std::runtime_error("scan " + s.scan_id + " is " + std::to_string(s.height()) + "x" +
                               std::to_string(s.width()) + " but model.image_size is " +
                               std::to_string(config.model.image_size));
    }
  }

  DhnModel model = make_model(config.model, config.train.seed);
  SgdState sgd_state;
  const SgdConfig sgd{config.train.lr, config.train.momentum, config.train.clip_norm};
  std::mt19937_64 rng(mix_seed(config.train.seed, 0x5eed));
  const std::size_t per_step = static_cast<std::size_t>(config.train.batch_size / 2);

  std::ofstream log(run_dir / "step_log.jsonl");
  if (!log) throw std::runtime_error("cannot write " + (run_dir / "step_log.jsonl").string());
  spdlog::info("training {} scans for {} epochs ({} params), phi_g={} phi_l={}", train.size(), config.train.epochs,
               model.params.scalar_count(), config.train.phi_g.str(), config.train.phi_l.str());

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 1; epoch <= config.train.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    long epoch_steps = 0;
    for (std::size_t i = 0; i < order.size(); i += per_step) {
      std::vector<Scan> batch;
      for (std::size_t j = i; j < std::min(order.size(), i + per_step); ++j) batch.push_back(train[order[j]]);
      const LossBreakdown b = train_step(model, sgd_state, batch, config.train.phi_g, config.train.phi_l,
                                         config.train.weights, sgd, rng);
      json rec = breakdown_json(b);
      rec["step"] = step;
      rec["epoch"] = epoch;
      log << rec.dump() << '\n';
      if (!std::isfinite(b.L)) {
        log.flush();
        throw std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + breakdown_json(b).dump());
      }
      if (step == 0) result.first_step = b;
      epoch_loss += b.L;
      ++epoch_steps;
      ++step;
    }
    log.flush();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("epoch {} mean loss {:.4f} ({:.1f}s)", epoch, epoch_loss / static_cast<double>(epoch_steps), secs);

    if (epoch % config.train.checkpoint_every == 0 || epoch == config.train.epochs) {
      const std::string name = checkpoint_name(epoch);
      save_checkpoint(model.params, run_dir / "checkpoints" / (name + ".ckpt"));
      CheckpointMetrics row{name, {}, {}};
      if (!val.empty()) row.validation = evaluate(model, val, config.eval).metrics;
      if (!test.empty()) row.test = evaluate(model, test, config.eval).metrics;
      spdlog::info("{} val roc_auc {:.4f} test roc_auc {:.4f} test froc_sensitivity {:.4f}", name,
                   row.validation.count("roc_auc") ? row.validation["roc_auc"] : NAN,
                   row.test.count("roc_auc") ? row.test["roc_auc"] : NAN,
                   row.test.count("froc_sensitivity") ? row.test["froc_sensitivity"] : NAN);
      result.table.push_back(std::move(row));
      write_metrics_csv(result.table, run_dir / "metrics.csv");
    }
  }

  if (result.table.size() >= config.eval.topk) {
    result.topk = topk_report(result.table, config.eval.topk, config.eval.selection_metric);
    write_topk_csv(*result.topk, run_dir / "topk.csv");
  } else {
    spdlog::warn("only {} checkpoints, fewer than topk = {}; no top-k report written", result.table.size(),
                 config.eval.topk);
  }
  return result;
}

void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "cell,phi_g,phi_l,seeds,status";
  for (const auto& m : kMetricNames) out << ',' << m << "_mean," << m << "_std";
  out << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::string seeds;
    for (auto s : r.seeds) seeds += (seeds.empty() ? "" : ";") + std::to_string(s);
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out << i << ',' << r.phi_g << ',' << r.phi_l << ',' << seeds << ',' << status;
    for (const auto& m : kMetricNames) {
      const auto it = r.metrics.find(m);
      const MetricSummary s = it == r.metrics.end() ? MetricSummary{NAN, NAN} : it->second;
      out << ',' << csv_number(s.mean) << ',' << csv_number(s.std);
    }
    out << '\n';
  }
}

std::vector<AblationRow> run_ablation(const RunConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  std::vector<AblationRow> rows;
  for (std::size_t c = 0; c < config.ablation.cells.size(); ++c) {
    const auto& [phi_g, phi_l] = config.ablation.cells[c];
    AblationRow row{phi_g.str(), phi_l.str(), config.ablation.seeds, "ok", {}, {}};
    try {
      std::map<std::string, std::vector<double>> pooled;
      for (std::uint64_t seed : config.ablation.seeds) {
        RunConfig cell = config;
        cell.train.phi_g = phi_g;
        cell.train.phi_l = phi_l;
        cell.train.seed = seed;
        spdlog::info("ablation cell {} ({}/{}) seed {}", c, row.phi_g, row.phi_l, seed);
        const TrainResult tr =
            run_training(cell, out_dir / ("cell" + std::to_string(c)) / ("seed" + std::to_string(seed)));
        if (!tr.topk) {
          throw std::runtime_error("seed " + std::to_string(seed) + " produced " + std::to_string(tr.table.size()) +
                                   " checkpoints, fewer than topk = " + std::to_string(config.eval.topk));
        }
        for (const auto& name : tr.topk->selected) {
          const auto it = std::find_if(tr.table.begin(), tr.table.end(),
                                       [&](const CheckpointMetrics& m) { return m.checkpoint == name; });
          for (const auto& m : kMetricNames) {
            const auto v = it->test.find(m);
            pooled[m].push_back(v == it->test.end() ? NAN : v->second);
          }
        }
        const auto roc = tr.topk->metrics.find("roc_auc");
        row.seed_roc_auc.push_back(roc == tr.topk->metrics.end() ? NAN : roc->second.mean);
      }
      for (const auto& [m, values] : pooled) row.metrics[m] = summarize(values);
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
      spdlog::error("ablation cell {} failed: {}", c, e.what());
    }
    rows.push_back(std::move(row));
    write_ablation_csv(rows, out_dir / "ablation.csv");
  }
  return rows;
}

namespace {

std::map<std::string, Buffer> collect_grads(const ParameterSet& params) {
  std::map<std::string, Buffer> g;
  for (const auto& [name, t] : params.entries()) g[name] = t.has_grad() ? t.grad() : Buffer::Zero(t.numel());
  return g;
}

}  // namespace

IsolationReport gradient_isolation_check(int steps, std::uint64_t seed) {
  DhnConfig cfg;
  cfg.image_size = 64;
  DhnModel model = make_model(cfg, seed);
  SynthConfig synth;
  synth.height = synth.width = 64;
  synth.nodule_prob = 0.7;
  synth.radius_max = 8.0;
  const LossWeights weights;
  std::mt19937_64 rng(seed);
  SgdState state;
  IsolationReport report;

  for (int s = 0; s < steps; ++s) {
    std::vector<View> views;
    for (int i = 0; i < 2; ++i) {
      Scan scan = generate_scan(rng, synth);
      auto pair = dha_pair(scan, AugStrategy::binomial(0.9), AugStrategy::uniform(), rng);
      views.push_back(std::move(pair[0]));
      views.push_back(std::move(pair[1]));
    }
    const std::uint64_t sample_seed = rng();
    auto pass = [&](int which) {
      model.params.zero_grad();
      Tape tape;
      TapeScope scope(tape);
      std::mt19937_64 sample_rng(sample_seed);
      StepLosses l = forward_losses(model, views, weights, sample_rng);
      backward(tape, which == 0 ? l.L_g : which == 1 ? l.L_l : l.L);
      return collect_grads(model.params);
    };
    const auto g_global = pass(0);
    const auto g_local = pass(1);
    const auto g_total = pass(2);
    double trunk_scale = 0.0, trunk_err = 0.0;
    for (const auto& [name, total] : g_total) {
      if (is_local_head_param(name)) {
        report.max_local_grad_from_global =
            std::max(report.max_local_grad_from_global, g_global.at(name).abs().maxCoeff());
      } else if (is_global_head_param(name)) {
        report.max_global_grad_from_local =
            std::max(report.max_global_grad_from_local, g_local.at(name).abs().maxCoeff());
      } else {
        const Buffer expected = weights.lambda1 * g_global.at(name) + weights.lambda2 * g_local.at(name);
        trunk_err = std::max(trunk_err, (total - expected).abs().maxCoeff());
        trunk_scale = std::max(trunk_scale, total.abs().maxCoeff());
      }
    }
    report.max_coupling_error = std::max(report.max_coupling_error, trunk_err / std::max(trunk_scale, 1e-300));

    // Move the parameters so later steps are not all at initialisation.
    model.params.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      std::mt19937_64 sample_rng(sample_seed);
      backward(tape, forward_losses(model, views, weights, sample_rng).L);
    }
    sgd_step(model.params, 1e-3, 0.9, state);
    ++report.steps;
  }
  return report;
}

}  // namespace dhn

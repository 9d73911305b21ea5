#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gta/manifest.hpp"
#include "gta/train.hpp"

#ifndef GTA_BUILD_ID
#define GTA_BUILD_ID "unversioned"
#endif

namespace gta {

struct RunOutcome {
  RunReport report;
  std::string checkpoint_path;
  std::string report_path;
  std::string out_dir;
};

namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw io_error("short write to " + path);
}

inline void write_run_metadata(const ExperimentManifest& m) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(m.out_dir, ec);
  if (ec) throw io_error("cannot create output directory " + m.out_dir);
  write_text_file(m.out_dir + "/manifest.ini", serialize_manifest(m));
  std::ostringstream info;
  info << version_string << "\n";
  info << "build: " << GTA_BUILD_ID << "\n";
  info << "seed: " << m.seed << "\n";
  write_text_file(m.out_dir + "/build_info.txt", info.str());
}

struct FinetuneData {
  Dataset train;
  Dataset test;
};

inline FinetuneData finetune_data(const ExperimentManifest& m) {
  FinetuneData data;
  if (m.data_mode == "synthetic") {
    data.train = generate_synthetic_dataset(m.synth, m.data_seed, Split::train);
    data.test = generate_synthetic_dataset(m.synth, m.data_seed, Split::test);
  } else {
    data.train = load_image_dir(m.data_dir + "/train");
    data.test = load_image_dir(m.data_dir + "/test");
    const int classes = std::max(data.train.num_classes, data.test.num_classes);
    data.train.num_classes = classes;
    data.test.num_classes = classes;
  }
  if (m.rate < 1.0)
    data.train =
        subset_per_class(data.train, m.rate, derive_seed(m.data_seed, "rate"));
  return data;
}

struct PretrainData {
  Dataset upstream;
  Dataset holdout;
};

inline PretrainData pretrain_data(const ExperimentManifest& m) {
  PretrainData data;
  if (m.data_mode == "synthetic") {
    SyntheticSpec spec = m.synth;
    if (m.upstream_per_class > 0) spec.per_class = m.upstream_per_class;
    data.upstream =
        generate_synthetic_dataset(spec, m.data_seed, Split::upstream_train);
    SyntheticSpec eval_spec = spec;
    eval_spec.per_class = std::max(1, spec.per_class / 4);
    data.holdout = generate_synthetic_dataset(
        eval_spec, derive_seed(m.data_seed, "upstream-eval"),
        Split::upstream_train);
  } else {
    data.upstream = load_image_dir(m.data_dir + "/upstream");
    data.holdout = data.upstream;  // held-in evaluation for external data
  }
  return data;
}

}  // namespace detail

/// Execute one manifest (pretrain or finetune): writes the resolved
/// manifest, build info, the run report and the final checkpoint into the
/// manifest's output directory.
inline RunOutcome run_manifest(const ExperimentManifest& manifest) {
  ExperimentManifest m = manifest;
  m.train.seed = m.seed;
  m.validate();
  detail::write_run_metadata(m);

  RunOutcome outcome;
  outcome.out_dir = m.out_dir;
  outcome.checkpoint_path = m.out_dir + "/model.ckpt";
  outcome.report_path = m.out_dir + "/report.jsonl";

  if (m.kind == "pretrain") {
    const detail::PretrainData data = detail::pretrain_data(m);
    const ViTConfig model_cfg =
        named_model_config(m.model_size, data.upstream.num_classes);
    ViTModel model = pretrain_source(model_cfg, data.upstream, data.holdout,
                                     m.train, &outcome.report);
    save_checkpoint(model, outcome.checkpoint_path,
                    outcome.report.final_rng_state, &m.train);
  } else {
    const Checkpoint ckpt = load_checkpoint(m.source_checkpoint);
    const ViTModel source = model_from_checkpoint(ckpt);
    const detail::FinetuneData data = detail::finetune_data(m);
    if (data.train.num_classes != source.config().num_classes)
      throw config_error(
          "finetune: dataset has " + std::to_string(data.train.num_classes) +
          " classes but the source model was trained with " +
          std::to_string(source.config().num_classes));
    const ViTConfig named =
        named_model_config(m.model_size, source.config().num_classes);
    if (!(named == source.config()))
      throw config_error("finetune: source checkpoint does not match model "
                         "size '" + m.model_size + "'");
    ViTModel target(source.config());
    outcome.report = finetune(source, target, data.train, data.test, m.train);
    save_checkpoint(target, outcome.checkpoint_path,
                    outcome.report.final_rng_state, &m.train);
  }
  outcome.report.write(outcome.report_path);
  return outcome;
}

// ---------------------------------------------------------------------------
// Comparison matrix: methods x sampling rates x seeds, with a per-method
// lambda sweep; the best lambda by mean accuracy is reported per cell group.
// ---------------------------------------------------------------------------

struct CompareSpec {
  std::vector<std::string> methods;  // CLI method names
  std::vector<double> rates{0.15, 0.3, 0.5, 1.0};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string lambda_grid = "defaults";  // defaults | paper | comma list
  ExperimentManifest base;               // finetune template
  std::string out_dir;
  int parallel = 1;
};

struct CompareCell {
  std::string method;
  double rate = 1.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double test_acc = 0.0;
  std::optional<double> jaccard;
  std::optional<double> drift;
  std::string dir;
};

struct CompareOutcome {
  std::vector<CompareCell> cells;
  std::string csv;
  bool any_failed = false;
};

namespace detail {

inline std::vector<double> lambda_grid_for(const std::string& method,
                                           const std::string& grid_spec) {
  if (method == "none") return {0.0};
  if (grid_spec == "paper") return {0.1, 1.0, 10.0, 100.0};
  if (grid_spec == "defaults") {
    // 0.1x / 1x / 10x around a per-method default coefficient
    double alpha = 1.0;
    if (method == "gta") alpha = 10.0;
    else if (method == "l2sp") alpha = 0.01;
    else alpha = 0.1;  // feature guides
    return {0.1 * alpha, alpha, 10.0 * alpha};
  }
  std::vector<double> grid;
  std::stringstream ss(grid_spec);
  std::string item;
  while (std::getline(ss, item, ','))
    grid.push_back(parse_double(trim(item), "lambda grid"));
  if (grid.empty()) throw config_error("empty lambda grid");
  return grid;
}

inline std::string compact_double(double v) {
  std::string s = format_double(v);
  for (char& c : s)
    if (c == '.') c = 'p';
  return s;
}

}  // namespace detail

inline CompareOutcome run_compare(const CompareSpec& spec) {
  if (spec.methods.empty() || spec.rates.empty() || spec.seeds.empty())
    throw config_error("compare: methods, rates and seeds must be nonempty");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(spec.out_dir + "/cells", ec);
  if (ec) throw io_error("cannot create output directory " + spec.out_dir);

  CompareOutcome outcome;
  for (const std::string& method : spec.methods) {
    const std::vector<double> grid =
        detail::lambda_grid_for(method, spec.lambda_grid);
    for (double rate : spec.rates)
      for (double lambda : grid)
        for (std::uint64_t seed : spec.seeds) {
          CompareCell cell;
          cell.method = method;
          cell.rate = rate;
          cell.lambda = lambda;
          cell.seed = seed;
          cell.dir = spec.out_dir + "/cells/" + method + "_r" +
                     detail::compact_double(rate) + "_l" +
                     detail::compact_double(lambda) + "_s" +
                     std::to_string(seed);
          outcome.cells.push_back(std::move(cell));
        }
  }

  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t index;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= outcome.cells.size()) return;
        index = next++;
      }
      CompareCell& cell = outcome.cells[index];
      try {
        ExperimentManifest m = spec.base;
        m.kind = "finetune";
        m.rate = cell.rate;
        m.seed = cell.seed;
        m.out_dir = cell.dir;
        m.train.guidance.method = guidance_method_from_string(cell.method);
        m.train.guidance.lambda = cell.lambda;
        const RunOutcome run = run_manifest(m);
        cell.test_acc = run.report.final_test_acc;
        cell.jaccard = run.report.final_jaccard;
        cell.drift = run.report.final_cls_logit_dist;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
    }
  };

  const int threads = std::max(1, spec.parallel);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Aggregate: per (method, rate), pick the lambda with the best mean
  // accuracy over seeds.
  std::ostringstream csv;
  csv << "method,rate,mean_acc,std_acc,mean_jaccard,best_lambda\n";
  for (const std::string& method : spec.methods) {
    const std::vector<double> grid =
        detail::lambda_grid_for(method, spec.lambda_grid);
    for (double rate : spec.rates) {
      double best_mean = -1.0, best_lambda = 0.0, best_std = 0.0;
      std::optional<double> best_jaccard;
      bool group_failed = false;
      for (double lambda : grid) {
        double sum = 0.0, sum_sq = 0.0, jac_sum = 0.0;
        int n = 0, jac_n = 0;
        for (const CompareCell& cell : outcome.cells) {
          if (cell.method != method || cell.rate != rate ||
              cell.lambda != lambda)
            continue;
          if (!cell.ok) {
            group_failed = true;
            continue;
          }
          sum += cell.test_acc;
          sum_sq += cell.test_acc * cell.test_acc;
          if (cell.jaccard) {
            jac_sum += *cell.jaccard;
            ++jac_n;
          }
          ++n;
        }
        if (n == 0) continue;
        const double mean = sum / n;
        const double variance = std::max(0.0, sum_sq / n - mean * mean);
        if (mean > best_mean) {
          best_mean = mean;
          best_std = std::sqrt(variance);
          best_lambda = lambda;
          best_jaccard = jac_n > 0
                             ? std::optional<double>(jac_sum / jac_n)
                             : std::nullopt;
        }
      }
      csv << method << "," << detail::format_double(rate) << ",";
      if (best_mean < 0.0) {
        csv << "failed,,,\n";
        outcome.any_failed = true;
      } else {
        csv << detail::format_double(best_mean) << ","
            << detail::format_double(best_std) << ",";
        if (best_jaccard) csv << detail::format_double(*best_jaccard);
        csv << "," << detail::format_double(best_lambda) << "\n";
        if (group_failed) outcome.any_failed = true;
      }
    }
  }
  outcome.csv = csv.str();
  detail::write_text_file(spec.out_dir + "/compare.csv", outcome.csv);
  return outcome;
}

/// Overlay emission for a list of (tag, checkpoint) pairs and sample
/// indices: one PPM per model per sample, all-blocks-max aggregation by
/// default.
inline std::vector<std::string> run_visualize(
    const std::vector<std::pair<std::string, std::string>>& checkpoints,
    const Dataset& dataset, const std::vector<int>& samples,
    const std::string& out_dir, MapMode mode = MapMode::all_blocks_max) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw io_error("cannot create output directory " + out_dir);
  std::vector<std::string> written;
  for (const auto& [tag, path] : checkpoints) {
    const ViTModel model = model_from_checkpoint(load_checkpoint(path));
    for (int index : samples) {
      if (index < 0 || static_cast<std::size_t>(index) >= dataset.size())
        throw config_error("visualize: sample index " +
                           std::to_string(index) + " outside the dataset");
      const Sample& sample = dataset.samples[static_cast<std::size_t>(index)];
      const ForwardResult fr = model.forward(sample.image, true);
      const AttentionMap map = attention_map(*fr.trace, model.config(), mode);
      const std::string out_path = out_dir + "/overlay_" + tag + "_" +
                                   std::to_string(index) + ".ppm";
      emit_overlay(sample.image, map.pixels, out_path);
      written.push_back(out_path);
    }
  }
  return written;
}

}  // namespace gta

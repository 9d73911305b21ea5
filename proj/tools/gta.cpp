// Command-line entry point wiring the library into reproducible
// experiments: data generation, source pre-training, guided fine-tuning,
// evaluation, comparison matrices and attention-map visualization.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gta/lab.hpp"

namespace {

using namespace gta;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = gta::detail::trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::vector<double> split_doubles(const std::string& text, const char* what) {
  std::vector<double> out;
  for (const std::string& item : split_list(text))
    out.push_back(gta::detail::parse_double(item, what));
  return out;
}

std::vector<std::uint64_t> split_u64(const std::string& text,
                                     const char* what) {
  std::vector<std::uint64_t> out;
  for (const std::string& item : split_list(text))
    out.push_back(gta::detail::parse_u64(item, what));
  return out;
}

std::vector<int> split_ints(const std::string& text, const char* what) {
  std::vector<int> out;
  for (const std::string& item : split_list(text))
    out.push_back(static_cast<int>(gta::detail::parse_int(item, what)));
  return out;
}

// Flag bundle shared by pretrain / finetune / compare; values land on top of
// a manifest, and only flags the user actually passed override it.
struct RunFlags {
  std::string manifest_path;
  std::uint64_t seed = 42;
  std::string out;
  std::string config_size = "small";
  std::string data_dir;
  int classes = 8, per_class = 60, upstream_per_class = 0, image_size = 32,
      textures = 8;
  double rho_train = 0.95, rho_test = 0.0, noise = 0.02;
  std::uint64_t data_seed = 7;
  double rate = 1.0;
  int iterations = 1500, batch = 32;
  double lr = 1e-3, weight_decay = 0.05, beta1 = 0.9, beta2 = 0.999,
         adam_eps = 1e-8;
  int eval_interval = 250, eval_subset = 64;
  std::string method = "none", freeze = "none";
  double lambda = 0.0;
  bool transmix = false;
  double transmix_prob = 0.5, transmix_area = 0.25;
  double mass_fraction = 0.6;
  std::string map_mode = "final-block";
  std::string source;

  void add_to(CLI::App* cmd, bool with_guidance) {
    cmd->add_option("--manifest", manifest_path,
                    "manifest file; flags override its values");
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--config-size", config_size, "model size: tiny|small");
    cmd->add_option("--data", data_dir,
                    "dataset directory (switches data mode to dir)");
    cmd->add_option("--classes", classes, "synthetic classes");
    cmd->add_option("--per-class", per_class, "synthetic samples per class");
    cmd->add_option("--upstream-per-class", upstream_per_class,
                    "upstream samples per class (0: same as --per-class)");
    cmd->add_option("--image-size", image_size, "synthetic image size");
    cmd->add_option("--textures", textures, "background texture count");
    cmd->add_option("--rho-train", rho_train,
                    "train-split background/label correlation");
    cmd->add_option("--rho-test", rho_test,
                    "test-split background/label correlation");
    cmd->add_option("--noise", noise, "pixel noise level");
    cmd->add_option("--data-seed", data_seed, "dataset generation seed");
    cmd->add_option("--rate", rate, "per-class sampling rate in (0,1]");
    cmd->add_option("--iterations", iterations, "training iterations");
    cmd->add_option("--batch", batch, "batch size");
    cmd->add_option("--lr", lr, "base learning rate");
    cmd->add_option("--weight-decay", weight_decay, "decoupled weight decay");
    cmd->add_option("--beta1", beta1, "Adam beta1");
    cmd->add_option("--beta2", beta2, "Adam beta2");
    cmd->add_option("--adam-eps", adam_eps, "Adam epsilon");
    cmd->add_option("--eval-interval", eval_interval,
                    "steps between evals (0: final only)");
    cmd->add_option("--eval-subset", eval_subset,
                    "sample cap for interim evals (0: full)");
    cmd->add_option("--mass-fraction", mass_fraction,
                    "attention-mask cumulative mass fraction");
    cmd->add_option("--map-mode", map_mode,
                    "attention map mode: final-block|all-blocks-max");
    if (with_guidance) {
      cmd->add_option("--method", method,
                      "guidance: none|gta|msa-guide|block-guide|l2sp");
      cmd->add_option("--lambda", lambda, "guidance coefficient");
      cmd->add_option("--freeze", freeze,
                      "freeze policy: none|attention-only|ffn-only");
      cmd->add_flag("--transmix", transmix, "enable TransMix label mixing");
      cmd->add_option("--transmix-prob", transmix_prob,
                      "per-sample TransMix probability");
      cmd->add_option("--transmix-area", transmix_area,
                      "TransMix box area fraction");
      cmd->add_option("--source", source, "source model checkpoint");
    }
  }

  ExperimentManifest resolve(const CLI::App* cmd, const std::string& kind) {
    ExperimentManifest m;
    if (cmd->count("--manifest")) m = parse_manifest_file(manifest_path);
    m.kind = kind;
    auto on = [cmd](const char* flag) { return cmd->count(flag) > 0; };
    if (on("--seed")) m.seed = seed;
    if (on("--out")) m.out_dir = out;
    if (on("--config-size")) m.model_size = config_size;
    if (on("--data")) {
      m.data_mode = "dir";
      m.data_dir = data_dir;
    }
    if (on("--classes")) m.synth.classes = classes;
    if (on("--per-class")) m.synth.per_class = per_class;
    if (on("--upstream-per-class")) m.upstream_per_class = upstream_per_class;
    if (on("--image-size")) m.synth.image_size = image_size;
    if (on("--textures")) m.synth.textures = textures;
    if (on("--rho-train")) m.synth.rho_train = rho_train;
    if (on("--rho-test")) m.synth.rho_test = rho_test;
    if (on("--noise")) m.synth.noise = noise;
    if (on("--data-seed")) m.data_seed = data_seed;
    if (on("--rate")) m.rate = rate;
    if (on("--iterations")) m.train.iterations = iterations;
    if (on("--batch")) m.train.batch_size = batch;
    if (on("--lr")) m.train.lr = lr;
    if (on("--weight-decay")) m.train.weight_decay = weight_decay;
    if (on("--beta1")) m.train.beta1 = beta1;
    if (on("--beta2")) m.train.beta2 = beta2;
    if (on("--adam-eps")) m.train.adam_eps = adam_eps;
    if (on("--eval-interval")) m.train.eval_interval = eval_interval;
    if (on("--eval-subset")) m.train.eval_subset = eval_subset;
    if (on("--mass-fraction")) m.train.mass_fraction = mass_fraction;
    if (on("--map-mode")) m.train.map_mode = map_mode_from_string(map_mode);
    if (cmd->get_option_no_throw("--method")) {
      if (on("--method"))
        m.train.guidance.method = guidance_method_from_string(method);
      if (on("--lambda")) m.train.guidance.lambda = lambda;
      if (on("--freeze"))
        m.train.guidance.freeze = freeze_policy_from_string(freeze);
      if (on("--transmix")) m.train.transmix = transmix;
      if (on("--transmix-prob")) m.train.transmix_prob = transmix_prob;
      if (on("--transmix-area")) m.train.transmix_area = transmix_area;
      if (on("--source")) m.source_checkpoint = source;
    }
    m.train.seed = m.seed;
    return m;
  }
};

int cmd_gen_data(const SyntheticSpec& spec, int upstream_per_class,
                 std::uint64_t seed, const std::string& out) {
  if (out.empty()) throw config_error("gen-data: --out is required");
  SyntheticSpec upstream_spec = spec;
  if (upstream_per_class > 0) upstream_spec.per_class = upstream_per_class;
  const Dataset upstream =
      generate_synthetic_dataset(upstream_spec, seed, Split::upstream_train);
  const Dataset train = generate_synthetic_dataset(spec, seed, Split::train);
  const Dataset test = generate_synthetic_dataset(spec, seed, Split::test);
  export_dataset(upstream, out + "/upstream");
  export_dataset(train, out + "/train");
  export_dataset(test, out + "/test");
  std::cout << "upstream: " << upstream.size() << " samples\n"
            << "train: " << train.size() << " samples\n"
            << "test: " << test.size() << " samples\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& source_path,
             const std::string& data_dir, const RunFlags& flags,
             const std::string& split, double mass_fraction,
             const std::string& map_mode, int max_samples) {
  const ViTModel model = model_from_checkpoint(load_checkpoint(checkpoint_path));
  Dataset dataset;
  if (!data_dir.empty()) {
    dataset = load_image_dir(data_dir);
  } else {
    SyntheticSpec spec;
    spec.classes = flags.classes;
    spec.per_class = flags.per_class;
    spec.image_size = flags.image_size;
    spec.textures = flags.textures;
    spec.rho_train = flags.rho_train;
    spec.rho_test = flags.rho_test;
    spec.noise = flags.noise;
    Split s = Split::test;
    if (split == "train") s = Split::train;
    else if (split == "upstream") s = Split::upstream_train;
    else if (split != "test")
      throw config_error("eval: unknown split '" + split + "'");
    dataset = generate_synthetic_dataset(spec, flags.data_seed, s);
  }
  std::optional<ViTModel> source;
  if (!source_path.empty())
    source = model_from_checkpoint(load_checkpoint(source_path));

  EvalOptions options;
  options.mass_fraction = mass_fraction;
  options.map_mode = map_mode_from_string(map_mode);
  options.max_samples = max_samples;
  options.source = source ? &*source : nullptr;
  const EvalRecord record = evaluate_model(model, dataset, options);

  nlohmann::json out{{"accuracy", record.accuracy},
                     {"samples", record.samples_used},
                     {"mass_fraction", record.mass_fraction},
                     {"map_mode", to_string(record.map_mode)}};
  if (record.mean_jaccard) out["jaccard"] = *record.mean_jaccard;
  if (record.mean_fg_attention) out["fg_attn_mass"] = *record.mean_fg_attention;
  if (record.mean_logit_distance)
    out["cls_logit_dist"] = *record.mean_logit_distance;
  std::cout << out.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-guided ViT transfer-learning lab"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data",
                                 "write synthetic upstream/train/test splits");
  SyntheticSpec gen_spec;
  int gen_upstream_per_class = 0;
  std::uint64_t gen_seed = 7;
  std::string gen_out;
  gen->add_option("--classes", gen_spec.classes, "class count");
  gen->add_option("--per-class", gen_spec.per_class, "samples per class");
  gen->add_option("--upstream-per-class", gen_upstream_per_class,
                  "upstream samples per class (0: same as --per-class)");
  gen->add_option("--image-size", gen_spec.image_size, "image size");
  gen->add_option("--textures", gen_spec.textures, "background texture count");
  gen->add_option("--rho-train", gen_spec.rho_train,
                  "train background/label correlation");
  gen->add_option("--rho-test", gen_spec.rho_test,
                  "test background/label correlation");
  gen->add_option("--noise", gen_spec.noise, "pixel noise");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain",
                                 "supervised pre-training of a source model");
  RunFlags pre_flags;
  pre_flags.add_to(pre, false);

  // finetune
  auto* fine = app.add_subcommand("finetune",
                                  "fine-tune against a frozen source model");
  RunFlags fine_flags;
  fine_flags.add_to(fine, true);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  RunFlags ev_flags;
  std::string ev_checkpoint, ev_source, ev_data, ev_split = "test";
  double ev_mass = 0.6;
  std::string ev_map_mode = "final-block";
  int ev_max_samples = 0;
  ev->add_option("--checkpoint", ev_checkpoint, "model checkpoint")->required();
  ev->add_option("--source", ev_source, "source checkpoint for drift stats");
  ev->add_option("--data", ev_data, "dataset directory (labels.csv layout)");
  ev->add_option("--split", ev_split,
                 "synthetic split: train|test|upstream (default test)");
  ev->add_option("--classes", ev_flags.classes, "synthetic classes");
  ev->add_option("--per-class", ev_flags.per_class, "samples per class");
  ev->add_option("--image-size", ev_flags.image_size, "image size");
  ev->add_option("--textures", ev_flags.textures, "texture count");
  ev->add_option("--rho-train", ev_flags.rho_train, "train correlation");
  ev->add_option("--rho-test", ev_flags.rho_test, "test correlation");
  ev->add_option("--noise", ev_flags.noise, "pixel noise");
  ev->add_option("--data-seed", ev_flags.data_seed, "generation seed");
  ev->add_option("--mass-fraction", ev_mass, "mask mass fraction");
  ev->add_option("--map-mode", ev_map_mode, "final-block|all-blocks-max");
  ev->add_option("--max-samples", ev_max_samples, "sample cap (0: full)");

  // compare
  auto* cmp = app.add_subcommand(
      "compare", "methods x sampling-rates comparison matrix");
  RunFlags cmp_flags;
  cmp_flags.add_to(cmp, true);
  std::string cmp_methods = "none,gta";
  std::string cmp_rates = "0.15,0.3,0.5,1.0";
  std::string cmp_seeds = "1,2,3";
  std::string cmp_lambda_grid = "defaults";
  int cmp_parallel = 1;
  cmp->add_option("--methods", cmp_methods, "comma-separated method list");
  cmp->add_option("--rates", cmp_rates, "comma-separated sampling rates");
  cmp->add_option("--seeds", cmp_seeds, "comma-separated seeds");
  cmp->add_option("--lambda-grid", cmp_lambda_grid,
                  "defaults | paper | comma-separated values");
  cmp->add_option("--parallel", cmp_parallel, "concurrent cells");

  // visualize
  auto* vis = app.add_subcommand(
      "visualize", "attention overlays for up to three checkpoints");
  std::vector<std::string> vis_checkpoints;
  std::string vis_samples = "0,1,2,3";
  std::string vis_out, vis_data;
  std::string vis_map_mode = "all-blocks-max";
  RunFlags vis_flags;
  vis->add_option("--checkpoint", vis_checkpoints,
                  "tag=path (repeatable, up to three)")
      ->required();
  vis->add_option("--samples", vis_samples, "comma-separated sample indices");
  vis->add_option("--out", vis_out, "output directory")->required();
  vis->add_option("--data", vis_data, "dataset directory (labels.csv layout)");
  vis->add_option("--classes", vis_flags.classes, "synthetic classes");
  vis->add_option("--per-class", vis_flags.per_class, "samples per class");
  vis->add_option("--image-size", vis_flags.image_size, "image size");
  vis->add_option("--textures", vis_flags.textures, "texture count");
  vis->add_option("--noise", vis_flags.noise, "pixel noise");
  vis->add_option("--data-seed", vis_flags.data_seed, "generation seed");
  vis->add_option("--map-mode", vis_map_mode, "final-block|all-blocks-max");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_spec, gen_upstream_per_class, gen_seed, gen_out);

    if (pre->parsed()) {
      const RunOutcome outcome =
          run_manifest(pre_flags.resolve(pre, "pretrain"));
      std::cout << "pretrained: " << outcome.checkpoint_path
                << " (upstream acc "
                << outcome.report.final_test_acc << ")\n";
      return 0;
    }

    if (fine->parsed()) {
      const RunOutcome outcome =
          run_manifest(fine_flags.resolve(fine, "finetune"));
      std::cout << "finetuned: " << outcome.checkpoint_path << " (test acc "
                << outcome.report.final_test_acc << ")\n";
      return 0;
    }

    if (ev->parsed())
      return cmd_eval(ev_checkpoint, ev_source, ev_data, ev_flags, ev_split,
                      ev_mass, ev_map_mode, ev_max_samples);

    if (cmp->parsed()) {
      CompareSpec spec;
      spec.methods = split_list(cmp_methods);
      spec.rates = split_doubles(cmp_rates, "--rates");
      spec.seeds = split_u64(cmp_seeds, "--seeds");
      spec.lambda_grid = cmp_lambda_grid;
      spec.parallel = cmp_parallel;
      spec.base = cmp_flags.resolve(cmp, "finetune");
      if (cmp_flags.out.empty())
        throw config_error("compare: --out is required");
      spec.out_dir = cmp_flags.out;
      spec.base.out_dir = spec.out_dir;  // cells land under out/cells
      const CompareOutcome outcome = run_compare(spec);
      std::cout << outcome.csv;
      if (outcome.any_failed) {
        std::cerr << "compare: one or more cells failed\n";
        return 4;
      }
      return 0;
    }

    if (vis->parsed()) {
      if (vis_checkpoints.size() > 3)
        throw config_error("visualize: at most three checkpoints");
      std::vector<std::pair<std::string, std::string>> pairs;
      for (const std::string& item : vis_checkpoints) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == item.size())
          throw config_error(
              "visualize: --checkpoint expects tag=path, got '" + item + "'");
        pairs.emplace_back(item.substr(0, eq), item.substr(eq + 1));
      }
      Dataset dataset;
      if (!vis_data.empty()) {
        dataset = load_image_dir(vis_data);
      } else {
        SyntheticSpec spec;
        spec.classes = vis_flags.classes;
        spec.per_class = vis_flags.per_class;
        spec.image_size = vis_flags.image_size;
        spec.textures = vis_flags.textures;
        spec.noise = vis_flags.noise;
        dataset =
            generate_synthetic_dataset(spec, vis_flags.data_seed, Split::test);
      }
      const auto written =
          run_visualize(pairs, dataset, split_ints(vis_samples, "--samples"),
                        vis_out, map_mode_from_string(vis_map_mode));
      for (const std::string& path : written) std::cout << path << "\n";
      return 0;
    }
  } catch (const gta::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const gta::io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const gta::numeric_error& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

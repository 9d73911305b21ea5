#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gta/eval.hpp"
#include "gta/guidance.hpp"
#include "gta/rng.hpp"

using namespace gta;

namespace {

Tensor random_image(int size, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(3) * size * size);
  for (auto& v : d) v = rng.uniform();
  return Tensor({3, size, size}, std::move(d));
}

// Trace wrapping explicit logit matrices (row-major blocks x heads).
AttentionTrace trace_from(std::vector<Tensor> logits, int depth, int heads) {
  AttentionTrace t;
  t.depth = depth;
  t.heads = heads;
  t.tokens = logits.front().rows();
  for (int m = 0; m < depth; ++m) {
    t.msa_outputs.push_back(Tensor::zeros({t.tokens, 2}));
    t.block_outputs.push_back(Tensor::zeros({t.tokens, 2}));
  }
  t.logits = std::move(logits);
  return t;
}

Dataset tiny_dataset(int classes, int per_class, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.textures = classes;
  spec.image_size = 16;
  return generate_synthetic_dataset(spec, seed, Split::test);
}

}  // namespace

TEST_CASE("accuracy basics") {
  Rng rng(1);
  const Dataset ds = tiny_dataset(4, 5, 3);

  SECTION("a constant predictor on balanced classes scores 1/C") {
    // zero weights: identical logits for every class, tie broken to class 0
    ViTModel zero(ViTConfig{16, 4, 8, 2, 1, 4});
    REQUIRE(accuracy(zero, ds) == 0.25);
  }

  SECTION("matches a per-sample recount") {
    ViTModel model =
        ViTModel::random_init(ViTConfig{16, 4, 8, 2, 1, 4}, rng);
    const double reported = accuracy(model, ds);
    std::size_t correct = 0;
    for (const Sample& s : ds.samples) {
      const Tensor logits = model.forward(s.image, false).class_logits;
      int best = 0;
      for (int c = 1; c < 4; ++c)
        if (logits.data()[static_cast<std::size_t>(c)] >
            logits.data()[static_cast<std::size_t>(best)])
          best = c;
      correct += best == s.label;
    }
    REQUIRE(reported ==
            static_cast<double>(correct) / static_cast<double>(ds.size()));
  }

  SECTION("empty dataset is an error") {
    Dataset empty;
    ViTModel model(ViTConfig{16, 4, 8, 2, 1, 4});
    REQUIRE_THROWS_AS(accuracy(model, empty), config_error);
  }
}

TEST_CASE("attention map construction") {
  const ViTConfig cfg{8, 4, 4, 1, 1, 2};  // grid 2x2, N = 4, tokens 5

  // one head: map equals the softmaxed row, upsampled
  std::vector<double> logits(25, 0.0);
  logits[1] = 1.0;
  logits[2] = 2.0;
  logits[3] = 0.5;
  logits[4] = -1.0;
  const AttentionTrace t = trace_from({Tensor({5, 5}, logits)}, 1, 1);
  const AttentionMap map = attention_map(t, cfg, MapMode::final_block);
  REQUIRE(map.grid == 2);
  REQUIRE(map.patch_values.size() == 4);
  double total = 0.0;
  for (double v : map.patch_values) total += v;
  REQUIRE(std::fabs(total - 1.0) < 1e-12);  // single head: a softmax row
  REQUIRE(map.patch_values[1] > map.patch_values[0]);

  // nearest-neighbor law: constant within each patch block
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      REQUIRE(map.pixels[static_cast<std::size_t>(y) * 8 + x] ==
              map.patch_values[static_cast<std::size_t>(y / 4) * 2 + x / 4]);

  for (double v : map.patch_values) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
}

TEST_CASE("two heads combine by elementwise max") {
  const ViTConfig cfg{8, 4, 4, 2, 1, 2};
  std::vector<double> a(25, 0.0), b(25, 0.0);
  a[1] = 3.0;  // head A peaks on patch 0
  b[2] = 3.0;  // head B peaks on patch 1
  const AttentionTrace t =
      trace_from({Tensor({5, 5}, a), Tensor({5, 5}, b)}, 1, 2);
  const AttentionMap map = attention_map(t, cfg, MapMode::final_block);
  const auto head_a = detail::head_patch_softmax(t.logit(0, 0));
  const auto head_b = detail::head_patch_softmax(t.logit(0, 1));
  for (std::size_t j = 0; j < 4; ++j)
    REQUIRE(map.patch_values[j] == std::max(head_a[j], head_b[j]));
}

TEST_CASE("all-blocks-max also maxes over blocks") {
  const ViTConfig cfg{8, 4, 4, 1, 2, 2};
  std::vector<double> early(25, 0.0), late(25, 0.0);
  early[3] = 5.0;
  late[4] = 5.0;
  const AttentionTrace t =
      trace_from({Tensor({5, 5}, early), Tensor({5, 5}, late)}, 2, 1);
  const AttentionMap final_map = attention_map(t, cfg, MapMode::final_block);
  const AttentionMap all_map = attention_map(t, cfg, MapMode::all_blocks_max);
  REQUIRE(final_map.source == "final-block");
  REQUIRE(all_map.source == "all-blocks-max");
  // the early block's peak only shows up in all-blocks-max
  REQUIRE(all_map.patch_values[2] > final_map.patch_values[2]);
}

TEST_CASE("threshold mask keeps cells by descending mass") {
  SECTION("cumulative rule") {
    const std::vector<double> cells{0.5, 0.3, 0.2};
    const auto keep = threshold_mask(cells, 0.6);
    REQUIRE(keep == std::vector<std::uint8_t>{1, 1, 0});
  }

  SECTION("fraction one keeps every nonzero cell") {
    const std::vector<double> cells{0.5, 0.0, 0.2, 0.3};
    const auto keep = threshold_mask(cells, 1.0);
    REQUIRE(keep == std::vector<std::uint8_t>{1, 0, 1, 1});
  }

  SECTION("uniform map keeps ceil(N/2) cells at one half") {
    const std::vector<double> uniform16(16, 1.0);
    auto keep = threshold_mask(uniform16, 0.5);
    int kept = 0;
    for (auto b : keep) kept += b;
    REQUIRE(kept == 8);

    const std::vector<double> uniform17(17, 1.0);
    keep = threshold_mask(uniform17, 0.5);
    kept = 0;
    for (auto b : keep) kept += b;
    REQUIRE(kept == 9);
    // ties at the cut break toward lower row-major index
    for (int i = 0; i < 9; ++i) REQUIRE(keep[static_cast<std::size_t>(i)] == 1);
  }

  SECTION("coverage property: selected mass reaches the fraction") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> cells(12);
      double total = 0.0;
      for (double& v : cells) {
        v = rng.uniform();
        total += v;
      }
      const double fraction = 0.1 + 0.8 * rng.uniform();
      const auto keep = threshold_mask(cells, fraction);
      double kept_mass = 0.0;
      double smallest_kept = 1e9;
      for (std::size_t i = 0; i < cells.size(); ++i)
        if (keep[i]) {
          kept_mass += cells[i] / total;
          smallest_kept = std::min(smallest_kept, cells[i] / total);
        }
      REQUIRE(kept_mass >= fraction - 1e-12);
      REQUIRE(kept_mass - smallest_kept < fraction);
    }
  }

  SECTION("invalid fractions are rejected") {
    REQUIRE_THROWS_AS(threshold_mask({0.5, 0.5}, 0.0), config_error);
    REQUIRE_THROWS_AS(threshold_mask({0.5, 0.5}, 1.5), config_error);
  }
}

TEST_CASE("jaccard axioms") {
  const std::vector<std::uint8_t> a{1, 1, 0, 0};
  const std::vector<std::uint8_t> b{0, 0, 1, 1};
  REQUIRE(jaccard(a, a) == 1.0);
  REQUIRE(jaccard(a, b) == 0.0);

  const std::vector<std::uint8_t> p{1, 1, 1, 0, 0, 0};
  const std::vector<std::uint8_t> t{0, 1, 1, 1, 1, 1};
  REQUIRE(std::fabs(jaccard(p, t) - 2.0 / 6.0) < 1e-15);
  REQUIRE(jaccard(p, t) == jaccard(t, p));

  const std::vector<std::uint8_t> none(4, 0);
  REQUIRE(jaccard(none, a) == 0.0);  // empty prediction
  REQUIRE_THROWS_AS(jaccard(a, none), config_error);  // empty truth
  REQUIRE_THROWS_AS(jaccard(a, p), config_error);     // size mismatch
}

TEST_CASE("mask downsampling by half coverage") {
  // 8x8 mask, patch 4: left half of patch (0,0) set -> exactly half, kept
  std::vector<std::uint8_t> mask(64, 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 2; ++x) mask[static_cast<std::size_t>(y) * 8 + x] = 1;
  auto grid = mask_to_patch_grid(mask, 8, 4);
  REQUIRE(grid == std::vector<std::uint8_t>{1, 0, 0, 0});

  // a quarter is below half coverage
  std::vector<std::uint8_t> sparse(64, 0);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      sparse[static_cast<std::size_t>(y) * 8 + x] = 1;
  grid = mask_to_patch_grid(sparse, 8, 4);
  REQUIRE(grid == std::vector<std::uint8_t>{0, 0, 0, 0});
}

TEST_CASE("logit distance stats") {
  Rng rng(7);
  std::vector<Tensor> logits;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> d(25);
    for (auto& v : d) v = rng.uniform(-1, 1);
    logits.push_back(Tensor({5, 5}, d));
  }
  const AttentionTrace t = trace_from(std::move(logits), 2, 2);

  SECTION("identical traces give zeros") {
    const LogitDistanceStats stats = logit_distance_stats(t, t);
    REQUIRE(stats.mean == 0.0);
    REQUIRE(stats.max == 0.0);
    for (double d : stats.per_head) REQUIRE(d == 0.0);
  }

  SECTION("one row differing by a unit vector") {
    AttentionTrace moved = t;
    std::vector<double> d = moved.logits[2].data();
    d[1] += 1.0;  // cls row, first patch entry
    moved.logits[2] = Tensor({5, 5}, d);
    const LogitDistanceStats stats = logit_distance_stats(t, moved);
    REQUIRE(std::fabs(stats.per_head[2] - 1.0) < 1e-12);
    REQUIRE(std::fabs(stats.mean - 1.0 / 4.0) < 1e-12);
    REQUIRE(std::fabs(stats.max - 1.0) < 1e-12);

    // sqrt(gta_loss) when exactly one head differs
    const double loss = gta_loss(t, moved).value();
    REQUIRE(std::fabs(std::sqrt(loss) - stats.per_head[2]) < 1e-12);
  }

  SECTION("self-logit and non-cls rows are ignored") {
    AttentionTrace moved = t;
    std::vector<double> d = moved.logits[0].data();
    d[0] += 50.0;
    for (int r = 1; r < 5; ++r) d[static_cast<std::size_t>(r) * 5 + 2] -= 9.0;
    moved.logits[0] = Tensor({5, 5}, d);
    REQUIRE(logit_distance_stats(t, moved).mean == 0.0);
  }
}

TEST_CASE("overlay emission") {
  Rng rng(9);
  const Tensor img = random_image(8, rng);
  const auto dir = std::filesystem::temp_directory_path() / "gta_eval_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "overlay.ppm").string();

  SECTION("zero map leaves a grayscale image in all channels") {
    emit_overlay(img, std::vector<double>(64, 0.0), path);
    const Tensor back = read_ppm(path);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const std::size_t pix = static_cast<std::size_t>(y) * 8 + x;
        const double r = back.data()[pix];
        const double g = back.data()[64 + pix];
        const double b = back.data()[128 + pix];
        REQUIRE(r == g);
        REQUIRE(g == b);
      }
  }

  SECTION("byte-identical across calls and saturated red at the peak") {
    std::vector<double> map(64, 0.0);
    map[27] = 0.7;  // normalized to 1 by the max
    emit_overlay(img, map, path);
    std::ifstream f1(path, std::ios::binary);
    const std::string bytes1((std::istreambuf_iterator<char>(f1)),
                             std::istreambuf_iterator<char>());
    emit_overlay(img, map, path);
    std::ifstream f2(path, std::ios::binary);
    const std::string bytes2((std::istreambuf_iterator<char>(f2)),
                             std::istreambuf_iterator<char>());
    REQUIRE(bytes1 == bytes2);

    const Tensor back = read_ppm(path);
    REQUIRE(back.data()[27] == 1.0);  // red channel saturates at the peak
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate_model bundles the metrics") {
  Rng rng(11);
  const Dataset ds = tiny_dataset(3, 4, 17);
  ViTModel model = ViTModel::random_init(ViTConfig{16, 4, 8, 2, 2, 3}, rng);
  ViTModel source = ViTModel::random_init(ViTConfig{16, 4, 8, 2, 2, 3}, rng);

  EvalOptions options;
  options.source = &source;
  const EvalRecord record = evaluate_model(model, ds, options);
  REQUIRE(record.accuracy >= 0.0);
  REQUIRE(record.accuracy <= 1.0);
  REQUIRE(record.mean_jaccard.has_value());
  REQUIRE(*record.mean_jaccard >= 0.0);
  REQUIRE(*record.mean_jaccard <= 1.0);
  REQUIRE(record.mean_fg_attention.has_value());
  REQUIRE(*record.mean_fg_attention >= 0.0);
  REQUIRE(*record.mean_fg_attention <= 1.0);
  REQUIRE(record.mean_logit_distance.has_value());
  REQUIRE(*record.mean_logit_distance >= 0.0);
  REQUIRE(record.samples_used == 12);

  // the source evaluated against itself drifts by exactly zero
  EvalOptions self_options;
  self_options.source = &source;
  const EvalRecord self = evaluate_model(source, ds, self_options);
  REQUIRE(*self.mean_logit_distance == 0.0);

  // max_samples caps the pass
  EvalOptions capped;
  capped.max_samples = 5;
  REQUIRE(evaluate_model(model, ds, capped).samples_used == 5);

  // masks absent: jaccard omitted, accuracy still present
  Dataset no_masks = ds;
  for (Sample& s : no_masks.samples) s.mask.clear();
  const EvalRecord plain = evaluate_model(model, no_masks, EvalOptions{});
  REQUIRE_FALSE(plain.mean_jaccard.has_value());
  REQUIRE(plain.accuracy >= 0.0);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "gta/grad_check.hpp"
#include "gta/rng.hpp"
#include "gta/vit.hpp"

using namespace gta;

namespace {

const ViTConfig tiny_cfg{16, 4, 32, 4, 4, 8};

Tensor random_image(int size, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(3) * size * size);
  for (auto& v : d) v = rng.uniform();
  return Tensor({3, size, size}, std::move(d));
}

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(d));
}

}  // namespace

TEST_CASE("config validation enforces the shape laws") {
  REQUIRE_THROWS_AS(ViTModel(ViTConfig{16, 5, 32, 4, 2, 2}), config_error);
  REQUIRE_THROWS_AS(ViTModel(ViTConfig{16, 4, 30, 4, 2, 2}), config_error);
  REQUIRE_NOTHROW(ViTModel(tiny_cfg));
  REQUIRE(tiny_cfg.num_patches() == 16);
  REQUIRE(tiny_cfg.tokens() == 17);
  REQUIRE(tiny_cfg.head_dim() == 8);
}

TEST_CASE("patch embedding shapes and the zero-image case") {
  Rng rng(3);
  ViTModel model = ViTModel::random_init(tiny_cfg, rng);
  const Tensor tokens = model.embed(random_image(16, rng));
  REQUIRE(tokens.shape() == Shape{17, 32});

  const ViTConfig degenerate{4, 4, 8, 2, 1, 2};
  ViTModel single = ViTModel::random_init(degenerate, rng);
  REQUIRE(single.embed(random_image(4, rng)).shape() == Shape{2, 8});

  // zero image, zero bias, zero positions: patch rows vanish, row 0 is [cls]
  ViTModel plain(tiny_cfg);
  std::vector<double> cls(32);
  for (std::size_t i = 0; i < cls.size(); ++i) cls[i] = 0.1 * (i + 1);
  plain.set_param_value(
      static_cast<std::size_t>(plain.param_index("cls_token")),
      Tensor({1, 32}, cls));
  const Tensor z = plain.embed(Tensor::zeros({3, 16, 16}));
  for (int j = 0; j < 32; ++j)
    REQUIRE(z.at(0, j) == cls[static_cast<std::size_t>(j)]);
  for (int i = 1; i < 17; ++i)
    for (int j = 0; j < 32; ++j) REQUIRE(z.at(i, j) == 0.0);

  REQUIRE_THROWS_AS(model.embed(Tensor::zeros({3, 8, 8})), config_error);
}

TEST_CASE("attention head hand-checked scalar case") {
  const Tensor z({2, 1}, {1, 1});
  const Tensor w({1, 1}, {1});
  auto [logits, attended] = attention_head(z, w, w, w);
  REQUIRE(logits.data() == std::vector<double>{1, 1, 1, 1});
  REQUIRE(attended.data() == std::vector<double>{1, 1});
}

TEST_CASE("zero query gives uniform attention") {
  Rng rng(5);
  const Tensor z = random_tensor({4, 6}, rng);
  const Tensor zero_q = Tensor::zeros({6, 3});
  const Tensor wk = random_tensor({6, 3}, rng);
  const Tensor wv = random_tensor({6, 3}, rng);
  auto [logits, attended] = attention_head(z, zero_q, wk, wv);
  for (double v : logits.data()) REQUIRE(v == 0.0);
  const Tensor values = matmul(z, wv);
  for (int j = 0; j < 3; ++j) {
    double col_mean = 0.0;
    for (int i = 0; i < 4; ++i) col_mean += values.at(i, j);
    col_mean /= 4.0;
    for (int i = 0; i < 4; ++i)
      REQUIRE(std::fabs(attended.at(i, j) - col_mean) < 1e-12);
  }
}

TEST_CASE("logit scaling is exactly one over sqrt of head dim") {
  Rng rng(7);
  const Tensor z = random_tensor({3, 8}, rng);
  const Tensor wq = random_tensor({8, 4}, rng);
  const Tensor wk = random_tensor({8, 4}, rng);
  const Tensor wv = random_tensor({8, 4}, rng);
  auto [logits, attended] = attention_head(z, wq, wk, wv);
  const Tensor raw = matmul_nt(matmul(z, wq), matmul(z, wk));
  for (std::size_t i = 0; i < logits.numel(); ++i)
    REQUIRE(logits.data()[i] == raw.data()[i] / 2.0);  // k = 4
}

TEST_CASE("msa aggregation") {
  Rng rng(9);
  const Tensor z = random_tensor({5, 4}, rng);
  const Tensor wq = random_tensor({4, 4}, rng);
  const Tensor wk = random_tensor({4, 4}, rng);
  const Tensor wv = random_tensor({4, 4}, rng);

  SECTION("single head with identity projection is the head output") {
    std::vector<double> e(16, 0.0);
    for (int i = 0; i < 4; ++i) e[static_cast<std::size_t>(i) * 4 + i] = 1.0;
    const MsaResult r = msa(z, {{wq, wk, wv}}, Tensor({4, 4}, e));
    auto [logits, attended] = attention_head(z, wq, wk, wv);
    REQUIRE(r.out.data() == attended.data());
    REQUIRE(r.head_logits.size() == 1);
  }

  SECTION("identical heads produce identical logits") {
    const Tensor wproj = random_tensor({8, 4}, rng);
    const MsaResult r = msa(z, {{wq, wk, wv}, {wq, wk, wv}}, wproj);
    REQUIRE(r.head_logits[0].data() == r.head_logits[1].data());
  }

  SECTION("gradient through msa matches finite differences") {
    const Tensor wproj = random_tensor({8, 4}, rng);
    auto f = [&](const Tensor& t) {
      return sum(msa(z, {{t, wk, wv}, {wq, wk, wv}}, wproj).out);
    };
    REQUIRE(finite_diff_check(f, wq, 1e-6) < 1e-6);
  }
}

TEST_CASE("transformer block residual structure") {
  Rng rng(11);
  const int d = 6;
  BlockWeights w;
  w.ln1_gamma = Tensor::full({d}, 1.0);
  w.ln1_beta = Tensor::zeros({d});
  w.head_qkv.push_back({Tensor::zeros({d, 3}), Tensor::zeros({d, 3}),
                        Tensor::zeros({d, 3})});
  w.head_qkv.push_back({Tensor::zeros({d, 3}), Tensor::zeros({d, 3}),
                        Tensor::zeros({d, 3})});
  w.wproj = Tensor::zeros({6, d});
  w.ln2_gamma = Tensor::full({d}, 1.0);
  w.ln2_beta = Tensor::zeros({d});
  w.fc1_weight = Tensor::zeros({d, 4 * d});
  w.fc1_bias = Tensor::zeros({4 * d});
  w.fc2_weight = Tensor::zeros({4 * d, d});
  w.fc2_bias = Tensor::zeros({d});

  const Tensor z = random_tensor({5, d}, rng);
  BlockTrace trace;
  const Tensor out = transformer_block(z, w, &trace);
  REQUIRE(out.data() == z.data());  // zero weights: residuals pass through
  REQUIRE(out.shape() == Shape{5, d});
  REQUIRE(trace.head_logits.size() == 2);
}

TEST_CASE("depth-2 forward composes two block applications") {
  Rng rng(13);
  const ViTConfig cfg{16, 4, 8, 2, 2, 3};
  ViTModel model = ViTModel::random_init(cfg, rng);
  const Tensor img = random_image(16, rng);

  const Tensor direct = model.forward(img, false).class_logits;

  Tensor z = model.embed(img);
  z = transformer_block(z, model.block_weights(0), nullptr);
  z = transformer_block(z, model.block_weights(1), nullptr);
  z = layer_norm(z, model.param("final_ln.gamma").value,
                 model.param("final_ln.beta").value, layer_norm_epsilon);
  const Tensor manual = add_rowvec(
      matmul(slice_rows(z, 0, 1), model.param("head.weight").value),
      model.param("head.bias").value);
  REQUIRE(direct.data() == manual.data());
}

TEST_CASE("forward trace shape law and determinism") {
  Rng rng(15);
  ViTModel model = ViTModel::random_init(tiny_cfg, rng);
  const Tensor img = random_image(16, rng);

  const ForwardResult a = model.forward(img, true);
  REQUIRE(a.trace.has_value());
  REQUIRE(a.trace->logits.size() ==
          static_cast<std::size_t>(tiny_cfg.depth) * tiny_cfg.heads);
  for (const Tensor& logit : a.trace->logits)
    REQUIRE(logit.shape() == Shape{17, 17});
  REQUIRE(a.trace->msa_outputs.size() == 4);
  REQUIRE(a.trace->block_outputs.size() == 4);
  for (const Tensor& t : a.trace->block_outputs)
    REQUIRE(t.shape() == Shape{17, 32});

  const ForwardResult b = model.forward(img, true);
  REQUIRE(a.class_logits.data() == b.class_logits.data());
  REQUIRE(a.trace->pass_id != b.trace->pass_id);

  const ForwardResult quiet = model.forward(img, false);
  REQUIRE_FALSE(quiet.trace.has_value());
  REQUIRE(quiet.class_logits.data() == a.class_logits.data());

  const Tensor probs = softmax_rows(a.class_logits);
  double total = 0.0;
  for (double v : probs.data()) total += v;
  REQUIRE(std::fabs(total - 1.0) < 1e-12);

  // row-stochasticity of every head in every block
  for (const Tensor& logit : a.trace->logits) {
    const Tensor sm = softmax_rows(logit);
    for (int i = 0; i < sm.rows(); ++i) {
      double row = 0.0;
      for (int j = 0; j < sm.cols(); ++j) row += sm.at(i, j);
      REQUIRE(std::fabs(row - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("cls attention row extraction") {
  const Tensor a({3, 3}, {9, 1, 2, 0, 0, 0, 0, 0, 0});
  const Tensor row = cls_attention_row(a);
  REQUIRE(row.shape() == Shape{1, 2});
  REQUIRE(row.data() == std::vector<double>{1, 2});

  REQUIRE_THROWS_AS(cls_attention_row(Tensor({1, 1}, {5})), config_error);
  REQUIRE_THROWS_AS(cls_attention_row(Tensor({2, 3}, {1, 2, 3, 4, 5, 6})),
                    config_error);

  REQUIRE(cls_attention_row(Tensor::zeros({17, 17})).numel() == 16);
}

TEST_CASE("parameter count is a pure function of the config") {
  ViTModel model(tiny_cfg);
  const std::size_t d = 32, heads = 4, k = 8, depth = 4, tokens = 17, c = 8;
  const std::size_t per_block = 2 * d                // ln1
                                + 3 * d * k * heads  // qkv
                                + heads * k * d      // wproj
                                + 2 * d              // ln2
                                + d * 4 * d + 4 * d  // fc1
                                + 4 * d * d + d;     // fc2
  const std::size_t expected = 48 * d + d            // patch projection
                               + d                   // cls token
                               + tokens * d          // positions
                               + depth * per_block   //
                               + 2 * d               // final ln
                               + d * c + c;          // head
  REQUIRE(model.param_count() == expected);
  REQUIRE(model.param_count() == 52776);
}

TEST_CASE("end-to-end gradient check on a small model") {
  Rng rng(2718);
  const ViTConfig cfg{16, 4, 8, 2, 2, 3};
  ViTModel model = ViTModel::random_init(cfg, rng);
  const Tensor img = random_image(16, rng);
  const int label = 1;

  double worst = 0.0;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const Tensor original = model.params()[i].value;
    auto f = [&model, &img, i, label](const Tensor& t) {
      model.set_param_tensor(i, t);
      return cross_entropy_with_logits(model.forward(img, false).class_logits,
                                       label);
    };
    worst = std::max(worst, finite_diff_check(f, original, 1e-6));
    model.set_param_tensor(i, original);
  }
  INFO("max relative error over all parameters: " << worst);
  REQUIRE(worst < 1e-5);
}

TEST_CASE("weight copies share values and reject config mismatches") {
  Rng rng(31);
  ViTModel a = ViTModel::random_init(tiny_cfg, rng);
  ViTModel b(tiny_cfg);
  b.copy_weights_from(a);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    REQUIRE(a.params()[i].value.data() == b.params()[i].value.data());

  ViTModel c(ViTConfig{16, 4, 32, 4, 4, 5});
  REQUIRE_THROWS_AS(c.copy_weights_from(a), config_error);
}

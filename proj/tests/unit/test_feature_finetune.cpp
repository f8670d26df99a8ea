#include <doctest.h>

#include <cmath>
#include <numeric>

#include "featft/finetune.hpp"
#include "helpers.hpp"

using namespace featft;
using featft::test::random_image;
using featft::test::random_model;
using featft::test::share;

namespace {

// Straightforward re-implementation of the aggregate gradient: same mask stream, nothing shared
// beyond Rng and grad_feature_of_logit.
Tensor aggregate_oracle(const Model& m, const Image& img, int label, TapPoint tap, int n, double keep, bool patch,
                        int ps, std::uint64_t seed) {
  Rng rng(seed);
  const int H = img.dim(1), W = img.dim(2);
  std::vector<double> total(shape_size(m.spec->feature_shape(tap)), 0.0);
  for (int e = 0; e < n; ++e) {
    std::vector<std::vector<bool>> keepmap(static_cast<std::size_t>(H), std::vector<bool>(static_cast<std::size_t>(W)));
    if (!patch) {
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) keepmap[y][x] = rng.uniform() < keep;
    } else {
      for (int by = 0; by * ps < H; ++by)
        for (int bx = 0; bx * ps < W; ++bx) {
          const bool k = rng.uniform() < keep;
          for (int y = by * ps; y < std::min(H, by * ps + ps); ++y)
            for (int x = bx * ps; x < std::min(W, bx * ps + ps); ++x) keepmap[y][x] = k;
        }
    }
    Image masked = img;
    for (int c = 0; c < img.dim(0); ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (!keepmap[y][x]) masked.at(c, y, x) = 0.5f;
    const Tensor g = grad_feature_of_logit(m, masked, tap, label);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += g[i];
  }
  double sq = 0;
  for (const double v : total) sq += v * v;
  Tensor out(m.spec->feature_shape(tap));
  for (std::size_t i = 0; i < total.size(); ++i) out[i] = static_cast<float>(total[i] / std::sqrt(sq));
  return out;
}

double exact_linf(const Image& a, const Image& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(static_cast<double>(a[i]) - b[i]));
  return d;
}

TapPoint first_relu(const ModelSpec& spec) {
  for (int i = 0; i < spec.layer_count(); ++i) {
    if (spec.layers[static_cast<std::size_t>(i)].kind == OpKind::relu) return TapPoint{i};
  }
  return spec.default_tap;
}

struct Fixture {
  std::shared_ptr<const ModelSpec> spec = share(test::tiny_spec(16, 10));
  Model model = random_model(spec, 5);
  // The first relu: its logit gradient still depends on the input through max-pool and relu.
  TapPoint tap = first_relu(*spec);
};

}  // namespace

TEST_CASE("aggregate gradient equals a loop-explicit oracle on the same mask stream") {
  Fixture f;
  const Image img = random_image(f.spec->input_shape, 6);
  FinetuneConfig cfg;
  for (const bool patch : {false, true}) {
    cfg.mask = patch ? MaskKind::patch : MaskKind::pixel;
    cfg.patch_size = 3;
    const AggregateGradient a = aggregate_gradient(f.model, img, 4, f.tap, cfg, 1234);
    CHECK(a.values == aggregate_oracle(f.model, img, 4, f.tap, 30, 0.7, patch, 3, 1234));
    CHECK(a.values.shape() == f.spec->feature_shape(f.tap));
    CHECK(a.ensemble_n == 30);
    CHECK(a.seed == 1234);
    CHECK(a.mask_kind == cfg.mask);
    CHECK(l2_norm(a.values) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(aggregate_gradient(f.model, img, 4, f.tap, cfg, 1234).values == a.values);
    CHECK(aggregate_gradient(f.model, img, 4, f.tap, cfg, 1235).values != a.values);
  }
}

TEST_CASE("mask_fill sets the value of dropped pixels") {
  Fixture f;
  const Image img = random_image(f.spec->input_shape, 16);
  FinetuneConfig cfg;
  cfg.ensemble_n = 1;
  cfg.keep_prob = 0.3;
  cfg.mask_fill = 0.0;
  Rng rng(42);
  const auto mask = draw_keep_mask(16, 16, MaskKind::pixel, 0.3, 4, rng);
  Image masked = img;
  for (int c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 256; ++p) masked[static_cast<std::size_t>(c) * 256 + p] *= mask[p];
  const Tensor g = grad_feature_of_logit(f.model, masked, f.tap, 1);
  const AggregateGradient a = aggregate_gradient(f.model, img, 1, f.tap, cfg, 42);
  const double n = l2_norm(g);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(a.values[i] - g[i] / n) <= 1e-6);
  cfg.mask_fill = 1.5;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("a single unmasked member is the normalized feature gradient") {
  Fixture f;
  const Image img = random_image(f.spec->input_shape, 7);
  FinetuneConfig cfg;
  cfg.ensemble_n = 1;
  cfg.keep_prob = 1.0;
  const AggregateGradient a = aggregate_gradient(f.model, img, 2, f.tap, cfg, 99);
  const Tensor g = grad_feature_of_logit(f.model, img, f.tap, 2);
  const double n = l2_norm(g);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(a.values[i] - g[i] / n) <= 1e-6);
}

TEST_CASE("masks keep about keep_prob of the pixels and patches are uniform blocks") {
  Rng rng(3);
  const auto pix = draw_keep_mask(64, 64, MaskKind::pixel, 0.7, 4, rng);
  const double kept = std::accumulate(pix.begin(), pix.end(), 0.0) / pix.size();
  CHECK(kept == doctest::Approx(0.7).epsilon(0.05));
  const auto pat = draw_keep_mask(10, 10, MaskKind::patch, 0.5, 4, rng);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) CHECK(pat[static_cast<std::size_t>(y * 10 + x)] == pat[static_cast<std::size_t>((y / 4 * 4) * 10 + x / 4 * 4)]);
}

TEST_CASE("a vanishing feature gradient gives a flagged zero aggregate") {
  SpecBuilder b("nobias", {3, 8, 8}, 4);
  const int c = b.conv(kNetworkInput, 4, 3, "c", false);
  b.dense(b.global_avg_pool(c), 4, "fc");
  const auto spec = share(b.finish({c}));
  Model m = random_model(spec, 1);
  m.params[2].fill(0.0f);
  FinetuneConfig cfg;
  const AggregateGradient a = aggregate_gradient(m, random_image(spec->input_shape, 2), 1, {c}, cfg, 5);
  CHECK(a.zero);
  CHECK(max_abs(a.values) == 0.0);
}

TEST_CASE("combine_aggregate arithmetic") {
  AggregateGradient t, o;
  t.values = Tensor({2}, std::vector<float>{1, 0});
  o.values = Tensor({2}, std::vector<float>{0, 1});
  CHECK(combine_aggregate(t, o, 0.2).storage() == std::vector<float>{1.0f, -0.2f});
  CHECK(combine_aggregate(t, o, 0.0) == t.values);
  CHECK(max_abs(combine_aggregate(t, t, 1.0)) == 0.0);

  AggregateGradient a, c;
  a.values = Tensor({3}, std::vector<float>{0.3f, -0.5f, 0.8f});
  c.values = Tensor({3}, std::vector<float>{-0.1f, 0.9f, 0.2f});
  CHECK(combine_aggregate(a, c, 0.2) != combine_aggregate(c, a, 0.2));

  AggregateGradient other = o;
  other.tap = TapPoint{3};
  CHECK_THROWS_AS(combine_aggregate(t, other, 0.2), ConfigError);
  other = o;
  other.values = Tensor({3});
  CHECK_THROWS_AS(combine_aggregate(t, other, 0.2), ConfigError);
}

TEST_CASE("fine-tuning keeps the budget, is seeded and degenerates correctly") {
  Fixture f;
  const Image orig = random_image(f.spec->input_shape, 8);
  AttackConfig acfg;
  acfg.iters = 10;
  const Image ae = run_baseline_attack({orig, 1, 7, Source(f.model), 0}, acfg);

  FinetuneConfig cfg;
  cfg.ensemble_n = 6;
  const auto r = finetune_traced(ae, orig, 7, 1, Source(f.model), cfg, acfg, 2, {0, 5, 10});
  CHECK(r.snapshots[0] == ae);
  CHECK(r.snapshots[2] == r.image);
  CHECK(exact_linf(r.image, orig) <= acfg.epsilon);
  CHECK(std::all_of(r.image.storage().begin(), r.image.storage().end(), [](float v) { return v >= 0 && v <= 1; }));
  CHECK(finetune_traced(ae, orig, 7, 1, Source(f.model), cfg, acfg, 2).image == r.image);
  CHECK(r.delta_t.front().seed != r.delta_o.front().seed);
  CHECK(r.delta_t.front().label == 7);
  CHECK(r.delta_o.front().label == 1);

  cfg.iters = 0;
  CHECK(finetune(ae, orig, 7, 1, f.model, cfg, acfg) == ae);
}

TEST_CASE("beta = 0 fine-tuning is driven by the target aggregate alone") {
  Fixture f;
  const Image orig = random_image(f.spec->input_shape, 9);
  AttackConfig acfg;
  acfg.iters = 5;
  const Image ae = run_baseline_attack({orig, 0, 3, Source(f.model), 0}, acfg);
  FinetuneConfig cfg;
  cfg.beta = 0.0;
  cfg.ensemble_n = 4;
  const auto r = finetune_traced(ae, orig, 3, 0, Source(f.model), cfg, acfg, 1);

  // Replay the loop by hand with Δt only.
  const FeatureObjective ob{&f.model, r.delta_t.front().tap, r.delta_t.front().values};
  Image x = ae;
  for (int n = 0; n < cfg.iters; ++n) {
    const Tensor s = sign(feature_objective_gradient({ob}, x));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<float>(cfg.step_alpha) * s[i];
    x = clip_to_budget(x, orig, acfg.epsilon);
  }
  CHECK(x == r.image);
}

TEST_CASE("the feature objective rises over the fine-tuning loop") {
  Fixture f;
  AttackConfig acfg;
  acfg.iters = 10;
  FinetuneConfig cfg;
  cfg.ensemble_n = 4;
  int rose = 0;
  for (int i = 0; i < 10; ++i) {
    const Image orig = random_image(f.spec->input_shape, 300 + i);
    const Image ae = run_baseline_attack({orig, i, (i + 2) % 10, Source(f.model), static_cast<std::uint64_t>(i)}, acfg);
    const auto r = finetune_traced(ae, orig, (i + 2) % 10, i, Source(f.model), cfg, acfg, static_cast<std::uint64_t>(i));
    const FeatureObjective ob{&f.model, r.delta_t[0].tap, combine_aggregate(r.delta_t[0], r.delta_o[0], cfg.beta)};
    double before = 0, after = 0;
    feature_objective_gradient({ob}, ae, &before);
    feature_objective_gradient({ob}, r.image, &after);
    rose += after >= before;
  }
  CHECK(rose >= 9);
}

TEST_CASE("ensemble fine-tuning averages member objectives") {
  Fixture f;
  const Model other = random_model(f.spec, 77);
  Model renamed = other;
  auto s2 = std::make_shared<ModelSpec>(*f.spec);
  s2->name = "tiny2";
  renamed.spec = s2;
  const Image x = random_image(f.spec->input_shape, 10);
  const Tensor d1 = test::random_image(f.spec->feature_shape(f.tap), 11, -1, 1);
  const Tensor d2 = test::random_image(f.spec->feature_shape(f.tap), 12, -1, 1);
  double v = 0, v1 = 0, v2 = 0;
  const Image g = feature_objective_gradient({{&f.model, f.tap, d1}, {&renamed, f.tap, d2}}, x, &v);
  const Image g1 = feature_objective_gradient({{&f.model, f.tap, d1}}, x, &v1);
  const Image g2 = feature_objective_gradient({{&renamed, f.tap, d2}}, x, &v2);
  CHECK(v == doctest::Approx((v1 + v2) / 2));
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx((g1[i] + g2[i]) / 2.0).epsilon(1e-5));

  AttackConfig acfg;
  FinetuneConfig cfg;
  cfg.ensemble_n = 2;
  cfg.iters = 2;
  const Image orig = random_image(f.spec->input_shape, 13);
  const auto r = finetune_traced(orig, orig, 1, 0, Source({&f.model, &renamed}), cfg, acfg, 0);
  CHECK(r.delta_t.size() == 2);
}

TEST_CASE("untargeted feature attack keeps the budget and ignores a zero direction") {
  Fixture f;
  const Image img = random_image(f.spec->input_shape, 14);
  AttackConfig acfg;
  acfg.iters = 5;
  FinetuneConfig cfg;
  cfg.ensemble_n = 3;
  const Image adv = untargeted_feature_attack(img, 2, f.model, cfg, acfg);
  CHECK(exact_linf(adv, img) <= acfg.epsilon);
  CHECK(adv != img);

  const FeatureObjective zero{&f.model, f.tap, Tensor(f.spec->feature_shape(f.tap))};
  CHECK(max_abs(feature_objective_gradient({zero}, img)) == 0.0);
}

TEST_CASE("targeted ILA fine-tuning") {
  Fixture f;
  const Image orig = random_image(f.spec->input_shape, 15);
  AttackConfig acfg;
  acfg.iters = 5;
  const Image ae = run_baseline_attack({orig, 0, 4, Source(f.model), 0}, acfg);

  const IlaResult same = targeted_ila_finetune(orig, orig, f.model, f.tap, 10, acfg);
  CHECK(same.warning);
  CHECK(same.image == orig);

  CHECK(targeted_ila_finetune(ae, orig, f.model, f.tap, 0, acfg).image == ae);
  const IlaResult r = targeted_ila_finetune(ae, orig, f.model, f.tap, 10, acfg);
  CHECK_FALSE(r.warning);
  CHECK(exact_linf(r.image, orig) <= acfg.epsilon);

  // The projection on the entry direction does not shrink.
  const Tensor fa = *forward(f.model, ae, f.tap).feature;
  const Tensor fo = *forward(f.model, orig, f.tap).feature;
  const Tensor fr = *forward(f.model, r.image, f.tap).feature;
  double before = 0, after = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const double d = fa[i] - fo[i];
    before += (fa[i] - fo[i]) * d;
    after += (fr[i] - fo[i]) * d;
  }
  CHECK(after >= before);
}

TEST_CASE("fine-tune config validation") {
  FinetuneConfig cfg;
  cfg.iters = -1;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = {};
  cfg.beta = -0.1;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = {};
  cfg.ensemble_n = 0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = {};
  cfg.keep_prob = 0.0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  CHECK(parse_mask("patch") == MaskKind::patch);
  CHECK_THROWS_AS(parse_mask("cutout"), ConfigError);
}

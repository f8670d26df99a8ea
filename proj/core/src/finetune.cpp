#include "featft/finetune.hpp"

#include <cmath>

#include "featft/image_ops.hpp"

namespace featft {

std::string_view mask_name(MaskKind kind) { return kind == MaskKind::pixel ? "pixel" : "patch"; }

MaskKind parse_mask(std::string_view name) {
  if (name == "pixel") return MaskKind::pixel;
  if (name == "patch") return MaskKind::patch;
  throw ConfigError("unknown mask '" + std::string(name) + "' (expected pixel or patch)");
}

void validate(const FinetuneConfig& cfg) {
  if (cfg.iters < 0) throw ConfigError("ft iters must be non-negative");
  if (!(cfg.beta >= 0.0)) throw ConfigError("beta must be non-negative");
  if (!(cfg.step_alpha > 0.0)) throw ConfigError("ft step_alpha must be positive");
  if (cfg.ensemble_n < 1) throw ConfigError("ensemble_n must be at least 1");
  if (!(cfg.keep_prob > 0.0 && cfg.keep_prob <= 1.0)) throw ConfigError("keep_prob must lie in (0, 1]");
  if (!(cfg.mask_fill >= 0.0 && cfg.mask_fill <= 1.0)) throw ConfigError("mask_fill must lie in [0, 1]");
  if (cfg.patch_size < 1) throw ConfigError("patch_size must be at least 1");
}

std::vector<float> draw_keep_mask(int height, int width, MaskKind kind, double keep_prob, int patch_size, Rng& rng) {
  std::vector<float> mask(static_cast<std::size_t>(height) * width, 0.0f);
  if (kind == MaskKind::pixel) {
    for (float& v : mask) v = rng.bernoulli(keep_prob) ? 1.0f : 0.0f;
    return mask;
  }
  const int by = (height + patch_size - 1) / patch_size;
  const int bx = (width + patch_size - 1) / patch_size;
  for (int i = 0; i < by; ++i) {
    for (int j = 0; j < bx; ++j) {
      if (!rng.bernoulli(keep_prob)) continue;
      for (int y = i * patch_size; y < std::min(height, (i + 1) * patch_size); ++y) {
        for (int x = j * patch_size; x < std::min(width, (j + 1) * patch_size); ++x) {
          mask[static_cast<std::size_t>(y) * width + x] = 1.0f;
        }
      }
    }
  }
  return mask;
}

AggregateGradient aggregate_gradient(const Model& model, const Image& image, int label, TapPoint tap,
                                     const FinetuneConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  validate_tap(*model.spec, tap);
  if (label < 0 || label >= model.class_count()) throw ConfigError("aggregate label out of range");
  AggregateGradient out;
  out.tap = tap;
  out.label = label;
  out.mask_kind = cfg.mask;
  out.ensemble_n = cfg.ensemble_n;
  out.keep_prob = cfg.keep_prob;
  out.patch_size = cfg.patch_size;
  out.seed = seed;

  Rng rng(seed);
  const int c_n = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor64 sum(model.spec->feature_shape(tap));
  for (int e = 0; e < cfg.ensemble_n; ++e) {
    const auto mask = draw_keep_mask(h, w, cfg.mask, cfg.keep_prob, cfg.patch_size, rng);
    Image masked = image;
    for (int c = 0; c < c_n; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        if (mask[p] == 0.0f) masked[c * plane + p] = static_cast<float>(cfg.mask_fill);
      }
    }
    const Tensor g = grad_feature_of_logit(model, masked, tap, label);
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
  }
  const double norm = l2_norm(sum);
  out.values = Tensor(sum.shape());
  if (norm == 0.0) {
    out.zero = true;
  } else {
    for (std::size_t i = 0; i < sum.size(); ++i) out.values[i] = static_cast<float>(sum[i] / norm);
  }
  return out;
}

Tensor combine_aggregate(const AggregateGradient& delta_t, const AggregateGradient& delta_o, double beta) {
  if (delta_t.tap != delta_o.tap) throw ConfigError("combine_aggregate: taps differ");
  require_same_shape(delta_t.values, delta_o.values, "combine_aggregate");
  if (beta == 0.0) return delta_t.values;
  Tensor out(delta_t.values.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(delta_t.values[i] - beta * delta_o.values[i]);
  }
  return out;
}

Image feature_objective_gradient(const std::vector<FeatureObjective>& objectives, const Image& image, double* value) {
  if (objectives.empty()) throw ConfigError("no feature objective");
  const double k = static_cast<double>(objectives.size());
  if (objectives.size() == 1) {
    const auto& ob = objectives.front();
    auto g = grad_input_of_scalar(*ob.model, image, ScalarSpec<float>{FeatureProjection<float>{ob.tap, ob.direction}});
    if (value) *value = g.value;
    return std::move(g.gradient);
  }
  Tensor64 acc(image.shape());
  double total = 0.0;
  for (const auto& ob : objectives) {
    auto g = grad_input_of_scalar(*ob.model, image, ScalarSpec<float>{FeatureProjection<float>{ob.tap, ob.direction}});
    total += g.value;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g.gradient[i];
  }
  if (value) *value = total / k;
  Image out(image.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / k);
  return out;
}

namespace {

// Sign steps along +gradient (ascend = true) or −gradient, clipped around `original`.
Image sign_loop(const std::vector<FeatureObjective>& objectives, Image x, const Image& original, int iters,
                double step_alpha, double epsilon, bool ascend, const std::vector<int>& snapshot_at,
                std::vector<Image>& snapshots, const AttackConfig* transforms, Rng* rng) {
  snapshots.assign(snapshot_at.size(), Image{});
  auto take = [&](int n) {
    for (std::size_t i = 0; i < snapshot_at.size(); ++i) {
      if (snapshot_at[i] == n) snapshots[i] = x;
    }
  };
  const auto alpha = static_cast<float>(ascend ? step_alpha : -step_alpha);
  take(0);
  for (int n = 0; n < iters; ++n) {
    Tensor g;
    if (transforms) {
      const DiDraw draw = draw_di(x.dim(1), transforms->di_prob, transforms->di_resize_range, *rng);
      g = ti_smooth(di_adjoint(feature_objective_gradient(objectives, apply_di(x, draw)), draw), transforms->ti_radius);
    } else {
      g = feature_objective_gradient(objectives, x);
    }
    const Tensor s = sign(g);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += alpha * s[i];
    x = clip_to_budget(x, original, epsilon);
    take(n + 1);
  }
  return x;
}

void check_snapshots(const std::vector<int>& snapshot_at, int iters) {
  for (const int s : snapshot_at) {
    if (s < 0 || s > iters) throw ConfigError("snapshot iteration outside [0, iters]");
  }
}

}  // namespace

FinetuneResult finetune_traced(const Image& ae, const Image& original, int y_t, int y_o, const Source& source,
                               const FinetuneConfig& cfg, const AttackConfig& attack_cfg, std::uint64_t task_id,
                               const std::vector<int>& snapshot_at) {
  validate(cfg);
  validate(attack_cfg);
  check_snapshots(snapshot_at, cfg.iters);
  require_same_shape(ae, original, "finetune");
  if (source.size() == 0) throw ConfigError("finetune needs a source model");

  FinetuneResult res;
  std::vector<FeatureObjective> objectives;
  for (const Model* m : source.members()) {
    const TapPoint tap = (source.size() == 1 && cfg.tap) ? *cfg.tap : m->spec->default_tap;
    const std::string& name = m->name();
    AggregateGradient dt = aggregate_gradient(*m, ae, y_t, tap, cfg, stream_seed(cfg.seed, task_id, "aggregate-target/" + name));
    AggregateGradient dor =
        aggregate_gradient(*m, original, y_o, tap, cfg, stream_seed(cfg.seed, task_id, "aggregate-original/" + name));
    if (dt.zero) res.warnings.push_back("zero target aggregate gradient for " + name);
    if (dor.zero) res.warnings.push_back("zero original aggregate gradient for " + name);
    objectives.push_back({m, tap, combine_aggregate(dt, dor, cfg.beta)});
    res.delta_t.push_back(std::move(dt));
    res.delta_o.push_back(std::move(dor));
  }
  Rng rng(stream_seed(cfg.seed, task_id, "finetune-di"));
  res.image = sign_loop(objectives, ae, original, cfg.iters, cfg.step_alpha, attack_cfg.epsilon, true, snapshot_at,
                        res.snapshots, cfg.di_ti ? &attack_cfg : nullptr, &rng);
  return res;
}

Image finetune(const Image& ae, const Image& original, int y_t, int y_o, const Model& model, const FinetuneConfig& cfg,
               const AttackConfig& attack_cfg) {
  return finetune_traced(ae, original, y_t, y_o, Source(model), cfg, attack_cfg).image;
}

Image untargeted_feature_attack(const Image& image, int y_o, const Model& model, const FinetuneConfig& cfg,
                                const AttackConfig& attack_cfg) {
  validate(cfg);
  validate(attack_cfg);
  const TapPoint tap = cfg.tap.value_or(model.spec->default_tap);
  AggregateGradient d = aggregate_gradient(model, image, y_o, tap, cfg, stream_seed(cfg.seed, 0, "aggregate-untargeted"));
  std::vector<FeatureObjective> objectives{{&model, tap, std::move(d.values)}};
  std::vector<Image> unused;
  return sign_loop(objectives, image, image, attack_cfg.iters, attack_cfg.step_alpha, attack_cfg.epsilon, false, {},
                   unused, nullptr, nullptr);
}

IlaResult targeted_ila_finetune(const Image& ae, const Image& original, const Model& model, TapPoint tap, int iters,
                                const AttackConfig& attack_cfg, const std::vector<int>& snapshot_at) {
  validate(attack_cfg);
  validate_tap(*model.spec, tap);
  if (iters < 0) throw ConfigError("ila iters must be non-negative");
  check_snapshots(snapshot_at, iters);
  IlaResult res;
  const Tensor fa = *forward(model, ae, tap).feature;
  const Tensor fo = *forward(model, original, tap).feature;
  Tensor d(fa.shape());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = fa[i] - fo[i];
  if (max_abs(d) == 0.0) {
    res.warning = "ila: zero guide direction, adversarial example returned unchanged";
    res.image = ae;
    res.snapshots.assign(snapshot_at.size(), ae);
    return res;
  }
  std::vector<FeatureObjective> objectives{{&model, tap, std::move(d)}};
  res.image = sign_loop(objectives, ae, original, iters, attack_cfg.step_alpha, attack_cfg.epsilon, true, snapshot_at,
                        res.snapshots, nullptr, nullptr);
  return res;
}

}  // namespace featft

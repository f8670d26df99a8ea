#include "featft/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "featft/image_ops.hpp"

namespace featft {

std::string_view loss_name(LossKind loss) {
  switch (loss) {
    case LossKind::ce: return "ce";
    case LossKind::logit: return "logit";
    case LossKind::suphigh: return "suphigh";
  }
  return "?";
}

LossKind parse_loss(std::string_view name) {
  if (name == "ce") return LossKind::ce;
  if (name == "logit") return LossKind::logit;
  if (name == "suphigh") return LossKind::suphigh;
  throw ConfigError("unknown loss '" + std::string(name) + "' (expected ce, logit or suphigh)");
}

void validate(const AttackConfig& cfg) {
  if (!(cfg.epsilon > 0.0 && cfg.epsilon <= 1.0)) throw ConfigError("epsilon must lie in (0, 1]");
  if (!(cfg.step_alpha > 0.0 && cfg.step_alpha <= cfg.epsilon)) throw ConfigError("step_alpha must lie in (0, epsilon]");
  if (cfg.iters < 0) throw ConfigError("iters must be non-negative");
  if (!(cfg.momentum >= 0.0)) throw ConfigError("momentum must be non-negative");
  if (!(cfg.di_prob >= 0.0 && cfg.di_prob <= 1.0)) throw ConfigError("di_prob must lie in [0, 1]");
  if (!(cfg.di_resize_range >= 1.0)) throw ConfigError("di_resize_range must be at least 1");
  if (cfg.ti_radius < 0) throw ConfigError("ti_radius must be non-negative");
}

void validate(const SupHighParams& params, int class_count) {
  if (!(params.beta1 >= 0.0 && params.beta2 >= 0.0)) throw ConfigError("suphigh betas must be non-negative");
  if (params.n_high < 1 || params.n_high >= class_count) {
    throw ConfigError("suphigh n_high must lie in [1, class_count)");
  }
}

Source::Source(const Model& model) : members_{&model} {}

Source::Source(std::vector<const Model*> members) : members_(std::move(members)) {
  if (members_.empty()) throw ConfigError("a source needs at least one model");
  std::sort(members_.begin(), members_.end(), [](const Model* a, const Model* b) { return a->name() < b->name(); });
  for (std::size_t i = 1; i < members_.size(); ++i) {
    if (members_[i]->name() == members_[i - 1]->name()) throw ConfigError("duplicate ensemble member " + members_[i]->name());
    if (members_[i]->class_count() != members_[0]->class_count()) throw ConfigError("ensemble members disagree on class count");
  }
}

int Source::class_count() const {
  if (members_.empty()) throw ConfigError("empty source");
  return members_.front()->class_count();
}

std::string Source::name() const {
  std::string s;
  for (const Model* m : members_) {
    if (!s.empty()) s += "+";
    s += m->name();
  }
  return s;
}

namespace {

std::vector<ForwardCache<float>> forward_members(const Source& source, const Image& image) {
  std::vector<ForwardCache<float>> caches;
  caches.reserve(source.size());
  for (const Model* m : source.members()) caches.push_back(run_forward(*m, image));
  return caches;
}

std::vector<double> mean_logits(const std::vector<ForwardCache<float>>& caches) {
  std::vector<double> mean(caches.front().logits().size(), 0.0);
  for (const auto& c : caches) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += c.logits()[i];
  }
  for (double& v : mean) v /= static_cast<double>(caches.size());
  return mean;
}

// Input gradient of ⟨seed, mean logits⟩, summed over members in order.
Tensor64 backward_members(const Source& source, const std::vector<ForwardCache<float>>& caches,
                          const std::vector<double>& seed) {
  const double k = static_cast<double>(source.size());
  Tensor64 acc(caches.front().input.shape());
  for (std::size_t m = 0; m < caches.size(); ++m) {
    BackwardSeed<float> s;
    s.logits.resize(seed.size());
    for (std::size_t i = 0; i < seed.size(); ++i) s.logits[i] = static_cast<float>(seed[i] / k);
    const Tensor g = input_gradient(*source.members()[m], caches[m], s);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  }
  return acc;
}

Image to_image(const Tensor64& t) { return t.cast<float>(); }

std::vector<int> top_labels(const std::vector<double>& logits, int y_t, int y_o, int n) {
  std::vector<int> cand;
  for (int i = 0; i < static_cast<int>(logits.size()); ++i) {
    if (i != y_t && i != y_o) cand.push_back(i);
  }
  std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
  });
  cand.resize(std::min(cand.size(), static_cast<std::size_t>(n)));
  return cand;
}

}  // namespace

std::vector<double> source_logits(const Source& source, const Image& image) {
  return mean_logits(forward_members(source, image));
}

int source_predict(const Source& source, const Image& image) {
  return argmax(std::span<const double>(source_logits(source, image)));
}

void validate(const AttackTask& task) {
  if (task.source.size() == 0) throw ConfigError("attack task has no source model");
  const int k = task.source.class_count();
  if (task.y_o < 0 || task.y_o >= k || task.y_t < 0 || task.y_t >= k) throw ConfigError("attack task label out of range");
  if (task.y_t == task.y_o) throw ConfigError("target label equals original label");
  for (const float v : task.image.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("attack task image has pixels outside [0, 1]");
  }
}

Image clip_to_budget(const Image& candidate, const Image& original, double epsilon) {
  require_same_shape(candidate, original, "clip_to_budget");
  Image out(candidate.shape());
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    const double o = original[i];
    float lo = static_cast<float>(std::max(0.0, o - epsilon));
    float hi = static_cast<float>(std::min(1.0, o + epsilon));
    if (o - static_cast<double>(lo) > epsilon) lo = std::nextafter(lo, 1.0f);
    if (static_cast<double>(hi) - o > epsilon) hi = std::nextafter(hi, 0.0f);
    out[i] = std::clamp(candidate[i], lo, hi);
  }
  return out;
}

LossGrad loss_value_and_grad(const AttackTask& task, const Image& image, LossKind loss,
                             const std::optional<SupHighParams>& suphigh) {
  const auto caches = forward_members(task.source, image);
  const auto logits = mean_logits(caches);
  const auto t = static_cast<std::size_t>(task.y_t);
  const auto o = static_cast<std::size_t>(task.y_o);
  LossGrad out;
  std::vector<double> seed(logits.size(), 0.0);

  switch (loss) {
    case LossKind::ce: {
      out.value = cross_entropy(std::span<const double>(logits), task.y_t);
      const auto p = softmax(std::span<const double>(logits));
      for (std::size_t i = 0; i < p.size(); ++i) seed[i] = (i == t ? 1.0 : 0.0) - p[i];
      out.ascent = to_image(backward_members(task.source, caches, seed));
      break;
    }
    case LossKind::logit: {
      out.value = -logits[t];
      seed[t] = 1.0;
      out.ascent = to_image(backward_members(task.source, caches, seed));
      break;
    }
    case LossKind::suphigh: {
      if (!suphigh) throw ConfigError("suphigh loss requires suphigh parameters");
      validate(*suphigh, static_cast<int>(logits.size()));
      SupHighParts parts;
      parts.suppressed = top_labels(logits, task.y_t, task.y_o, suphigh->n_high);
      seed[t] += 1.0;
      seed[o] -= suphigh->beta1;
      parts.g1 = backward_members(task.source, caches, seed);
      std::vector<double> seed2(logits.size(), 0.0);
      double high = 0.0;
      for (const int h : parts.suppressed) {
        seed2[static_cast<std::size_t>(h)] = 1.0;
        high += logits[static_cast<std::size_t>(h)];
      }
      parts.g2 = backward_members(task.source, caches, seed2);
      out.value = -(logits[t] - suphigh->beta1 * logits[o]) + suphigh->beta2 * high;

      const double g1g1 = dot(parts.g1, parts.g1);
      parts.component = parts.g2;
      Tensor64 dir(parts.g1.shape());
      if (g1g1 == 0.0) {
        parts.degenerate = true;
      } else {
        const double coef = dot(parts.g2, parts.g1) / g1g1;
        for (std::size_t i = 0; i < dir.size(); ++i) parts.component[i] = parts.g2[i] - coef * parts.g1[i];
      }
      for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = parts.g1[i] - suphigh->beta2 * parts.component[i];
      out.ascent = to_image(dir);
      out.suphigh = std::move(parts);
      break;
    }
  }
  return out;
}

AttackResult run_baseline_attack_traced(const AttackTask& task, const AttackConfig& cfg,
                                        const std::optional<SupHighParams>& suphigh,
                                        const std::vector<int>& snapshot_at) {
  validate(cfg);
  validate(task);
  for (const int s : snapshot_at) {
    if (s < 0 || s > cfg.iters) throw ConfigError("snapshot iteration outside [0, iters]");
  }
  AttackResult res;
  res.snapshots.resize(snapshot_at.size());
  auto take = [&](int n, const Image& x) {
    for (std::size_t i = 0; i < snapshot_at.size(); ++i) {
      if (snapshot_at[i] == n) res.snapshots[i] = x;
    }
  };

  Rng rng(stream_seed(cfg.seed, task.id, "attack-di"));
  const auto alpha = static_cast<float>(cfg.step_alpha);
  Image x = task.image;
  Tensor m(x.shape());
  bool warned = false;
  take(0, x);
  for (int n = 0; n < cfg.iters; ++n) {
    const DiDraw draw = draw_di(x.dim(1), cfg.di_prob, cfg.di_resize_range, rng);
    const LossGrad lg = loss_value_and_grad(task, apply_di(x, draw), cfg.loss, suphigh);
    if (lg.suphigh && lg.suphigh->degenerate && !warned) {
      res.trace.warnings.push_back("suphigh: zero g1 at iteration " + std::to_string(n) + ", orthogonalization skipped");
      warned = true;
    }
    Image g = ti_smooth(di_adjoint(lg.ascent, draw), cfg.ti_radius);
    const double n1 = l1_norm(g);
    if (n1 == 0.0) {
      res.trace.zero_gradient_steps.push_back(n);
    } else {
      for (float& v : g.values()) v = static_cast<float>(v / n1);
    }
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(cfg.momentum * m[i] + g[i]);
    const Tensor s = sign(m);
    Image cand = x;
    for (std::size_t i = 0; i < cand.size(); ++i) cand[i] += alpha * s[i];
    x = clip_to_budget(cand, task.image, cfg.epsilon);
    res.trace.loss.push_back(lg.value);
    take(n + 1, x);
  }
  res.image = std::move(x);
  return res;
}

Image run_baseline_attack(const AttackTask& task, const AttackConfig& cfg, const std::optional<SupHighParams>& suphigh) {
  return run_baseline_attack_traced(task, cfg, suphigh).image;
}

}  // namespace featft

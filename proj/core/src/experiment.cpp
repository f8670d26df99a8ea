#include "featft/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "featft/parallel.hpp"
#include "featft/zoo.hpp"

namespace featft {

using nlohmann::json;

std::string_view scenario_name(Scenario s) {
  switch (s) {
    case Scenario::random_target: return "random_target";
    case Scenario::most_difficult: return "most_difficult";
    case Scenario::ensemble_holdout: return "ensemble_holdout";
    case Scenario::uap: return "uap";
    case Scenario::ablation_nft: return "ablation_nft";
    case Scenario::ablation_layer: return "ablation_layer";
  }
  return "?";
}

Scenario parse_scenario(std::string_view name) {
  for (const Scenario s : {Scenario::random_target, Scenario::most_difficult, Scenario::ensemble_holdout, Scenario::uap,
                           Scenario::ablation_nft, Scenario::ablation_layer}) {
    if (scenario_name(s) == name) return s;
  }
  throw ConfigError("unknown scenario '" + std::string(name) + "'");
}

void validate(const ExperimentPlan& plan) {
  validate(plan.attack);
  validate(plan.finetune);
  if (plan.task_count < 0) throw ConfigError("task_count must be non-negative");
  if (plan.baseline_iters < 0 || plan.ft_baseline_iters < 0) throw ConfigError("iteration counts must be non-negative");
  if (plan.attacks.empty()) throw ConfigError("plan lists no attacks");
  if (plan.ft.empty()) throw ConfigError("plan lists no ft settings");
  for (const int v : plan.nft_values) {
    if (v < 0) throw ConfigError("nft_values must be non-negative");
  }
  if (plan.scenario == Scenario::ablation_nft && plan.nft_values.empty()) throw ConfigError("ablation_nft needs nft_values");
  std::set<std::string> seen;
  for (const auto& s : plan.sources) {
    if (!seen.insert(s).second) throw ConfigError("duplicate source " + s);
  }
}

// ---------------------------------------------------------------------------------------------
// Plan files

namespace {

template <typename T>
T read(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("plan key '") + key + "': " + e.what());
  }
}

}  // namespace

ExperimentPlan parse_plan(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("plan is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("plan must be a JSON object");
  ExperimentPlan p;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "name") p.name = read<std::string>(j, "name");
    else if (k == "scenario") p.scenario = parse_scenario(read<std::string>(j, "scenario"));
    else if (k == "sources") p.sources = read<std::vector<std::string>>(j, "sources");
    else if (k == "targets") p.targets = read<std::vector<std::string>>(j, "targets");
    else if (k == "attacks") {
      p.attacks.clear();
      for (const auto& a : read<std::vector<std::string>>(j, "attacks")) p.attacks.push_back(parse_loss(a));
    } else if (k == "ft") p.ft = read<std::vector<bool>>(j, "ft");
    else if (k == "ila") p.ila = read<bool>(j, "ila");
    else if (k == "diagnostic") p.diagnostic = read<bool>(j, "diagnostic");
    else if (k == "seed") p.seed = read<std::uint64_t>(j, "seed");
    else if (k == "task_count") p.task_count = read<int>(j, "task_count");
    else if (k == "baseline_iters") p.baseline_iters = read<int>(j, "baseline_iters");
    else if (k == "ft_baseline_iters") p.ft_baseline_iters = read<int>(j, "ft_baseline_iters");
    else if (k == "epsilon") p.attack.epsilon = read<double>(j, "epsilon");
    else if (k == "step_alpha") p.attack.step_alpha = read<double>(j, "step_alpha");
    else if (k == "momentum") p.attack.momentum = read<double>(j, "momentum");
    else if (k == "di_prob") p.attack.di_prob = read<double>(j, "di_prob");
    else if (k == "di_resize_range") p.attack.di_resize_range = read<double>(j, "di_resize_range");
    else if (k == "ti_radius") p.attack.ti_radius = read<int>(j, "ti_radius");
    else if (k == "suphigh_beta1") p.suphigh.beta1 = read<double>(j, "suphigh_beta1");
    else if (k == "suphigh_beta2") p.suphigh.beta2 = read<double>(j, "suphigh_beta2");
    else if (k == "suphigh_n_high") p.suphigh.n_high = read<int>(j, "suphigh_n_high");
    else if (k == "ft_iters") p.finetune.iters = read<int>(j, "ft_iters");
    else if (k == "beta") p.finetune.beta = read<double>(j, "beta");
    else if (k == "ft_step_alpha") p.finetune.step_alpha = read<double>(j, "ft_step_alpha");
    else if (k == "tap") {
      if (!it.value().is_null()) {
        const auto name = read<std::string>(j, "tap");
        p.tap_name = name;
      }
    } else if (k == "mask") p.finetune.mask = parse_mask(read<std::string>(j, "mask"));
    else if (k == "ensemble_n") p.finetune.ensemble_n = read<int>(j, "ensemble_n");
    else if (k == "keep_prob") p.finetune.keep_prob = read<double>(j, "keep_prob");
    else if (k == "mask_fill") p.finetune.mask_fill = read<double>(j, "mask_fill");
    else if (k == "patch_size") p.finetune.patch_size = read<int>(j, "patch_size");
    else if (k == "ft_di_ti") p.finetune.di_ti = read<bool>(j, "ft_di_ti");
    else if (k == "nft_values") p.nft_values = read<std::vector<int>>(j, "nft_values");
    else if (k == "uap_classes") p.uap_classes = read<std::vector<int>>(j, "uap_classes");
    else throw ConfigError("unknown plan key '" + k + "'");
  }
  validate(p);
  return p;
}

ExperimentPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open plan '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_plan(ss.str());
}

std::string plan_to_json(const ExperimentPlan& p) {
  json j = json::object();
  j["name"] = p.name;
  j["scenario"] = std::string(scenario_name(p.scenario));
  j["sources"] = p.sources;
  j["targets"] = p.targets;
  std::vector<std::string> attacks;
  for (const LossKind l : p.attacks) attacks.emplace_back(loss_name(l));
  j["attacks"] = attacks;
  j["ft"] = p.ft;
  j["ila"] = p.ila;
  j["diagnostic"] = p.diagnostic;
  j["seed"] = p.seed;
  j["task_count"] = p.task_count;
  j["baseline_iters"] = p.baseline_iters;
  j["ft_baseline_iters"] = p.ft_baseline_iters;
  j["epsilon"] = p.attack.epsilon;
  j["step_alpha"] = p.attack.step_alpha;
  j["momentum"] = p.attack.momentum;
  j["di_prob"] = p.attack.di_prob;
  j["di_resize_range"] = p.attack.di_resize_range;
  j["ti_radius"] = p.attack.ti_radius;
  j["suphigh_beta1"] = p.suphigh.beta1;
  j["suphigh_beta2"] = p.suphigh.beta2;
  j["suphigh_n_high"] = p.suphigh.n_high;
  j["ft_iters"] = p.finetune.iters;
  j["beta"] = p.finetune.beta;
  j["ft_step_alpha"] = p.finetune.step_alpha;
  j["tap"] = p.tap_name.empty() ? json(nullptr) : json(p.tap_name);
  j["mask"] = std::string(mask_name(p.finetune.mask));
  j["ensemble_n"] = p.finetune.ensemble_n;
  j["keep_prob"] = p.finetune.keep_prob;
  j["mask_fill"] = p.finetune.mask_fill;
  j["patch_size"] = p.finetune.patch_size;
  j["ft_di_ti"] = p.finetune.di_ti;
  j["nft_values"] = p.nft_values;
  j["uap_classes"] = p.uap_classes;
  return j.dump(2) + "\n";
}

std::string plan_digest(const ExperimentPlan& plan) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(plan_to_json(plan))));
  return buf;
}

// ---------------------------------------------------------------------------------------------
// Tasks

int pick_target(Scenario scenario, std::span<const double> source_logits, int y_o, Rng& rng) {
  const int k = static_cast<int>(source_logits.size());
  if (k < 2) throw ConfigError("pick_target needs at least two classes");
  if (y_o < 0 || y_o >= k) throw ConfigError("pick_target: original label out of range");
  if (scenario == Scenario::most_difficult) {
    int best = -1;
    for (int i = 0; i < k; ++i) {
      if (i == y_o) continue;
      if (best < 0 || source_logits[static_cast<std::size_t>(i)] < source_logits[static_cast<std::size_t>(best)]) best = i;
    }
    return best;
  }
  const int r = rng.uniform_int(k - 1);
  return r >= y_o ? r + 1 : r;
}

std::vector<PlannedTask> plan_tasks(const ExperimentPlan& plan, const Dataset& dataset, const Source& source) {
  std::vector<PlannedTask> tasks;
  if (plan.task_count == 0) return tasks;
  if (dataset.attack_eval.empty()) throw ConfigError("no attack-eval images: every zoo model must classify some held-out image correctly");
  std::vector<int> order = dataset.attack_eval;
  Rng shuffle(stream_seed(plan.seed, 0, "task-order"));
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[static_cast<std::size_t>(shuffle.uniform_int(static_cast<int>(i) + 1))]);
  }
  const std::vector<double> flat(static_cast<std::size_t>(dataset.class_count), 0.0);
  for (int i = 0; i < plan.task_count; ++i) {
    PlannedTask t;
    t.sample = order[static_cast<std::size_t>(i) % order.size()];
    const Sample& s = dataset.samples[static_cast<std::size_t>(t.sample)];
    t.y_o = s.label;
    Rng rng(stream_seed(plan.seed, static_cast<std::uint64_t>(i), "task-target"));
    if (plan.scenario == Scenario::most_difficult) {
      const auto logits = source_logits(source, s.image);
      t.y_t = pick_target(plan.scenario, logits, t.y_o, rng);
    } else {
      t.y_t = pick_target(Scenario::random_target, flat, t.y_o, rng);
    }
    tasks.push_back(t);
  }
  return tasks;
}

// ---------------------------------------------------------------------------------------------
// Runner

namespace {

struct Job {
  Source source;
  std::vector<const Model*> targets;
};

struct Variant {
  std::string attack;
  bool ft = false;
};

const Model& find_model(const std::vector<Model>& zoo, const std::string& name) {
  for (const Model& m : zoo) {
    if (m.name() == name) return m;
  }
  throw ConfigError("model '" + name + "' has no checkpoint");
}

std::vector<std::string> names_or_all(const std::vector<std::string>& names, const std::vector<Model>& zoo) {
  if (!names.empty()) return names;
  std::vector<std::string> all;
  for (const Model& m : zoo) all.push_back(m.name());
  return all;
}

std::vector<Job> build_jobs(const ExperimentPlan& plan, const std::vector<Model>& zoo) {
  const auto sources = names_or_all(plan.sources, zoo);
  const auto targets = names_or_all(plan.targets, zoo);
  for (const auto& n : sources) find_model(zoo, n);
  for (const auto& n : targets) find_model(zoo, n);
  std::vector<Job> jobs;
  if (plan.scenario == Scenario::ensemble_holdout) {
    if (zoo.size() < 3 || sources.size() < 3) throw ConfigError("ensemble_holdout needs at least three models");
    for (const auto& t : targets) {
      std::vector<const Model*> members;
      for (const auto& s : sources) {
        if (s != t) members.push_back(&find_model(zoo, s));
      }
      jobs.push_back({Source(members), {&find_model(zoo, t)}});
    }
    return jobs;
  }
  for (const auto& s : sources) {
    Job job{Source(find_model(zoo, s)), {}};
    for (const auto& t : targets) {
      if (t != s || plan.diagnostic) job.targets.push_back(&find_model(zoo, t));
    }
    if (plan.scenario == Scenario::uap && plan.targets.empty()) job.targets = {&find_model(zoo, s)};
    jobs.push_back(std::move(job));
  }
  return jobs;
}

TapPoint resolve_tap(const ModelSpec& spec, const std::string& name) {
  for (int i = 0; i < spec.layer_count(); ++i) {
    if (spec.layers[static_cast<std::size_t>(i)].name == name) {
      validate_tap(spec, {i});
      return {i};
    }
  }
  throw ConfigError("model '" + spec.name + "' has no layer named '" + name + "'");
}

FinetuneConfig finetune_for(const ExperimentPlan& plan, const Source& source) {
  FinetuneConfig cfg = plan.finetune;
  cfg.seed = plan.seed;
  cfg.tap.reset();
  if (!plan.tap_name.empty()) {
    if (source.size() != 1) throw ConfigError("a named tap applies to single-model sources only");
    cfg.tap = resolve_tap(*source.members().front()->spec, plan.tap_name);
  }
  return cfg;
}

std::vector<Variant> variants_for(const ExperimentPlan& plan, LossKind loss, const Source& source) {
  const std::string l(loss_name(loss));
  std::vector<Variant> out;
  switch (plan.scenario) {
    case Scenario::ablation_nft:
      for (const int v : plan.nft_values) out.push_back({l + "@nft=" + std::to_string(v), v > 0});
      break;
    case Scenario::ablation_layer: {
      if (source.size() != 1) throw ConfigError("ablation_layer needs single-model sources");
      out.push_back({l + "@tap=none", false});
      const ModelSpec& spec = *source.members().front()->spec;
      for (const TapPoint t : sweep_taps(spec)) {
        out.push_back({l + "@tap=" + spec.layers[static_cast<std::size_t>(t.layer_id)].name, true});
      }
      break;
    }
    default:
      for (const bool f : {false, true}) {
        if (std::find(plan.ft.begin(), plan.ft.end(), f) != plan.ft.end()) out.push_back({l, f});
      }
      if (plan.ila) {
        if (source.size() != 1) throw ConfigError("ila rows need single-model sources");
        out.push_back({l + "+ila", true});
      }
  }
  return out;
}

// Final images of every variant for one task, in variant order.
std::vector<Image> run_variants(const ExperimentPlan& plan, LossKind loss, const Source& source,
                                const std::vector<Variant>& variants, const AttackTask& task) {
  AttackConfig acfg = plan.attack;
  acfg.loss = loss;
  acfg.seed = plan.seed;
  const FinetuneConfig fcfg = finetune_for(plan, source);
  const std::optional<SupHighParams> sh = plan.suphigh;
  const int nb = plan.baseline_iters, nf = plan.ft_baseline_iters;
  std::vector<Image> out;

  switch (plan.scenario) {
    case Scenario::ablation_nft: {
      acfg.iters = nf;
      const Image ae = run_baseline_attack(task, acfg, sh);
      FinetuneConfig cfg = fcfg;
      cfg.iters = *std::max_element(plan.nft_values.begin(), plan.nft_values.end());
      auto res = finetune_traced(ae, task.image, task.y_t, task.y_o, source, cfg, acfg, task.id, plan.nft_values);
      return std::move(res.snapshots);
    }
    case Scenario::ablation_layer: {
      acfg.iters = nf;
      const Image ae = run_baseline_attack(task, acfg, sh);
      out.push_back(ae);
      for (const TapPoint t : sweep_taps(*source.members().front()->spec)) {
        FinetuneConfig cfg = fcfg;
        cfg.tap = t;
        out.push_back(finetune_traced(ae, task.image, task.y_t, task.y_o, source, cfg, acfg, task.id).image);
      }
      return out;
    }
    default: {
      bool need_nb = false, need_nf = false;
      for (const Variant& v : variants) (v.ft ? need_nf : need_nb) = true;
      acfg.iters = std::max(need_nb ? nb : 0, need_nf ? nf : 0);
      const AttackResult r = run_baseline_attack_traced(task, acfg, sh, {nb <= acfg.iters ? nb : 0, nf <= acfg.iters ? nf : 0});
      const Image& ae = r.snapshots[1];
      for (const Variant& v : variants) {
        if (!v.ft) {
          out.push_back(r.snapshots[0]);
        } else if (v.attack.ends_with("+ila")) {
          const Model& m = *source.members().front();
          const TapPoint tap = fcfg.tap.value_or(m.spec->default_tap);
          out.push_back(targeted_ila_finetune(ae, task.image, m, tap, fcfg.iters, acfg).image);
        } else {
          out.push_back(finetune_traced(ae, task.image, task.y_t, task.y_o, source, fcfg, acfg, task.id).image);
        }
      }
      return out;
    }
  }
}

std::string row_digest(const std::string& plan_hash, const std::string& source, const std::string& target,
                       const std::string& attack, const std::string& scenario, bool ft) {
  const std::string key = plan_hash + "|" + source + "|" + target + "|" + attack + "|" + scenario + "|" + (ft ? "1" : "0");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(key)));
  return buf;
}

// success[variant][target] for one (job, loss).
std::vector<std::vector<int>> run_cell(const ExperimentPlan& plan, const Job& job, LossKind loss,
                                       const std::vector<Variant>& variants, const Dataset& dataset, int jobs) {
  const auto tasks = plan_tasks(plan, dataset, job.source);
  const std::size_t nv = variants.size(), nt = job.targets.size();
  std::vector<std::vector<char>> hit(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), jobs, [&](int i) {
    const PlannedTask& pt = tasks[static_cast<std::size_t>(i)];
    AttackTask task{dataset.samples[static_cast<std::size_t>(pt.sample)].image, pt.y_o, pt.y_t, job.source,
                    static_cast<std::uint64_t>(i)};
    const auto finals = run_variants(plan, loss, job.source, variants, task);
    auto& h = hit[static_cast<std::size_t>(i)];
    h.assign(nv * nt, 0);
    for (std::size_t v = 0; v < nv; ++v) {
      for (std::size_t t = 0; t < nt; ++t) h[v * nt + t] = predict(*job.targets[t], finals[v]) == pt.y_t ? 1 : 0;
    }
  });
  std::vector<std::vector<int>> success(nv, std::vector<int>(nt, 0));
  for (const auto& h : hit) {
    for (std::size_t v = 0; v < nv; ++v) {
      for (std::size_t t = 0; t < nt; ++t) success[v][t] += h[v * nt + t];
    }
  }
  return success;
}

void refresh_attack_eval(Dataset& dataset, const std::vector<Model>& zoo) {
  std::vector<const Model*> ptrs;
  for (const Model& m : zoo) ptrs.push_back(&m);
  select_attack_eval(dataset, ptrs);
}

std::vector<int> uap_classes(const ExperimentPlan& plan, int class_count) {
  if (!plan.uap_classes.empty()) {
    for (const int c : plan.uap_classes) {
      if (c < 0 || c >= class_count) throw ConfigError("uap class out of range");
    }
    return plan.uap_classes;
  }
  std::vector<int> all(static_cast<std::size_t>(class_count));
  for (int c = 0; c < class_count; ++c) all[static_cast<std::size_t>(c)] = c;
  return all;
}

struct UapCell {
  int success = 0, count = 0;
};

// cells[class][ft][target]
std::vector<std::vector<std::vector<UapCell>>> run_uap_job(const ExperimentPlan& plan, const Job& job, LossKind loss,
                                                           const std::vector<int>& classes, const Dataset& dataset,
                                                           int jobs) {
  if (job.source.size() != 1) throw ConfigError("uap needs single-model sources");
  const Model& model = *job.source.members().front();
  std::vector<std::vector<std::vector<UapCell>>> cells(classes.size());
  parallel_for(static_cast<int>(classes.size()), jobs, [&](int ci) {
    auto& per_ft = cells[static_cast<std::size_t>(ci)];
    per_ft.assign(2, std::vector<UapCell>(job.targets.size()));
    for (const bool f : {false, true}) {
      if (std::find(plan.ft.begin(), plan.ft.end(), f) == plan.ft.end()) continue;
      AttackConfig acfg = plan.attack;
      acfg.loss = loss;
      acfg.seed = plan.seed;
      acfg.iters = plan.baseline_iters;
      std::optional<FinetuneConfig> fcfg;
      if (f) fcfg = finetune_for(plan, job.source);
      for (std::size_t t = 0; t < job.targets.size(); ++t) {
        const UapResult r = run_uap_datafree(model, classes[static_cast<std::size_t>(ci)], acfg, fcfg, dataset,
                                             *job.targets[t], plan.ft_baseline_iters);
        per_ft[f ? 1 : 0][t] = {r.success, r.count};
      }
    }
  });
  return cells;
}

TransferReport run_plan(const ExperimentPlan& plan, const std::vector<Model>& zoo, Dataset& dataset, int jobs,
                        const ReportRow* only) {
  validate(plan);
  auto all_jobs = build_jobs(plan, zoo);
  refresh_attack_eval(dataset, zoo);
  const std::string hash = plan_digest(plan);
  const std::string scen(scenario_name(plan.scenario));
  TransferReport report;
  report.config_digest = hash;
  if (plan.task_count == 0 && plan.scenario != Scenario::uap) return report;

  for (Job& job : all_jobs) {
    const std::string src = job.source.name();
    if (only) {
      if (only->source != src) continue;
      std::erase_if(job.targets, [&](const Model* m) { return m->name() != only->target; });
      if (job.targets.empty()) continue;
    }
    for (const LossKind loss : plan.attacks) {
      if (plan.scenario == Scenario::uap) {
        const auto classes = uap_classes(plan, dataset.class_count);
        if (only && !only->attack.starts_with(std::string(loss_name(loss)) + "@")) continue;
        const auto cells = run_uap_job(plan, job, loss, classes, dataset, jobs);
        for (std::size_t t = 0; t < job.targets.size(); ++t) {
          for (std::size_t ci = 0; ci < classes.size(); ++ci) {
            for (const bool f : {false, true}) {
              if (std::find(plan.ft.begin(), plan.ft.end(), f) == plan.ft.end()) continue;
              const std::string attack = std::string(loss_name(loss)) + "@class=" + std::to_string(classes[ci]);
              const UapCell& c = cells[ci][f ? 1 : 0][t];
              const std::string tgt = job.targets[t]->name();
              report.rows.push_back({src, tgt, attack, scen, f, c.success, c.count, row_digest(hash, src, tgt, attack, scen, f)});
            }
          }
        }
        continue;
      }
      const auto variants = variants_for(plan, loss, job.source);
      if (only && std::none_of(variants.begin(), variants.end(), [&](const Variant& v) {
            return v.attack == only->attack && v.ft == only->ft;
          })) {
        continue;
      }
      const auto success = run_cell(plan, job, loss, variants, dataset, jobs);
      for (std::size_t t = 0; t < job.targets.size(); ++t) {
        const std::string tgt = job.targets[t]->name();
        for (std::size_t v = 0; v < variants.size(); ++v) {
          report.rows.push_back({src, tgt, variants[v].attack, scen, variants[v].ft, success[v][t], plan.task_count,
                                 row_digest(hash, src, tgt, variants[v].attack, scen, variants[v].ft)});
        }
      }
    }
  }
  return report;
}

}  // namespace

TransferReport run_transfer_experiment(const ExperimentPlan& plan, const std::vector<Model>& zoo, Dataset dataset,
                                       int jobs) {
  return run_plan(plan, zoo, dataset, jobs, nullptr);
}

int rerun_row(const ExperimentPlan& plan, const ReportRow& row, const std::vector<Model>& zoo, Dataset dataset, int jobs) {
  if (row.seed_digest != row_digest(plan_digest(plan), row.source, row.target, row.attack, row.scenario, row.ft)) {
    throw ConfigError("row seed digest does not match this plan");
  }
  const TransferReport r = run_plan(plan, zoo, dataset, jobs, &row);
  for (const ReportRow& x : r.rows) {
    if (x.source == row.source && x.target == row.target && x.attack == row.attack && x.ft == row.ft) return x.success;
  }
  throw ConfigError("row not produced by this plan");
}

UapResult run_uap_datafree(const Model& model, int y_t, const AttackConfig& attack_cfg,
                           const std::optional<FinetuneConfig>& ft_cfg, const Dataset& dataset, const Model& eval_model,
                           int ft_baseline_iters) {
  validate(attack_cfg);
  const int k = model.class_count();
  if (y_t < 0 || y_t >= k) throw ConfigError("uap target out of range");
  const Image mean(model.spec->input_shape, 0.5f);
  const auto logits = forward(model, mean).logits;
  std::vector<int> rank(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) rank[static_cast<std::size_t>(i)] = i;
  std::stable_sort(rank.begin(), rank.end(), [&](int a, int b) { return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)]; });

  UapResult res;
  res.y_o = rank[0] == y_t ? rank[1] : rank[0];
  const Source source(model);
  AttackTask task{mean, res.y_o, y_t, source, static_cast<std::uint64_t>(y_t)};
  const std::optional<SupHighParams> sh = SupHighParams{};
  Image adv;
  if (ft_cfg) {
    AttackConfig acfg = attack_cfg;
    acfg.iters = ft_baseline_iters;
    const Image ae = run_baseline_attack(task, acfg, sh);
    adv = finetune_traced(ae, mean, y_t, res.y_o, source, *ft_cfg, attack_cfg, task.id).image;
  } else {
    adv = run_baseline_attack(task, attack_cfg, sh);
  }
  res.delta = Image(adv.shape());
  for (std::size_t i = 0; i < adv.size(); ++i) res.delta[i] = adv[i] - 0.5f;

  const std::vector<int> pool = dataset.attack_eval.empty() ? dataset.indices(Split::heldout) : dataset.attack_eval;
  for (const int idx : pool) {
    const Sample& s = dataset.samples[static_cast<std::size_t>(idx)];
    if (s.label == y_t) continue;
    Image x = s.image;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] + res.delta[i], 0.0f, 1.0f);
    ++res.count;
    res.success += predict(eval_model, x) == y_t ? 1 : 0;
  }
  return res;
}

}  // namespace featft

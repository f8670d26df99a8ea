#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

#include "featft/attack.hpp"
#include "featft/checkpoint.hpp"
#include "featft/dataset.hpp"
#include "featft/errors.hpp"
#include "featft/experiment.hpp"
#include "featft/finetune.hpp"
#include "featft/parallel.hpp"
#include "featft/report.hpp"
#include "featft/train.hpp"
#include "featft/zoo.hpp"

namespace featft::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------------------------
// Option tables. Every command resolves defaults < config file < flags into one flat JSON object,
// which is also the snapshot written next to the command's outputs.

enum class Kind { number, integer, text, flag, int_list, text_list };

struct Opt {
  std::string key;
  Kind kind;
  json def;
  std::string help;
};

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

double parse_number(const std::string& key, const std::string& s) {
  try {
    const auto slash = s.find('/');
    std::size_t used = 0;
    if (slash == std::string::npos) {
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } else {
      const double a = std::stod(s.substr(0, slash), &used);
      if (used == slash) {
        const std::string rest = s.substr(slash + 1);
        const double b = std::stod(rest, &used);
        if (used == rest.size() && b != 0.0) return a / b;
      }
    }
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + s + "'");
}

long long parse_integer(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected an integer, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

json from_text(const Opt& o, const std::string& s) {
  switch (o.kind) {
    case Kind::number: return parse_number(o.key, s);
    case Kind::integer: return parse_integer(o.key, s);
    case Kind::text: return s;
    case Kind::flag: return s == "true" || s == "1";
    case Kind::int_list: {
      json a = json::array();
      for (const auto& item : split_list(s)) a.push_back(parse_integer(o.key, item));
      return a;
    }
    case Kind::text_list: return split_list(s);
  }
  return nullptr;
}

void check_type(const Opt& o, const json& v) {
  bool ok = false;
  switch (o.kind) {
    case Kind::number: ok = v.is_number(); break;
    case Kind::integer: ok = v.is_number_integer(); break;
    case Kind::text: ok = v.is_string(); break;
    case Kind::flag: ok = v.is_boolean(); break;
    case Kind::int_list:
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number_integer(); });
      break;
    case Kind::text_list:
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); });
      break;
  }
  if (!ok) throw ConfigError("config key '" + o.key + "' has the wrong type");
}

struct Command {
  CLI::App* app = nullptr;
  std::vector<Opt> opts;
  std::map<std::string, std::string> raw;
  std::map<std::string, CLI::Option*> handles;
  CLI::Option* no_ft = nullptr;

  void add(Opt o) {
    const std::string name = dashed(o.key);
    if (o.kind == Kind::flag) {
      handles[o.key] = app->add_flag(name)->description(o.help);
      if (o.key == "ft") no_ft = app->add_flag("--no-ft", "disable feature-space fine-tuning");
    } else {
      handles[o.key] = app->add_option(name, raw[o.key], o.help);
    }
    opts.push_back(std::move(o));
  }
};

struct Globals {
  std::string out = ".";
  std::string config;
  int jobs = default_jobs();
};

fs::path under(const Globals& g, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : fs::path(g.out) / path;
}

// Inputs shipped with the sources (plans, configs) may also be given relative to the cwd.
fs::path input_path(const Globals& g, const std::string& p) {
  const fs::path a = under(g, p);
  if (fs::exists(a) || fs::path(p).is_absolute()) return a;
  return fs::exists(p) ? fs::path(p) : a;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("FEATFT_SEED");
  if (!s || !*s) return std::nullopt;
  return static_cast<std::uint64_t>(parse_integer("FEATFT_SEED", s));
}

json resolve(const Command& cmd, const Globals& g) {
  json cfg = json::object();
  for (const Opt& o : cmd.opts) cfg[o.key] = o.def;
  bool seed_given = false;
  if (!g.config.empty()) {
    const json file = read_json_file(input_path(g, g.config));
    if (!file.is_object()) throw ConfigError("config file must hold a flat JSON object");
    for (auto it = file.begin(); it != file.end(); ++it) {
      const auto o = std::find_if(cmd.opts.begin(), cmd.opts.end(), [&](const Opt& x) { return x.key == it.key(); });
      if (o == cmd.opts.end()) throw ConfigError("unknown config key '" + it.key() + "' for " + cmd.app->get_name());
      check_type(*o, it.value());
      cfg[it.key()] = it.value();
      seed_given |= it.key() == "seed";
    }
  }
  for (const Opt& o : cmd.opts) {
    CLI::Option* h = cmd.handles.at(o.key);
    if (o.kind == Kind::flag) {
      const bool on = h->count() > 0, off = cmd.no_ft && o.key == "ft" && cmd.no_ft->count() > 0;
      if (on && off) throw ConfigError("--ft and --no-ft are mutually exclusive");
      if (on) cfg[o.key] = true;
      if (off) cfg[o.key] = false;
    } else if (h->count() > 0) {
      cfg[o.key] = from_text(o, cmd.raw.at(o.key));
      seed_given |= o.key == "seed";
    }
  }
  if (!seed_given && cfg.contains("seed")) {
    if (const auto s = env_seed()) cfg["seed"] = *s;
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "'");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void snapshot(const fs::path& path, const std::string& command, const json& cfg) {
  json s = cfg;
  s["command"] = command;
  write_text(path, s.dump(2) + "\n");
}

std::vector<Model> load_models(const fs::path& dir, const std::vector<std::string>& names) {
  std::vector<Model> models;
  for (const auto& n : names) {
    zoo_spec(n);
    if (!fs::exists(dir / (n + ".ftw"))) {
      throw ConfigError("missing checkpoint for '" + n + "' in " + dir.string() + " (run `featft train` first)");
    }
  }
  for (const auto& n : names) models.push_back(load_zoo_model(dir, n));
  return models;
}

std::vector<std::string> text_list(const json& v) { return v.get<std::vector<std::string>>(); }

// ---------------------------------------------------------------------------------------------
// Commands

int cmd_gen_data(const json& cfg, const Globals& g, std::ostream& out) {
  SyntheticOptions o;
  o.seed = cfg["seed"].get<std::uint64_t>();
  o.per_class = cfg["per_class"].get<int>();
  o.heldout_fraction = cfg["heldout_fraction"].get<double>();
  const Dataset ds = gen_synthetic_dataset(o);
  const fs::path root = under(g, cfg["data"].get<std::string>());
  save_dataset(ds, root);
  snapshot(root / "gen-data.config.json", "gen-data", cfg);
  out << "wrote " << ds.samples.size() << " images to " << root.string() << "\n";
  return kExitOk;
}

int cmd_train(const json& cfg, const Globals& g, std::ostream& out) {
  TrainConfig tc;
  tc.epochs = cfg["epochs"].get<int>();
  tc.learning_rate = cfg["lr"].get<double>();
  tc.batch_size = cfg["batch_size"].get<int>();
  tc.momentum = cfg["momentum"].get<double>();
  tc.seed = cfg["seed"].get<std::uint64_t>();
  validate(tc);
  auto names = text_list(cfg["models"]);
  if (names.empty()) names = zoo_names();
  std::vector<std::shared_ptr<const ModelSpec>> specs;
  for (const auto& n : names) specs.push_back(zoo_spec(n));
  const Dataset ds = load_dataset(under(g, cfg["data"].get<std::string>()));
  const fs::path dir = under(g, cfg["checkpoints"].get<std::string>());
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "'");

  std::vector<Checkpoint> cps(names.size());
  parallel_for(static_cast<int>(names.size()), g.jobs, [&](int i) {
    cps[static_cast<std::size_t>(i)] = train(specs[static_cast<std::size_t>(i)], ds, tc);
  });
  std::vector<Model> models;
  for (std::size_t i = 0; i < names.size(); ++i) {
    save_checkpoint(cps[i], dir / (names[i] + ".ftw"));
    models.push_back(model_from_checkpoint(cps[i], specs[i]));
    char line[160];
    std::snprintf(line, sizeof line, "%s heldout_accuracy=%.4f digest=%s\n", names[i].c_str(), cps[i].meta.accuracy,
                  checkpoint_digest(cps[i]).c_str());
    out << line;
  }
  if (models.size() >= 2) {
    const auto held = ds.indices(Split::heldout);
    int disagree = 0;
    for (const int idx : held) {
      const Image& x = ds.samples[static_cast<std::size_t>(idx)].image;
      const int p0 = predict(models[0], x);
      disagree += std::any_of(models.begin() + 1, models.end(), [&](const Model& m) { return predict(m, x) != p0; }) ? 1 : 0;
    }
    const double rate = held.empty() ? 0.0 : static_cast<double>(disagree) / static_cast<double>(held.size());
    out << "heldout_disagreement=" << format_rate(rate) << "\n";
    if (rate < 0.05) out << "warning: models disagree on fewer than 5% of held-out images\n";
  }
  snapshot(dir / "train.config.json", "train", cfg);
  return kExitOk;
}

struct AttackSetup {
  AttackConfig attack;
  FinetuneConfig finetune;
  SupHighParams suphigh;
  bool ft = false;
  std::string tap;
};

AttackSetup attack_setup(const json& cfg) {
  AttackSetup s;
  s.attack.loss = parse_loss(cfg["loss"].get<std::string>());
  s.attack.epsilon = cfg["eps"].get<double>();
  s.attack.step_alpha = cfg["alpha"].get<double>();
  s.attack.momentum = cfg["momentum"].get<double>();
  s.attack.di_prob = cfg["di_prob"].get<double>();
  s.attack.di_resize_range = cfg["di_resize_range"].get<double>();
  s.attack.ti_radius = cfg["ti_radius"].get<int>();
  s.attack.seed = cfg["seed"].get<std::uint64_t>();
  s.finetune.iters = cfg["ft_iters"].get<int>();
  s.finetune.beta = cfg["beta"].get<double>();
  s.finetune.step_alpha = cfg["alpha"].get<double>();
  s.finetune.mask = parse_mask(cfg["mask"].get<std::string>());
  s.finetune.ensemble_n = cfg["ensemble_n"].get<int>();
  s.finetune.keep_prob = cfg["keep_prob"].get<double>();
  s.finetune.mask_fill = cfg["mask_fill"].get<double>();
  s.finetune.patch_size = cfg["patch_size"].get<int>();
  s.finetune.seed = s.attack.seed;
  s.suphigh.beta1 = cfg["suphigh_beta1"].get<double>();
  s.suphigh.beta2 = cfg["suphigh_beta2"].get<double>();
  s.suphigh.n_high = cfg["suphigh_n_high"].get<int>();
  s.tap = cfg["tap"].get<std::string>();
  // Zero fine-tune iterations mean no fine-tuning at all, including the shorter baseline.
  s.ft = cfg["ft"].get<bool>() && s.finetune.iters > 0;
  const int iters = cfg["iters"].get<int>();
  s.attack.iters = iters >= 0 ? iters : (s.ft ? 160 : 200);
  validate(s.attack);
  validate(s.finetune);
  return s;
}

Image craft(const AttackSetup& s, const Source& source, const Image& image, int y_o, int y_t, std::uint64_t id) {
  AttackTask task{image, y_o, y_t, source, id};
  Image ae = run_baseline_attack(task, s.attack, s.suphigh);
  if (!s.ft) return ae;
  FinetuneConfig fc = s.finetune;
  if (!s.tap.empty()) {
    if (source.size() != 1) throw ConfigError("--tap applies to single-model sources only");
    const ModelSpec& spec = *source.members().front()->spec;
    int found = -1;
    for (int i = 0; i < spec.layer_count(); ++i) {
      if (spec.layers[static_cast<std::size_t>(i)].name == s.tap) found = i;
    }
    if (found < 0) throw ConfigError("model '" + spec.name + "' has no layer named '" + s.tap + "'");
    fc.tap = TapPoint{found};
  }
  return finetune_traced(ae, image, y_t, y_o, source, fc, s.attack, id).image;
}

int cmd_attack(const json& cfg, const Globals& g, std::ostream& out) {
  const AttackSetup s = attack_setup(cfg);
  const fs::path ckpt = under(g, cfg["checkpoints"].get<std::string>());
  const auto names = split_list(cfg["model"].get<std::string>());
  if (names.empty()) throw ConfigError("--model names no model");
  const int batch = cfg["batch"].get<int>();
  const fs::path output = under(g, cfg["output"].get<std::string>());

  if (batch <= 0) {
    if (cfg["input"].get<std::string>().empty()) throw ConfigError("attack needs --input or --batch");
    const Image image = read_ppm(under(g, cfg["input"].get<std::string>()));
    const auto models = load_models(ckpt, names);
    std::vector<const Model*> ptrs;
    for (const Model& m : models) ptrs.push_back(&m);
    const Source source(ptrs);
    int y_o = cfg["label"].get<int>();
    if (y_o < 0) y_o = source_predict(source, image);
    int y_t = cfg["target"].get<int>();
    if (y_t < 0) {
      Rng rng(stream_seed(s.attack.seed, 0, "cli-target"));
      const std::vector<double> flat(static_cast<std::size_t>(source.class_count()), 0.0);
      y_t = pick_target(Scenario::random_target, flat, y_o, rng);
    }
    const Image adv = craft(s, source, image, y_o, y_t, 0);
    write_ppm(adv, output);
    snapshot(fs::path(output.string() + ".config.json"), "attack", cfg);
    out << "y_o=" << y_o << " y_t=" << y_t << " source_prediction=" << source_predict(source, adv)
        << " linf=" << max_abs([&] { Tensor d(adv.shape()); for (std::size_t i = 0; i < d.size(); ++i) d[i] = adv[i] - image[i]; return d; }())
        << " output=" << output.string() << "\n";
    return kExitOk;
  }

  Dataset ds = load_dataset(under(g, cfg["data"].get<std::string>()));
  const auto zoo = load_models(ckpt, zoo_names());
  std::vector<const Model*> all, members;
  for (const Model& m : zoo) all.push_back(&m);
  for (const auto& n : names) {
    const auto it = std::find_if(zoo.begin(), zoo.end(), [&](const Model& m) { return m.name() == n; });
    if (it == zoo.end()) throw ConfigError("unknown model '" + n + "'");
    members.push_back(&*it);
  }
  select_attack_eval(ds, all);
  const Source source(members);
  ExperimentPlan plan;
  plan.seed = s.attack.seed;
  plan.task_count = batch;
  const auto tasks = plan_tasks(plan, ds, source);
  std::vector<Image> advs(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), g.jobs, [&](int i) {
    const PlannedTask& t = tasks[static_cast<std::size_t>(i)];
    advs[static_cast<std::size_t>(i)] =
        craft(s, source, ds.samples[static_cast<std::size_t>(t.sample)].image, t.y_o, t.y_t, static_cast<std::uint64_t>(i));
  });
  std::string manifest = "task,id,y_o,y_t,source_prediction,path\n";
  int hits = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const Sample& smp = ds.samples[static_cast<std::size_t>(tasks[i].sample)];
    const std::string file = std::to_string(i) + "_" + smp.id + "_to" + std::to_string(tasks[i].y_t) + ".ppm";
    write_ppm(advs[i], output / file);
    const int pred = source_predict(source, advs[i]);
    hits += pred == tasks[i].y_t ? 1 : 0;
    manifest += std::to_string(i) + "," + smp.id + "," + std::to_string(tasks[i].y_o) + "," + std::to_string(tasks[i].y_t) +
                "," + std::to_string(pred) + "," + file + "\n";
  }
  write_text(output / "manifest.csv", manifest);
  snapshot(output / "attack.config.json", "attack", cfg);
  out << "attacked " << tasks.size() << " images, source success " << hits << "/" << tasks.size() << "\n";
  return kExitOk;
}

ExperimentPlan plan_from(const json& cfg, const Globals& g, std::optional<Scenario> forced) {
  ExperimentPlan plan;
  const std::string p = cfg["plan"].get<std::string>();
  if (!p.empty()) {
    plan = load_plan(input_path(g, p));
  } else if (!forced) {
    throw ConfigError("eval needs --plan");
  }
  if (forced) plan.scenario = *forced;
  if (cfg["seed"].is_number_integer() && cfg["seed"].get<long long>() >= 0) plan.seed = cfg["seed"].get<std::uint64_t>();
  if (cfg["task_count"].get<int>() >= 0) plan.task_count = cfg["task_count"].get<int>();
  if (!cfg["sources"].empty()) plan.sources = text_list(cfg["sources"]);
  if (!cfg["targets"].empty()) plan.targets = text_list(cfg["targets"]);
  if (!cfg["attacks"].empty()) {
    plan.attacks.clear();
    for (const auto& a : text_list(cfg["attacks"])) plan.attacks.push_back(parse_loss(a));
  }
  validate(plan);
  return plan;
}

int run_plan_command(const std::string& command, const json& cfg, const Globals& g, std::ostream& out,
                     std::optional<Scenario> forced) {
  const ExperimentPlan plan = plan_from(cfg, g, forced);
  const Dataset ds = load_dataset(under(g, cfg["data"].get<std::string>()));
  std::vector<std::string> names = plan.sources;
  for (const auto& t : plan.targets) {
    if (std::find(names.begin(), names.end(), t) == names.end()) names.push_back(t);
  }
  if (names.empty() || plan.scenario == Scenario::ensemble_holdout) names = zoo_names();
  // The attack-eval subset is defined by the whole zoo.
  const auto zoo = load_models(under(g, cfg["checkpoints"].get<std::string>()), zoo_names());
  const TransferReport report = run_transfer_experiment(plan, zoo, ds, g.jobs);
  const fs::path dir = under(g, cfg["reports"].get<std::string>());
  const fs::path csv = dir / (plan.name + ".csv");
  write_text(csv, emit_csv(report));
  if (!report.rows.empty()) write_text(dir / (plan.name + ".svg"), emit_svg(report));
  json snap = cfg;
  snap["resolved_plan"] = json::parse(plan_to_json(plan));
  snap["plan_digest"] = plan_digest(plan);
  snapshot(dir / (plan.name + ".config.json"), command, snap);
  out << "wrote " << report.rows.size() << " rows to " << csv.string() << "\n";
  return kExitOk;
}

int cmd_report(const json& cfg, const Globals& g, std::ostream& out) {
  const std::string in = cfg["input"].get<std::string>();
  if (in.empty()) throw ConfigError("report needs --input");
  const fs::path src = under(g, in);
  const TransferReport r = read_report_csv(src);
  std::string svg = cfg["svg"].get<std::string>();
  const fs::path dst = svg.empty() ? fs::path(src).replace_extension(".svg") : under(g, svg);
  if (r.rows.empty()) throw ConfigError("report has no rows to plot");
  write_text(dst, emit_svg(r));
  int success = 0, count = 0;
  for (const ReportRow& row : r.rows) {
    success += row.success;
    count += row.count;
  }
  out << r.rows.size() << " rows, pooled rate " << format_rate(success, count) << ", plot " << dst.string() << "\n";
  return kExitOk;
}

std::vector<Opt> attack_opts() {
  return {
      {"seed", Kind::integer, 0, "global seed"},
      {"model", Kind::text, "mini_residual", "source model, or comma-separated ensemble"},
      {"input", Kind::text, "", "input PPM image (single-image mode)"},
      {"label", Kind::integer, -1, "original label (default: source prediction)"},
      {"target", Kind::integer, -1, "target label (default: random, seeded)"},
      {"batch", Kind::integer, 0, "attack this many attack-eval images instead of --input"},
      {"output", Kind::text, "attack/adv.ppm", "output image (single mode) or directory (batch mode)"},
      {"loss", Kind::text, "ce", "ce, logit or suphigh"},
      {"ft", Kind::flag, false, "fine-tune in feature space after the baseline attack"},
      {"eps", Kind::number, 16.0 / 255.0, "L-inf budget in [0,1] units (fractions such as 16/255 accepted)"},
      {"alpha", Kind::number, 2.0 / 255.0, "step size"},
      {"iters", Kind::integer, -1, "baseline iterations (default 200, or 160 with fine-tuning)"},
      {"ft_iters", Kind::integer, 10, "fine-tuning iterations"},
      {"beta", Kind::number, 0.2, "weight of the original-label aggregate gradient"},
      {"tap", Kind::text, "", "fine-tuning layer name (default: the model's middle layer)"},
      {"mask", Kind::text, "pixel", "aggregate-gradient mask: pixel or patch"},
      {"ensemble_n", Kind::integer, 30, "masked copies per aggregate gradient"},
      {"keep_prob", Kind::number, 0.7, "mask keep probability"},
      {"mask_fill", Kind::number, 0.5, "value given to masked-out pixels"},
      {"patch_size", Kind::integer, 4, "patch mask block side"},
      {"momentum", Kind::number, 1.0, "momentum decay"},
      {"di_prob", Kind::number, 0.7, "diverse-input probability"},
      {"di_resize_range", Kind::number, 1.1, "largest diverse-input enlargement"},
      {"ti_radius", Kind::integer, 3, "translation-invariant kernel radius (0 disables)"},
      {"suphigh_beta1", Kind::number, 1.0, "SupHigh original-logit weight"},
      {"suphigh_beta2", Kind::number, 1.0, "SupHigh suppression weight"},
      {"suphigh_n_high", Kind::integer, 3, "SupHigh suppressed label count"},
      {"data", Kind::text, "data", "dataset directory (batch mode)"},
      {"checkpoints", Kind::text, "checkpoints", "checkpoint directory"},
  };
}

std::vector<Opt> plan_opts(bool plan_required) {
  return {
      {"plan", Kind::text, "", plan_required ? "experiment plan JSON" : "experiment plan JSON (optional)"},
      {"seed", Kind::integer, -1, "override the plan seed"},
      {"task_count", Kind::integer, -1, "override the plan task count"},
      {"sources", Kind::text_list, json::array(), "override the plan sources"},
      {"targets", Kind::text_list, json::array(), "override the plan targets"},
      {"attacks", Kind::text_list, json::array(), "override the plan attacks"},
      {"data", Kind::text, "data", "dataset directory"},
      {"checkpoints", Kind::text, "checkpoints", "checkpoint directory"},
      {"reports", Kind::text, "reports", "report directory"},
  };
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::string q;
  for (const char c : s) {
    if (c == '"' || c == '\\') q += '\\';
    q += c;
  }
  return q;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Targeted transfer attacks with feature-space fine-tuning on a desk-scale model zoo", "featft"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--out", g.out, "root for every relative path")->capture_default_str();
  app.add_option("--config", g.config, "flat JSON file with values for the command's options");
  app.add_option("--jobs", g.jobs, "worker threads")->capture_default_str();

  std::vector<std::unique_ptr<Command>> commands;
  auto make = [&](CLI::App* sub, std::vector<Opt> opts) {
    auto c = std::make_unique<Command>();
    c->app = sub;
    for (auto& o : opts) c->add(std::move(o));
    commands.push_back(std::move(c));
    return commands.back().get();
  };

  Command* gen = make(app.add_subcommand("gen-data", "generate the synthetic dataset"),
                      {{"seed", Kind::integer, 7, "dataset seed"},
                       {"per_class", Kind::integer, SyntheticOptions{}.per_class, "images per class"},
                       {"heldout_fraction", Kind::number, 0.3, "held-out share of each class"},
                       {"data", Kind::text, "data", "output directory"}});
  const TrainConfig tdef;
  Command* trn = make(app.add_subcommand("train", "train zoo models and write checkpoints"),
                      {{"seed", Kind::integer, static_cast<long long>(tdef.seed), "training seed"},
                       {"models", Kind::text_list, json::array(), "models to train (default: all)"},
                       {"epochs", Kind::integer, tdef.epochs, "epochs"},
                       {"lr", Kind::number, tdef.learning_rate, "learning rate"},
                       {"batch_size", Kind::integer, tdef.batch_size, "mini-batch size"},
                       {"momentum", Kind::number, tdef.momentum, "SGD momentum"},
                       {"data", Kind::text, "data", "dataset directory"},
                       {"checkpoints", Kind::text, "checkpoints", "checkpoint directory"}});
  Command* atk = make(app.add_subcommand("attack", "craft targeted adversarial examples"), attack_opts());
  Command* evl = make(app.add_subcommand("eval", "run an experiment plan"), plan_opts(true));
  CLI::App* ablate = app.add_subcommand("ablate", "fine-tuning ablations");
  ablate->require_subcommand(1);
  Command* abn = make(ablate->add_subcommand("nft", "sweep the number of fine-tuning iterations"), plan_opts(false));
  Command* abl = make(ablate->add_subcommand("layer", "sweep the fine-tuning layer"), plan_opts(false));
  Command* uap = make(app.add_subcommand("uap", "data-free targeted universal perturbations"), plan_opts(false));
  Command* rep = make(app.add_subcommand("report", "plot a report CSV as SVG"),
                      {{"input", Kind::text, "", "report CSV"}, {"svg", Kind::text, "", "output SVG (default: next to the CSV)"}});

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    try {
      app.parse(rev);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      throw ConfigError(e.what());
    }
    if (g.jobs < 1) throw ConfigError("--jobs must be at least 1");
    for (const auto& c : commands) {
      if (!c->app->parsed()) continue;
      const json cfg = resolve(*c, g);
      if (c.get() == gen) return cmd_gen_data(cfg, g, out);
      if (c.get() == trn) return cmd_train(cfg, g, out);
      if (c.get() == atk) return cmd_attack(cfg, g, out);
      if (c.get() == evl) return run_plan_command("eval", cfg, g, out, std::nullopt);
      if (c.get() == abn) return run_plan_command("ablate nft", cfg, g, out, Scenario::ablation_nft);
      if (c.get() == abl) return run_plan_command("ablate layer", cfg, g, out, Scenario::ablation_layer);
      if (c.get() == uap) return run_plan_command("uap", cfg, g, out, Scenario::uap);
      if (c.get() == rep) return cmd_report(cfg, g, out);
    }
    throw ConfigError("no command given");
  } catch (const ConfigError& e) {
    err << "featft: error kind=config message=\"" << one_line(e.what()) << "\"\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "featft: error kind=io message=\"" << one_line(e.what()) << "\"\n";
    return kExitIo;
  } catch (const TrainingError& e) {
    err << "featft: error kind=training message=\"" << one_line(e.what()) << "\"\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "featft: error kind=internal message=\"" << one_line(e.what()) << "\"\n";
    return kExitConfig;
  }
}

}  // namespace featft::cli

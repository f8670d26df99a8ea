#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "featft/dataset.hpp"
#include "featft/experiment.hpp"
#include "featft/report.hpp"
#include "helpers.hpp"

using namespace featft;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("featft_unit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Tag balance and attribute quoting; enough to catch malformed output.
bool well_formed_xml(const std::string& text) {
  std::vector<std::string> stack;
  const std::regex tag(R"(<(/?)([A-Za-z_][\w:.-]*)((?:\s+[\w:.-]+="[^"<]*")*)\s*(/?)>|<\?xml[^>]*\?>)");
  std::size_t pos = 0;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), tag); it != std::sregex_iterator(); ++it) {
    const std::smatch& m = *it;
    const std::string between = text.substr(pos, static_cast<std::size_t>(m.position()) - pos);
    if (between.find('<') != std::string::npos) return false;
    if (std::regex_search(between, std::regex(R"(&(?!(amp|lt|gt|quot|apos);))"))) return false;
    pos = static_cast<std::size_t>(m.position() + m.length());
    if (m[2].length() == 0) continue;
    if (m[1] == "/") {
      if (stack.empty() || stack.back() != m[2]) return false;
      stack.pop_back();
    } else if (m[4] != "/") {
      stack.push_back(m[2]);
    }
  }
  return stack.empty() && text.find('<', pos) == std::string::npos;
}

TransferReport sample_report() {
  TransferReport r;
  r.rows = {{"mini_plain", "mini_branch", "ce", "random_target", false, 121, 200, "00000000000000aa"},
            {"mini_plain", "mini_branch", "ce", "random_target", true, 130, 200, "00000000000000ab"},
            {"mini_residual+mini_branch", "mini_plain", "logit", "ensemble_holdout", true, 1, 3, "0123456789abcdef"},
            {"a<b", "c&d", "ce@tap=relu9", "ablation_layer", false, 0, 0, "ff"}};
  return r;
}

// Three identical copies of one random model under the zoo names, with held-out labels set to
// its predictions so that every held-out image is attack-eval.
struct Harness {
  Dataset dataset;
  std::vector<Model> zoo;

  Harness() {
    dataset = gen_synthetic_dataset(SyntheticOptions{21, 4, 0.5});
    const auto base = test::share(test::tiny_spec(32, 10));
    const Model m = test::random_model(base, 8);
    for (const auto& name : zoo_names()) {
      auto spec = std::make_shared<ModelSpec>(*base);
      spec->name = name;
      Model copy = m;
      copy.spec = spec;
      zoo.push_back(copy);
    }
    for (Sample& s : dataset.samples) s.label = predict(m, s.image);
  }

  ExperimentPlan plan(Scenario s) const {
    ExperimentPlan p;
    p.name = "unit";
    p.scenario = s;
    p.seed = 3;
    p.task_count = 4;
    p.baseline_iters = 5;
    p.ft_baseline_iters = 3;
    p.finetune.iters = 2;
    p.finetune.ensemble_n = 2;
    p.nft_values = {0, 1, 2};
    return p;
  }
};

}  // namespace

TEST_CASE("rates are printed to four decimals with ties to even") {
  CHECK(format_rate(0.60444) == "0.6044");
  CHECK(format_rate(0.5) == "0.5000");
  CHECK(format_rate(1.0) == "1.0000");
  CHECK(format_rate(0.0) == "0.0000");
  // Decimal literals near a tie round by their exact binary value.
  CHECK(format_rate(0.99995) == "1.0000");
  CHECK(format_rate(0.00015) == "0.0001");
  CHECK(format_rate(0.00025) == "0.0003");
  CHECK(format_rate(0.33335) == "0.3333");
  CHECK(format_rate(0.12345) == "0.1235");
  CHECK(format_rate(121, 200) == "0.6050");
  CHECK(format_rate(2, 3) == "0.6667");
  CHECK(format_rate(1, 20000) == "0.0000");
  CHECK(format_rate(3, 20000) == "0.0002");
  CHECK(format_rate(5, 20000) == "0.0002");
  CHECK(format_rate(7, 20000) == "0.0004");
  CHECK(format_rate(0, 0) == "0.0000");
  CHECK(format_rate(200, 200) == "1.0000");
}

TEST_CASE("CSV round trip and schema") {
  const TransferReport r = sample_report();
  const std::string csv = emit_csv(r);
  CHECK(csv.rfind("source,target,attack,scenario,ft,success,count,rate,seed_digest\n", 0) == 0);
  CHECK(csv.find("mini_plain,mini_branch,ce,random_target,0,121,200,0.6050,00000000000000aa\n") != std::string::npos);
  CHECK(parse_csv(csv).rows == r.rows);

  TransferReport bad = r;
  bad.rows[0].attack = "ce,logit";
  CHECK_THROWS_AS(emit_csv(bad), ConfigError);
}

TEST_CASE("malformed CSV names the offset") {
  const std::string header(kCsvHeader);
  try {
    parse_csv("src,tgt\n");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
  const std::string good = header + "\na,b,ce,random_target,0,1,2,0.5000,x\n";
  CHECK(parse_csv(good).rows.size() == 1);
  const std::string wrong_rate = header + "\na,b,ce,random_target,0,1,2,0.5000,x\na,b,ce,random_target,1,1,3,0.5000,x\n";
  try {
    parse_csv(wrong_rate);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == header.size() + 1 + 36);
  }
  CHECK_THROWS_AS(parse_csv(header + "\na,b,ce,random_target,2,1,2,0.5000,x\n"), FormatError);
  CHECK_THROWS_AS(parse_csv(header + "\na,b,ce,random_target,0,1,2,0.5000\n"), FormatError);
  CHECK_THROWS_AS(parse_csv(header + "\na,b,ce,random_target,0,3,2,1.5000,x\n"), FormatError);
  CHECK_THROWS_AS(parse_csv(""), FormatError);
}

TEST_CASE("SVG output is well-formed XML with paired bars") {
  const std::string svg = emit_svg(sample_report());
  CHECK(well_formed_xml(svg));
  CHECK_FALSE(well_formed_xml("<svg><g></svg>"));
  CHECK_FALSE(well_formed_xml("<svg>a & b</svg>"));
  CHECK(svg.find("a&lt;b") != std::string::npos);
  CHECK(svg.find(" no-ft 0.6050") != std::string::npos);
  CHECK(svg.find(" ft 0.6500") != std::string::npos);
  CHECK_THROWS_AS(emit_svg(TransferReport{}), ConfigError);
}

TEST_CASE("emit_report writes files and reports unwritable paths") {
  const auto dir = scratch_dir("report");
  emit_report(sample_report(), ReportFormat::csv, dir / "r.csv");
  emit_report(sample_report(), ReportFormat::svg_plot, dir / "r.svg");
  CHECK(read_report_csv(dir / "r.csv").rows == sample_report().rows);
  CHECK(std::filesystem::file_size(dir / "r.svg") > 100);
  CHECK_THROWS_AS(emit_report(sample_report(), ReportFormat::csv, dir / "missing" / "r.csv"), IoError);
  CHECK_THROWS_AS(emit_report(TransferReport{}, ReportFormat::svg_plot, dir / "e.svg"), ConfigError);
}

TEST_CASE("synthetic dataset counts, determinism and quantization") {
  const Dataset a = gen_synthetic_dataset(7, 100);
  REQUIRE(a.samples.size() == 1000);
  std::vector<int> per(10, 0);
  for (const Sample& s : a.samples) ++per[static_cast<std::size_t>(s.label)];
  CHECK(per == std::vector<int>(10, 100));
  CHECK(a.indices(Split::heldout).size() == 300);

  const Dataset b = gen_synthetic_dataset(7, 100);
  const Dataset c = gen_synthetic_dataset(8, 100);
  bool same = true, differ = false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    same = same && encode_ppm(a.samples[i].image) == encode_ppm(b.samples[i].image) && a.samples[i].id == b.samples[i].id;
    differ = differ || a.samples[i].image != c.samples[i].image;
  }
  CHECK(same);
  CHECK(differ);

  for (const float v : a.samples[17].image.storage()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
    CHECK(std::round(v * 255.0f) / 255.0f == v);
  }
  CHECK(class_name(0) != class_name(5));
}

TEST_CASE("PPM and dataset files round-trip") {
  const Dataset d = gen_synthetic_dataset(SyntheticOptions{9, 3, 0.34});
  const Image& img = d.samples[0].image;
  const auto bytes = encode_ppm(img);
  CHECK(std::string(bytes.begin(), bytes.begin() + 13) == "P6\n32 32\n255\n");
  CHECK(bytes.size() == 13 + 32 * 32 * 3);
  CHECK(decode_ppm(bytes) == img);
  CHECK_THROWS_AS(decode_ppm(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 5)), FormatError);
  auto bad = bytes;
  bad[1] = '3';
  try {
    decode_ppm(bad);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }

  const auto dir = scratch_dir("dataset");
  save_dataset(d, dir);
  CHECK(std::filesystem::exists(dir / "labels.csv"));
  const Dataset back = load_dataset(dir);
  REQUIRE(back.samples.size() == d.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    CHECK(back.samples[i].id == d.samples[i].id);
    CHECK(back.samples[i].label == d.samples[i].label);
    CHECK(back.samples[i].split == d.samples[i].split);
    CHECK(back.samples[i].image == d.samples[i].image);
  }
  CHECK_THROWS_AS(load_dataset(dir / "nowhere"), IoError);
}

TEST_CASE("pick_target rules") {
  Rng rng(1);
  const std::vector<double> l = {5, 1, -3};
  CHECK(pick_target(Scenario::most_difficult, l, 0, rng) == 2);
  CHECK(pick_target(Scenario::most_difficult, std::vector<double>{1, 1, 1, 1}, 0, rng) == 1);
  CHECK(pick_target(Scenario::most_difficult, std::vector<double>{-9, 2, 2}, 0, rng) == 1);
  const std::vector<double> flat(10, 0.0);
  std::vector<int> seen(10, 0);
  for (int i = 0; i < 10000; ++i) ++seen[static_cast<std::size_t>(pick_target(Scenario::random_target, flat, 4, rng))];
  CHECK(seen[4] == 0);
  for (int k = 0; k < 10; ++k) {
    if (k != 4) CHECK(seen[static_cast<std::size_t>(k)] > 1000);
  }
}

TEST_CASE("plans parse strictly and round-trip") {
  const ExperimentPlan p = parse_plan(R"({"name": "x", "scenario": "most_difficult", "attacks": ["ce", "suphigh"],
                                          "seed": 5, "task_count": 7, "beta": 0.3, "tap": "relu9"})");
  CHECK(p.scenario == Scenario::most_difficult);
  CHECK(p.attacks == std::vector<LossKind>{LossKind::ce, LossKind::suphigh});
  CHECK(p.finetune.beta == 0.3);
  CHECK(p.tap_name == "relu9");
  CHECK(plan_to_json(parse_plan(plan_to_json(p))) == plan_to_json(p));
  CHECK(plan_digest(p) == plan_digest(parse_plan(plan_to_json(p))));
  CHECK(plan_digest(p).size() == 16);

  CHECK_THROWS_AS(parse_plan(R"({"name": "x", "colour": 3})"), ConfigError);
  CHECK_THROWS_AS(parse_plan(R"({"task_count": "many"})"), ConfigError);
  CHECK_THROWS_AS(parse_plan(R"({"scenario": "imagenet"})"), ConfigError);
  CHECK_THROWS_AS(parse_plan("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(parse_plan("{"), ConfigError);
  CHECK_THROWS_AS(load_plan("/nonexistent/plan.json"), IoError);
}

TEST_CASE("shipped plan files are valid") {
  const std::filesystem::path dir = FEATFT_SOURCE_DIR "/plans";
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    CAPTURE(e.path().string());
    CHECK_NOTHROW(load_plan(e.path()));
    ++n;
  }
  CHECK(n >= 6);
}

TEST_CASE("transfer experiments are deterministic and pair ft rows") {
  Harness h;
  ExperimentPlan plan = h.plan(Scenario::random_target);
  plan.attacks = {LossKind::ce, LossKind::logit};
  const TransferReport a = run_transfer_experiment(plan, h.zoo, h.dataset, 1);
  const TransferReport b = run_transfer_experiment(plan, h.zoo, h.dataset, 3);
  CHECK(emit_csv(a) == emit_csv(b));
  // 3 sources × 2 targets × 2 losses × {no-ft, ft}
  REQUIRE(a.rows.size() == 24);
  for (std::size_t i = 0; i < a.rows.size(); i += 2) {
    CHECK_FALSE(a.rows[i].ft);
    CHECK(a.rows[i + 1].ft);
    CHECK(a.rows[i].target == a.rows[i + 1].target);
    CHECK(a.rows[i].attack == a.rows[i + 1].attack);
    CHECK(a.rows[i].source != a.rows[i].target);
    CHECK(a.rows[i].count == 4);
  }
  for (const ReportRow& row : {a.rows[0], a.rows[7], a.rows[21]}) {
    CHECK(rerun_row(plan, row, h.zoo, h.dataset) == row.success);
  }
  ReportRow forged = a.rows[0];
  forged.seed_digest = "0000000000000000";
  CHECK_THROWS_AS(rerun_row(plan, forged, h.zoo, h.dataset), ConfigError);

  plan.task_count = 0;
  CHECK(run_transfer_experiment(plan, h.zoo, h.dataset).rows.empty());
}

TEST_CASE("white-box cells only appear in diagnostic mode and missing models fail early") {
  Harness h;
  ExperimentPlan plan = h.plan(Scenario::random_target);
  plan.sources = {"mini_plain"};
  plan.targets = {"mini_plain", "mini_branch"};
  CHECK(run_transfer_experiment(plan, h.zoo, h.dataset).rows.size() == 2);
  plan.diagnostic = true;
  CHECK(run_transfer_experiment(plan, h.zoo, h.dataset).rows.size() == 4);

  plan.sources = {"mini_vgg"};
  CHECK_THROWS_AS(run_transfer_experiment(plan, h.zoo, h.dataset), ConfigError);
}

TEST_CASE("ensemble hold-out never evaluates a member") {
  Harness h;
  ExperimentPlan plan = h.plan(Scenario::ensemble_holdout);
  const TransferReport r = run_transfer_experiment(plan, h.zoo, h.dataset);
  REQUIRE(r.rows.size() == 6);
  for (const ReportRow& row : r.rows) {
    CHECK(row.source.find(row.target) == std::string::npos);
    CHECK(std::count(row.source.begin(), row.source.end(), '+') == 1);
  }
  std::vector<Model> two(h.zoo.begin(), h.zoo.begin() + 2);
  CHECK_THROWS_AS(run_transfer_experiment(plan, two, h.dataset), ConfigError);
}

TEST_CASE("N_ft ablation rows and the zero point") {
  Harness h;
  ExperimentPlan plan = h.plan(Scenario::ablation_nft);
  plan.sources = {"mini_residual"};
  const TransferReport r = run_transfer_experiment(plan, h.zoo, h.dataset);
  CHECK(r.rows.size() == plan.nft_values.size() * 2);
  CHECK(r.rows[0].attack == "ce@nft=0");
  CHECK_FALSE(r.rows[0].ft);

  // The zero point is the shortened baseline itself.
  ExperimentPlan base = h.plan(Scenario::random_target);
  base.sources = {"mini_residual"};
  base.baseline_iters = plan.ft_baseline_iters;
  base.ft = {false};
  const TransferReport b = run_transfer_experiment(base, h.zoo, h.dataset);
  REQUIRE(b.rows.size() == 2);
  CHECK(r.rows[0].success == b.rows[0].success);
}

TEST_CASE("layer ablation emits one row per sweep tap plus the no-ft row") {
  Harness h;
  ExperimentPlan plan = h.plan(Scenario::ablation_layer);
  plan.sources = {"mini_plain"};
  plan.targets = {"mini_branch"};
  const TransferReport r = run_transfer_experiment(plan, h.zoo, h.dataset);
  const auto taps = sweep_taps(*h.zoo[0].spec);
  REQUIRE(r.rows.size() == taps.size() + 1);
  CHECK(r.rows[0].attack == "ce@tap=none");
  CHECK(r.rows[1].attack == "ce@tap=" + h.zoo[0].spec->layers[static_cast<std::size_t>(taps[0].layer_id)].name);
}

TEST_CASE("data-free UAP starts from mid-grey and stays in budget") {
  Harness h;
  AttackConfig cfg;
  cfg.iters = 4;
  const UapResult r = run_uap_datafree(h.zoo[0], 3, cfg, std::nullopt, h.dataset, h.zoo[1]);
  CHECK(r.y_o != 3);
  CHECK(max_abs(r.delta) <= cfg.epsilon + 1e-7);
  int expected = 0;
  for (const Sample& s : h.dataset.samples) expected += s.split == Split::heldout && s.label != 3;
  CHECK(r.count == expected);

  FinetuneConfig fc;
  fc.iters = 2;
  fc.ensemble_n = 2;
  const UapResult f = run_uap_datafree(h.zoo[0], 3, cfg, fc, h.dataset, h.zoo[1], 2);
  CHECK(max_abs(f.delta) <= cfg.epsilon + 1e-7);

  ExperimentPlan plan = h.plan(Scenario::uap);
  plan.sources = {"mini_plain"};
  plan.uap_classes = {1, 2};
  const TransferReport rep = run_transfer_experiment(plan, h.zoo, h.dataset);
  CHECK(rep.rows.size() == 4);
  CHECK(rep.rows[0].attack == "ce@class=1");
  CHECK(rep.rows[0].target == "mini_plain");
}

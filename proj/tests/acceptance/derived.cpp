// Desk-scale checks of the documented example outcomes that need trained models.
//
// usage: featft_derived [work_dir]
// Shares the checkpoint cache of featft_acceptance and reuses its transfer report when present.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "featft/experiment.hpp"
#include "featft/finetune.hpp"
#include "featft/parallel.hpp"
#include "featft/report.hpp"
#include "zoo_cache.hpp"

using namespace featft;
namespace fs = std::filesystem;

namespace {

int failed = 0;

void report(const char* name, bool pass, const std::string& detail) {
  std::printf("%s  %-32s %s\n", pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  failed += pass ? 0 : 1;
}

double rate_of(const TransferReport& r, const std::string& s, const std::string& t, bool ft) {
  for (const ReportRow& row : r.rows) {
    if (row.source == s && row.target == t && row.attack == "ce" && row.ft == ft) return row.rate();
  }
  return -1.0;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  const int jobs = default_jobs();
  Dataset ds = gen_synthetic_dataset(SyntheticOptions{});
  const std::vector<Model> zoo = acceptance::trained_zoo(ds, work / "checkpoints", jobs);
  std::vector<const Model*> ptrs;
  for (const Model& m : zoo) ptrs.push_back(&m);
  select_attack_eval(ds, ptrs);

  {
    bool ok = true;
    std::string d;
    for (const Model& m : zoo) {
      const double acc = accuracy(m, ds, Split::heldout);
      ok = ok && acc >= 0.90;
      d += m.spec->name + " " + format_rate(acc) + "  ";
    }
    report("held-out accuracy >= 0.90", ok, d);
  }

  {
    constexpr int kCount = 200;
    bool ok = true;
    std::string d;
    for (const Model& m : zoo) {
      std::vector<char> hit(kCount, 0);
      parallel_for(kCount, jobs, [&](int i) {
        const Sample& s =
            ds.samples[static_cast<std::size_t>(ds.attack_eval[static_cast<std::size_t>(i) % ds.attack_eval.size()])];
        FinetuneConfig fc;
        fc.seed = static_cast<std::uint64_t>(i);
        const Image adv = untargeted_feature_attack(s.image, s.label, m, fc, AttackConfig{});
        hit[static_cast<std::size_t>(i)] = predict(m, adv) != s.label;
      });
      const int n = static_cast<int>(std::count(hit.begin(), hit.end(), 1));
      ok = ok && n >= 0.95 * kCount;
      d += m.spec->name + " " + format_rate(n, kCount) + "  ";
    }
    report("untargeted feature attack >= 0.95", ok, d);
  }

  {
    const fs::path csv = work / "reports" / "acceptance_transfer.csv";
    TransferReport r;
    if (fs::exists(csv)) {
      std::ifstream in(csv, std::ios::binary);
      r = parse_csv(std::string(std::istreambuf_iterator<char>(in), {}));
    } else {
      ExperimentPlan p;
      p.name = "derived_residual";
      p.sources = {"mini_residual"};
      r = run_transfer_experiment(p, zoo, ds, jobs);
    }
    double base = 0, ft = 0;
    for (const auto& t : {"mini_plain", "mini_branch"}) {
      base += rate_of(r, "mini_residual", t, false) / 2;
      ft += rate_of(r, "mini_residual", t, true) / 2;
    }
    report("mini_residual CE+ft > CE", ft > base, "mean transfer CE " + format_rate(base) + ", CE+ft " + format_rate(ft));
  }

  return failed == 0 ? 0 : 1;
}

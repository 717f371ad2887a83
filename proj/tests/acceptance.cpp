// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "medfe/medfe.hpp"

using namespace medfe;

namespace {

struct Verdict {
  int id;
  std::string title;
  bool passed;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, const std::string& title, bool passed, const std::string& detail) {
  verdicts.push_back({id, title, passed, detail});
  std::printf("criterion %d [%s]: %s  %s\n", id, title.c_str(), passed ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

void from_suite(int id, const std::string& title, const selftest::SuiteResult& r, double limit_seconds = 0) {
  const bool in_time = limit_seconds <= 0 || r.seconds < limit_seconds;
  std::string detail = r.detail + fmt("; %.1fs", r.seconds);
  if (limit_seconds > 0) detail += fmt(" (limit %.0fs)", limit_seconds);
  report(id, title, r.passed && in_time, detail);
}

/// Log lines without the trailing wall-time field.
std::vector<std::string> strip_wall(const std::string& log) {
  std::vector<std::string> out;
  std::istringstream in(log);
  std::string line;
  while (std::getline(in, line)) out.push_back(line.substr(0, line.rfind('\t')));
  return out;
}

struct HoldoutScore {
  double hole_l1 = 0, psnr_comp = 0, psnr_mean_fill = 0;
};

HoldoutScore score(const MEDFEModel& model, const std::vector<Sample>& holdout) {
  HoldoutScore s;
  const Mask m = gen_center_mask(64, 64);
  for (const auto& x : holdout) {
    const Inference r = infer(model, x.image, m);
    s.hole_l1 += hole_l1(r.raw.out, x.image, m);
    s.psnr_comp += psnr(r.composite, x.image);
    s.psnr_mean_fill += psnr(mean_fill(x.image, m), x.image);
  }
  const double n = static_cast<double>(holdout.size());
  return {s.hole_l1 / n, s.psnr_comp / n, s.psnr_mean_fill / n};
}

RunConfig desk_run(const std::string& tag) {
  RunConfig cfg;
  cfg.preset = "desk";
  cfg.image_size = 64;
  cfg.batch_size = 4;
  cfg.steps = 2000;
  cfg.learning_rate = 2e-4;
  cfg.mask = "center";
  cfg.out_dir = (std::filesystem::temp_directory_path() / ("medfe_acceptance_" + tag)).string();
  return cfg;
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;

  from_suite(1, "BPA oracle equivalence", selftest::bpa_oracle_suite(), 10);
  from_suite(2, "homogeneity and linearity laws", selftest::bpa_laws_suite());
  {
    const auto grads = selftest::gradient_suite(true);
    const auto control = selftest::negative_control_suite();
    selftest::SuiteResult r = grads;
    r.passed = grads.passed && control.passed;
    r.detail += "; negative control: " + control.detail;
    from_suite(3, "gradient suite", r, 180);
  }
  from_suite(4, "partial convolution", selftest::partial_conv_suite());
  from_suite(5, "adversarial fixed point", selftest::adversarial_suite());
  from_suite(6, "total loss weighting", selftest::total_loss_suite());
  from_suite(7, "metrics", selftest::metrics_suite());

  const auto train_set = synth_corpus(0, 512, 64);
  const auto holdout = synth_corpus(0, 64, 64, 100000);
  std::string first_log;
  {
    const auto t0 = clock::now();
    Trainer trainer(desk_run("a"), train_set);
    const HoldoutScore before = score(trainer.model(), holdout);
    std::ostringstream log;
    trainer.run(log, true);
    first_log = log.str();
    const HoldoutScore after = score(trainer.model(), holdout);
    const double minutes = std::chrono::duration<double>(clock::now() - t0).count() / 60.0;
    const bool l1_ok = after.hole_l1 <= 0.6 * before.hole_l1;
    const bool psnr_ok = after.psnr_comp >= after.psnr_mean_fill + 1.0;
    report(8, "desk-scale training", l1_ok && psnr_ok && minutes <= 45.0,
           fmt("hole L1 %.4f -> %.4f (limit %.4f); ", before.hole_l1, after.hole_l1, 0.6 * before.hole_l1) +
               fmt("PSNR(I_comp) %.2f dB vs mean fill %.2f dB (need +1.00, got %+.2f); ", after.psnr_comp,
                   after.psnr_mean_fill, after.psnr_comp - after.psnr_mean_fill) +
               fmt("%.1f min (limit 45)", minutes));
  }
  {
    Trainer trainer(desk_run("b"), train_set);
    std::ostringstream log;
    trainer.run(log, true);
    const auto a = strip_wall(first_log), b = strip_wall(log.str());
    std::size_t first_diff = 0;
    while (first_diff < a.size() && first_diff < b.size() && a[first_diff] == b[first_diff]) ++first_diff;
    const bool same = a == b;
    report(9, "determinism", same,
           same ? fmt("%.0f log lines identical (wall time excluded, %.0f threads)", static_cast<double>(a.size()),
                      static_cast<double>(thread_count()))
                : fmt("logs diverge at line %.0f", static_cast<double>(first_diff)));
  }
  from_suite(10, "checkpoint and PPM round trips", selftest::round_trip_suite());

  int failed = 0;
  for (const auto& v : verdicts) failed += v.passed ? 0 : 1;
  std::printf("%d of %zu criteria passed\n", static_cast<int>(verdicts.size()) - failed, verdicts.size());
  for (const auto& dir : {desk_run("a").out_dir, desk_run("b").out_dir}) std::filesystem::remove_all(dir);
  return failed == 0 ? 0 : 1;
}

// Acceptance run: one PASS/FAIL line per criterion. Thresholds are fixed here.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "wnet/eval.hpp"
#include "wnet/gradcheck.hpp"
#include "wnet/metrics.hpp"
#include "wnet/train.hpp"

using namespace wnet;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolF32 = 1e-3;
constexpr double kGradTolF64 = 1e-6;
constexpr double kGradSeconds = 60.0;
constexpr double kCaFraction = 0.01;
constexpr double kOverfitPsnr = 35.0;
constexpr double kStage2Slack = 0.1;
constexpr double kOverfitSeconds = 300.0;
constexpr double kMisalignSeconds = 900.0;
constexpr double kEnsembleNoiseRel = 0.2;
constexpr double kMetricTol = 1e-6;
constexpr float kColorEqualitySlack = 1e-5f;
constexpr double kColorScaleTolF64 = 1e-14;

const EvalOptions kFirstStage{Stages::first, std::nullopt};

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

Tensor random_image(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(s);
  for (auto& v : t.data()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
  return t;
}

ModelConfig tiny_packed() {
  ModelConfig m = ModelConfig::tiny();
  m.in_channels = 4;
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void gradient_suite() {
  const Stopwatch sw;
  const auto results = gradcheck_suite(3);
  const double secs = sw.seconds();
  bool ok = !results.empty() && secs < kGradSeconds;
  double worst32 = 0, worst64 = 0;
  std::string failed;
  for (const auto& r : results) {
    const double bar = r.precision == "f32" ? kGradTolF32 : kGradTolF64;
    const bool pass = r.passed && r.relative_error < bar;
    if (!pass) failed += " " + r.name + "/" + r.precision;
    ok = ok && pass;
    (r.precision == "f32" ? worst32 : worst64) =
        std::max(r.precision == "f32" ? worst32 : worst64, r.relative_error);
  }
  report("gradient-suite", ok,
         fmt("%zu cases, worst rel err %.2e (f32, bar %.0e) %.2e (f64, bar %.0e), %.1f s (bar %.0f s)%s",
             results.size(), worst32, kGradTolF32, worst64, kGradTolF64, secs, kGradSeconds,
             failed.empty() ? "" : (" failed:" + failed).c_str()));
}

void architecture_audit() {
  const ModelConfig cfg;  // depth 4, base 32
  const UNet net(cfg, "u", 1);
  UNetTrace trace;
  const int size = 1 << (cfg.depth + 1);
  {
    NoGradGuard guard;
    net.forward(Var::constant(random_image({1, cfg.in_channels, size, size}, 2)), {}, &trace);
  }
  bool doubling = cfg.depth == 4 && cfg.base_channels == 32 && trace.encoder_shapes.size() == 4;
  std::string channels;
  for (std::size_t k = 0; k < trace.encoder_shapes.size(); ++k) {
    channels += std::to_string(trace.encoder_shapes[k].c) + " ";
    doubling = doubling && trace.encoder_shapes[k].c == 32 << k;
  }
  channels += std::to_string(trace.bottleneck.c);
  doubling = doubling && trace.bottleneck.c == 512;
  for (int i = 0; i < cfg.depth; ++i)
    doubling = doubling && trace.decoder_shapes[i].c == 32 << (cfg.depth - 1 - i);

  // Count attention by ablation: the difference between networks with and without it.
  ModelConfig plain = cfg;
  plain.channel_attention = false;
  const WNet with(cfg, 1), without(plain, 1);
  const double total = static_cast<double>(with.parameters().total_elements());
  const double extra = total - static_cast<double>(without.parameters().total_elements());
  const double declared = static_cast<double>(with.stage1().attention_parameter_count() +
                                              with.stage2().attention_parameter_count());
  const double frac = extra / total;
  report("architecture-audit", doubling && extra > 0 && extra == declared && frac < kCaFraction,
         fmt("encoder/bottleneck channels %s; attention %.0f of %.0f parameters = %.3f%% (bar %.0f%%)",
             channels.c_str(), extra, total, 100 * frac, 100 * kCaFraction));
}

void overfit_check() {
  const Stopwatch sw;
  SynthConfig sc;
  sc.count = 8;
  sc.height = 32;
  sc.width = 32;
  sc.mode = RawMode::packed;
  sc.seed = 1;
  const Dataset data = synth_dataset(sc);
  TrainConfig tc;
  tc.batch_size = 8;  // one step per epoch
  tc.stage1_epochs = 300;
  tc.stage2_epochs = 100;
  tc.lr_initial = 5e-3;
  tc.lr_final = 5e-4;
  tc.seed = 1;
  Trainer tr(tiny_packed(), tc, data);
  tr.run_phase(1);
  const EvalReport p1 = evaluate(tr.model(), tr.stats(), data, tc.loss, nullptr, kFirstStage);
  tr.run_phase(2);
  const EvalReport p2 = evaluate(tr.model(), tr.stats(), data, tc.loss, nullptr);
  const double secs = sw.seconds();
  const double rgb1 = p2.mean_psnr_rgb1.value_or(-1.0), rgb2 = p2.mean_psnr;
  report("overfit", p1.mean_psnr > kOverfitPsnr && rgb2 >= rgb1 - kStage2Slack && secs < kOverfitSeconds,
         fmt("phase-1 train PSNR %.2f dB after 300 steps (bar %.0f); after phase 2 rgb1 %.2f rgb2 %.2f dB "
             "(slack %.1f); %.0f s (bar %.0f s)",
             p1.mean_psnr, kOverfitPsnr, rgb1, rgb2, kStage2Slack, secs, kOverfitSeconds));
}

struct Member {
  std::unique_ptr<Trainer> trainer;
  double psnr = 0.0;
};

struct MisalignmentSet {
  Dataset train, val;
  FeatureExtractor fx = ExtractorSpec{}.build(FeatureTap::relu4_1);  // the one training uses
};

MisalignmentSet misalignment_set() {
  SynthConfig sc;
  sc.count = 200;
  sc.mode = RawMode::packed;
  sc.seed = 1;
  sc.ranges.max_shift = 2.0;
  const Dataset all = synth_dataset(sc);
  MisalignmentSet s;
  s.train.assign(all.begin(), all.begin() + 192);
  s.val.assign(all.begin() + 192, all.end());
  return s;
}

// Phase 1 only; the comparison is between loss functions, not stages.
Member train_member(const MisalignmentSet& s, const LossConfig& loss) {
  TrainConfig tc;
  tc.batch_size = 24;
  tc.stage1_epochs = 63;  // 8 steps per epoch, 504 steps
  tc.lr_initial = 5e-3;
  tc.lr_final = 5e-4;
  tc.seed = 1;
  tc.loss = loss;
  Member m;
  m.trainer = std::make_unique<Trainer>(tiny_packed(), tc, s.train);
  m.trainer->run_phase(1);
  m.psnr =
      evaluate(m.trainer->model(), m.trainer->stats(), s.val, LossConfig{}, nullptr, kFirstStage).mean_psnr;
  return m;
}

double feature_error(const Member& m, const MisalignmentSet& s) {
  LossConfig feat;
  feat.use_pixel = false;
  feat.use_feat = true;
  return evaluate(m.trainer->model(), m.trainer->stats(), s.val, feat, &s.fx, kFirstStage).loss_feat;
}

void misalignment_and_ensemble() {
  const Stopwatch sw;
  const MisalignmentSet s = misalignment_set();
  LossConfig pixel_only;
  LossConfig pixel_feat;
  pixel_feat.use_feat = true;
  const Member pix = train_member(s, pixel_only);
  const Member feat = train_member(s, pixel_feat);
  const double fe_pix = feature_error(pix, s), fe_feat = feature_error(feat, s);
  constexpr int kBorder = 4;
  double lap_pred = 0, lap_target = 0;
  for (const auto& sample : s.val) {
    lap_pred += mean_abs_laplacian(
        clamp_unit(predict(pix.trainer->model(), pix.trainer->stats(), sample.raw, Stages::first).rgb1),
        kBorder);
    lap_target += mean_abs_laplacian(sample.target, kBorder);
  }
  lap_pred /= s.val.size();
  lap_target /= s.val.size();
  const double secs = sw.seconds();
  report(
      "misalignment-trend", fe_feat < fe_pix && lap_pred < lap_target && secs < kMisalignSeconds,
      fmt("val feature error pixel+feat %.5f < pixel-only %.5f; pixel-only |Laplacian| %.5f < target %.5f; "
          "%.0f s (bar %.0f s)",
          fe_feat, fe_pix, lap_pred, lap_target, secs, kMisalignSeconds));

  // Ensemble of three loss configurations; pixel+feat is reused from above.
  const double sigma = 0.1;
  const Tensor truth = random_image({1, 3, 64, 64}, 20, 0.2, 0.8);
  Rng rng(21);
  std::vector<Tensor> noisy;
  for (int k = 0; k < 3; ++k) {
    Tensor t = truth;
    for (auto& v : t.data()) v += static_cast<float>(sigma * rng.normal());
    noisy.push_back(std::move(t));
  }
  const double ratio = mse(ensemble_average(noisy), truth) / (sigma * sigma / 3.0);

  LossConfig c4 = pixel_feat, c5 = pixel_feat;
  c4.use_color = true;
  c5.use_color = true;
  c5.feat_tap = FeatureTap::relu5_1;
  const Member m4 = train_member(s, c4);
  const Member m5 = train_member(s, c5);
  const WNet* models[] = {&feat.trainer->model(), &m4.trainer->model(), &m5.trainer->model()};
  const NormStats* stats[] = {&feat.trainer->stats(), &m4.trainer->stats(), &m5.trainer->stats()};
  std::vector<Prediction> preds;
  for (const auto& sample : s.val)
    preds.push_back(ensemble_predict(models, stats, sample.raw, Stages::first));
  const double ens = score_predictions(s.val, preds, feat.trainer->stats(), pixel_only, nullptr).mean_psnr;
  const double worst = std::min({feat.psnr, m4.psnr, m5.psnr});
  report(
      "ensemble", std::abs(ratio - 1.0) < kEnsembleNoiseRel && ens >= worst,
      fmt("noise MSE / (sigma^2/3) = %.3f (within %.0f%%); val PSNR members %.2f %.2f %.2f, ensemble %.2f >= "
          "worst %.2f",
          ratio, 100 * kEnsembleNoiseRel, feat.psnr, m4.psnr, m5.psnr, ens, worst));
}

void color_loss_properties() {
  bool ok = true;
  float worst_equal = 0;
  double worst_scale = 0;
  bool range_ok = true;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Tensor a = random_image({2, 3, 8, 8}, seed), b = random_image({2, 3, 8, 8}, seed + 100);
    const float eq = color_loss(Var::constant(a), Var::constant(a), 1e-6f).value().item();
    worst_equal = std::max(worst_equal, std::abs(eq));
    ok = ok && eq >= 0.0f && eq < kColorEqualitySlack;
    const float base = color_loss(Var::constant(a), Var::constant(b), 1e-6f).value().item();
    range_ok = range_ok && base >= 0.0f && base <= 1.0f;
    for (float s : {0.25f, 2.0f, 16.0f}) {
      Tensor scaled = a;
      for (auto& v : scaled.data()) v *= s;
      ok = ok && color_loss(Var::constant(scaled), Var::constant(b), 1e-6f).value().item() == base;
    }
    const BasicTensor<double> ad = a.cast<double>(), bd = b.cast<double>();
    const double based =
        color_loss(BasicVar<double>::constant(ad), BasicVar<double>::constant(bd), 1e-6).value().item();
    for (double s : {0.3, 1.7, 9.0}) {
      BasicTensor<double> sd = ad;
      for (auto& v : sd.data()) v *= s;
      worst_scale =
          std::max(worst_scale,
                   std::abs(color_loss(BasicVar<double>::constant(sd), BasicVar<double>::constant(bd), 1e-6)
                                .value()
                                .item() -
                            based));
    }
  }
  ok = ok && range_ok && worst_scale < kColorScaleTolF64;
  report(
      "color-loss", ok,
      fmt("power-of-two scales bit-exact, other scales |diff| %.1e (bar %.0e); range [0,1] %s; "
          "equality %.1e (slack %.0e)",
          worst_scale, kColorScaleTolF64, range_ok ? "held" : "violated", worst_equal, kColorEqualitySlack));
}

// Scalar reference metrics in long double.
double ref_psnr(const Tensor& a, const Tensor& b) {
  long double se = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const long double d = static_cast<long double>(a[i]) - b[i];
    se += d * d;
  }
  return static_cast<double>(10.0L * std::log10(a.numel() / se));
}

double ref_ssim(const Tensor& a, const Tensor& b) {
  const Shape s = a.shape();
  long double g[11][11], gsum = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) gsum += g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5L);
  const long double c1 = 1e-4L, c2 = 9e-4L;
  long double total = 0;
  int count = 0;
  for (int n = 0; n < s.n; ++n) {
    auto y = [&](const Tensor& t, int r, int c) {
      return 0.299L * t.at(n, 0, r, c) + 0.587L * t.at(n, 1, r, c) + 0.114L * t.at(n, 2, r, c);
    };
    for (int r = 0; r + 11 <= s.h; ++r)
      for (int c = 0; c + 11 <= s.w; ++c) {
        long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const long double w = g[i][j] / gsum, x = y(a, r + i, c + j), z = y(b, r + i, c + j);
            sx += w * x;
            sy += w * z;
            sxx += w * x * x;
            syy += w * z * z;
            sxy += w * x * z;
          }
        const long double vx = sxx - sx * sx, vy = syy - sy * sy, cxy = sxy - sx * sy;
        total += ((2 * sx * sy + c1) * (2 * cxy + c2)) / ((sx * sx + sy * sy + c1) * (vx + vy + c2));
        ++count;
      }
  }
  return static_cast<double>(total / count);
}

void metric_oracle() {
  double worst = 0;
  bool identical = true;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Tensor a = random_image({1, 3, 16, 16}, seed), b = random_image({1, 3, 16, 16}, seed + 500);
    worst = std::max({worst, std::abs(psnr(a, b) - ref_psnr(a, b)), std::abs(ssim(a, b) - ref_ssim(a, b))});
    identical = identical && ssim(a, a) == 1.0;
  }
  report("metric-oracle", worst < kMetricTol && identical,
         fmt("max |library - brute force| %.1e over PSNR and SSIM (bar %.0e); SSIM(x,x) == 1 %s", worst,
             kMetricTol, identical ? "exactly" : "violated"));
}

void determinism() {
  const fs::path root = fs::temp_directory_path() / "wnet-acceptance-determinism";
  fs::remove_all(root);
  SynthConfig sc;
  sc.count = 8;
  sc.height = 32;
  sc.width = 32;
  sc.mode = RawMode::packed;
  sc.seed = 5;
  sc.ranges.max_shift = 1.0;
  const Dataset all = synth_dataset(sc);
  const Dataset train(all.begin(), all.begin() + 6), val(all.begin() + 6, all.end());
  TrainConfig tc;
  tc.batch_size = 3;
  tc.stage1_epochs = 4;
  tc.stage2_epochs = 2;
  tc.lr_initial = 5e-3;
  tc.lr_final = 5e-4;
  tc.seed = 9;
  tc.loss.use_feat = true;
  tc.loss.use_color = true;
  tc.checkpoint_every = 2;
  const FeatureExtractor fx = tc.extractor.build(tc.loss.feat_tap);
  std::vector<std::vector<std::string>> bytes(2);
  std::vector<std::string> reports;
  for (int run = 0; run < 2; ++run) {
    Trainer tr(tiny_packed(), tc, train, {root / std::to_string(run), {}});
    tr.run();
    for (const auto& p : tr.checkpoints()) bytes[run].push_back(slurp(p));
    reports.push_back(evaluate(tr.model(), tr.stats(), val, tc.loss, &fx).to_text());
  }
  const bool same_ckpt = !bytes[0].empty() && bytes[0] == bytes[1];
  const bool same_report = reports[0] == reports[1];
  Checkpoint::load(root / "0" / "final.ckpt").save(root / "resaved.ckpt");
  const bool round_trip = slurp(root / "0" / "final.ckpt") == slurp(root / "resaved.ckpt");
  const LoadedModel m = LoadedModel::load(root / "0" / "final.ckpt");
  const bool reload_report = evaluate(*m.model, m.stats, val, m.train.loss, &fx).to_text() == reports[0];
  fs::remove_all(root);
  report("determinism", same_ckpt && same_report && round_trip && reload_report,
         fmt("%zu checkpoints bit-identical across runs: %s; EvalReports identical: %s; save/load "
             "byte-identical: "
             "%s; reloaded report identical: %s",
             bytes[0].size(), same_ckpt ? "yes" : "no", same_report ? "yes" : "no", round_trip ? "yes" : "no",
             reload_report ? "yes" : "no"));
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, void (*)()>> checks = {
      {"gradient-suite", gradient_suite},
      {"architecture-audit", architecture_audit},
      {"overfit", overfit_check},
      {"misalignment-trend+ensemble", misalignment_and_ensemble},
      {"color-loss", color_loss_properties},
      {"metric-oracle", metric_oracle},
      {"determinism", determinism}};
  for (const auto& [name, fn] : checks) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(name, false, std::string("exception: ") + e.what());
    }
  }
  std::printf("%d failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}

#include "wnet/eval.hpp"

#include <cmath>
#include <cstdio>

#include "wnet/image_io.hpp"
#include "wnet/metrics.hpp"

namespace wnet {
namespace {

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

Prediction predict(const WNet& model, const NormStats& stats, const Tensor& raw, Stages stages) {
  NoGradGuard guard;
  const WNetOutput out = model.forward(Var::constant(stats.normalize_input(raw)), stages);
  Prediction p;
  p.rgb1 = stats.denormalize_target(out.rgb1.value());
  if (out.rgb2) p.rgb2 = stats.denormalize_target(out.rgb2->value());
  return p;
}

EvalReport score_predictions(const Dataset& data, std::span<const Prediction> preds, const NormStats& stats,
                             const LossConfig& loss, const FeatureExtractor* fx) {
  require(!data.empty(), "evaluation needs at least one sample");
  require(preds.size() == data.size(), "one prediction per sample is required");
  loss.validate();
  const DisplayMap display = stats.target_display();
  EvalReport r;
  r.loss_description = loss.describe();
  std::vector<double> p, s, p1, s1;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor& target = data[i].target;
    ImageScore score;
    score.source = data[i].source;
    const Tensor final_clamped = clamp_unit(preds[i].final());
    score.psnr = psnr(final_clamped, target);
    score.ssim = ssim(final_clamped, target);
    if (preds[i].rgb2) {
      const Tensor c1 = clamp_unit(preds[i].rgb1);
      score.psnr_rgb1 = psnr(c1, target);
      score.ssim_rgb1 = ssim(c1, target);
      p1.push_back(*score.psnr_rgb1);
      s1.push_back(*score.ssim_rgb1);
    }
    p.push_back(score.psnr);
    s.push_back(score.ssim);
    r.images.push_back(score);

    NoGradGuard guard;
    const auto parts = total_loss(Var::constant(stats.normalize_target(preds[i].final())),
                                  Var::constant(stats.normalize_target(target)), loss, fx, &display);
    r.loss_total += parts.total.value().data()[0];
    r.loss_pixel += parts.pixel;
    r.loss_feat += parts.feat;
    r.loss_color += parts.color;
  }
  const double n = static_cast<double>(data.size());
  r.mean_psnr = mean_of(p);
  r.mean_ssim = mean_of(s);
  if (p1.size() == data.size()) {
    r.mean_psnr_rgb1 = mean_of(p1);
    r.mean_ssim_rgb1 = mean_of(s1);
  }
  r.loss_total /= n;
  r.loss_pixel /= n;
  r.loss_feat /= n;
  r.loss_color /= n;
  return r;
}

EvalReport evaluate(const WNet& model, const NormStats& stats, const Dataset& data, const LossConfig& loss,
                    const FeatureExtractor* fx, const EvalOptions& opts) {
  std::vector<Prediction> preds;
  preds.reserve(data.size());
  for (const auto& s : data) preds.push_back(predict(model, stats, s.raw, opts.stages));
  if (opts.triptych_dir) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%03zu.png", i);
      write_png(*opts.triptych_dir / name,
                tensor_to_png(triptych(data[i].raw, preds[i].final(), data[i].target)));
    }
  }
  return score_predictions(data, preds, stats, loss, fx);
}

Prediction ensemble_predict(std::span<const WNet* const> models, std::span<const NormStats* const> stats,
                            const Tensor& raw, Stages stages) {
  require(!models.empty() && models.size() == stats.size(), "ensemble needs one NormStats per model");
  std::vector<Tensor> first, second;
  for (std::size_t k = 0; k < models.size(); ++k) {
    Prediction p = predict(*models[k], *stats[k], raw, stages);
    first.push_back(std::move(p.rgb1));
    if (p.rgb2) second.push_back(std::move(*p.rgb2));
  }
  Prediction out;
  out.rgb1 = ensemble_average(first);
  if (!second.empty()) out.rgb2 = ensemble_average(second);
  return out;
}

Tensor triptych(const Tensor& raw, const Tensor& prediction, const Tensor& target) {
  const Tensor preview = demosaic_bilinear(to_mosaic(raw));
  const Shape s = target.shape();
  require(preview.shape() == s && prediction.shape() == s,
          "triptych: panel shapes differ: " + preview.shape().str() + ", " + prediction.shape().str() + ", " +
              s.str());
  Tensor out({1, 3, s.h, 3 * s.w});
  const Tensor* panels[3] = {&preview, &prediction, &target};
  for (int k = 0; k < 3; ++k) {
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) out.at(0, c, y, k * s.w + x) = panels[k]->at(0, c, y, x);
      }
    }
  }
  return clamp_unit(out);
}

std::string EvalReport::to_text() const {
  std::string t;
  t += "config_digest = " + config_digest + "\n";
  t += "images = " + std::to_string(images.size()) + "\n";
  t += "mean_psnr_db = " + fmt(mean_psnr) + "\n";
  t += "mean_ssim = " + fmt(mean_ssim) + "\n";
  if (mean_psnr_rgb1) t += "mean_psnr_rgb1_db = " + fmt(*mean_psnr_rgb1) + "\n";
  if (mean_ssim_rgb1) t += "mean_ssim_rgb1 = " + fmt(*mean_ssim_rgb1) + "\n";
  t += "loss_config = " + loss_description + "\n";
  t += "loss_total = " + fmt(loss_total) + "\n";
  t += "loss_pixel = " + fmt(loss_pixel) + "\n";
  t += "loss_feat = " + fmt(loss_feat) + "\n";
  t += "loss_color = " + fmt(loss_color) + "\n";
  t += "\n# index  psnr_db  ssim";
  const bool two = !images.empty() && images.front().psnr_rgb1.has_value();
  if (two) t += "  psnr_rgb1_db  ssim_rgb1";
  t += "  source\n";
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    t += std::to_string(i) + "  " + fmt(im.psnr) + "  " + fmt(im.ssim);
    if (two) t += "  " + fmt(im.psnr_rgb1.value_or(0.0)) + "  " + fmt(im.ssim_rgb1.value_or(0.0));
    t += "  " + im.source + "\n";
  }
  return t;
}

}  // namespace wnet

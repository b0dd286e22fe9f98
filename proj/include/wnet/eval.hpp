#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wnet/data.hpp"
#include "wnet/losses.hpp"
#include "wnet/model.hpp"

namespace wnet {

/// Network outputs mapped back to display space, not yet clamped.
struct Prediction {
  Tensor rgb1;
  std::optional<Tensor> rgb2;

  /// rgb2 when present, otherwise rgb1.
  const Tensor& final() const { return rgb2 ? *rgb2 : rgb1; }
};

/// Normalizes `raw` (1, C, H, W), runs the network without recording a graph
/// and denormalizes.
Prediction predict(const WNet& model, const NormStats& stats, const Tensor& raw,
                   Stages stages = Stages::both);

struct ImageScore {
  std::string source;
  double psnr = 0.0;  ///< final output
  double ssim = 0.0;
  std::optional<double> psnr_rgb1;  ///< set when a two-stage output was scored
  std::optional<double> ssim_rgb1;
};

struct EvalReport {
  std::vector<ImageScore> images;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  std::optional<double> mean_psnr_rgb1;
  std::optional<double> mean_ssim_rgb1;
  std::string config_digest;
  std::string loss_description;
  double loss_total = 0.0;  ///< validation means of the configured terms
  double loss_pixel = 0.0;
  double loss_feat = 0.0;
  double loss_color = 0.0;

  /// Key-value block followed by a per-image table.
  std::string to_text() const;
};

/// Scores display-space predictions against the dataset targets. Metrics
/// use clamped predictions; the loss breakdown is taken on the unclamped
/// predictions in the normalized space of `stats`.
EvalReport score_predictions(const Dataset& data, std::span<const Prediction> preds, const NormStats& stats,
                             const LossConfig& loss, const FeatureExtractor* fx);

/// Optional side-by-side PNGs: demosaiced input | prediction | target.
struct EvalOptions {
  Stages stages = Stages::both;
  std::optional<std::filesystem::path> triptych_dir;
};

EvalReport evaluate(const WNet& model, const NormStats& stats, const Dataset& data, const LossConfig& loss,
                    const FeatureExtractor* fx, const EvalOptions& opts = {});

/// Display-space average of several models' outputs for one raw image.
Prediction ensemble_predict(std::span<const WNet* const> models, std::span<const NormStats* const> stats,
                            const Tensor& raw, Stages stages = Stages::both);

/// (1, 3, H, W) demosaic | prediction | target, clamped to [0, 1].
Tensor triptych(const Tensor& raw, const Tensor& prediction, const Tensor& target);

}  // namespace wnet

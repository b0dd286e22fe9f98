#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "wnet/losses.hpp"
#include "wnet/rng.hpp"
#include "wnet/tensor.hpp"

namespace wnet {

/// Dataset loading or statistics failure. Messages name the offending
/// sample index or channel.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// How a Bayer mosaic is fed to the network.
enum class RawMode {
  mosaic,  ///< (1, 1, H, W)
  packed,  ///< (1, 4, H/2, W/2) planes R, G(0,1), G(1,0), B
};

RawMode raw_mode_for_channels(int in_channels);
int raw_channels(RawMode mode);

/// Forward camera pipeline applied to a linear image: white balance, color
/// matrix, gamma, then a rigid misalignment of the rendered target.
struct SyntheticISPParams {
  std::array<double, 3> wb_gains{1.0, 1.0, 1.0};
  std::array<double, 9> ccm{1, 0, 0, 0, 1, 0, 0, 0, 1};  ///< row-major
  double gamma = 1.0;                                    ///< display = linear^(1/gamma)
  double noise_sigma = 0.0;
  double dx = 0.0;  ///< pixels
  double dy = 0.0;
  double theta_deg = 0.0;

  static constexpr double kMaxShift = 4.0;
  static constexpr double kMaxRotationDeg = 1.0;

  double ccm_determinant() const;
  /// Throws ContractError: non-positive gains or gamma, negative sigma,
  /// |det ccm| <= 1e-6, or misalignment outside the mild regime.
  void validate() const;
  std::map<std::string, std::string> to_metadata(const std::string& prefix) const;
};

/// Ranges the synthetic generator draws from. Camera parameters (gains,
/// matrix, gamma) are drawn once per dataset; misalignment per sample.
struct SynthRanges {
  double red_gain_min = 1.3, red_gain_max = 1.7;
  double blue_gain_min = 1.2, blue_gain_max = 1.5;
  double ccm_jitter = 0.12;  ///< off-diagonal magnitude before row normalization
  double gamma_min = 1.8, gamma_max = 2.4;
  double noise_sigma = 0.0;
  double max_shift = 0.0;  ///< |dx|, |dy| drawn uniformly up to this
  double max_rotation_deg = 0.0;

  void validate() const;
  std::map<std::string, std::string> to_metadata() const;
};

SyntheticISPParams sample_camera(const SynthRanges& ranges, Rng& rng);
void sample_misalignment(SyntheticISPParams& p, const SynthRanges& ranges, Rng& rng);

struct PairedSample {
  Tensor raw;     ///< per RawMode
  Tensor target;  ///< (1, 3, H, W) display RGB in [0, 1]
  std::string source;
  std::optional<SyntheticISPParams> params;
};

using Dataset = std::vector<PairedSample>;

/// Color gradient with overlaid random soft-edged ellipses, linear values in
/// [0.02, 0.6]. (1, 3, H, W).
Tensor procedural_clean(int height, int width, Rng& rng);

/// White balance, color matrix and gamma; clamps to [0, 1] before the gamma.
Tensor render_display(const Tensor& linear, const SyntheticISPParams& p);

/// Rotation by `theta_deg` about the image center followed by a shift of
/// (dx, dy): out(p) = in(R^-1 (p - c - d) + c). Bilinear, edges clamped.
Tensor warp(const Tensor& img, double dx, double dy, double theta_deg);

/// RGGB mosaic with R at (0, 0). (1, 3, H, W) -> (1, 1, H, W).
Tensor bayer_mosaic(const Tensor& rgb);
Tensor pack_bayer(const Tensor& mosaic);
Tensor unpack_bayer(const Tensor& packed);
/// Bilinear demosaic: missing samples are the mean of same-color
/// neighbours in the 3x3 window.
Tensor demosaic_bilinear(const Tensor& mosaic);
/// Raw tensor of either mode back to a (1, 1, H, W) mosaic.
Tensor to_mosaic(const Tensor& raw);

/// target = clamp(warp(render_display(clean))); raw = mosaic(clean) + N(0,
/// sigma), clamped to [0, 1]. Deterministic in (clean, params, seed).
PairedSample synth_pair(const Tensor& clean, const SyntheticISPParams& params, std::uint64_t seed,
                        RawMode mode = RawMode::mosaic);

struct SynthConfig {
  int count = 16;
  int height = 32;
  int width = 32;
  RawMode mode = RawMode::mosaic;
  SynthRanges ranges;
  std::uint64_t seed = 0;

  std::map<std::string, std::string> to_metadata() const;
};

Dataset synth_dataset(const SynthConfig& cfg);

/// Writes raw/NNN.png (16-bit mosaic) and rgb/NNN.png (8-bit RGB).
void write_dataset(const std::filesystem::path& dir, const Dataset& data);

/// Leading `train` pairs form the training split, the next `val` pairs the
/// validation split.
struct SplitSpec {
  std::size_t train = 0;
  std::size_t val = 0;

  /// "TRAIN/VAL", e.g. "8/2".
  static SplitSpec parse(const std::string& text);
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
};

/// All pairs of `dir` in index order.
Dataset load_pairs(const std::filesystem::path& dir, RawMode mode);
DatasetSplits load_dataset(const std::filesystem::path& dir, const SplitSpec& split, RawMode mode);

/// Per-channel statistics of inputs and targets over a training split.
struct NormStats {
  std::vector<double> input_mean, input_std;
  std::vector<double> target_mean, target_std;

  /// Population statistics. Throws DataError for an empty dataset or a
  /// zero-variance channel.
  static NormStats compute(const Dataset& data);

  Tensor normalize_input(const Tensor& x) const;
  Tensor denormalize_input(const Tensor& x) const;
  Tensor normalize_target(const Tensor& x) const;
  Tensor denormalize_target(const Tensor& x) const;
  /// Normalized target space to display space.
  DisplayMap target_display() const;

  std::map<std::string, std::string> to_metadata() const;
  static NormStats from_metadata(const std::map<std::string, std::string>& meta);
};

/// (x - mean[c]) / std[c] and its inverse, computed in double.
Tensor normalize(const Tensor& x, const std::vector<double>& mean, const std::vector<double>& std);
Tensor denormalize(const Tensor& x, const std::vector<double>& mean, const std::vector<double>& std);

/// Seeded mini-batch order. Each epoch is an independent permutation; the
/// last short batch is kept. No augmentation of any kind.
class BatchIterator {
 public:
  BatchIterator(std::size_t size, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::vector<std::size_t>> epoch(std::size_t index) const;
  std::size_t batches_per_epoch() const;

 private:
  std::size_t size_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

struct Batch {
  Tensor raw;
  Tensor target;
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices);

}  // namespace wnet

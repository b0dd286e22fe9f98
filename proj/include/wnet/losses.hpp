#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "wnet/autograd.hpp"
#include "wnet/checkpoint.hpp"

namespace wnet {

/// Activation taps of the VGG-19 feature stack.
enum class FeatureTap { relu4_1, relu5_1 };

std::string_view tap_name(FeatureTap tap);
/// Throws ContractError for an unknown name.
FeatureTap parse_tap(std::string_view name);
/// Poolings applied before the tap.
int tap_poolings(FeatureTap tap);

/// Frozen VGG-19-style convolution stack truncated at a tap. Inputs are
/// display-space RGB in [0, 1]; the stored per-channel mean/std are applied
/// before the first conv.
template <class S>
class BasicFeatureExtractor {
 public:
  struct Conv {
    std::string name;  ///< e.g. "conv3_2"
    BasicVar<S> weight;
    BasicVar<S> bias;
    bool pool_before = false;
  };

  /// Seeded random weights. `width_divisor` shrinks every VGG width
  /// (64..512) by that factor.
  static BasicFeatureExtractor random(std::uint64_t seed, int width_divisor, FeatureTap deepest);

  /// Reads a container whose metadata says architecture = "vgg19-features".
  /// Throws CheckpointError for a missing tensor or an absent tap.
  static BasicFeatureExtractor from_checkpoint(const Checkpoint& ck);
  static BasicFeatureExtractor load(const std::filesystem::path& path);

  /// Writes weights and manifest metadata (architecture, taps, normalization).
  Checkpoint to_checkpoint() const;

  /// Features of `rgb` at `tap`.
  BasicVar<S> features(const BasicVar<S>& rgb, FeatureTap tap) const;

  bool has_tap(FeatureTap tap) const;
  /// Smallest admissible H and W for `tap`; inputs must also be multiples of it.
  int min_input_size(FeatureTap tap) const { return 1 << tap_poolings(tap); }

  const std::vector<Conv>& layers() const { return layers_; }
  const std::array<double, 3>& mean() const { return mean_; }
  const std::array<double, 3>& stddev() const { return std_; }

  template <class U>
  BasicFeatureExtractor<U> cast() const {
    BasicFeatureExtractor<U> out;
    out.mean_ = mean_;
    out.std_ = std_;
    for (const auto& l : layers_) {
      out.layers_.push_back({l.name, BasicVar<U>::constant(l.weight.value().template cast<U>()),
                             BasicVar<U>::constant(l.bias.value().template cast<U>()), l.pool_before});
    }
    return out;
  }

 private:
  template <class>
  friend class BasicFeatureExtractor;

  std::vector<Conv> layers_;
  std::array<double, 3> mean_{0.485, 0.456, 0.406};
  std::array<double, 3> std_{0.229, 0.224, 0.225};
};

using FeatureExtractor = BasicFeatureExtractor<float>;

/// Which loss terms a training run uses.
struct LossConfig {
  bool use_pixel = true;
  bool use_feat = false;
  FeatureTap feat_tap = FeatureTap::relu4_1;
  bool use_color = false;
  float color_epsilon = 1e-6f;

  /// Throws ContractError if no term is enabled.
  void validate() const;
  std::string describe() const;
};

/// Mean absolute difference.
template <class S>
BasicVar<S> pixel_loss(const BasicVar<S>& pred, const BasicVar<S>& target);

/// Mean absolute difference of extractor features at `tap`. Only `pred`
/// receives gradient.
template <class S>
BasicVar<S> feature_loss(const BasicVar<S>& pred, const BasicVar<S>& target,
                         const BasicFeatureExtractor<S>& fx, FeatureTap tap);

/// 1 - mean cosine similarity between RGB vectors of the 2x2-average-pooled
/// images. Norms are floored at `eps`.
template <class S>
BasicVar<S> color_loss(const BasicVar<S>& pred, const BasicVar<S>& target, S eps);

template <class S>
struct BasicLossBreakdown {
  BasicVar<S> total;
  double pixel = 0.0;
  double feat = 0.0;
  double color = 0.0;
};

/// Affine map from the space `pred`/`target` live in to display space.
struct DisplayMap {
  std::vector<double> scale;
  std::vector<double> shift;
};

/// Unweighted sum of the enabled terms. Pixel loss is taken in the given
/// space; feature and color losses see display space (through `to_display`
/// when given), and color additionally clamps to [0, 1]. `fx` may be null
/// when the feature term is disabled.
template <class S>
BasicLossBreakdown<S> total_loss(const BasicVar<S>& pred, const BasicVar<S>& target, const LossConfig& cfg,
                                 const BasicFeatureExtractor<S>* fx, const DisplayMap* to_display = nullptr);

}  // namespace wnet

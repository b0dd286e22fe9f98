#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wnet/checkpoint.hpp"
#include "wnet/parameters.hpp"

namespace wnet {

/// Geometry of one enhanced U-Net.
struct ModelConfig {
  int depth = 4;           ///< number of 2x2 poolings
  int base_channels = 32;  ///< width of the first Convs block; doubles per level
  int ca_reduction = 8;    ///< channel-attention bottleneck ratio
  int in_channels = 1;     ///< 1: Bayer mosaic, 4: packed RGGB (output upsampled x2), 3: RGB
  int out_channels = 3;
  float prelu_init = 0.2f;
  bool channel_attention = true;  ///< ablation switch for the CA multiplier
  bool long_skip = true;          ///< ablation switch for the long skip connection
  bool residual_refine = true;    ///< stage 2 predicts a correction added to its input

  static ModelConfig tiny() {
    ModelConfig c;
    c.depth = 2;
    c.base_channels = 8;
    return c;
  }

  /// Throws ContractError on an inconsistent configuration.
  void validate() const;

  bool packed_input() const { return in_channels == 4; }
  int level_channels(int level) const { return base_channels << level; }

  /// Spatial size the raw input must be divisible by.
  int size_multiple() const { return (1 << depth) * (packed_input() ? 2 : 1); }

  std::map<std::string, std::string> to_metadata() const;
  static ModelConfig from_metadata(const std::map<std::string, std::string>& meta);
};

/// Test and ablation hooks applied during a forward pass.
struct ForwardOptions {
  /// Replaces every channel-attention gate by this constant.
  std::optional<float> fixed_attention;
};

/// Intermediate values recorded by UNet::forward when requested.
struct UNetTrace {
  std::vector<Shape> encoder_shapes;
  Shape bottleneck{};
  std::vector<Shape> decoder_shapes;
  std::vector<Tensor> attention;  ///< (N, C, 1, 1) gates, deepest level first
};

/// Three (3x3 conv, pad 1 -> PReLU) stages. The first conv changes the
/// channel count.
struct ConvsBlock {
  struct Layer {
    Var weight;
    Var bias;
    Var slope;
  };
  Layer layers[3];

  static ConvsBlock create(ParameterSet& params, const std::string& prefix, int in_channels, int out_channels,
                           float prelu_init, std::uint64_t seed);
  Var forward(const Var& x) const;
};

/// Squeeze-excitation gate: sigmoid(FC2(ReLU(FC1(GAP(y))))).
struct ChannelAttention {
  Var fc1_weight, fc1_bias, fc2_weight, fc2_bias;

  static ChannelAttention create(ParameterSet& params, const std::string& prefix, int channels, int reduction,
                                 std::uint64_t seed);
  /// (N, C, 1, 1) gates for features `y`.
  Var gates(const Var& y) const;

  static std::size_t parameter_count(int channels, int reduction) {
    const std::size_t c = static_cast<std::size_t>(channels);
    const std::size_t h = c / static_cast<std::size_t>(reduction);
    return c * h * 2 + h + c;
  }
};

/// y = convs(x); return y * gates(y). With `fixed_gate`, gates are that constant.
Var ca_convs_block(const Var& x, const ConvsBlock& convs, const ChannelAttention& attention,
                   std::optional<float> fixed_gate = std::nullopt, Tensor* gates_out = nullptr);

/// Enhanced U-Net: contracting path of Convs blocks with max pooling, a
/// bottleneck Convs block, an expanding path of bilinear upsampling,
/// skip concatenation and CA-Convs blocks, the long skip connection and a
/// final linear 3x3 conv.
class UNet {
 public:
  UNet(const ModelConfig& cfg, std::string prefix, std::uint64_t seed, bool zero_head = false);

  Var forward(const Var& x, const ForwardOptions& opts = {}, UNetTrace* trace = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  const ParameterSet& parameters() const { return params_; }
  ParameterSet& parameters() { return params_; }

  /// Elements belonging to channel-attention FC layers.
  std::size_t attention_parameter_count() const;

 private:
  ModelConfig cfg_;
  std::string prefix_;
  ParameterSet params_;
  std::vector<ConvsBlock> encoder_;
  ConvsBlock bottleneck_;
  std::vector<ConvsBlock> decoder_;  // index = level
  std::vector<ChannelAttention> attention_;
  Var head_weight_, head_bias_;
};

enum class Stages { first, both };

struct WNetOutput {
  Var rgb1;
  std::optional<Var> rgb2;
};

/// Two cascaded U-Nets; stage 2 refines the RGB output of stage 1.
class WNet {
 public:
  WNet(const ModelConfig& cfg, std::uint64_t seed);

  WNetOutput forward(const Var& x, Stages stages, const ForwardOptions& opts = {}) const;

  UNet& stage1() { return stage1_; }
  UNet& stage2() { return stage2_; }
  const UNet& stage1() const { return stage1_; }
  const UNet& stage2() const { return stage2_; }
  const ModelConfig& config() const { return cfg_; }

  /// Frozen stage-1 parameters stop requiring grad.
  void set_stage1_frozen(bool frozen);
  bool stage1_frozen() const { return stage1_frozen_; }

  /// Stage 1 followed by stage 2.
  ParameterSet parameters() const;

  /// Writes every parameter and the model config into `ck`.
  void save_to(Checkpoint& ck) const;
  /// Reads parameters by name; throws CheckpointError for a missing name or
  /// a shape mismatch.
  void load_from(const Checkpoint& ck);

 private:
  ModelConfig cfg_;
  UNet stage1_;
  UNet stage2_;
  bool stage1_frozen_ = false;
};

}  // namespace wnet

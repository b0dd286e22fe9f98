#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "wnet/adam.hpp"
#include "wnet/data.hpp"
#include "wnet/keyvalue.hpp"
#include "wnet/losses.hpp"
#include "wnet/model.hpp"

namespace wnet {

/// Non-finite loss or gradient during training. `last_good` is the most
/// recent checkpoint written before the failure (empty when none was).
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::filesystem::path last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const std::filesystem::path& last_good() const { return last_good_; }

 private:
  std::filesystem::path last_good_;
};

/// Where the frozen feature network comes from: a converted weight file,
/// or seeded random weights with every VGG width divided by `width_divisor`.
struct ExtractorSpec {
  std::string path;
  std::uint64_t seed = 7;
  int width_divisor = 16;

  /// Loads or builds an extractor deep enough for `tap`.
  FeatureExtractor build(FeatureTap tap) const;
};

struct TrainConfig {
  int batch_size = 24;
  int stage1_epochs = 100;
  int stage2_epochs = 25;
  double lr_initial = 1e-4;
  double lr_final = 1e-5;  ///< used for the last epoch of each phase
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  LossConfig loss;
  ExtractorSpec extractor;
  int checkpoint_every = 0;  ///< epochs between periodic checkpoints; 0 only at phase ends

  /// Throws ContractError on an invalid configuration.
  void validate() const;
  double learning_rate(int epoch, int phase_epochs) const {
    return epoch == phase_epochs - 1 ? lr_final : lr_initial;
  }
  /// Keys "train.*", "loss.*" and "extractor.*".
  std::map<std::string, std::string> to_metadata() const;
  /// Values of `kv` override those of `base`; unknown keys are ignored.
  static TrainConfig from_key_values(const KeyValues& kv, const TrainConfig& base);
  static TrainConfig from_key_values(const KeyValues& kv) { return from_key_values(kv, TrainConfig()); }
};

/// Applies "model.*" keys of `kv` over `base`.
ModelConfig model_config_from_key_values(const KeyValues& kv, const ModelConfig& base);

struct EpochRecord {
  int phase = 1;
  int epoch = 0;
  std::size_t steps = 0;
  double lr = 0.0;
  double loss = 0.0;  ///< mean of the epoch's step losses
  double pixel = 0.0;
  double feat = 0.0;
  double color = 0.0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Two-phase schedule: phase 1 fits stage 1 against rgb1, phase 2 freezes
/// stage 1 and fits stage 2 against rgb2. Inputs and targets are normalized
/// with training-set statistics; losses are taken in normalized target
/// space with feature and color terms mapped back to display space.
/// Single-threaded and deterministic in the seed.
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& cfg, Dataset train, TrainOptions opts = {});

  /// Runs the configured epochs of phase 1 or 2.
  void run_phase(int phase);
  /// Phase 1, phase 2, then writes final.ckpt when a directory is set.
  void run();

  WNet& model() { return *model_; }
  const WNet& model() const { return *model_; }
  const NormStats& stats() const { return stats_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const std::vector<std::filesystem::path>& checkpoints() const { return written_; }

  /// Weights, configs, statistics, progress and optimizer moments.
  Checkpoint checkpoint() const;

 private:
  std::filesystem::path write_checkpoint(const std::string& name);
  EpochRecord run_epoch(int phase, int epoch, int phase_epochs, Adam& adam, const BatchIterator& order);

  TrainConfig cfg_;
  Dataset train_;
  TrainOptions opts_;
  NormStats stats_;
  DisplayMap display_;
  std::unique_ptr<WNet> model_;
  std::optional<FeatureExtractor> fx_;
  std::unique_ptr<Adam> adam_;
  std::vector<EpochRecord> history_;
  std::vector<std::filesystem::path> written_;
  int phase_ = 0;
  int epoch_ = 0;
  std::size_t global_step_ = 0;
};

/// A trained model restored from a checkpoint, with the statistics and
/// training configuration it was saved with.
struct LoadedModel {
  std::unique_ptr<WNet> model;
  NormStats stats;
  TrainConfig train;
  std::map<std::string, std::string> metadata;

  static LoadedModel load(const std::filesystem::path& path);
  static LoadedModel from_checkpoint(const Checkpoint& ck);
};

/// SHA-256 of the sorted "model.*", "train.*", "loss.*", "extractor.*" and
/// "norm.*" entries.
std::string config_digest(const std::map<std::string, std::string>& meta);

}  // namespace wnet

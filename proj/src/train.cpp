#include "wnet/train.hpp"

#include <cmath>

#include "wnet/checkpoint.hpp"

namespace wnet {
namespace {

bool has_prefix(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

FeatureExtractor ExtractorSpec::build(FeatureTap tap) const {
  if (!path.empty()) {
    FeatureExtractor fx = FeatureExtractor::load(path);
    if (!fx.has_tap(tap)) {
      throw CheckpointError("feature extractor " + path + " has no " + std::string(tap_name(tap)) + " tap");
    }
    return fx;
  }
  return FeatureExtractor::random(seed, width_divisor, tap);
}

void TrainConfig::validate() const {
  require(batch_size >= 1, "batch_size must be at least 1");
  require(stage1_epochs >= 1 && stage2_epochs >= 1, "epochs must be at least 1 per phase");
  require(lr_initial > 0.0 && lr_final > 0.0, "learning rates must be positive");
  require(lr_final <= lr_initial, "lr_final must not exceed lr_initial");
  require(0.0 <= beta1 && beta1 < 1.0 && 0.0 <= beta2 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
  require(checkpoint_every >= 0, "checkpoint_every must be non-negative");
  require(extractor.width_divisor >= 1 && 64 % extractor.width_divisor == 0,
          "extractor width divisor must divide 64");
  loss.validate();
}

std::map<std::string, std::string> TrainConfig::to_metadata() const {
  return {
      {"train.batch_size", std::to_string(batch_size)},
      {"train.stage1_epochs", std::to_string(stage1_epochs)},
      {"train.stage2_epochs", std::to_string(stage2_epochs)},
      {"train.lr_initial", format_number(lr_initial)},
      {"train.lr_final", format_number(lr_final)},
      {"train.beta1", format_number(beta1)},
      {"train.beta2", format_number(beta2)},
      {"train.seed", std::to_string(seed)},
      {"train.checkpoint_every", std::to_string(checkpoint_every)},
      {"loss.use_pixel", loss.use_pixel ? "true" : "false"},
      {"loss.use_feat", loss.use_feat ? "true" : "false"},
      {"loss.feat_tap", std::string(tap_name(loss.feat_tap))},
      {"loss.use_color", loss.use_color ? "true" : "false"},
      {"loss.color_epsilon", format_number(loss.color_epsilon)},
      {"extractor.path", extractor.path},
      {"extractor.seed", std::to_string(extractor.seed)},
      {"extractor.width_divisor", std::to_string(extractor.width_divisor)},
  };
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv, const TrainConfig& base) {
  TrainConfig c = base;
  c.batch_size = kv_int(kv, "train.batch_size", c.batch_size);
  c.stage1_epochs = kv_int(kv, "train.stage1_epochs", c.stage1_epochs);
  c.stage2_epochs = kv_int(kv, "train.stage2_epochs", c.stage2_epochs);
  c.lr_initial = kv_double(kv, "train.lr_initial", c.lr_initial);
  c.lr_final = kv_double(kv, "train.lr_final", c.lr_final);
  c.beta1 = kv_double(kv, "train.beta1", c.beta1);
  c.beta2 = kv_double(kv, "train.beta2", c.beta2);
  c.seed = kv_u64(kv, "train.seed", c.seed);
  c.checkpoint_every = kv_int(kv, "train.checkpoint_every", c.checkpoint_every);
  c.loss.use_pixel = kv_bool(kv, "loss.use_pixel", c.loss.use_pixel);
  c.loss.use_feat = kv_bool(kv, "loss.use_feat", c.loss.use_feat);
  c.loss.feat_tap = parse_tap(kv_string(kv, "loss.feat_tap", std::string(tap_name(c.loss.feat_tap))));
  c.loss.use_color = kv_bool(kv, "loss.use_color", c.loss.use_color);
  c.loss.color_epsilon = static_cast<float>(kv_double(kv, "loss.color_epsilon", c.loss.color_epsilon));
  c.extractor.path = kv_string(kv, "extractor.path", c.extractor.path);
  c.extractor.seed = kv_u64(kv, "extractor.seed", c.extractor.seed);
  c.extractor.width_divisor = kv_int(kv, "extractor.width_divisor", c.extractor.width_divisor);
  return c;
}

ModelConfig model_config_from_key_values(const KeyValues& kv, const ModelConfig& base) {
  auto meta = base.to_metadata();
  for (const auto& [k, v] : kv) {
    if (has_prefix(k, "model.") && meta.count(k)) meta[k] = v;
  }
  return ModelConfig::from_metadata(meta);
}

Trainer::Trainer(const ModelConfig& model_cfg, const TrainConfig& cfg, Dataset train, TrainOptions opts)
    : cfg_(cfg), train_(std::move(train)), opts_(std::move(opts)) {
  model_cfg.validate();
  cfg_.validate();
  if (train_.empty()) throw DataError("training split is empty");
  const int need = raw_channels(raw_mode_for_channels(model_cfg.in_channels));
  for (std::size_t i = 0; i < train_.size(); ++i) {
    const Shape s = train_[i].raw.shape();
    require(s.c == need, "training sample " + std::to_string(i) + " has " + std::to_string(s.c) +
                             " raw channels, model expects " + std::to_string(need));
    const int mult = model_cfg.size_multiple() / (model_cfg.packed_input() ? 2 : 1);
    require(s.h % mult == 0 && s.w % mult == 0, "training sample " + std::to_string(i) + " raw size " +
                                                    s.str() + " is not a multiple of " +
                                                    std::to_string(mult));
  }
  stats_ = NormStats::compute(train_);
  display_ = stats_.target_display();
  for (auto& s : train_) {
    s.raw = stats_.normalize_input(s.raw);
    s.target = stats_.normalize_target(s.target);
  }
  model_ = std::make_unique<WNet>(model_cfg, mix_seed(cfg_.seed, 0x6d6f64656cULL));
  if (cfg_.loss.use_feat) fx_ = cfg_.extractor.build(cfg_.loss.feat_tap);
}

EpochRecord Trainer::run_epoch(int phase, int epoch, int phase_epochs, Adam& adam,
                               const BatchIterator& order) {
  EpochRecord rec;
  rec.phase = phase;
  rec.epoch = epoch;
  rec.lr = cfg_.learning_rate(epoch, phase_epochs);
  const Stages stages = phase == 1 ? Stages::first : Stages::both;
  const FeatureExtractor* fx = fx_ ? &*fx_ : nullptr;
  for (const auto& indices : order.epoch(static_cast<std::size_t>(epoch))) {
    const Batch batch = make_batch(train_, indices);
    const WNetOutput out = model_->forward(Var::constant(batch.raw), stages);
    const Var& pred = phase == 1 ? out.rgb1 : *out.rgb2;
    const auto loss = total_loss(pred, Var::constant(batch.target), cfg_.loss, fx, &display_);
    const double value = loss.total.value().data()[0];
    const std::filesystem::path last_good = written_.empty() ? std::filesystem::path() : written_.back();
    const std::string where = "phase " + std::to_string(phase) + " epoch " + std::to_string(epoch) +
                              " step " + std::to_string(global_step_);
    const std::string resume =
        last_good.empty() ? "; no checkpoint was written" : "; last good checkpoint: " + last_good.string();
    if (!std::isfinite(value)) throw TrainingError("non-finite loss at " + where + resume, last_good);
    model_->parameters().zero_grad();
    loss.total.backward();
    try {
      adam.step(rec.lr);
    } catch (const NumericError& e) {
      throw TrainingError(std::string(e.what()) + " at " + where + resume, last_good);
    }
    ++global_step_;
    ++rec.steps;
    rec.loss += value;
    rec.pixel += loss.pixel;
    rec.feat += loss.feat;
    rec.color += loss.color;
  }
  const double n = static_cast<double>(rec.steps);
  rec.loss /= n;
  rec.pixel /= n;
  rec.feat /= n;
  rec.color /= n;
  return rec;
}

void Trainer::run_phase(int phase) {
  require(phase == 1 || phase == 2, "phase must be 1 or 2");
  if (opts_.checkpoint_dir && written_.empty()) {
    phase_ = phase;
    epoch_ = 0;
    write_checkpoint("initial.ckpt");
  }
  model_->set_stage1_frozen(phase == 2);
  UNet& stage = phase == 1 ? model_->stage1() : model_->stage2();
  stage.parameters().set_requires_grad(true);
  // Phase 1 leaves stage 2 untouched; it does not feed rgb1.
  (phase == 1 ? model_->stage2() : model_->stage1()).parameters().set_requires_grad(false);
  adam_ = std::make_unique<Adam>(stage.parameters(), AdamConfig{cfg_.beta1, cfg_.beta2, 1e-8});
  const int epochs = phase == 1 ? cfg_.stage1_epochs : cfg_.stage2_epochs;
  const BatchIterator order(train_.size(), static_cast<std::size_t>(cfg_.batch_size),
                            mix_seed(cfg_.seed, static_cast<std::uint64_t>(phase)));
  phase_ = phase;
  for (int e = 0; e < epochs; ++e) {
    const EpochRecord rec = run_epoch(phase, e, epochs, *adam_, order);
    history_.push_back(rec);
    epoch_ = e + 1;
    if (opts_.on_epoch) opts_.on_epoch(rec);
    const bool periodic = cfg_.checkpoint_every > 0 && (e + 1) % cfg_.checkpoint_every == 0;
    if (opts_.checkpoint_dir && (periodic || e + 1 == epochs)) {
      char name[64];
      std::snprintf(name, sizeof name, "phase%d-epoch%04d.ckpt", phase, e + 1);
      write_checkpoint(name);
    }
  }
  model_->parameters().zero_grad();
}

void Trainer::run() {
  run_phase(1);
  run_phase(2);
  if (opts_.checkpoint_dir) write_checkpoint("final.ckpt");
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  model_->save_to(ck);
  for (const auto& [k, v] : cfg_.to_metadata()) ck.metadata[k] = v;
  for (const auto& [k, v] : stats_.to_metadata()) ck.metadata[k] = v;
  ck.metadata["progress.phase"] = std::to_string(phase_);
  ck.metadata["progress.epoch"] = std::to_string(epoch_);
  ck.metadata["progress.global_step"] = std::to_string(global_step_);
  if (adam_) {
    const auto& states = adam_->states();
    const auto& params = adam_->parameters();
    ck.metadata["adam.step_count"] = std::to_string(states.empty() ? 0 : states.front().step_count);
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.put("adam." + params[i].name + ".m", states[i].first_moment);
      ck.put("adam." + params[i].name + ".v", states[i].second_moment);
    }
  }
  return ck;
}

std::filesystem::path Trainer::write_checkpoint(const std::string& name) {
  const std::filesystem::path path = *opts_.checkpoint_dir / name;
  checkpoint().save(path);
  written_.push_back(path);
  return path;
}

LoadedModel LoadedModel::from_checkpoint(const Checkpoint& ck) {
  LoadedModel out;
  out.metadata = ck.metadata;
  const ModelConfig mc = ModelConfig::from_metadata(ck.metadata);
  mc.validate();
  out.model = std::make_unique<WNet>(mc, 0);
  out.model->load_from(ck);
  out.stats = NormStats::from_metadata(ck.metadata);
  out.train = TrainConfig::from_key_values(ck.metadata);
  return out;
}

LoadedModel LoadedModel::load(const std::filesystem::path& path) {
  return from_checkpoint(Checkpoint::load(path));
}

std::string config_digest(const std::map<std::string, std::string>& meta) {
  KeyValues selected;
  for (const auto& [k, v] : meta) {
    if (has_prefix(k, "model.") || has_prefix(k, "train.") || has_prefix(k, "loss.") ||
        has_prefix(k, "extractor.") || has_prefix(k, "norm.")) {
      selected[k] = v;
    }
  }
  return sha256_hex(format_key_values(selected));
}

}  // namespace wnet

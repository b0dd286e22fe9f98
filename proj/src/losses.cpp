#include "wnet/losses.hpp"

#include <cmath>
#include <sstream>

#include "wnet/ops.hpp"
#include "wnet/rng.hpp"

namespace wnet {
namespace {

struct VggLayer {
  const char* name;
  int width;
  bool pool_before;
};

// VGG-19 convolutions through conv5_1.
constexpr VggLayer kVgg19[] = {
    {"conv1_1", 64, false}, {"conv1_2", 64, false},  {"conv2_1", 128, true},  {"conv2_2", 128, false},
    {"conv3_1", 256, true}, {"conv3_2", 256, false}, {"conv3_3", 256, false}, {"conv3_4", 256, false},
    {"conv4_1", 512, true}, {"conv4_2", 512, false}, {"conv4_3", 512, false}, {"conv4_4", 512, false},
    {"conv5_1", 512, true},
};

const char* tap_layer(FeatureTap tap) { return tap == FeatureTap::relu4_1 ? "conv4_1" : "conv5_1"; }

std::vector<double> split_numbers(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

std::string join_numbers(const std::array<double, 3>& v) {
  return format_number(v[0]) + "," + format_number(v[1]) + "," + format_number(v[2]);
}

}  // namespace

std::string_view tap_name(FeatureTap tap) { return tap == FeatureTap::relu4_1 ? "relu4_1" : "relu5_1"; }

FeatureTap parse_tap(std::string_view name) {
  if (name == "relu4_1") return FeatureTap::relu4_1;
  if (name == "relu5_1") return FeatureTap::relu5_1;
  throw ContractError("unknown feature tap '" + std::string(name) + "' (expected relu4_1 or relu5_1)");
}

int tap_poolings(FeatureTap tap) { return tap == FeatureTap::relu4_1 ? 3 : 4; }

template <class S>
BasicFeatureExtractor<S> BasicFeatureExtractor<S>::random(std::uint64_t seed, int width_divisor,
                                                          FeatureTap deepest) {
  require(width_divisor >= 1, "feature extractor width divisor must be >= 1");
  BasicFeatureExtractor fx;
  int in_c = 3;
  for (const auto& l : kVgg19) {
    const int out_c = std::max(1, l.width / width_divisor);
    const std::string wname = std::string(l.name) + ".weight";
    Rng rng = Rng::stream(seed, wname);
    const double bound = std::sqrt(6.0 / (in_c * 9));
    BasicTensor<S> w(Shape{out_c, in_c, 3, 3});
    for (auto& v : w.data()) v = static_cast<S>(rng.uniform(-bound, bound));
    BasicTensor<S> b(Shape{1, out_c, 1, 1});
    Rng brng = Rng::stream(seed, std::string(l.name) + ".bias");
    for (auto& v : b.data()) v = static_cast<S>(brng.uniform(-0.05, 0.05));
    fx.layers_.push_back(
        {l.name, BasicVar<S>::constant(std::move(w)), BasicVar<S>::constant(std::move(b)), l.pool_before});
    in_c = out_c;
    if (std::string_view(l.name) == tap_layer(deepest)) break;
  }
  return fx;
}

template <class S>
BasicFeatureExtractor<S> BasicFeatureExtractor<S>::from_checkpoint(const Checkpoint& ck) {
  const auto arch = ck.metadata.find("architecture");
  if (arch == ck.metadata.end() || arch->second != "vgg19-features") {
    throw CheckpointError("container is not a vgg19-features extractor");
  }
  BasicFeatureExtractor fx;
  if (ck.metadata.count("normalization.mean")) {
    const auto m = split_numbers(ck.meta("normalization.mean"));
    const auto s = split_numbers(ck.meta("normalization.std"));
    if (m.size() != 3 || s.size() != 3) throw CheckpointError("normalization constants must have 3 entries");
    for (int c = 0; c < 3; ++c) {
      if (!(s[c] > 0)) throw CheckpointError("normalization std must be positive");
      fx.mean_[c] = m[c];
      fx.std_[c] = s[c];
    }
  }
  int in_c = 3;
  for (const auto& l : kVgg19) {
    const std::string wname = std::string(l.name) + ".weight";
    const std::string bname = std::string(l.name) + ".bias";
    if (!ck.contains(wname)) break;
    if (!ck.contains(bname)) throw CheckpointError("extractor is missing tensor '" + bname + "'");
    const Tensor& w = ck.get(wname);
    const Tensor& b = ck.get(bname);
    if (w.shape().c != in_c || w.shape().h != 3 || w.shape().w != 3) {
      throw CheckpointError("tensor '" + wname + "' has shape " + w.shape().str() + ", expected (*," +
                            std::to_string(in_c) + ",3,3)");
    }
    if (b.numel() != static_cast<std::size_t>(w.shape().n)) {
      throw CheckpointError("tensor '" + bname + "' does not match " + wname);
    }
    fx.layers_.push_back({l.name, BasicVar<S>::constant(w.cast<S>()),
                          BasicVar<S>::constant(b.reshaped(Shape{1, w.shape().n, 1, 1}).cast<S>()),
                          l.pool_before});
    in_c = w.shape().n;
  }
  if (!fx.has_tap(FeatureTap::relu4_1)) {
    throw CheckpointError("extractor is missing tensor 'conv4_1.weight' (needed for relu4_1)");
  }
  if (auto it = ck.metadata.find("taps"); it != ck.metadata.end()) {
    std::stringstream ss(it->second);
    std::string tap;
    while (std::getline(ss, tap, ',')) {
      FeatureTap t;
      try {
        t = parse_tap(tap);
      } catch (const ContractError& e) {
        throw CheckpointError(e.what());
      }
      if (!fx.has_tap(t)) throw CheckpointError("manifest lists tap " + tap + " but its weights are absent");
    }
  }
  return fx;
}

template <class S>
BasicFeatureExtractor<S> BasicFeatureExtractor<S>::load(const std::filesystem::path& path) {
  return from_checkpoint(Checkpoint::load(path));
}

template <class S>
Checkpoint BasicFeatureExtractor<S>::to_checkpoint() const {
  Checkpoint ck;
  ck.metadata["architecture"] = "vgg19-features";
  std::string taps = "relu4_1";
  if (has_tap(FeatureTap::relu5_1)) taps += ",relu5_1";
  ck.metadata["taps"] = taps;
  ck.metadata["normalization.mean"] = join_numbers(mean_);
  ck.metadata["normalization.std"] = join_numbers(std_);
  for (const auto& l : layers_) {
    ck.put(l.name + ".weight", l.weight.value().template cast<float>());
    ck.put(l.name + ".bias", l.bias.value().template cast<float>());
  }
  return ck;
}

template <class S>
bool BasicFeatureExtractor<S>::has_tap(FeatureTap tap) const {
  for (const auto& l : layers_) {
    if (l.name == tap_layer(tap)) return true;
  }
  return false;
}

template <class S>
BasicVar<S> BasicFeatureExtractor<S>::features(const BasicVar<S>& rgb, FeatureTap tap) const {
  require(has_tap(tap), "feature extractor has no " + std::string(tap_name(tap)) + " layer");
  const Shape s = rgb.shape();
  const int m = min_input_size(tap);
  require(s.c == 3, "feature extractor expects 3-channel RGB, got " + s.str());
  require(s.h >= m && s.w >= m && s.h % m == 0 && s.w % m == 0,
          "feature extractor input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
              " too small or not a multiple for " + std::string(tap_name(tap)) + ": minimum size " +
              std::to_string(m) + "x" + std::to_string(m));
  std::vector<S> scale(3), shift(3);
  for (int c = 0; c < 3; ++c) {
    scale[c] = static_cast<S>(1.0 / std_[c]);
    shift[c] = static_cast<S>(-mean_[c] / std_[c]);
  }
  BasicVar<S> h = ops::channel_affine(rgb, scale, shift);
  for (const auto& l : layers_) {
    if (l.pool_before) h = ops::maxpool2x2(h);
    h = ops::relu(ops::conv2d(h, l.weight, l.bias, 1, 1));
    if (l.name == tap_layer(tap)) return h;
  }
  throw ContractError("unreachable: tap layer not found");
}

void LossConfig::validate() const {
  require(use_pixel || use_feat || use_color, "loss config enables no terms");
  require(color_epsilon > 0.0f, "color_epsilon must be positive");
}

std::string LossConfig::describe() const {
  std::string out;
  auto append = [&](const std::string& s) { out += (out.empty() ? "" : "+") + s; };
  if (use_pixel) append("pixel");
  if (use_feat) append("feat@" + std::string(tap_name(feat_tap)));
  if (use_color) append("color");
  return out;
}

template <class S>
BasicVar<S> pixel_loss(const BasicVar<S>& pred, const BasicVar<S>& target) {
  return ops::l1_mean(pred, target);
}

template <class S>
BasicVar<S> feature_loss(const BasicVar<S>& pred, const BasicVar<S>& target,
                         const BasicFeatureExtractor<S>& fx, FeatureTap tap) {
  require(pred.shape() == target.shape(),
          "feature_loss: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
  BasicVar<S> target_features;
  {
    NoGradGuard guard;
    target_features = fx.features(target, tap);
  }
  return ops::l1_mean(fx.features(pred, tap), target_features);
}

template <class S>
BasicVar<S> color_loss(const BasicVar<S>& pred, const BasicVar<S>& target, S eps) {
  require(pred.shape().c == 3, "color_loss expects 3-channel RGB, got " + pred.shape().str());
  require(pred.shape() == target.shape(),
          "color_loss: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
  return ops::cosine_distance(ops::avgpool2x2(pred), ops::avgpool2x2(target), eps);
}

template <class S>
BasicLossBreakdown<S> total_loss(const BasicVar<S>& pred, const BasicVar<S>& target, const LossConfig& cfg,
                                 const BasicFeatureExtractor<S>* fx, const DisplayMap* to_display) {
  cfg.validate();
  BasicLossBreakdown<S> out;
  auto accumulate = [&](const BasicVar<S>& term) {
    out.total = out.total.defined() ? ops::add(out.total, term) : term;
  };
  if (cfg.use_pixel) {
    auto term = pixel_loss(pred, target);
    out.pixel = term.value()[0];
    accumulate(term);
  }
  if (!cfg.use_feat && !cfg.use_color) return out;

  BasicVar<S> dp = pred, dt = target;
  if (to_display != nullptr) {
    std::vector<S> scale(to_display->scale.begin(), to_display->scale.end());
    std::vector<S> shift(to_display->shift.begin(), to_display->shift.end());
    dp = ops::channel_affine(pred, scale, shift);
    dt = ops::channel_affine(target, scale, shift);
  }
  if (cfg.use_feat) {
    require(fx != nullptr, "feature loss enabled without a feature extractor");
    auto term = feature_loss(dp, dt, *fx, cfg.feat_tap);
    out.feat = term.value()[0];
    accumulate(term);
  }
  if (cfg.use_color) {
    auto term =
        color_loss(ops::clamp(dp, S(0), S(1)), ops::clamp(dt, S(0), S(1)), static_cast<S>(cfg.color_epsilon));
    out.color = term.value()[0];
    accumulate(term);
  }
  return out;
}

#define WNET_INSTANTIATE_LOSSES(S)                                                                           \
  template class BasicFeatureExtractor<S>;                                                                   \
  template BasicVar<S> pixel_loss(const BasicVar<S>&, const BasicVar<S>&);                                   \
  template BasicVar<S> feature_loss(const BasicVar<S>&, const BasicVar<S>&, const BasicFeatureExtractor<S>&, \
                                    FeatureTap);                                                             \
  template BasicVar<S> color_loss(const BasicVar<S>&, const BasicVar<S>&, S);                                \
  template BasicLossBreakdown<S> total_loss(const BasicVar<S>&, const BasicVar<S>&, const LossConfig&,       \
                                            const BasicFeatureExtractor<S>*, const DisplayMap*);

WNET_INSTANTIATE_LOSSES(float)
WNET_INSTANTIATE_LOSSES(double)

}  // namespace wnet

#include "wnet/model.hpp"

#include <cmath>

#include "wnet/keyvalue.hpp"
#include "wnet/ops.hpp"
#include "wnet/rng.hpp"

namespace wnet {
namespace {

// Uniform in +-sqrt(6 / ((1 + a^2) * fan_in)); a is the negative slope of
// the activation that follows (a = 1 for a linear output).
Tensor he_uniform(const Shape& shape, int fan_in, double slope, std::uint64_t seed, const std::string& name) {
  Rng rng = Rng::stream(seed, name);
  const double bound = std::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
  Tensor t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

Var add_conv_weight(ParameterSet& params, const std::string& name, int out_c, int in_c, double slope,
                    std::uint64_t seed) {
  return params.add(name, he_uniform(Shape{out_c, in_c, 3, 3}, in_c * 9, slope, seed, name));
}

}  // namespace

void ModelConfig::validate() const {
  require(depth >= 1, "model depth must be >= 1, got " + std::to_string(depth));
  require(base_channels >= 1, "base_channels must be >= 1");
  require(ca_reduction >= 1, "ca_reduction must be >= 1");
  require(in_channels >= 1, "in_channels must be >= 1");
  require(out_channels >= 1, "out_channels must be >= 1");
  require(depth <= 8, "model depth above 8 is not supported");
  for (int level = 0; level < depth; ++level) {
    const int c = level_channels(level);
    require(c % ca_reduction == 0, "ca_reduction " + std::to_string(ca_reduction) +
                                       " does not divide expanding-path width " + std::to_string(c));
  }
}

std::map<std::string, std::string> ModelConfig::to_metadata() const {
  return {
      {"model.depth", std::to_string(depth)},
      {"model.base_channels", std::to_string(base_channels)},
      {"model.ca_reduction", std::to_string(ca_reduction)},
      {"model.in_channels", std::to_string(in_channels)},
      {"model.out_channels", std::to_string(out_channels)},
      {"model.prelu_init", format_number(prelu_init)},
      {"model.channel_attention", channel_attention ? "true" : "false"},
      {"model.long_skip", long_skip ? "true" : "false"},
      {"model.residual_refine", residual_refine ? "true" : "false"},
  };
}

ModelConfig ModelConfig::from_metadata(const std::map<std::string, std::string>& meta) {
  ModelConfig c;
  c.depth = kv_int(meta, "model.depth", c.depth);
  c.base_channels = kv_int(meta, "model.base_channels", c.base_channels);
  c.ca_reduction = kv_int(meta, "model.ca_reduction", c.ca_reduction);
  c.in_channels = kv_int(meta, "model.in_channels", c.in_channels);
  c.out_channels = kv_int(meta, "model.out_channels", c.out_channels);
  c.prelu_init = static_cast<float>(kv_double(meta, "model.prelu_init", c.prelu_init));
  c.channel_attention = kv_bool(meta, "model.channel_attention", c.channel_attention);
  c.long_skip = kv_bool(meta, "model.long_skip", c.long_skip);
  c.residual_refine = kv_bool(meta, "model.residual_refine", c.residual_refine);
  return c;
}

ConvsBlock ConvsBlock::create(ParameterSet& params, const std::string& prefix, int in_channels,
                              int out_channels, float prelu_init, std::uint64_t seed) {
  ConvsBlock b;
  for (int j = 0; j < 3; ++j) {
    const std::string p = prefix + ".conv" + std::to_string(j);
    const int in_c = j == 0 ? in_channels : out_channels;
    b.layers[j].weight = add_conv_weight(params, p + ".weight", out_channels, in_c, prelu_init, seed);
    b.layers[j].bias = params.add(p + ".bias", Tensor(Shape{1, out_channels, 1, 1}));
    b.layers[j].slope =
        params.add(prefix + ".prelu" + std::to_string(j) + ".slope", Tensor::scalar(prelu_init));
  }
  return b;
}

Var ConvsBlock::forward(const Var& x) const {
  Var y = x;
  for (const auto& layer : layers) {
    y = ops::prelu(ops::conv2d(y, layer.weight, layer.bias, 1, 1), layer.slope);
  }
  return y;
}

ChannelAttention ChannelAttention::create(ParameterSet& params, const std::string& prefix, int channels,
                                          int reduction, std::uint64_t seed) {
  const int hidden = channels / reduction;
  ChannelAttention a;
  const std::string n1 = prefix + ".fc1.weight";
  const std::string n2 = prefix + ".fc2.weight";
  a.fc1_weight = params.add(n1, he_uniform(Shape{hidden, channels, 1, 1}, channels, 0.0, seed, n1));
  a.fc1_bias = params.add(prefix + ".fc1.bias", Tensor(Shape{1, hidden, 1, 1}));
  a.fc2_weight = params.add(n2, he_uniform(Shape{channels, hidden, 1, 1}, hidden, 1.0, seed, n2));
  a.fc2_bias = params.add(prefix + ".fc2.bias", Tensor(Shape{1, channels, 1, 1}));
  return a;
}

Var ChannelAttention::gates(const Var& y) const {
  Var s = ops::global_avg_pool(y);
  s = ops::relu(ops::fully_connected(s, fc1_weight, fc1_bias));
  return ops::sigmoid(ops::fully_connected(s, fc2_weight, fc2_bias));
}

Var ca_convs_block(const Var& x, const ConvsBlock& convs, const ChannelAttention& attention,
                   std::optional<float> fixed_gate, Tensor* gates_out) {
  Var y = convs.forward(x);
  Var w;
  if (fixed_gate) {
    w = Var::constant(Tensor(Shape{y.shape().n, y.shape().c, 1, 1}, *fixed_gate));
  } else {
    w = attention.gates(y);
  }
  if (gates_out != nullptr) *gates_out = w.value();
  return ops::mul(y, w);
}

UNet::UNet(const ModelConfig& cfg, std::string prefix, std::uint64_t seed, bool zero_head)
    : cfg_(cfg), prefix_(std::move(prefix)) {
  cfg_.validate();
  const float a = cfg_.prelu_init;
  for (int k = 0; k < cfg_.depth; ++k) {
    const int in_c = k == 0 ? cfg_.in_channels : cfg_.level_channels(k - 1);
    encoder_.push_back(ConvsBlock::create(params_, prefix_ + ".enc" + std::to_string(k), in_c,
                                          cfg_.level_channels(k), a, seed));
  }
  bottleneck_ = ConvsBlock::create(params_, prefix_ + ".bottleneck", cfg_.level_channels(cfg_.depth - 1),
                                   cfg_.level_channels(cfg_.depth), a, seed);
  decoder_.resize(static_cast<std::size_t>(cfg_.depth));
  // An ablated model carries no attention parameters at all.
  if (cfg_.channel_attention) attention_.resize(static_cast<std::size_t>(cfg_.depth));
  for (int k = cfg_.depth - 1; k >= 0; --k) {
    const int c = cfg_.level_channels(k);
    const std::string p = prefix_ + ".dec" + std::to_string(k);
    decoder_[static_cast<std::size_t>(k)] =
        ConvsBlock::create(params_, p, cfg_.level_channels(k + 1) + c, c, a, seed);
    if (cfg_.channel_attention) {
      attention_[static_cast<std::size_t>(k)] =
          ChannelAttention::create(params_, p + ".ca", c, cfg_.ca_reduction, seed);
    }
  }
  // Channel-doubling schedule.
  for (int k = 0; k < cfg_.depth; ++k) {
    require(encoder_[static_cast<std::size_t>(k)].layers[0].weight.shape().n == cfg_.base_channels << k,
            "channel schedule violated at encoder level " + std::to_string(k));
  }
  require(bottleneck_.layers[0].weight.shape().n == cfg_.base_channels << cfg_.depth,
          "channel schedule violated at the bottleneck");

  const std::string hw = prefix_ + ".head.weight";
  Tensor head = zero_head ? Tensor(Shape{cfg_.out_channels, cfg_.base_channels, 3, 3})
                          : he_uniform(Shape{cfg_.out_channels, cfg_.base_channels, 3, 3},
                                       cfg_.base_channels * 9, 1.0, seed, hw);
  head_weight_ = params_.add(hw, std::move(head));
  head_bias_ = params_.add(prefix_ + ".head.bias", Tensor(Shape{1, cfg_.out_channels, 1, 1}));
}

Var UNet::forward(const Var& x, const ForwardOptions& opts, UNetTrace* trace) const {
  const Shape xs = x.shape();
  const int m = 1 << cfg_.depth;
  require(xs.c == cfg_.in_channels, "unet: input has " + std::to_string(xs.c) + " channels, model expects " +
                                        std::to_string(cfg_.in_channels));
  require(xs.h % m == 0 && xs.w % m == 0 && xs.h > 0 && xs.w > 0,
          "unet: input spatial size " + std::to_string(xs.h) + "x" + std::to_string(xs.w) +
              " is not divisible by 2^depth = " + std::to_string(m));

  std::vector<Var> skips;
  Var h = x;
  for (const auto& block : encoder_) {
    h = block.forward(h);
    skips.push_back(h);
    if (trace) trace->encoder_shapes.push_back(h.shape());
    h = ops::maxpool2x2(h);
  }
  h = bottleneck_.forward(h);
  if (trace) trace->bottleneck = h.shape();

  std::optional<float> fixed = opts.fixed_attention;
  if (!cfg_.channel_attention && !fixed) fixed = 1.0f;
  for (int k = cfg_.depth - 1; k >= 0; --k) {
    const auto idx = static_cast<std::size_t>(k);
    h = ops::concat_channels(ops::upsample_bilinear2x(h), skips[idx]);
    Tensor gates;
    static const ChannelAttention kNone{};  // only reached with a fixed gate
    h = ca_convs_block(h, decoder_[idx], attention_.empty() ? kNone : attention_[idx], fixed,
                       trace ? &gates : nullptr);
    if (trace) {
      trace->decoder_shapes.push_back(h.shape());
      trace->attention.push_back(std::move(gates));
    }
  }
  if (cfg_.long_skip) h = ops::add(h, skips.front());
  if (cfg_.packed_input()) h = ops::upsample_bilinear2x(h);
  return ops::conv2d(h, head_weight_, head_bias_, 1, 1);
}

std::size_t UNet::attention_parameter_count() const {
  std::size_t total = 0;
  for (const auto& a : attention_) {
    for (const Var* v : {&a.fc1_weight, &a.fc1_bias, &a.fc2_weight, &a.fc2_bias}) total += v->value().numel();
  }
  return total;
}

namespace {

ModelConfig stage2_config(const ModelConfig& cfg) {
  ModelConfig c = cfg;
  c.in_channels = cfg.out_channels;
  return c;
}

}  // namespace

WNet::WNet(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      stage1_(cfg, "stage1", seed),
      stage2_(stage2_config(cfg), "stage2", seed, cfg.residual_refine) {}

WNetOutput WNet::forward(const Var& x, Stages stages, const ForwardOptions& opts) const {
  WNetOutput out;
  out.rgb1 = stage1_.forward(x, opts);
  if (stages == Stages::both) {
    Var refined = stage2_.forward(out.rgb1, opts);
    out.rgb2 = cfg_.residual_refine ? ops::add(out.rgb1, refined) : refined;
  }
  return out;
}

void WNet::set_stage1_frozen(bool frozen) {
  stage1_frozen_ = frozen;
  stage1_.parameters().set_requires_grad(!frozen);
}

ParameterSet WNet::parameters() const {
  ParameterSet all = stage1_.parameters();
  all.extend(stage2_.parameters());
  return all;
}

void WNet::save_to(Checkpoint& ck) const {
  for (const auto& [k, v] : cfg_.to_metadata()) ck.metadata[k] = v;
  const ParameterSet params = parameters();
  for (const auto& p : params.items()) ck.put(p.name, p.var.value());
}

void WNet::load_from(const Checkpoint& ck) {
  const ParameterSet params = parameters();
  for (const auto& p : params.items()) {
    if (!ck.contains(p.name)) throw CheckpointError("checkpoint is missing parameter '" + p.name + "'");
    const Tensor& t = ck.get(p.name);
    if (t.shape() != p.var.shape()) {
      throw CheckpointError("parameter '" + p.name + "' has shape " + t.shape().str() +
                            " in checkpoint, model expects " + p.var.shape().str());
    }
    Var v = p.var;
    v.mutable_value() = t;
  }
}

}  // namespace wnet

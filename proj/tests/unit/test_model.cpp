#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "helpers.hpp"
#include "wnet/adam.hpp"
#include "wnet/gradcheck.hpp"
#include "wnet/model.hpp"
#include "wnet/ops.hpp"

using namespace wnet;
using wnet::test::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

void zero_all(const ParameterSet& ps) {
  for (const auto& p : ps.items()) {
    Var v = p.var;
    v.mutable_value().fill(0.0f);
  }
}

void zero_attention_fcs(const ParameterSet& ps) {
  for (const auto& p : ps.items()) {
    if (p.name.find(".ca.fc") != std::string::npos) {
      Var v = p.var;
      v.mutable_value().fill(0.0f);
    }
  }
}

}  // namespace

TEST_CASE("U-Net output keeps the input size") {
  const ModelConfig cfg = ModelConfig::tiny();
  const UNet net(cfg, "u", 1);
  for (auto [h, w] : {std::pair{4, 4}, {8, 12}, {16, 8}, {32, 32}, {20, 36}}) {
    CAPTURE(h);
    CAPTURE(w);
    CHECK(net.forward(Var::constant(random_tensor({2, 1, h, w}, 2))).shape() == Shape{2, 3, h, w});
  }
  CHECK_THROWS_AS(net.forward(Var::constant(Tensor({1, 1, 6, 8}))), ContractError);
  CHECK_THROWS_AS(net.forward(Var::constant(Tensor({1, 2, 8, 8}))), ContractError);
}

TEST_CASE("packed input is upsampled to full resolution at the head") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.in_channels = 4;
  const WNet net(cfg, 3);
  const auto out = net.forward(Var::constant(random_tensor({1, 4, 8, 8}, 4)), Stages::both);
  CHECK(out.rgb1.shape() == Shape{1, 3, 16, 16});
  CHECK(out.rgb2->shape() == Shape{1, 3, 16, 16});
  CHECK(cfg.size_multiple() == 8);
}

TEST_CASE("channel schedule doubles per level") {
  for (const ModelConfig cfg : {ModelConfig(), ModelConfig::tiny()}) {
    const UNet net(cfg, "u", 5);
    UNetTrace trace;
    const int size = 1 << (cfg.depth + 1);
    net.forward(Var::constant(random_tensor({1, cfg.in_channels, size, size}, 6)), {}, &trace);
    REQUIRE(trace.encoder_shapes.size() == static_cast<std::size_t>(cfg.depth));
    for (int k = 0; k < cfg.depth; ++k) {
      CHECK(trace.encoder_shapes[k].c == cfg.base_channels << k);
      CHECK(trace.encoder_shapes[k].h == size >> k);
    }
    CHECK(trace.bottleneck.c == cfg.base_channels << cfg.depth);
    for (int i = 0; i < cfg.depth; ++i)
      CHECK(trace.decoder_shapes[i].c == cfg.base_channels << (cfg.depth - 1 - i));
    const auto first = net.parameters().at("u.enc0.conv0.weight");
    CHECK(first.shape() == Shape{cfg.base_channels, cfg.in_channels, 3, 3});
  }
}

TEST_CASE("tiny bottleneck is 32 channels at 8x8 for a 32x32 input") {
  const UNet net(ModelConfig::tiny(), "u", 7);
  UNetTrace trace;
  net.forward(Var::constant(random_tensor({2, 1, 32, 32}, 8)), {}, &trace);
  CHECK(trace.bottleneck == Shape{2, 32, 8, 8});
}

TEST_CASE("zero weights give zero output") {
  const UNet net(ModelConfig::tiny(), "u", 9);
  zero_all(net.parameters());
  const Tensor y = net.forward(Var::constant(random_tensor({1, 1, 16, 16}, 10))).value();
  CHECK(y == Tensor(y.shape()));
}

TEST_CASE("channel attention gates") {
  const ModelConfig cfg = ModelConfig::tiny();
  const UNet net(cfg, "u", 11);
  UNetTrace trace;
  const Var x = Var::constant(random_tensor({2, 1, 16, 16}, 12, -50, 50));
  net.forward(x, {}, &trace);
  REQUIRE(trace.attention.size() == static_cast<std::size_t>(cfg.depth));
  for (const auto& g : trace.attention) {
    for (float v : g.data()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
  }

  SUBCASE("zeroed second FC gives a gate of exactly one half") {
    ParameterSet params;
    const ConvsBlock convs = ConvsBlock::create(params, "b", 4, 16, 0.2f, 13);
    const ChannelAttention ca = ChannelAttention::create(params, "b.ca", 16, 8, 13);
    Var w2 = ca.fc2_weight, b2 = ca.fc2_bias;
    w2.mutable_value().fill(0.0f);
    b2.mutable_value().fill(0.0f);
    const Var in = Var::constant(random_tensor({1, 4, 8, 8}, 14));
    Tensor gates;
    const Tensor y = ca_convs_block(in, convs, ca, std::nullopt, &gates).value();
    CHECK(gates == Tensor(gates.shape(), 0.5f));
    Tensor half = convs.forward(in).value();
    for (auto& v : half.data()) v *= 0.5f;
    CHECK(y == half);
  }

  SUBCASE("zeroed FC layers equal a constant 0.5 multiplier everywhere") {
    zero_attention_fcs(net.parameters());
    const Tensor a = net.forward(x).value();
    ForwardOptions opts;
    opts.fixed_attention = 0.5f;
    CHECK(a == net.forward(x, opts).value());
  }
}

TEST_CASE("attention parameter count") {
  CHECK(ChannelAttention::parameter_count(64, 8) == 1096);
  ParameterSet params;
  ChannelAttention::create(params, "ca", 64, 8, 1);
  CHECK(params.total_elements() == 1096);
  ParameterSet conv_params;
  ConvsBlock::create(conv_params, "b", 128, 64, 0.2f, 1);
  std::size_t conv_elems = 0;
  for (const auto& p : conv_params.items())
    if (p.name.find("weight") != std::string::npos) conv_elems += p.var.value().numel();
  CHECK(1096.0 / double(conv_elems) < 0.01);

  const UNet net(ModelConfig(), "u", 2);
  CHECK(double(net.attention_parameter_count()) / double(net.parameters().total_elements()) < 0.01);
}

TEST_CASE("long skip ablation changes the output") {
  ModelConfig with = ModelConfig::tiny();
  ModelConfig without = with;
  without.long_skip = false;
  const UNet a(with, "u", 15), b(without, "u", 15);
  const Var x = Var::constant(random_tensor({1, 1, 16, 16}, 16));
  CHECK(max_abs_diff(a.forward(x).value(), b.forward(x).value()) > 0.0);
}

TEST_CASE("W-Net stages") {
  const WNet net(ModelConfig::tiny(), 17);
  const Var x = Var::constant(random_tensor({2, 1, 16, 16}, 18));
  const auto first = net.forward(x, Stages::first);
  CHECK_FALSE(first.rgb2.has_value());
  const auto both = net.forward(x, Stages::both);
  REQUIRE(both.rgb2.has_value());
  CHECK(both.rgb1.shape() == Shape{2, 3, 16, 16});
  CHECK(both.rgb2->shape() == both.rgb1.shape());
  CHECK(both.rgb1.value() == first.rgb1.value());
  // Residual stage 2 starts as the identity.
  CHECK(both.rgb2->value() == both.rgb1.value());
}

TEST_CASE("parameter names are unique and stage sets are disjoint") {
  const WNet net(ModelConfig::tiny(), 19);
  std::set<std::string> s1, s2;
  for (const auto& p : net.stage1().parameters().items()) CHECK(s1.insert(p.name).second);
  for (const auto& p : net.stage2().parameters().items()) CHECK(s2.insert(p.name).second);
  for (const auto& n : s2) CHECK(s1.count(n) == 0);
  CHECK(net.parameters().size() == s1.size() + s2.size());
}

TEST_CASE("frozen stage 1 receives no gradient and stays bit-identical") {
  WNet net(ModelConfig::tiny(), 20);
  net.set_stage1_frozen(true);
  const ParameterSet stage1 = net.stage1().parameters();
  std::vector<Tensor> before;
  for (const auto& p : stage1.items()) before.push_back(p.var.value());
  Adam adam(net.parameters());
  const Var x = Var::constant(random_tensor({2, 1, 16, 16}, 21));
  const Var target = Var::constant(random_tensor({2, 3, 16, 16}, 22));
  for (int step = 0; step < 3; ++step) {
    net.parameters().zero_grad();
    ops::l1_mean(*net.forward(x, Stages::both).rgb2, target).backward();
    for (const auto& p : stage1.items()) {
      CAPTURE(p.name);
      CHECK_FALSE(p.var.has_grad());
    }
    for (const auto& p : net.stage2().parameters().items()) {
      CAPTURE(p.name);
      CHECK(p.var.has_grad());
    }
    adam.step(1e-2);
  }
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(stage1.items()[i].var.value() == before[i]);
}

TEST_CASE("save, load and save again is byte-identical") {
  const WNet a(ModelConfig::tiny(), 23);
  Checkpoint ck;
  a.save_to(ck);
  WNet b(ModelConfig::tiny(), 999);
  b.load_from(ck);
  Checkpoint again;
  b.save_to(again);
  CHECK(ck.serialize() == again.serialize());

  Checkpoint missing;
  CHECK_THROWS_AS(b.load_from(missing), CheckpointError);
  ModelConfig wider = ModelConfig::tiny();
  wider.base_channels = 16;
  WNet c(wider, 1);
  CHECK_THROWS_AS(c.load_from(ck), CheckpointError);
}

TEST_CASE("attention ablation drops the parameters and equals unit gates") {
  ModelConfig with = ModelConfig::tiny();
  ModelConfig without = with;
  without.channel_attention = false;
  const UNet a(with, "u", 30), b(without, "u", 30);
  CHECK(b.attention_parameter_count() == 0);
  CHECK(a.parameters().total_elements() - b.parameters().total_elements() == a.attention_parameter_count());
  for (const auto& p : b.parameters().items()) CHECK(p.name.find(".ca.") == std::string::npos);
  const Var x = Var::constant(random_tensor({1, 1, 16, 16}, 31));
  ForwardOptions ones;
  ones.fixed_attention = 1.0f;
  CHECK(b.forward(x).value() == a.forward(x, ones).value());
}

TEST_CASE("model config metadata round trip and validation") {
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.in_channels = 4;
  cfg.channel_attention = false;
  const ModelConfig back = ModelConfig::from_metadata(cfg.to_metadata());
  CHECK(back.to_metadata() == cfg.to_metadata());
  ModelConfig bad = ModelConfig::tiny();
  bad.ca_reduction = 3;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = ModelConfig::tiny();
  bad.depth = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("end-to-end U-Net gradient with respect to the input") {
  const UNet net(ModelConfig::tiny(), "u", 24);
  GradCheckCase<float> c;
  c.name = "unet";
  c.inputs = {random_tensor({1, 1, 8, 8}, 25)};
  c.differentiable = {true};
  c.fn = [&](const std::vector<Var>& v) { return net.forward(v[0]); };
  Rng rng(26);
  const auto r = run_gradcheck(c, 1e-2, 1e-2, rng);
  CAPTURE(r.relative_error);
  CAPTURE(r.skipped_elements);
  CHECK(r.passed);
}

TEST_CASE("end-to-end U-Net parameter gradients match difference quotients") {
  const UNet net(ModelConfig::tiny(), "u", 27);
  const Var x = Var::constant(random_tensor({1, 1, 8, 8}, 28));
  const Tensor proj = random_tensor({1, 3, 8, 8}, 29);
  auto objective = [&] {
    const Tensor y = net.forward(x).value();
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += double(y[i]) * proj[i];
    return s;
  };
  net.forward(x).backward(proj);
  Rng rng(30);
  for (const char* name : {"u.enc0.conv0.weight", "u.bottleneck.conv2.bias", "u.dec0.ca.fc1.weight",
                           "u.dec1.prelu1.slope", "u.head.weight"}) {
    CAPTURE(name);
    Var p = net.parameters().at(name);
    const Tensor grad = p.grad();
    REQUIRE(grad.shape() == p.shape());
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = rng.below(p.value().numel());
      const float orig = p.value()[i];
      const float h = 1e-3f * std::max(1.0f, std::abs(orig));
      p.mutable_value()[i] = orig + h;
      const double up = objective();
      p.mutable_value()[i] = orig - h;
      const double down = objective();
      p.mutable_value()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      // 32-bit forward passes limit the quotient to about 1e-3 absolute.
      CHECK(std::abs(numeric - grad[i]) <= 2e-3 + 1e-2 * std::abs(numeric));
    }
  }
}

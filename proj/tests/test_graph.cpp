#include <gtest/gtest.h>

#include <random>

#include "reference.hpp"
#include "trecx/architecture.hpp"
#include "trecx/graph.hpp"

using namespace trecx;

namespace {

ArchitectureSpec bundled(const std::string& name) {
  return load_architecture(std::string(TRECX_CONFIG_DIR) + "/" + name + ".yaml");
}

ArchitectureSpec variant(ArchitectureSpec s, EeVariant v, bool ev) {
  s.ee_variant = v;
  s.early_view = ev;
  return s;
}

ArchitectureSpec dense_only() {
  return parse_architecture(R"(
name: dense_only
input: [64]
num_classes: 10
layers:
  - {kind: dense, units: 10}
)");
}

// Tiny two-exit convnet used for exactness checks.
ArchitectureSpec tiny(bool ev) {
  auto s = parse_architecture(R"(
name: tiny
input: [8, 8, 2]
num_classes: 3
attach_index: 2
ee_variant: trecx
early_view: false
layers:
  - {kind: conv, filters: 4, kernel: [3, 3]}
  - {kind: batchnorm}
  - {kind: relu}
  - {kind: conv, filters: 8, kernel: [3, 3], stride: 2}
  - {kind: relu}
  - {kind: pool}
  - {kind: dense, units: 3}
)");
  s.early_view = ev;
  return s;
}

// Loop-count FLOP oracle for a standard conv layer.
std::uint64_t conv_flops_oracle(std::size_t oh, std::size_t ow, std::size_t kh, std::size_t kw, std::size_t cin,
                                std::size_t cout, bool bias) {
  std::uint64_t f = 0;
  for (std::size_t a = 0; a < oh; ++a)
    for (std::size_t b = 0; b < ow; ++b)
      for (std::size_t c = 0; c < cout; ++c) {
        for (std::size_t i = 0; i < kh * kw * cin; ++i) f += 2;
        if (bias) f += 1;
      }
  return f;
}

}  // namespace

TEST(Architecture, ParsesBundledConfigs) {
  auto r = bundled("resnet8");
  EXPECT_EQ(r.layers.size(), 26u);
  EXPECT_EQ(r.attach_index, 9);
  EXPECT_EQ(r.ee_variant, EeVariant::TRecX);
  auto d = bundled("dscnn");
  EXPECT_EQ(d.layers.size(), 29u);
  EXPECT_EQ(d.attach_index, 14);
}

TEST(Architecture, UnknownKeysAndBadTypesAreErrors) {
  EXPECT_THROW(parse_architecture("name: x\ninput: [4]\nnum_classes: 2\nlayers: [{kind: dense, units: 2}]\nlr: 3\n"),
               ConfigError);
  EXPECT_THROW(parse_architecture("name: x\ninput: [4]\nnum_classes: 2\nlayers: [{kind: dense, unit: 2}]\n"),
               ConfigError);
  EXPECT_THROW(parse_architecture("name: x\ninput: [4]\nnum_classes: 2.5\nlayers: [{kind: dense, units: 2}]\n"),
               ConfigError);
  EXPECT_THROW(parse_architecture("name: x\ninput: [4]\nnum_classes: 2\nlayers: [{kind: dense2, units: 2}]\n"),
               ConfigError);
}

TEST(Architecture, RenderRoundTrips) {
  auto s = bundled("resnet8");
  auto again = parse_architecture(render_architecture(s));
  EXPECT_EQ(render_architecture(again), render_architecture(s));
}

TEST(BuildModel, DenseOnlyParamCount) {
  auto m = GraphModel<float>::build(dense_only(), 1);
  EXPECT_EQ(m.count_params(), 650u);
  EXPECT_EQ(m.count_flops().total(), 1290u);
}

TEST(BuildModel, ShapeChainBreakNamesLayer) {
  auto s = parse_architecture(R"(
name: broken
input: [8, 8, 1]
num_classes: 2
layers:
  - {kind: conv, filters: 4, kernel: [3, 3]}
  - {kind: dense, units: 2}
)");
  try {
    GraphModel<float>::build(s, 0);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1 (dense)"), std::string::npos) << e.what();
  }
  auto t = tiny(false);
  t.layers[3].kernel_h = 20;
  t.layers[3].padding = Padding::Valid;
  EXPECT_THROW(GraphModel<float>::build(t, 0), ShapeError);
}

TEST(BuildModel, InitializationIsDeterministicAndFollowsRules) {
  auto a = GraphModel<float>::build(bundled("resnet8"), 42);
  auto b = GraphModel<float>::build(bundled("resnet8"), 42);
  auto c = GraphModel<float>::build(bundled("resnet8"), 43);
  EXPECT_EQ(a.params().value("L0/kernel"), b.params().value("L0/kernel"));
  EXPECT_NE(a.params().value("L0/kernel"), c.params().value("L0/kernel"));
  for (float v : a.params().value("L0/bias").vec()) EXPECT_EQ(v, 0.0f);
  for (float v : a.params().value("L1/gamma").vec()) EXPECT_EQ(v, 1.0f);
  const float limit = std::sqrt(6.0f / 27.0f);
  for (float v : a.params().value("L0/kernel").vec()) EXPECT_LE(std::abs(v), limit);
}

TEST(BuildModel, BundledBaselineParamCounts) {
  auto r = GraphModel<float>::build(variant(bundled("resnet8"), EeVariant::None, false), 0);
  EXPECT_NEAR(static_cast<double>(r.count_params()), 78.7e3, 0.02 * 78.7e3);
  auto d = GraphModel<float>::build(variant(bundled("dscnn"), EeVariant::None, false), 0);
  EXPECT_NEAR(static_cast<double>(d.count_params()), 24.9e3, 0.02 * 24.9e3);
}

TEST(BuildModel, BundledBaselineFlops) {
  auto r = GraphModel<float>::build(variant(bundled("resnet8"), EeVariant::None, false), 0);
  EXPECT_NEAR(static_cast<double>(r.count_flops().total()), 25.28e6, 0.10 * 25.28e6);
  auto d = GraphModel<float>::build(variant(bundled("dscnn"), EeVariant::None, false), 0);
  EXPECT_NEAR(static_cast<double>(d.count_flops().total()), 5.54e6, 0.10 * 5.54e6);
}

TEST(AttachEarlyExit, TRecXBlockOnResnet8) {
  auto m = GraphModel<float>::build(variant(bundled("resnet8"), EeVariant::TRecX, false), 0);
  EXPECT_EQ(m.params().value("ee/pconv/kernel").shape(), (Shape{1, 1, 16, 32}));
  EXPECT_EQ(m.params().value("ee/dconv/kernel").shape(), (Shape{3, 3, 32}));
  EXPECT_EQ(m.params().value("ee/dense/weights").shape(), (Shape{32, 10}));
  // The depthwise conv is strided: 32x32 -> 16x16.
  for (const auto& n : m.nodes()) {
    if (n.name == "ee/dconv") {
      EXPECT_EQ(n.out_dims, (std::vector<std::size_t>{16, 16, 32}));
    }
  }
}

TEST(AttachEarlyExit, DscnnAttachPointAfterSecondDsLayer) {
  auto m = GraphModel<float>::build(variant(bundled("dscnn"), EeVariant::TRecX, false), 0);
  EXPECT_EQ(m.params().value("ee/pconv/kernel").shape(), (Shape{1, 1, 64, 128}));
  // Layers 0..14 are common (stem + two DS layers), 15.. final.
  EXPECT_EQ(m.param_block("L12/kernel"), Block::Common);
  EXPECT_EQ(m.param_block("L15/kernel"), Block::Final);
}

TEST(AttachEarlyExit, BaselineEEAddsOnlyDense) {
  auto base = GraphModel<float>::build(variant(bundled("resnet8"), EeVariant::None, false), 0);
  auto bee = attach_early_exit(base, EeVariant::BaselineEE);
  EXPECT_EQ(bee.count_params() - base.count_params(), 16u * 10u + 10u);
  EXPECT_EQ(bee.count_params(Block::EarlyExit), 170u);
  EXPECT_THROW(attach_early_exit(bee, EeVariant::TRecX), std::logic_error);
}

TEST(AttachEarlyExit, PreservesExistingParameters) {
  auto base = GraphModel<float>::build(variant(bundled("resnet8"), EeVariant::None, false), 5);
  auto ee = attach_early_exit(base, EeVariant::TRecX);
  EXPECT_EQ(ee.params().value("L20/kernel"), base.params().value("L20/kernel"));
  // Removing the early exit reproduces the baseline count exactly.
  EXPECT_EQ(ee.count_params() - ee.count_params(Block::EarlyExit), base.count_params());
}

TEST(AttachEarlyView, Resnet8Widths) {
  auto ee = GraphModel<float>::build(variant(bundled("resnet8"), EeVariant::TRecX, false), 0);
  EXPECT_EQ(ee.final_dense_inputs(), 64u);
  auto ev = attach_early_view(ee);
  EXPECT_EQ(ev.final_dense_inputs(), 80u);
  ASSERT_TRUE(ev.transfer_link().has_value());
  EXPECT_EQ(ev.transfer_link()->channels, 16u);
  EXPECT_EQ(ev.params().value("ev/dconv/kernel").shape(), (Shape{3, 3, 16}));
  // Starts as an identical copy of the first 16 filters.
  const auto& src = ev.params().value("ee/dconv/kernel");
  const auto& dst = ev.params().value("ev/dconv/kernel");
  for (std::size_t t = 0; t < 9; ++t)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(dst[t * 16 + c], src[t * 32 + c]);
  EXPECT_THROW(attach_early_view(ev), std::logic_error);
  EXPECT_THROW(attach_early_view(GraphModel<float>::build(variant(bundled("resnet8"), EeVariant::BaselineEE, false), 0)),
               std::logic_error);
}

TEST(AttachEarlyView, RejectsNarrowFinalBlock) {
  auto s = tiny(true);
  s.layers[3].filters = 3;  // c_ef = 4 > 3
  EXPECT_THROW(GraphModel<float>::build(s, 0), ConfigError);
}

TEST(AttachEarlyView, ParamCountWithinTableTolerance) {
  auto ev = GraphModel<float>::build(bundled("resnet8"), 0);
  EXPECT_NEAR(static_cast<double>(ev.count_params()), 89.7e3, 0.15 * 89.7e3);
}

TEST(Forward, BothHeadsAndCommonBlockComputedOnce) {
  auto m = GraphModel<float>::build(bundled("resnet8"), 3);
  std::mt19937_64 rng(1);
  auto x = ref::random_tensor(Shape{4, 32, 32, 3}, rng).cast<float>();
  auto out = m.forward(x, Mode::Infer);
  ASSERT_EQ(out.softmax_ee.shape(), (Shape{4, 10}));
  ASSERT_EQ(out.softmax_ef.shape(), (Shape{4, 10}));
  for (std::size_t r = 0; r < 4; ++r) {
    double se = 0, sf = 0;
    for (std::size_t j = 0; j < 10; ++j) se += out.softmax_ee.at(r, j), sf += out.softmax_ef.at(r, j);
    EXPECT_NEAR(se, 1.0, 1e-6);
    EXPECT_NEAR(sf, 1.0, 1e-6);
  }
  for (std::size_t i = 0; i < m.nodes().size(); ++i) EXPECT_EQ(out.node_calls[i], 1u) << m.nodes()[i].name;
  auto again = m.forward(x, Mode::Infer);
  EXPECT_EQ(again.logits_ee, out.logits_ee);
  EXPECT_EQ(again.logits_ef, out.logits_ef);
}

TEST(Forward, HeadsDependOnlyOnTheirBlocks) {
  auto m = GraphModel<float>::build(bundled("resnet8"), 3);
  std::vector<bool> reaches_ee(m.nodes().size(), false);
  reaches_ee[static_cast<std::size_t>(m.early_logits_node())] = true;
  for (std::size_t i = m.nodes().size(); i-- > 0;) {
    if (!reaches_ee[i]) continue;
    const auto& n = m.nodes()[i];
    EXPECT_NE(n.block, Block::Final) << n.name;
    for (int in : {n.input, n.input2})
      if (in >= 0) reaches_ee[static_cast<std::size_t>(in)] = true;
  }
}

TEST(Forward, ZeroedEarlyViewReproducesNonEvLogits) {
  auto plain = GraphModel<float>::build(variant(bundled("resnet8"), EeVariant::TRecX, false), 9);
  auto ev = GraphModel<float>::build(bundled("resnet8"), 9);
  ev.copy_matching_params(plain);
  ev.params().value("ev/dconv/kernel").fill(0.0f);
  ev.params().value("ev/dconv/bias").fill(0.0f);
  const auto& w_plain = plain.params().value("L25/weights");
  auto& w_ev = ev.params().value("L25/weights");
  ASSERT_EQ(w_ev.shape(), (Shape{80, 10}));
  w_ev.fill(0.0f);
  std::copy(w_plain.vec().begin(), w_plain.vec().end(), w_ev.vec().begin());  // rows 0..63
  std::mt19937_64 rng(2);
  auto x = ref::random_tensor(Shape{3, 32, 32, 3}, rng).cast<float>();
  EXPECT_EQ(ev.forward(x, Mode::Infer).logits_ef, plain.forward(x, Mode::Infer).logits_ef);
}

TEST(CountFlops, ConvLayerMatchesLoopOracle) {
  EXPECT_EQ(conv_flops_oracle(32, 32, 3, 3, 3, 16, false), 884736u);
  std::mt19937_64 rng(77);
  for (int t = 0; t < 10; ++t) {
    const std::size_t h = 4 + rng() % 12, w = 4 + rng() % 12, cin = 1 + rng() % 8, cout = 1 + rng() % 8;
    const std::size_t kh = 1 + rng() % 3, kw = 1 + rng() % 3, stride = 1 + rng() % 2;
    const bool bias = rng() % 2;
    ArchitectureSpec s;
    s.name = "one";
    s.input = {h, w, cin};
    s.num_classes = 2;
    LayerSpec conv;
    conv.kind = LayerKind::Conv;
    conv.filters = cout;
    conv.kernel_h = kh;
    conv.kernel_w = kw;
    conv.stride = stride;
    conv.bias = bias;
    LayerSpec pool;
    pool.kind = LayerKind::Pool;
    LayerSpec fc;
    fc.kind = LayerKind::Dense;
    fc.filters = 2;
    s.layers = {conv, pool, fc};
    auto m = GraphModel<float>::build(s, 0);
    const std::size_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
    EXPECT_EQ(m.node_flops(0), conv_flops_oracle(oh, ow, kh, kw, cin, cout, bias));
    EXPECT_EQ(m.node_flops(1), oh * ow * cout);
    EXPECT_EQ(m.node_flops(2), 2u * cout * 2u + 2u);
  }
}

TEST(CountFlops, BlockPartitionSumsToTotal) {
  for (const char* name : {"resnet8", "dscnn"}) {
    auto m = GraphModel<float>::build(bundled(name), 0);
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < m.nodes().size(); ++i) sum += m.node_flops(i);
    const auto f = m.count_flops();
    EXPECT_EQ(f.common + f.early_exit + f.final_block, sum);
    EXPECT_GT(f.final_path(), f.early_path());
    auto base = GraphModel<float>::build(variant(bundled(name), EeVariant::None, false), 0);
    EXPECT_GT(f.final_path(), base.count_flops().total());
    EXPECT_LT(f.early_path(), base.count_flops().total());
  }
}

TEST(Backward, WholeModelGradientMatchesFiniteDifferences) {
  for (bool ev : {false, true}) {
    auto m = GraphModel<double>::build(tiny(ev), 4);
    std::mt19937_64 rng(5);
    // Nonzero biases keep pre-activations off the relu kink at exactly zero.
    for (auto& p : m.params().entries())
      if (p.name.ends_with("/bias") || p.name.ends_with("/beta"))
        p.value = ref::random_tensor(p.value.shape(), rng, 0.05, 0.3);
    auto x = ref::random_tensor(Shape{3, 8, 8, 2}, rng);
    std::vector<int> labels{0, 2, 1};
    auto loss = [&] {
      auto copy = m;
      auto out = copy.forward(x, Mode::Train);
      return 0.3 * cross_entropy(out.softmax_ee, labels) + cross_entropy(out.softmax_ef, labels);
    };
    Trace<double> trace;
    auto work = m;
    auto out = work.forward(x, Mode::Train, &trace);
    auto dee = softmax_cross_entropy_backward(out.softmax_ee, labels);
    for (auto& v : dee.vec()) v *= 0.3;
    work.params().zero_grads();
    work.backward(trace, dee, softmax_cross_entropy_backward(out.softmax_ef, labels));
    for (auto& p : m.params().entries()) {
      if (!p.trainable) continue;
      auto fd = ref::finite_difference(loss, p.value);
      if (p.name == "L0/bias") {
        // A bias feeding train-mode batchnorm is cancelled by the batch mean.
        for (std::size_t i = 0; i < fd.size(); ++i) {
          EXPECT_NEAR(work.params().grad(p.name)[i], 0.0, 1e-12);
          EXPECT_NEAR(fd[i], 0.0, 1e-8);
        }
        continue;
      }
      EXPECT_LE(ref::max_rel_error(work.params().grad(p.name), fd), 1e-4) << p.name << " ev=" << ev;
    }
  }
}

#include <gtest/gtest.h>

#include "peftprof/builders.hpp"
#include "peftprof/peft.hpp"

using namespace peftprof;

namespace {

ModelGraph single_linear(std::int64_t din, std::int64_t dout) {
    GraphBuilder b("t");
    b.linear("fc", std::nullopt, din, dout, true);
    b.mark_head("fc");
    return infer_shapes(b.finish({1, din, 1, 1}), {1, din, 1, 1});
}

ModelGraph single_conv(std::int64_t cin, std::int64_t cout, std::int64_t k) {
    GraphBuilder b("t");
    b.conv("conv", std::nullopt, cin, cout, k, 1, k / 2);
    return infer_shapes(b.finish({1, cin, 8, 8}), {1, cin, 8, 8});
}

PeftConfig cfg(Method m, std::int64_t r = 4) {
    PeftConfig c;
    c.method = m;
    c.rank = r;
    return c;
}

}  // namespace

TEST(Adapters, LoraLinearCount) {
    TunedModel t = apply_method(single_linear(1280, 1000), cfg(Method::lora));
    ASSERT_EQ(t.adapters.size(), 1u);
    EXPECT_EQ(adapter_param_count(t), 9'120);
}

TEST(Adapters, DoraLinearAddsMagnitude) {
    TunedModel t = apply_method(single_linear(1280, 1000), cfg(Method::dora));
    EXPECT_EQ(adapter_param_count(t), 10'120);
    ASSERT_TRUE(t.adapters[0].magnitude.has_value());
    EXPECT_EQ(t.adapters[0].magnitude->numel(), 1000);
}

TEST(Adapters, LoraConvTwoConvDecomposition) {
    TunedModel t = apply_method(single_conv(32, 64, 3), cfg(Method::lora));
    const AdapterPair& a = t.adapters.at(0);
    EXPECT_EQ(a.a.numel(), 1'152);
    EXPECT_EQ(a.b.numel(), 256);
    EXPECT_EQ(a.a.dims, (std::vector<std::int64_t>{4, 32, 3, 3}));
    EXPECT_EQ(a.b.dims, (std::vector<std::int64_t>{64, 4, 1, 1}));
    EXPECT_EQ(adapter_param_count(t), 1'408);
}

TEST(Adapters, ScalingIsAlphaOverRank) {
    PeftConfig c = cfg(Method::lora, 8);
    c.alpha = 16;
    TunedModel t = apply_method(single_conv(16, 16, 3), c);
    EXPECT_DOUBLE_EQ(t.adapters[0].scaling, 2.0);
}

TEST(Adapters, FrozenBaseUnderLora) {
    TunedModel t = apply_method(single_conv(16, 16, 3), cfg(Method::lora));
    EXPECT_FALSE(t.is_trainable("conv.weight"));
    EXPECT_TRUE(t.is_trainable(t.adapters[0].a.id));
    EXPECT_TRUE(t.is_trainable(t.adapters[0].b.id));
}

TEST(Adapters, RankAboveDenseUpdateRejected) {
    EXPECT_THROW(apply_method(single_linear(8, 2), cfg(Method::lora, 4)), ValidationError);
}

TEST(Adapters, DepthwiseExclusion) {
    GraphBuilder b("t");
    auto a = b.conv("pw", std::nullopt, 8, 16, 1);
    b.conv("dw", a, 16, 16, 3, 1, 1, 16);
    ModelGraph g = infer_shapes(b.finish({1, 8, 8, 8}), {1, 8, 8, 8});
    PeftConfig c = cfg(Method::lora);
    EXPECT_EQ(apply_method(g, c).adapters.size(), 2u);
    c.targets.include_depthwise = false;
    EXPECT_EQ(apply_method(g, c).adapters.size(), 1u);
}

TEST(Config, Defaults) {
    PeftConfig c;
    EXPECT_EQ(c.rank, 4);
    EXPECT_DOUBLE_EQ(c.alpha, 4.0);
    EXPECT_EQ(c.galore_period, 200);
    EXPECT_DOUBLE_EQ(c.galore_scale, 0.25);
}

TEST(Config, InvalidValues) {
    PeftConfig c;
    c.rank = 0;
    EXPECT_THROW(c.check(), ValidationError);
    c = {};
    c.alpha = 0;
    EXPECT_THROW(c.check(), ValidationError);
    c = {};
    c.galore_period = 0;
    EXPECT_THROW(c.check(), ValidationError);
    c = {};
    c.targets.kinds = {LayerKind::batchnorm2d};
    EXPECT_THROW(c.check(), ValidationError);
    EXPECT_THROW(parse_method("adalora"), ValidationError);
}

TEST(GaLorePlan, ProjectsWideMatrix) {
    GraphBuilder b("t");
    b.conv("c", std::nullopt, 32, 64, 3, 1, 1);
    b.bn("bn", 0, 64);
    ModelGraph g = infer_shapes(b.finish({1, 32, 8, 8}), {1, 32, 8, 8});
    OptimizerPlan p = galore_plan(g, cfg(Method::galore));
    ASSERT_EQ(p.projected.size(), 1u);
    const ProjectedParam& pp = p.projected[0];
    EXPECT_EQ(pp.rows, 64);
    EXPECT_EQ(pp.cols, 288);
    EXPECT_TRUE(pp.left);
    EXPECT_EQ(pp.projector_numel(4), 64 * 4);
    EXPECT_EQ(pp.projected_numel(4), 4 * 288);
    EXPECT_EQ(p.projection_for("bn.gamma"), nullptr);
}

TEST(GaLorePlan, Resnet18ProjectsEveryWideWeight) {
    ModelGraph g = build_model("resnet18", 1000);
    OptimizerPlan p = galore_plan(g, cfg(Method::galore));
    std::size_t expected = 0;
    for (const auto& n : g.nodes)
        if (n.kind == LayerKind::conv2d || n.kind == LayerKind::linear) {
            auto [rows, cols] = n.param(ParamRole::weight)->matricized();
            if (std::min(rows, cols) > 4) ++expected;
        }
    EXPECT_EQ(p.projected.size(), expected);
    EXPECT_EQ(expected, 21u);
}

TEST(GaLorePlan, RequiresGaloreMethod) {
    EXPECT_THROW(galore_plan(build_model("resnet18", 10), cfg(Method::lora)), ValidationError);
    TunedModel t = apply_method(build_model("resnet18", 10), cfg(Method::lora));
    EXPECT_THROW(make_plan(t, UpdateRule::galore_adam), ValidationError);
}

TEST(Trainable, FftFractionIsOne) {
    TunedModel t = apply_method(build_model("mobilenet_v2", 1000), cfg(Method::fft));
    EXPECT_DOUBLE_EQ(trainable_summary(t).fraction(), 1.0);
}

TEST(Trainable, BnhIsHeadOnly) {
    ModelGraph g = build_model("mobilenet_v2", 1000);
    TunedModel t = apply_method(g, cfg(Method::bnh));
    auto s = trainable_summary(t);
    EXPECT_EQ(s.trainable, 1280 * 1000 + 1000);
    EXPECT_DOUBLE_EQ(s.fraction(), 1281000.0 / 3504872.0);
}

TEST(Trainable, GaloreStateFarBelowAdam) {
    ModelGraph g = infer_shapes(build_model("resnet18", 1000), {1, 3, 224, 224});
    TunedModel galore = apply_method(g, cfg(Method::galore));
    OptimizerPlan plan = make_plan(galore);
    std::int64_t galore_state = 0, adam_state = 0;
    for (const auto& n : galore.base.nodes)
        for (const auto& p : n.params)
            if (!p.buffer) {
                adam_state += 2 * p.numel();
                if (const auto* pp = plan.projection_for(p.id)) galore_state += 2 * pp->projected_numel(4) + pp->projector_numel(4);
                else galore_state += 2 * p.numel();
            }
    const double ratio = static_cast<double>(galore_state) / static_cast<double>(adam_state);
    EXPECT_GT(ratio, 0.0);
    EXPECT_LT(ratio, 0.1);
}

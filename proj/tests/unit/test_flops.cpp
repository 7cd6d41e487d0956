#include <gtest/gtest.h>

#include "peftprof/flops.hpp"
#include "peftprof/builders.hpp"
#include "peftprof/optim.hpp"

using namespace peftprof;

namespace {

LayerNode conv_layer(std::int64_t c, std::int64_t groups, std::int64_t hw = 32) {
    GraphBuilder b("t");
    b.conv("c", std::nullopt, c, c, 3, 1, 1, groups);
    return infer_shapes(b.finish({1, c, hw, hw}), {1, c, hw, hw}).nodes[0];
}

PeftConfig cfg(Method m, std::int64_t r = 4) {
    PeftConfig c;
    c.method = m;
    c.rank = r;
    return c;
}

FlopsReport report(const std::string& arch, Method m, CountingConvention conv = CountingConvention::paper) {
    ModelGraph g = infer_shapes(build_model(arch, 1000), {1, 3, 224, 224});
    TunedModel t = apply_method(g, cfg(m));
    ProfileOptions po;
    po.convention = conv;
    return profile_flops(t, make_plan(t), {1, 3, 224, 224}, po);
}

}  // namespace

TEST(LayerFlops, DenseConvForward) {
    EXPECT_EQ(layer_flops(conv_layer(16, 1), Phase::fwd), 4'718'592);
}

TEST(LayerFlops, DepthwiseForwardIsDenseOverCin) {
    const auto dense = layer_flops(conv_layer(16, 1), Phase::fwd);
    const auto dw = layer_flops(conv_layer(16, 16), Phase::fwd);
    EXPECT_EQ(dw, 294'912);
    EXPECT_EQ(dw * 16, dense);
}

TEST(LayerFlops, DepthwiseWeightGradChargedDense) {
    const LayerNode dw = conv_layer(16, 16);
    EXPECT_EQ(layer_flops(dw, Phase::bwd_input, CountingConvention::paper), 294'912);
    EXPECT_EQ(layer_flops(dw, Phase::bwd_weight, CountingConvention::paper), 4'718'592);
    EXPECT_EQ(layer_flops(dw, Phase::bwd_input, CountingConvention::exact), 294'912);
    EXPECT_EQ(layer_flops(dw, Phase::bwd_weight, CountingConvention::exact), 294'912);
}

TEST(LayerFlops, DenseConvConventionsAgree) {
    const LayerNode c = conv_layer(16, 1);
    for (Phase p : {Phase::fwd, Phase::bwd_input, Phase::bwd_weight})
        EXPECT_EQ(layer_flops(c, p, CountingConvention::paper), layer_flops(c, p, CountingConvention::exact));
}

TEST(LayerFlops, LinearNoBias) {
    GraphBuilder b("t");
    b.linear("fc", std::nullopt, 1280, 1000, false);
    ModelGraph g = infer_shapes(b.finish({1, 1280, 1, 1}), {1, 1280, 1, 1});
    EXPECT_EQ(layer_flops(g.nodes[0], Phase::fwd), 2'560'000);
    EXPECT_EQ(layer_flops(g.nodes[0], Phase::opt), 0);
}

TEST(LayerFlops, UnshapedLayerRejected) {
    GraphBuilder b("t");
    b.conv("c", std::nullopt, 3, 3, 3);
    EXPECT_THROW(layer_flops(b.finish({1, 3, 8, 8}).nodes[0], Phase::fwd), ValidationError);
}

TEST(OptimizerFlops, PerElementConstants) {
    GraphBuilder b("t");
    b.linear("fc", std::nullopt, 999, 1, true);
    ModelGraph g = infer_shapes(b.finish({1, 999, 1, 1}), {1, 999, 1, 1});
    TunedModel t = apply_method(g, cfg(Method::fft, 1));
    EXPECT_EQ(trainable_summary(t).trainable, 1000);
    EXPECT_EQ(optimizer_flops(make_plan(t, UpdateRule::sgd_momentum), t), 4'000);
    EXPECT_EQ(optimizer_flops(make_plan(t, UpdateRule::adam), t), 14'000);
}

TEST(OptimizerFlops, EngineAgreesOnThousandElements) {
    GraphBuilder b("t");
    b.linear("fc", std::nullopt, 999, 1, true);
    ModelGraph g = infer_shapes(b.finish({1, 999, 1, 1}), {1, 999, 1, 1});
    for (UpdateRule r : {UpdateRule::sgd_momentum, UpdateRule::adam}) {
        Executable ex = make_executable(g, cfg(Method::fft, 1), 3);
        Tensor x = random_input({1, 999, 1, 1}, 4);
        auto fw = forward(ex, x);
        auto grads = backward(ex, fw.tape, Tensor({1, 1, 1, 1}, 1.0));
        OpCounter ops;
        AllocationLedger ledger;
        OptimizerState st = make_optimizer(make_plan(ex.model, r));
        step(st, ex, grads, ops, ledger);
        EXPECT_EQ(ops.get(Phase::opt), r == UpdateRule::adam ? 14'000 : 4'000);
    }
}

TEST(OptimizerFlops, GaloreAmortizesSvd) {
    ModelGraph g = build_model("resnet18", 10);
    TunedModel t = apply_method(g, cfg(Method::galore));
    OptimizerPlan plan = make_plan(t);
    const auto detail = optimizer_flops_detail(plan, t);
    EXPECT_GT(detail.svd_refresh, 0);
    EXPECT_EQ(optimizer_flops(plan, t, SvdAccounting::first_step), detail.recurring + detail.svd_refresh);
    const auto amortized = optimizer_flops(plan, t, SvdAccounting::amortized);
    EXPECT_EQ(amortized, detail.recurring + (detail.svd_refresh + plan.period / 2) / plan.period);
}

TEST(OptimizerFlops, SvdCostFormula) {
    EXPECT_EQ(svd_flops(64, 288), CostConstants::svd_k * 64 * 288 * 64);
    EXPECT_EQ(svd_flops(288, 64), svd_flops(64, 288));
}

TEST(Ratio, SingleLinearIsOne) {
    // The graph input needs no gradient, so backward is the weight gradient alone.
    GraphBuilder b("t");
    b.linear("fc", std::nullopt, 32, 10, false);
    b.mark_head("fc");
    ModelGraph g = infer_shapes(b.finish({1, 32, 1, 1}), {1, 32, 1, 1});
    TunedModel t = apply_method(g, cfg(Method::fft));
    auto r = flops_ratio(profile_flops(t, make_plan(t), {1, 32, 1, 1}));
    EXPECT_EQ(r.num, 1);
    EXPECT_EQ(r.den, 1);
}

TEST(Ratio, TwoLinearStackIsThreeHalves) {
    GraphBuilder b("t");
    auto a = b.linear("fc1", std::nullopt, 32, 32, false);
    b.linear("fc2", a, 32, 32, false);
    ModelGraph g = infer_shapes(b.finish({1, 32, 1, 1}), {1, 32, 1, 1});
    TunedModel t = apply_method(g, cfg(Method::fft));
    auto r = flops_ratio(profile_flops(t, make_plan(t), {1, 32, 1, 1}));
    EXPECT_EQ(r.num, 3);
    EXPECT_EQ(r.den, 2);
}

TEST(Ratio, Resnet18NearTwo) {
    auto r = flops_ratio(report("resnet18", Method::fft));
    EXPECT_NEAR(r.value(), 2.0, 0.3);
}

TEST(Ratio, BnhTruncatesBackprop) {
    const auto rep = report("resnet18", Method::bnh);
    EXPECT_LT(flops_ratio(rep).value(), 1.0);
    EXPECT_EQ(rep.total(Phase::bwd_input), 0);
}

TEST(Ratio, LoraMobileNetNearOnePointTwo) {
    EXPECT_NEAR(flops_ratio(report("mobilenet_v2", Method::lora)).value(), 1.2, 0.3);
    EXPECT_NEAR(flops_ratio(report("mobilenet_v3_large", Method::lora)).value(), 1.2, 0.3);
}

TEST(Profile, ForwardIndependentOfConventionAndMethod) {
    const auto base = report("mobilenet_v2", Method::fft).forward();
    EXPECT_EQ(report("mobilenet_v2", Method::fft, CountingConvention::exact).forward(), base);
    EXPECT_EQ(report("mobilenet_v2", Method::galore).forward(), base);
    EXPECT_EQ(report("mobilenet_v2", Method::bnh).forward(), base);
}

TEST(Profile, LayerSumsEqualTotals) {
    const auto rep = report("resnet18", Method::lora);
    PhaseCounts sum{0, 0, 0, 0};
    for (const auto& l : rep.layers)
        for (std::size_t k = 0; k < 3; ++k) sum[k] += l.counts[k];
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(sum[k], rep.totals[k]);
}

TEST(Profile, ExactConventionLowersDepthwiseWeightGradient) {
    EXPECT_LT(report("mobilenet_v2", Method::fft, CountingConvention::exact).total(Phase::bwd_weight),
              report("mobilenet_v2", Method::fft).total(Phase::bwd_weight));
    EXPECT_EQ(report("resnet18", Method::fft, CountingConvention::exact).grand_total(),
              report("resnet18", Method::fft).grand_total());
}

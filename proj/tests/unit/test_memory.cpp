#include <gtest/gtest.h>

#include "peftprof/memory.hpp"
#include "peftprof/builders.hpp"
#include "peftprof/optim.hpp"

using namespace peftprof;

namespace {

const TensorShape kImage{1, 3, 224, 224};

PeftConfig cfg(Method m, std::int64_t r = 4) {
    PeftConfig c;
    c.method = m;
    c.rank = r;
    return c;
}

MemoryReport mem(const std::string& arch, Method m, std::int64_t width = 4) {
    TunedModel t = apply_method(infer_shapes(build_model(arch, 1000), kImage), cfg(m));
    return profile_memory(t, make_plan(t), kImage, width);
}

}  // namespace

TEST(SavedSet, BnhKeepsOnlyClassifierInput) {
    ModelGraph g = infer_shapes(build_model("mobilenet_v2", 1000), kImage);
    TunedModel t = apply_method(g, cfg(Method::bnh));
    auto saved = saved_activation_set(t, kImage);
    ASSERT_EQ(saved.size(), 1u);
    EXPECT_EQ(saved[0].numel, 1280);
    EXPECT_EQ(g.node(g.head_ids.front()).inputs.front(), *g.find(saved[0].id));
}

TEST(SavedSet, FftToyKeepsEveryWeightedInput) {
    ToyCnnSpec s{3, 16, 16, {ToyLayer::conv(8), ToyLayer::conv(8), ToyLayer::avgpool(), ToyLayer::linear()}};
    ModelGraph g = infer_shapes(build_model(s, 2), {1, 3, 16, 16});
    TunedModel t = apply_method(g, cfg(Method::fft, 2));
    auto saved = saved_activation_set(t, {1, 3, 16, 16});
    std::set<std::string> ids;
    for (const auto& x : saved) ids.insert(x.id);
    EXPECT_TRUE(ids.count(std::string(kGraphInputId)));
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (g.nodes[i].has_weights() && !g.nodes[i].inputs.empty()) {
            const auto& src = g.nodes[g.nodes[i].inputs[0]];
            if (src.kind != LayerKind::flatten) EXPECT_TRUE(ids.count(src.id)) << g.nodes[i].id;
        }
}

TEST(SavedSet, LoraActivationsCloseToFft) {
    const double fft = static_cast<double>(mem("mobilenet_v2", Method::fft).bytes(MemoryGroup::ACT));
    const double lora = static_cast<double>(mem("mobilenet_v2", Method::lora).bytes(MemoryGroup::ACT));
    EXPECT_NEAR(lora / fft, 1.0, 0.05);
}

TEST(Groups, ActivationsDominateFft) {
    const auto r = mem("mobilenet_v2", Method::fft);
    for (MemoryGroup g : kAllMemoryGroups)
        if (g != MemoryGroup::ACT) EXPECT_GT(r.bytes(MemoryGroup::ACT), r.bytes(g)) << to_string(g);
}

TEST(Groups, BnhGradIsHeadOnly) {
    const auto r = mem("resnet18", Method::bnh);
    EXPECT_EQ(r.bytes(MemoryGroup::GRAD), 4 * (512 * 1000 + 1000));
    EXPECT_LT(r.bytes(MemoryGroup::GRAD) * 10, r.bytes(MemoryGroup::PARAM));
}

TEST(Groups, TotalIsSumOfPeaks) {
    const auto r = mem("resnet18", Method::dora);
    std::int64_t s = 0;
    for (MemoryGroup g : kAllMemoryGroups) s += r.bytes(g);
    EXPECT_EQ(r.total(), s);
}

TEST(Groups, BytesScaleWithWidth) {
    const auto a = mem("resnet18", Method::lora, 4);
    const auto b = mem("resnet18", Method::lora, 2);
    for (MemoryGroup g : kAllMemoryGroups) EXPECT_EQ(a.bytes(g), 2 * b.bytes(g));
    EXPECT_THROW(mem("resnet18", Method::lora, 0), ValidationError);
}

TEST(Groups, GroupBytesMatchesReport) {
    TunedModel t = apply_method(infer_shapes(build_model("mobilenet_v3_large", 1000), kImage), cfg(Method::galore));
    OptimizerPlan plan = make_plan(t);
    const auto r = profile_memory(t, plan, kImage);
    for (MemoryGroup g : kAllMemoryGroups) EXPECT_EQ(group_bytes(t, plan, g, kImage), r.bytes(g));
}

TEST(OptState, AdamIsTwoMoments) {
    const auto r = mem("resnet18", Method::fft);
    EXPECT_EQ(r.bytes(MemoryGroup::OPT), 2 * r.bytes(MemoryGroup::GRAD));
}

TEST(OptState, GaloreProjectedState) {
    OptimizerPlan plan;
    plan.rule = UpdateRule::galore_adam;
    plan.rank = 4;
    plan.projected.push_back({"w", 64, 288, true});
    EXPECT_EQ(optimizer_state_elements(plan, "w", 64 * 288), 2 * 4 * 288 + 64 * 4);
    EXPECT_EQ(optimizer_state_elements(plan, "b", 64), 128);
    EXPECT_EQ(galore_refresh_workspace(64, 288), 64 * 288 + 64 * 64 + 64 + 64 * 288);
    EXPECT_EQ(galore_step_workspace(plan.projected[0], 4), 2 * 4 * 288 + 64 * 288);
}

TEST(OptState, GaloreReducesOptimizerMemory) {
    for (const char* arch : {"resnet18", "mobilenet_v2", "mobilenet_v3_large"}) {
        const double fft = static_cast<double>(mem(arch, Method::fft).bytes(MemoryGroup::OPT));
        const double galore = static_cast<double>(mem(arch, Method::galore).bytes(MemoryGroup::OPT));
        EXPECT_LT(galore, fft) << arch;
    }
}

TEST(OptState, LoraFractionOfGaloreOnResnet) {
    const double lora = static_cast<double>(mem("resnet18", Method::lora).bytes(MemoryGroup::OPT));
    const double galore = static_cast<double>(mem("resnet18", Method::galore).bytes(MemoryGroup::OPT));
    EXPECT_GT(lora / galore, 0.02);
    EXPECT_LT(lora / galore, 0.15);
}

TEST(Temp, ChainPeakIsTwoAdjacentGradients) {
    GraphBuilder b("t");
    auto a = b.conv("a", std::nullopt, 3, 8, 3, 1, 1);
    auto c = b.conv("b", a, 8, 16, 3, 1, 1);
    b.conv("c", c, 16, 4, 3, 1, 1);
    ModelGraph g = infer_shapes(b.finish({1, 3, 8, 8}), {1, 3, 8, 8});
    TunedModel t = apply_method(g, cfg(Method::fft, 2));
    // dL/dc (4*64) then dL/db (16*64) live together, then dL/db with dL/da (8*64).
    EXPECT_EQ(temp_peak(t, analyze_grad_flow(t)), 16 * 64 + 8 * 64);
}

TEST(Temp, BnhNeedsOnlyTheLogitGradient) {
    const auto r = mem("mobilenet_v2", Method::bnh);
    EXPECT_EQ(r.bytes(MemoryGroup::TEMP), 4 * 1000);
}

TEST(Temp, DoraRebuildsDenseDirection) {
    EXPECT_GT(mem("mobilenet_v2", Method::dora).bytes(MemoryGroup::TEMP), mem("mobilenet_v2", Method::lora).bytes(MemoryGroup::TEMP));
}

TEST(Ordering, MobileNetV2TotalsFollowMethodOrdering) {
    const auto bnh = mem("mobilenet_v2", Method::bnh).total();
    const auto lora = mem("mobilenet_v2", Method::lora).total();
    const auto galore = mem("mobilenet_v2", Method::galore).total();
    const auto fft = mem("mobilenet_v2", Method::fft).total();
    const auto dora = mem("mobilenet_v2", Method::dora).total();
    EXPECT_LT(bnh, lora);
    EXPECT_LT(lora, galore);
    EXPECT_LT(galore, fft);
    EXPECT_LT(fft, dora);
}

#include <gtest/gtest.h>

#include "peftprof/builders.hpp"

using namespace peftprof;

namespace {

std::int64_t conv_p(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t g = 1) { return cout * (cin / g) * k * k; }
std::int64_t bn_p(std::int64_t c) { return 2 * c; }

// Layer table summation, independent of the builder.
std::int64_t resnet18_oracle(std::int64_t classes) {
    std::int64_t total = conv_p(3, 64, 7) + bn_p(64);
    std::int64_t cin = 64;
    for (std::int64_t width : {64, 128, 256, 512}) {
        for (int block = 0; block < 2; ++block) {
            total += conv_p(cin, width, 3) + bn_p(width) + conv_p(width, width, 3) + bn_p(width);
            if (cin != width) total += conv_p(cin, width, 1) + bn_p(width);
            cin = width;
        }
    }
    return total + 512 * classes + classes;
}

std::int64_t mobilenet_v2_oracle(std::int64_t classes) {
    const std::int64_t table[][4] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                                     {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
    std::int64_t total = conv_p(3, 32, 3) + bn_p(32);
    std::int64_t cin = 32;
    for (const auto& row : table) {
        for (std::int64_t i = 0; i < row[2]; ++i) {
            const std::int64_t hidden = cin * row[0];
            if (row[0] != 1) total += conv_p(cin, hidden, 1) + bn_p(hidden);
            total += conv_p(hidden, hidden, 3, hidden) + bn_p(hidden);
            total += conv_p(hidden, row[1], 1) + bn_p(row[1]);
            cin = row[1];
        }
    }
    total += conv_p(320, 1280, 1) + bn_p(1280);
    return total + 1280 * classes + classes;
}

ModelGraph small_toy() {
    ToyCnnSpec s{3, 16, 16, {ToyLayer::conv(8), ToyLayer::bn(), ToyLayer::act(Activation::relu), ToyLayer::depthwise(), ToyLayer::linear()}};
    return build_model(s, 2);
}

}  // namespace

TEST(Builders, Resnet18ParamCountMatchesLayerTable) {
    ModelGraph g = build_model("resnet18", 1000);
    EXPECT_EQ(param_count(g), resnet18_oracle(1000));
    EXPECT_EQ(param_count(g), 11'689'512);
}

TEST(Builders, Resnet18HeadResizes) {
    EXPECT_EQ(param_count(build_model("resnet18", 10)), resnet18_oracle(10));
}

TEST(Builders, MobileNetV2ParamCountMatchesBlockTable) {
    ModelGraph g = build_model("mobilenet_v2", 1000);
    EXPECT_EQ(param_count(g), mobilenet_v2_oracle(1000));
    EXPECT_EQ(param_count(g), 3'504'872);
}

TEST(Builders, MobileNetV3LargeParamCount) {
    EXPECT_EQ(param_count(build_model("mobilenet_v3_large", 1000)), 5'483'032);
}

TEST(Builders, MobileNetV2BlocksHaveDepthwiseConv) {
    ModelGraph g = build_model("mobilenet_v2", 1000);
    int depthwise = 0;
    for (const auto& n : g.nodes)
        if (n.kind == LayerKind::conv2d && n.conv.groups > 1) {
            EXPECT_EQ(n.conv.groups, n.conv.in_channels) << n.id;
            ++depthwise;
        }
    EXPECT_EQ(depthwise, 17);
}

TEST(Builders, ToyCnnFiveLayers) {
    ModelGraph g = small_toy();
    EXPECT_TRUE(validate(g).empty());
    ModelGraph s = infer_shapes(g, {1, 3, 16, 16});
    EXPECT_TRUE(s.shaped());
    int layers = 0;
    for (const auto& n : s.nodes)
        if (n.kind != LayerKind::flatten) ++layers;
    EXPECT_EQ(layers, 5);
    EXPECT_EQ(s.nodes.back().out_shape->c, 2);
}

TEST(Builders, UnknownArchRejected) { EXPECT_THROW(build_model("vgg16", 1000), ValidationError); }

TEST(Builders, ArchAliases) {
    EXPECT_EQ(parse_arch("mnv2"), ArchId::mobilenet_v2);
    EXPECT_EQ(parse_arch("mobilenet_v3"), ArchId::mobilenet_v3_large);
    EXPECT_EQ(parse_arch("rn18"), ArchId::resnet18);
}

TEST(Shapes, StridedConvHalves) {
    GraphBuilder b("t");
    b.conv("c", std::nullopt, 3, 8, 3, 2, 1);
    ModelGraph g = infer_shapes(b.finish({1, 3, 224, 224}), {1, 3, 224, 224});
    EXPECT_EQ(g.nodes[0].out_shape->h, 112);
    EXPECT_EQ(g.nodes[0].out_shape->w, 112);
}

TEST(Shapes, ResidualMismatchNamesNode) {
    GraphBuilder b("t");
    auto a = b.conv("a", std::nullopt, 3, 8, 3, 1, 1);
    auto c = b.conv("c", std::nullopt, 3, 16, 3, 1, 1);
    b.add("join", a, c);
    ModelGraph g = b.finish({1, 3, 8, 8});
    try {
        infer_shapes(g, {1, 3, 8, 8});
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.node_id(), "join");
    }
}

TEST(Shapes, MobileNetV2PreClassifierWidth) {
    ModelGraph g = infer_shapes(build_model("mobilenet_v2", 1000), {1, 3, 224, 224});
    const auto& head = g.node(g.head_ids.front());
    ASSERT_EQ(head.kind, LayerKind::linear);
    EXPECT_EQ(head.in_shape->numel(), 1280);
    EXPECT_EQ(g.nodes.back().out_shape->c, 1000);
}

TEST(Shapes, ResnetFinalSpatial) {
    ModelGraph g = infer_shapes(build_model("resnet18", 1000), {2, 3, 224, 224});
    const auto& head = g.node(g.head_ids.front());
    EXPECT_EQ(head.in_shape->numel(), 2 * 512);
}

TEST(ParamCount, LinearWithBias) {
    GraphBuilder b("t");
    b.linear("fc", std::nullopt, 1280, 1000, true);
    EXPECT_EQ(param_count(b.finish({1, 1280, 1, 1})), 1'281'000);
}

TEST(ParamCount, DepthwiseNoBias) {
    GraphBuilder b("t");
    b.conv("dw", std::nullopt, 16, 16, 3, 1, 1, 16);
    EXPECT_EQ(param_count(b.finish({1, 16, 8, 8})), 144);
}

TEST(ParamCount, BnBuffersExcluded) {
    GraphBuilder b("t");
    b.bn("bn", std::nullopt, 10);
    ModelGraph g = b.finish({1, 10, 4, 4});
    EXPECT_EQ(param_count(g), 20);
    EXPECT_EQ(buffer_count(g), 20);
}

TEST(Validate, WellFormedToyIsClean) { EXPECT_TRUE(validate(small_toy()).empty()); }

TEST(Validate, GroupDivisibility) {
    GraphBuilder b("t");
    b.conv("bad", std::nullopt, 7, 8, 3, 1, 1, 2);
    auto d = validate(b.finish({1, 7, 8, 8}));
    ASSERT_FALSE(d.empty());
    EXPECT_EQ(d.front().node_id, "bad");
}

TEST(Validate, CycleDetected) {
    GraphBuilder b("t");
    auto a = b.conv("a", std::nullopt, 3, 3, 3, 1, 1);
    auto c = b.conv("c", a, 3, 3, 3, 1, 1);
    b.node(a).inputs = {c};
    auto d = validate(b.finish({1, 3, 8, 8}));
    ASSERT_FALSE(d.empty());
    bool cycle = false;
    for (const auto& x : d) cycle = cycle || x.message.find("cycl") != std::string::npos;
    EXPECT_TRUE(cycle);
}

TEST(Validate, DuplicateIds) {
    GraphBuilder b("t");
    auto a = b.conv("x", std::nullopt, 3, 3, 3, 1, 1);
    b.conv("x", a, 3, 3, 3, 1, 1);
    EXPECT_FALSE(validate(b.finish({1, 3, 8, 8})).empty());
}

TEST(Topology, OrderRespectsEdges) {
    ModelGraph g = build_model("resnet18", 10);
    auto order = topological_order(g);
    ASSERT_TRUE(order.has_value());
    std::vector<std::size_t> pos(g.nodes.size());
    for (std::size_t k = 0; k < order->size(); ++k) pos[(*order)[k]] = k;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        for (auto p : g.nodes[i].inputs) EXPECT_LT(pos[p], pos[i]);
    EXPECT_EQ(output_nodes(g).size(), 1u);
}

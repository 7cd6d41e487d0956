#ifndef PEFTPROF_BUILDERS_HPP
#define PEFTPROF_BUILDERS_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "peftprof/graph.hpp"

namespace peftprof {

/// Incrementally assembles a ModelGraph, creating parameter tensors with the
/// conventional layouts: conv weight [C_out, C_in/g, k, k], linear [out, in].
class GraphBuilder {
public:
    /// nullopt refers to the graph input.
    using Ref = std::optional<std::size_t>;

    explicit GraphBuilder(std::string arch) { graph_.arch = std::move(arch); }

    std::size_t conv(const std::string& id, Ref in, std::int64_t cin, std::int64_t cout, std::int64_t k,
                     std::int64_t stride = 1, std::int64_t padding = 0, std::int64_t groups = 1, bool bias = false) {
        LayerNode n = make(id, LayerKind::conv2d, in);
        n.conv = {cin, cout, k, stride, padding, groups, bias};
        n.params.push_back(param(id, ParamRole::weight, {cout, cin / (groups > 0 ? groups : 1), k, k}));
        if (bias) n.params.push_back(param(id, ParamRole::bias, {cout}));
        return push(std::move(n));
    }

    std::size_t bn(const std::string& id, Ref in, std::int64_t channels) {
        LayerNode n = make(id, LayerKind::batchnorm2d, in);
        n.bn_features = channels;
        n.params.push_back(param(id, ParamRole::bn_gamma, {channels}));
        n.params.push_back(param(id, ParamRole::bn_beta, {channels}));
        n.params.push_back(param(id, ParamRole::running_mean, {channels}, true));
        n.params.push_back(param(id, ParamRole::running_var, {channels}, true));
        return push(std::move(n));
    }

    std::size_t act(const std::string& id, Ref in, Activation a) {
        LayerNode n = make(id, LayerKind::activation, in);
        n.activation = a;
        return push(std::move(n));
    }

    std::size_t linear(const std::string& id, Ref in, std::int64_t din, std::int64_t dout, bool bias = true) {
        LayerNode n = make(id, LayerKind::linear, in);
        n.linear = {din, dout, bias};
        n.params.push_back(param(id, ParamRole::weight, {dout, din}));
        if (bias) n.params.push_back(param(id, ParamRole::bias, {dout}));
        return push(std::move(n));
    }

    std::size_t global_avgpool(const std::string& id, Ref in) {
        LayerNode n = make(id, LayerKind::avgpool, in);
        n.pool = {0, 1, 0};
        return push(std::move(n));
    }

    std::size_t maxpool(const std::string& id, Ref in, std::int64_t k, std::int64_t stride, std::int64_t padding) {
        LayerNode n = make(id, LayerKind::maxpool, in);
        n.pool = {k, stride, padding};
        return push(std::move(n));
    }

    std::size_t add(const std::string& id, std::size_t a, std::size_t b) {
        LayerNode n = make(id, LayerKind::residual_add, a);
        n.inputs.push_back(b);
        return push(std::move(n));
    }

    std::size_t mul(const std::string& id, std::size_t x, std::size_t scale) {
        LayerNode n = make(id, LayerKind::channel_mul, x);
        n.inputs.push_back(scale);
        return push(std::move(n));
    }

    std::size_t flatten(const std::string& id, Ref in) { return push(make(id, LayerKind::flatten, in)); }

    void mark_head(const std::string& id) { graph_.head_ids.push_back(id); }
    LayerNode& node(std::size_t i) { return graph_.nodes.at(i); }

    ModelGraph finish(const TensorShape& input) {
        graph_.input_shape = input;
        return graph_;
    }

private:
    static LayerNode make(const std::string& id, LayerKind kind, Ref in) {
        LayerNode n;
        n.id = id;
        n.kind = kind;
        if (in) n.inputs.push_back(*in);
        return n;
    }
    static ParamTensor param(const std::string& layer, ParamRole role, std::vector<std::int64_t> dims,
                             bool buffer = false) {
        ParamTensor p;
        p.id = layer + "." + std::string(to_string(role));
        p.role = role;
        p.dims = std::move(dims);
        p.buffer = buffer;
        p.trainable = !buffer;
        return p;
    }
    std::size_t push(LayerNode n) {
        graph_.nodes.push_back(std::move(n));
        return graph_.nodes.size() - 1;
    }

    ModelGraph graph_;
};

// ---------------------------------------------------------------------------
// Toy models
// ---------------------------------------------------------------------------

struct ToyLayer {
    enum class Kind { conv, bn, act, linear, avgpool, maxpool, flatten, add, se };
    Kind kind = Kind::conv;
    std::int64_t out = 0;  // conv/linear output width; 0 on linear means num_classes
    std::int64_t kernel = 3;
    std::int64_t stride = 1;
    std::int64_t padding = 1;
    std::int64_t groups = 1;  // 0 means depthwise (groups = C_in)
    bool bias = false;
    Activation activation = Activation::relu;
    std::int64_t back = 0;  // add: residual source = output before the last `back` layers

    static ToyLayer conv(std::int64_t out, std::int64_t k = 3, std::int64_t stride = 1, std::int64_t padding = -1,
                         std::int64_t groups = 1, bool bias = false) {
        ToyLayer l;
        l.kind = Kind::conv;
        l.out = out;
        l.kernel = k;
        l.stride = stride;
        l.padding = padding < 0 ? k / 2 : padding;
        l.groups = groups;
        l.bias = bias;
        return l;
    }
    static ToyLayer depthwise(std::int64_t k = 3, std::int64_t stride = 1) {
        ToyLayer l = conv(0, k, stride, -1, 0);
        return l;
    }
    static ToyLayer bn() { return with(Kind::bn); }
    static ToyLayer act(Activation a) {
        ToyLayer l = with(Kind::act);
        l.activation = a;
        return l;
    }
    static ToyLayer linear(std::int64_t out = 0, bool bias = true) {
        ToyLayer l = with(Kind::linear);
        l.out = out;
        l.bias = bias;
        return l;
    }
    static ToyLayer avgpool() { return with(Kind::avgpool); }
    static ToyLayer maxpool(std::int64_t k = 2, std::int64_t stride = 2) {
        ToyLayer l = with(Kind::maxpool);
        l.kernel = k;
        l.stride = stride;
        l.padding = 0;
        return l;
    }
    static ToyLayer flatten() { return with(Kind::flatten); }
    static ToyLayer add(std::int64_t back) {
        ToyLayer l = with(Kind::add);
        l.back = back;
        return l;
    }
    /// Squeeze-and-excitation: global pool, 1x1 conv, relu, 1x1 conv, hardsigmoid, channel multiply.
    static ToyLayer se(std::int64_t squeeze) {
        ToyLayer l = with(Kind::se);
        l.out = squeeze;
        return l;
    }

private:
    static ToyLayer with(Kind k) {
        ToyLayer l;
        l.kind = k;
        return l;
    }
};

struct ToyCnnSpec {
    std::int64_t in_channels = 3;
    std::int64_t height = 16;
    std::int64_t width = 16;
    std::vector<ToyLayer> layers;
};

/// Builds a toy network from an explicit layer list; linear layers take the
/// flattened features of their input. The last linear layer is the head.
inline ModelGraph build_toy_cnn(const ToyCnnSpec& spec, std::int64_t num_classes) {
    if (num_classes < 1) throw ValidationError("num_classes must be >= 1");
    if (spec.layers.empty()) throw ValidationError("toy_cnn needs at least one layer");
    GraphBuilder b("toy_cnn");
    GraphBuilder::Ref cur;
    TensorShape shape{1, spec.in_channels, spec.height, spec.width};
    std::vector<GraphBuilder::Ref> history{cur};
    std::vector<TensorShape> shape_history{shape};
    std::string last_linear;
    int idx = 0;
    for (const auto& l : spec.layers) {
        std::string id = "layers." + std::to_string(idx++);
        switch (l.kind) {
            case ToyLayer::Kind::conv: {
                std::int64_t groups = l.groups == 0 ? shape.c : l.groups;
                std::int64_t out = l.out == 0 ? shape.c : l.out;
                cur = b.conv(id, cur, shape.c, out, l.kernel, l.stride, l.padding, groups, l.bias);
                shape = {shape.n, out, detail::window_out(shape.h, l.kernel, l.stride, l.padding),
                         detail::window_out(shape.w, l.kernel, l.stride, l.padding)};
                break;
            }
            case ToyLayer::Kind::bn:
                cur = b.bn(id, cur, shape.c);
                break;
            case ToyLayer::Kind::act:
                cur = b.act(id, cur, l.activation);
                break;
            case ToyLayer::Kind::linear: {
                std::int64_t out = l.out == 0 ? num_classes : l.out;
                cur = b.linear(id, cur, shape.c * shape.h * shape.w, out, l.bias);
                shape = {shape.n, out, 1, 1};
                last_linear = id;
                break;
            }
            case ToyLayer::Kind::avgpool:
                cur = b.global_avgpool(id, cur);
                shape.h = shape.w = 1;
                break;
            case ToyLayer::Kind::maxpool:
                cur = b.maxpool(id, cur, l.kernel, l.stride, l.padding);
                shape.h = detail::window_out(shape.h, l.kernel, l.stride, l.padding);
                shape.w = detail::window_out(shape.w, l.kernel, l.stride, l.padding);
                break;
            case ToyLayer::Kind::flatten:
                cur = b.flatten(id, cur);
                shape = {shape.n, shape.c * shape.h * shape.w, 1, 1};
                break;
            case ToyLayer::Kind::add: {
                if (l.back < 1 || static_cast<std::size_t>(l.back) >= history.size() || !cur)
                    throw ValidationError("toy layer " + id + ": residual reaches past the input");
                auto src = history[history.size() - 1 - static_cast<std::size_t>(l.back)];
                if (!src) throw ValidationError("toy layer " + id + ": residual from the raw input is unsupported");
                cur = b.add(id, *cur, *src);
                break;
            }
            case ToyLayer::Kind::se: {
                if (!cur) throw ValidationError("toy layer " + id + ": squeeze-excite cannot be first");
                std::size_t x = *cur;
                auto p = b.global_avgpool(id + ".pool", x);
                auto f1 = b.conv(id + ".fc1", p, shape.c, l.out, 1, 1, 0, 1, true);
                auto a1 = b.act(id + ".relu", f1, Activation::relu);
                auto f2 = b.conv(id + ".fc2", a1, l.out, shape.c, 1, 1, 0, 1, true);
                auto a2 = b.act(id + ".gate", f2, Activation::hardsigmoid);
                cur = b.mul(id, x, a2);
                break;
            }
        }
        history.push_back(cur);
        shape_history.push_back(shape);
    }
    if (!last_linear.empty()) b.mark_head(last_linear);
    return b.finish(TensorShape{1, spec.in_channels, spec.height, spec.width});
}

// ---------------------------------------------------------------------------
// Benchmark architectures
// ---------------------------------------------------------------------------

inline ModelGraph build_resnet18(std::int64_t num_classes) {
    GraphBuilder b("resnet18");
    auto x = b.conv("conv1", std::nullopt, 3, 64, 7, 2, 3);
    x = b.bn("bn1", x, 64);
    x = b.act("relu", x, Activation::relu);
    x = b.maxpool("maxpool", x, 3, 2, 1);
    std::int64_t in = 64;
    const std::int64_t widths[] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage) {
        for (int blk = 0; blk < 2; ++blk) {
            std::string p = "layer" + std::to_string(stage + 1) + "." + std::to_string(blk);
            std::int64_t out = widths[stage];
            std::int64_t stride = (stage > 0 && blk == 0) ? 2 : 1;
            std::size_t identity = x;
            auto y = b.conv(p + ".conv1", x, in, out, 3, stride, 1);
            y = b.bn(p + ".bn1", y, out);
            y = b.act(p + ".relu1", y, Activation::relu);
            y = b.conv(p + ".conv2", y, out, out, 3, 1, 1);
            y = b.bn(p + ".bn2", y, out);
            if (stride != 1 || in != out) {
                auto d = b.conv(p + ".downsample.0", identity, in, out, 1, stride, 0);
                identity = b.bn(p + ".downsample.1", d, out);
            }
            y = b.add(p + ".add", y, identity);
            x = b.act(p + ".relu2", y, Activation::relu);
            in = out;
        }
    }
    x = b.global_avgpool("avgpool", x);
    x = b.flatten("flatten", x);
    b.linear("fc", x, 512, num_classes);
    b.mark_head("fc");
    return b.finish({1, 3, 224, 224});
}

inline std::int64_t make_divisible(double v, std::int64_t divisor = 8) {
    std::int64_t nv = std::max<std::int64_t>(divisor, static_cast<std::int64_t>(v + divisor / 2.0) / divisor * divisor);
    if (static_cast<double>(nv) < 0.9 * v) nv += divisor;
    return nv;
}

inline ModelGraph build_mobilenet_v2(std::int64_t num_classes) {
    GraphBuilder b("mobilenet_v2");
    auto cba = [&](const std::string& p, std::size_t in_ref, bool from_input, std::int64_t cin, std::int64_t cout,
                   std::int64_t k, std::int64_t stride, std::int64_t groups, bool act) {
        GraphBuilder::Ref r = from_input ? GraphBuilder::Ref{} : GraphBuilder::Ref{in_ref};
        auto y = b.conv(p + ".conv", r, cin, cout, k, stride, (k - 1) / 2, groups);
        y = b.bn(p + ".bn", y, cout);
        if (act) y = b.act(p + ".act", y, Activation::relu6);
        return y;
    };
    std::size_t x = cba("features.0", 0, true, 3, 32, 3, 2, 1, true);
    std::int64_t in = 32;
    struct Row {
        std::int64_t t, c, n, s;
    };
    const Row table[] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                         {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
    int index = 1;
    for (const auto& row : table) {
        for (std::int64_t i = 0; i < row.n; ++i) {
            std::string p = "features." + std::to_string(index++);
            std::int64_t stride = i == 0 ? row.s : 1;
            std::int64_t hidden = in * row.t;
            std::size_t y = x;
            if (row.t != 1) y = cba(p + ".expand", y, false, in, hidden, 1, 1, 1, true);
            y = cba(p + ".dw", y, false, hidden, hidden, 3, stride, hidden, true);
            y = cba(p + ".project", y, false, hidden, row.c, 1, 1, 1, false);
            if (stride == 1 && in == row.c) y = b.add(p + ".add", y, x);
            x = y;
            in = row.c;
        }
    }
    x = cba("features." + std::to_string(index), x, false, in, 1280, 1, 1, 1, true);
    x = b.global_avgpool("avgpool", x);
    x = b.flatten("flatten", x);
    b.linear("classifier.1", x, 1280, num_classes);
    b.mark_head("classifier.1");
    return b.finish({1, 3, 224, 224});
}

inline ModelGraph build_mobilenet_v3_large(std::int64_t num_classes) {
    GraphBuilder b("mobilenet_v3_large");
    auto cba = [&](const std::string& p, GraphBuilder::Ref in_ref, std::int64_t cin, std::int64_t cout,
                   std::int64_t k, std::int64_t stride, std::int64_t groups, Activation a) {
        auto y = b.conv(p + ".conv", in_ref, cin, cout, k, stride, (k - 1) / 2, groups);
        y = b.bn(p + ".bn", y, cout);
        if (a != Activation::none) y = b.act(p + ".act", y, a);
        return y;
    };
    std::size_t x = cba("features.0", std::nullopt, 3, 16, 3, 2, 1, Activation::hardswish);
    struct Row {
        std::int64_t in, k, exp, out;
        bool se;
        Activation act;
        std::int64_t stride;
    };
    constexpr auto RE = Activation::relu;
    constexpr auto HS = Activation::hardswish;
    const Row table[] = {
        {16, 3, 16, 16, false, RE, 1},    {16, 3, 64, 24, false, RE, 2},    {24, 3, 72, 24, false, RE, 1},
        {24, 5, 72, 40, true, RE, 2},     {40, 5, 120, 40, true, RE, 1},    {40, 5, 120, 40, true, RE, 1},
        {40, 3, 240, 80, false, HS, 2},   {80, 3, 200, 80, false, HS, 1},   {80, 3, 184, 80, false, HS, 1},
        {80, 3, 184, 80, false, HS, 1},   {80, 3, 480, 112, true, HS, 1},   {112, 3, 672, 112, true, HS, 1},
        {112, 5, 672, 160, true, HS, 2},  {160, 5, 960, 160, true, HS, 1},  {160, 5, 960, 160, true, HS, 1},
    };
    int index = 1;
    for (const auto& row : table) {
        std::string p = "features." + std::to_string(index++);
        std::size_t y = x;
        if (row.exp != row.in) y = cba(p + ".expand", y, row.in, row.exp, 1, 1, 1, row.act);
        y = cba(p + ".dw", y, row.exp, row.exp, row.k, row.stride, row.exp, row.act);
        if (row.se) {
            std::int64_t squeeze = make_divisible(static_cast<double>(row.exp) / 4.0);
            auto s = b.global_avgpool(p + ".se.pool", y);
            s = b.conv(p + ".se.fc1", s, row.exp, squeeze, 1, 1, 0, 1, true);
            s = b.act(p + ".se.relu", s, Activation::relu);
            s = b.conv(p + ".se.fc2", s, squeeze, row.exp, 1, 1, 0, 1, true);
            s = b.act(p + ".se.gate", s, Activation::hardsigmoid);
            y = b.mul(p + ".se.scale", y, s);
        }
        y = cba(p + ".project", y, row.exp, row.out, 1, 1, 1, Activation::none);
        if (row.stride == 1 && row.in == row.out) y = b.add(p + ".add", y, x);
        x = y;
    }
    x = cba("features." + std::to_string(index), x, 160, 960, 1, 1, 1, HS);
    x = b.global_avgpool("avgpool", x);
    x = b.flatten("flatten", x);
    x = b.linear("classifier.0", x, 960, 1280);
    x = b.act("classifier.1", x, HS);
    b.linear("classifier.3", x, 1280, num_classes);
    b.mark_head("classifier.0");
    b.mark_head("classifier.3");
    return b.finish({1, 3, 224, 224});
}

enum class ArchId { mobilenet_v2, mobilenet_v3_large, resnet18, toy_cnn };

inline std::string_view to_string(ArchId a) {
    switch (a) {
        case ArchId::mobilenet_v2: return "mobilenet_v2";
        case ArchId::mobilenet_v3_large: return "mobilenet_v3_large";
        case ArchId::resnet18: return "resnet18";
        case ArchId::toy_cnn: return "toy_cnn";
    }
    return "?";
}

inline ArchId parse_arch(std::string_view text) {
    if (text == "mobilenet_v2" || text == "mnv2") return ArchId::mobilenet_v2;
    if (text == "mobilenet_v3" || text == "mobilenet_v3_large" || text == "mnv3") return ArchId::mobilenet_v3_large;
    if (text == "resnet18" || text == "rn18") return ArchId::resnet18;
    if (text == "toy_cnn") return ArchId::toy_cnn;
    throw ValidationError("unknown arch_id '" + std::string(text) + "'");
}

/// Builds one of the benchmark architectures with the classifier resized.
/// toy_cnn needs a layer list; use the ToyCnnSpec overload.
inline ModelGraph build_model(ArchId arch, std::int64_t num_classes) {
    if (num_classes < 1) throw ValidationError("num_classes must be >= 1");
    switch (arch) {
        case ArchId::mobilenet_v2: return build_mobilenet_v2(num_classes);
        case ArchId::mobilenet_v3_large: return build_mobilenet_v3_large(num_classes);
        case ArchId::resnet18: return build_resnet18(num_classes);
        case ArchId::toy_cnn: throw ValidationError("toy_cnn requires an explicit layer list");
    }
    throw ValidationError("unknown arch_id");
}

inline ModelGraph build_model(std::string_view arch, std::int64_t num_classes) {
    return build_model(parse_arch(arch), num_classes);
}

inline ModelGraph build_model(const ToyCnnSpec& toy, std::int64_t num_classes) {
    return build_toy_cnn(toy, num_classes);
}

}  // namespace peftprof

#endif  // PEFTPROF_BUILDERS_HPP

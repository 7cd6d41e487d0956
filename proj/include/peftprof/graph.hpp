#ifndef PEFTPROF_GRAPH_HPP
#define PEFTPROF_GRAPH_HPP

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "peftprof/error.hpp"

namespace peftprof {

struct TensorShape {
    std::int64_t n = 1;
    std::int64_t c = 1;
    std::int64_t h = 1;
    std::int64_t w = 1;

    std::int64_t numel() const { return n * c * h * w; }
    std::int64_t spatial() const { return h * w; }
    bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

    friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

inline std::string to_string(const TensorShape& s) {
    return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
           std::to_string(s.w);
}

enum class LayerKind { conv2d, batchnorm2d, linear, activation, avgpool, maxpool, residual_add, channel_mul, flatten };

enum class Activation { none, relu, relu6, hardswish, hardsigmoid };

enum class ParamRole { weight, bias, bn_gamma, bn_beta, running_mean, running_var, lora_a, lora_b, dora_magnitude };

inline std::string_view to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::batchnorm2d: return "batchnorm2d";
        case LayerKind::linear: return "linear";
        case LayerKind::activation: return "activation";
        case LayerKind::avgpool: return "avgpool";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::residual_add: return "residual_add";
        case LayerKind::channel_mul: return "channel_mul";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::none: return "none";
        case Activation::relu: return "relu";
        case Activation::relu6: return "relu6";
        case Activation::hardswish: return "hardswish";
        case Activation::hardsigmoid: return "hardsigmoid";
    }
    return "?";
}

inline std::string_view to_string(ParamRole r) {
    switch (r) {
        case ParamRole::weight: return "weight";
        case ParamRole::bias: return "bias";
        case ParamRole::bn_gamma: return "gamma";
        case ParamRole::bn_beta: return "beta";
        case ParamRole::running_mean: return "running_mean";
        case ParamRole::running_var: return "running_var";
        case ParamRole::lora_a: return "lora_A";
        case ParamRole::lora_b: return "lora_B";
        case ParamRole::dora_magnitude: return "dora_m";
    }
    return "?";
}

template <class Enum, std::size_t N>
std::optional<Enum> parse_enum(std::string_view text, const Enum (&all)[N]) {
    for (Enum e : all) {
        if (to_string(e) == text) return e;
    }
    return std::nullopt;
}

inline constexpr LayerKind kAllLayerKinds[] = {LayerKind::conv2d,  LayerKind::batchnorm2d,  LayerKind::linear,
                                               LayerKind::activation, LayerKind::avgpool,  LayerKind::maxpool,
                                               LayerKind::residual_add, LayerKind::channel_mul, LayerKind::flatten};
inline constexpr Activation kAllActivations[] = {Activation::none, Activation::relu, Activation::relu6,
                                                 Activation::hardswish, Activation::hardsigmoid};
inline constexpr ParamRole kAllParamRoles[] = {ParamRole::weight,       ParamRole::bias,        ParamRole::bn_gamma,
                                               ParamRole::bn_beta,      ParamRole::running_mean, ParamRole::running_var,
                                               ParamRole::lora_a,       ParamRole::lora_b,      ParamRole::dora_magnitude};

/// A parameter or persistent buffer. `values` stays empty for purely analytic
/// graphs; the reference engine fills it.
struct ParamTensor {
    std::string id;
    ParamRole role = ParamRole::weight;
    std::vector<std::int64_t> dims;
    bool trainable = true;
    bool buffer = false;
    std::vector<double> values;

    std::int64_t numel() const {
        return std::accumulate(dims.begin(), dims.end(), std::int64_t{1}, std::multiplies<>());
    }
    bool materialized() const { return !values.empty(); }

    /// Rows x cols of the weight viewed as a matrix (out x in*k*k). 1-D tensors
    /// report {numel, 1}.
    std::pair<std::int64_t, std::int64_t> matricized() const {
        if (dims.size() < 2) return {numel(), 1};
        return {dims[0], numel() / dims[0]};
    }
    bool is_matrix() const { return dims.size() >= 2; }

    friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

struct ConvParams {
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t kernel = 1;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    std::int64_t groups = 1;
    bool bias = false;

    bool depthwise() const { return groups > 1 && groups == in_channels; }
    friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

struct LinearParams {
    std::int64_t in_features = 0;
    std::int64_t out_features = 0;
    bool bias = true;
    friend bool operator==(const LinearParams&, const LinearParams&) = default;
};

/// kernel == 0 on avgpool means global pooling.
struct PoolParams {
    std::int64_t kernel = 0;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    friend bool operator==(const PoolParams&, const PoolParams&) = default;
};

struct LayerNode {
    std::string id;
    LayerKind kind = LayerKind::activation;
    Activation activation = Activation::none;
    ConvParams conv;
    LinearParams linear;
    PoolParams pool;
    std::int64_t bn_features = 0;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    /// Predecessor node indices; empty means the node reads the graph input.
    std::vector<std::size_t> inputs;
    std::vector<ParamTensor> params;
    std::optional<TensorShape> in_shape;
    std::optional<TensorShape> out_shape;

    bool has_weights() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }

    const ParamTensor* param(ParamRole role) const {
        for (const auto& p : params)
            if (p.role == role) return &p;
        return nullptr;
    }
    ParamTensor* param(ParamRole role) {
        for (auto& p : params)
            if (p.role == role) return &p;
        return nullptr;
    }

    friend bool operator==(const LayerNode&, const LayerNode&) = default;
};

struct ModelGraph {
    std::string arch;
    std::vector<LayerNode> nodes;
    std::vector<std::string> head_ids;
    TensorShape input_shape{1, 3, 224, 224};

    std::optional<std::size_t> find(std::string_view id) const {
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i].id == id) return i;
        return std::nullopt;
    }
    const LayerNode& node(std::string_view id) const {
        auto i = find(id);
        if (!i) throw ValidationError("unknown node id '" + std::string(id) + "'");
        return nodes[*i];
    }
    bool is_head(std::string_view id) const {
        return std::find(head_ids.begin(), head_ids.end(), id) != head_ids.end();
    }
    bool shaped() const {
        return !nodes.empty() && std::all_of(nodes.begin(), nodes.end(), [](const LayerNode& n) { return n.out_shape.has_value(); });
    }

    friend bool operator==(const ModelGraph&, const ModelGraph&) = default;
};

// ---------------------------------------------------------------------------
// Topology helpers
// ---------------------------------------------------------------------------

/// Kahn ordering; returns nullopt when the graph has a cycle or a dangling edge.
inline std::optional<std::vector<std::size_t>> topological_order(const ModelGraph& g) {
    const std::size_t n = g.nodes.size();
    std::vector<std::size_t> indegree(n, 0);
    std::vector<std::vector<std::size_t>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p : g.nodes[i].inputs) {
            if (p >= n) return std::nullopt;
            out[p].push_back(i);
            ++indegree[i];
        }
    }
    std::vector<std::size_t> order;
    order.reserve(n);
    std::vector<std::size_t> ready;
    for (std::size_t i = n; i-- > 0;)
        if (indegree[i] == 0) ready.push_back(i);
    while (!ready.empty()) {
        std::size_t i = ready.back();
        ready.pop_back();
        order.push_back(i);
        for (auto it = out[i].rbegin(); it != out[i].rend(); ++it)
            if (--indegree[*it] == 0) ready.push_back(*it);
    }
    if (order.size() != n) return std::nullopt;
    return order;
}

inline std::vector<std::vector<std::size_t>> consumers(const ModelGraph& g) {
    std::vector<std::vector<std::size_t>> out(g.nodes.size());
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        for (std::size_t p : g.nodes[i].inputs)
            if (p < g.nodes.size()) out[p].push_back(i);
    return out;
}

inline std::vector<std::size_t> output_nodes(const ModelGraph& g) {
    auto cons = consumers(g);
    std::vector<std::size_t> outs;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (cons[i].empty()) outs.push_back(i);
    return outs;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct Diagnostic {
    std::string node_id;
    std::string message;
};

inline std::vector<Diagnostic> validate(const ModelGraph& g) {
    std::vector<Diagnostic> diags;
    auto add = [&](const std::string& id, std::string msg) { diags.push_back({id, std::move(msg)}); };

    if (g.nodes.empty()) {
        add("", "graph has no nodes");
        return diags;
    }
    if (!g.input_shape.valid()) add("", "input shape has a non-positive dimension");

    std::unordered_map<std::string, int> seen;
    for (const auto& n : g.nodes)
        if (++seen[n.id] == 2) add(n.id, "duplicate node id");

    for (const auto& n : g.nodes) {
        for (std::size_t p : n.inputs)
            if (p >= g.nodes.size()) add(n.id, "edge references missing node index " + std::to_string(p));
        switch (n.kind) {
            case LayerKind::conv2d: {
                const auto& c = n.conv;
                if (c.in_channels < 1 || c.out_channels < 1 || c.kernel < 1 || c.stride < 1 || c.padding < 0 ||
                    c.groups < 1)
                    add(n.id, "conv parameters must be positive");
                else if (c.in_channels % c.groups != 0 || c.out_channels % c.groups != 0)
                    add(n.id, "groups " + std::to_string(c.groups) + " must divide in_channels " +
                                  std::to_string(c.in_channels) + " and out_channels " +
                                  std::to_string(c.out_channels));
                break;
            }
            case LayerKind::linear:
                if (n.linear.in_features < 1 || n.linear.out_features < 1) add(n.id, "linear features must be positive");
                break;
            case LayerKind::batchnorm2d:
                if (n.bn_features < 1) add(n.id, "batchnorm features must be positive");
                break;
            case LayerKind::activation:
                if (n.activation == Activation::none) add(n.id, "activation kind not set");
                break;
            case LayerKind::maxpool:
                if (n.pool.kernel < 1 || n.pool.stride < 1 || n.pool.padding < 0 || 2 * n.pool.padding > n.pool.kernel)
                    add(n.id, "maxpool needs a positive kernel and stride and padding <= kernel/2");
                break;
            case LayerKind::avgpool:
                if (n.pool.kernel != 0) add(n.id, "avgpool supports global pooling only (kernel 0)");
                break;
            case LayerKind::residual_add:
            case LayerKind::channel_mul:
                if (n.inputs.size() != 2) add(n.id, std::string(to_string(n.kind)) + " needs exactly two inputs");
                break;
            case LayerKind::flatten:
                break;
        }
        if (n.kind != LayerKind::residual_add && n.kind != LayerKind::channel_mul && n.inputs.size() > 1)
            add(n.id, "layer accepts a single input");
        for (const auto& p : n.params)
            if (p.dims.empty() || std::any_of(p.dims.begin(), p.dims.end(), [](auto d) { return d < 1; }))
                add(n.id, "parameter '" + p.id + "' has an invalid shape");
    }

    if (!topological_order(g)) add("", "graph contains a cycle");
    auto outs = output_nodes(g);
    if (outs.size() != 1) add("", "graph must have exactly one output node, found " + std::to_string(outs.size()));
    for (const auto& h : g.head_ids)
        if (!g.find(h)) add(h, "head id does not name a node");
    return diags;
}

// ---------------------------------------------------------------------------
// Shape inference
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t window_out(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
    return (in + 2 * p - k) / s + 1;
}

inline TensorShape infer_node(const LayerNode& n, const std::vector<TensorShape>& ins) {
    const TensorShape& x = ins.at(0);
    auto fail = [&](const std::string& msg) -> TensorShape { throw ShapeError(n.id, msg); };
    switch (n.kind) {
        case LayerKind::conv2d: {
            const auto& c = n.conv;
            if (x.c != c.in_channels)
                return fail("expected " + std::to_string(c.in_channels) + " input channels, got " + std::to_string(x.c));
            if (x.h + 2 * c.padding < c.kernel || x.w + 2 * c.padding < c.kernel)
                return fail("kernel larger than padded input " + to_string(x));
            return {x.n, c.out_channels, window_out(x.h, c.kernel, c.stride, c.padding),
                    window_out(x.w, c.kernel, c.stride, c.padding)};
        }
        case LayerKind::batchnorm2d:
            if (x.c != n.bn_features)
                return fail("expected " + std::to_string(n.bn_features) + " channels, got " + std::to_string(x.c));
            return x;
        case LayerKind::linear:
            if (x.c * x.h * x.w != n.linear.in_features)
                return fail("expected " + std::to_string(n.linear.in_features) + " input features, got " +
                            std::to_string(x.c * x.h * x.w));
            return {x.n, n.linear.out_features, 1, 1};
        case LayerKind::activation:
            return x;
        case LayerKind::avgpool:
            if (n.pool.kernel != 0) return fail("avgpool supports global pooling only");
            return {x.n, x.c, 1, 1};
        case LayerKind::maxpool:
            if (x.h + 2 * n.pool.padding < n.pool.kernel || x.w + 2 * n.pool.padding < n.pool.kernel)
                return fail("pool window larger than input " + to_string(x));
            return {x.n, x.c, window_out(x.h, n.pool.kernel, n.pool.stride, n.pool.padding),
                    window_out(x.w, n.pool.kernel, n.pool.stride, n.pool.padding)};
        case LayerKind::residual_add:
            if (ins.size() != 2 || ins[0] != ins[1])
                return fail("residual operands differ: " + to_string(ins.at(0)) + " vs " +
                            (ins.size() > 1 ? to_string(ins[1]) : std::string("<missing>")));
            return x;
        case LayerKind::channel_mul:
            if (ins.size() != 2) return fail("channel_mul needs two operands");
            if (ins[1].n != x.n || ins[1].c != x.c || ins[1].h != 1 || ins[1].w != 1)
                return fail("channel scale " + to_string(ins[1]) + " does not broadcast over " + to_string(x));
            return x;
        case LayerKind::flatten:
            return {x.n, x.c * x.h * x.w, 1, 1};
    }
    return fail("unknown layer kind");
}

}  // namespace detail

/// Returns a copy of `graph` with concrete shapes on every node.
inline ModelGraph infer_shapes(const ModelGraph& graph, const TensorShape& input) {
    if (!input.valid()) throw ValidationError("input shape " + to_string(input) + " has a non-positive dimension");
    auto order = topological_order(graph);
    if (!order) throw ValidationError("cannot infer shapes: graph contains a cycle");
    ModelGraph g = graph;
    g.input_shape = input;
    for (std::size_t i : *order) {
        LayerNode& n = g.nodes[i];
        std::vector<TensorShape> ins;
        if (n.inputs.empty()) {
            ins.push_back(input);
        } else {
            for (std::size_t p : n.inputs) ins.push_back(*g.nodes[p].out_shape);
        }
        n.in_shape = ins.front();
        n.out_shape = detail::infer_node(n, ins);
        if (!n.out_shape->valid()) throw ShapeError(n.id, "produces an empty tensor");
    }
    return g;
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

enum class ParamFilter { all, trainable_only };

/// Counts learnable parameter elements; persistent buffers (BN running stats)
/// are not parameters.
inline std::int64_t param_count(const ModelGraph& g, ParamFilter filter = ParamFilter::all) {
    std::int64_t total = 0;
    for (const auto& n : g.nodes)
        for (const auto& p : n.params)
            if (!p.buffer && (filter == ParamFilter::all || p.trainable)) total += p.numel();
    return total;
}

inline std::int64_t buffer_count(const ModelGraph& g) {
    std::int64_t total = 0;
    for (const auto& n : g.nodes)
        for (const auto& p : n.params)
            if (p.buffer) total += p.numel();
    return total;
}

}  // namespace peftprof

#endif  // PEFTPROF_GRAPH_HPP

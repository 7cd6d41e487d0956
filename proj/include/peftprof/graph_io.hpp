#ifndef PEFTPROF_GRAPH_IO_HPP
#define PEFTPROF_GRAPH_IO_HPP

#include <map>
#include <string>

#include <json.hpp>

#include "peftprof/builders.hpp"
#include "peftprof/peft.hpp"

namespace peftprof {

using json = nlohmann::json;

inline constexpr int kGraphFormatVersion = 1;

inline json shape_to_json(const TensorShape& s) { return {{"n", s.n}, {"c", s.c}, {"h", s.h}, {"w", s.w}}; }

inline TensorShape shape_from_json(const json& j) {
    TensorShape s{j.at("n").get<std::int64_t>(), j.at("c").get<std::int64_t>(), j.at("h").get<std::int64_t>(),
                  j.at("w").get<std::int64_t>()};
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) throw ValidationError("shape fields must be >= 1");
    return s;
}

namespace detail {

inline json node_params_json(const LayerNode& n) {
    switch (n.kind) {
        case LayerKind::conv2d:
            return {{"in_channels", n.conv.in_channels}, {"out_channels", n.conv.out_channels}, {"kernel", n.conv.kernel},
                    {"stride", n.conv.stride},           {"padding", n.conv.padding},           {"groups", n.conv.groups},
                    {"bias", n.conv.bias}};
        case LayerKind::batchnorm2d: return {{"features", n.bn_features}, {"eps", n.bn_eps}, {"momentum", n.bn_momentum}};
        case LayerKind::linear:
            return {{"in_features", n.linear.in_features}, {"out_features", n.linear.out_features}, {"bias", n.linear.bias}};
        case LayerKind::activation: return {{"fn", to_string(n.activation)}};
        case LayerKind::avgpool:
        case LayerKind::maxpool: return {{"kernel", n.pool.kernel}, {"stride", n.pool.stride}, {"padding", n.pool.padding}};
        case LayerKind::residual_add:
        case LayerKind::channel_mul:
        case LayerKind::flatten: return json::object();
    }
    return json::object();
}

template <class T>
T param_or(const json& p, const char* key, T fallback) {
    return p.contains(key) ? p.at(key).get<T>() : fallback;
}

}  // namespace detail

/// {"format": "peftprof-graph", "version", "arch", "input", "head_ids",
///  "nodes": [{"id", "kind", "params", "edges"}]}. Edges name predecessor ids;
/// an empty list means the node reads the graph input.
inline json graph_to_json(const ModelGraph& g) {
    json nodes = json::array();
    for (const auto& n : g.nodes) {
        json edges = json::array();
        for (auto i : n.inputs) edges.push_back(g.nodes.at(i).id);
        nodes.push_back({{"id", n.id}, {"kind", to_string(n.kind)}, {"params", detail::node_params_json(n)}, {"edges", edges}});
    }
    return {{"format", "peftprof-graph"},
            {"version", kGraphFormatVersion},
            {"arch", g.arch},
            {"input", shape_to_json(g.input_shape)},
            {"head_ids", g.head_ids},
            {"nodes", nodes}};
}

/// Rebuilds a graph from graph_to_json output. Parameter tensors are recreated
/// from the layer parameters; values are not stored.
inline ModelGraph graph_from_json(const json& j) {
    try {
        if (j.value("format", std::string("peftprof-graph")) != "peftprof-graph") throw ValidationError("not a peftprof graph document");
        if (j.value("version", kGraphFormatVersion) != kGraphFormatVersion)
            throw ValidationError("unsupported graph format version " + j.at("version").dump());
        const json& nodes = j.at("nodes");
        if (!nodes.is_array() || nodes.empty()) throw ValidationError("graph needs a nonempty nodes array");
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            auto id = nodes[i].at("id").get<std::string>();
            if (!index.emplace(id, i).second) throw ValidationError("duplicate node id '" + id + "'");
        }
        GraphBuilder b(j.value("arch", std::string("custom")));
        for (const auto& jn : nodes) {
            const auto id = jn.at("id").get<std::string>();
            const auto kind_text = jn.at("kind").get<std::string>();
            auto kind = parse_enum(kind_text, kAllLayerKinds);
            if (!kind) throw ValidationError("node '" + id + "': unknown kind '" + kind_text + "'");
            const json p = jn.value("params", json::object());
            std::vector<std::size_t> edges;
            for (const auto& e : jn.value("edges", json::array())) {
                auto it = index.find(e.get<std::string>());
                if (it == index.end()) throw ValidationError("node '" + id + "': unknown edge '" + e.get<std::string>() + "'");
                edges.push_back(it->second);
            }
            auto single = [&]() -> GraphBuilder::Ref {
                if (edges.size() > 1) throw ValidationError("node '" + id + "' takes one input");
                return edges.empty() ? GraphBuilder::Ref{} : GraphBuilder::Ref{edges[0]};
            };
            auto pair = [&]() {
                if (edges.size() != 2) throw ValidationError("node '" + id + "' takes two inputs");
                return std::pair{edges[0], edges[1]};
            };
            switch (*kind) {
                case LayerKind::conv2d:
                    b.conv(id, single(), p.at("in_channels").get<std::int64_t>(), p.at("out_channels").get<std::int64_t>(),
                           p.at("kernel").get<std::int64_t>(), detail::param_or<std::int64_t>(p, "stride", 1),
                           detail::param_or<std::int64_t>(p, "padding", 0), detail::param_or<std::int64_t>(p, "groups", 1),
                           detail::param_or(p, "bias", false));
                    break;
                case LayerKind::batchnorm2d: {
                    auto i = b.bn(id, single(), p.at("features").get<std::int64_t>());
                    b.node(i).bn_eps = detail::param_or(p, "eps", 1e-5);
                    b.node(i).bn_momentum = detail::param_or(p, "momentum", 0.1);
                    break;
                }
                case LayerKind::linear:
                    b.linear(id, single(), p.at("in_features").get<std::int64_t>(), p.at("out_features").get<std::int64_t>(),
                             detail::param_or(p, "bias", true));
                    break;
                case LayerKind::activation: {
                    const auto fn = p.at("fn").get<std::string>();
                    auto a = parse_enum(fn, kAllActivations);
                    if (!a || *a == Activation::none) throw ValidationError("node '" + id + "': unknown activation '" + fn + "'");
                    b.act(id, single(), *a);
                    break;
                }
                case LayerKind::avgpool: {
                    auto i = b.global_avgpool(id, single());
                    b.node(i).pool = {detail::param_or<std::int64_t>(p, "kernel", 0), detail::param_or<std::int64_t>(p, "stride", 1),
                                      detail::param_or<std::int64_t>(p, "padding", 0)};
                    break;
                }
                case LayerKind::maxpool:
                    b.maxpool(id, single(), p.at("kernel").get<std::int64_t>(), detail::param_or<std::int64_t>(p, "stride", 1),
                              detail::param_or<std::int64_t>(p, "padding", 0));
                    break;
                case LayerKind::residual_add: {
                    auto [x, y] = pair();
                    b.add(id, x, y);
                    break;
                }
                case LayerKind::channel_mul: {
                    auto [x, s] = pair();
                    b.mul(id, x, s);
                    break;
                }
                case LayerKind::flatten: b.flatten(id, single()); break;
            }
        }
        for (const auto& h : j.value("head_ids", json::array())) {
            const auto id = h.get<std::string>();
            if (!index.count(id)) throw ValidationError("unknown head id '" + id + "'");
            b.mark_head(id);
        }
        ModelGraph g = b.finish(j.contains("input") ? shape_from_json(j.at("input")) : TensorShape{1, 3, 224, 224});
        auto diags = validate(g);
        if (!diags.empty()) throw ValidationError(diags.front().node_id.empty() ? diags.front().message
                                                                               : "node '" + diags.front().node_id + "': " + diags.front().message);
        return g;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed graph document: ") + e.what());
    }
}

inline json config_to_json(const PeftConfig& c) {
    json kinds = json::array();
    for (auto k : c.targets.kinds) kinds.push_back(to_string(k));
    return {{"method", to_string(c.method)},
            {"rank", c.rank},
            {"alpha", c.alpha},
            {"galore_scale", c.galore_scale},
            {"galore_period", c.galore_period},
            {"galore_projection", c.galore_projection},
            {"targets", {{"kinds", kinds}, {"include_depthwise", c.targets.include_depthwise}, {"include_head", c.targets.include_head}}},
            {"seed", c.seed}};
}

inline PeftConfig config_from_json(const json& j) {
    PeftConfig c;
    c.method = parse_method(j.at("method").get<std::string>());
    c.rank = j.value("rank", c.rank);
    c.alpha = j.value("alpha", c.alpha);
    c.galore_scale = j.value("galore_scale", c.galore_scale);
    c.galore_period = j.value("galore_period", c.galore_period);
    c.galore_projection = j.value("galore_projection", c.galore_projection);
    c.seed = j.value("seed", c.seed);
    if (j.contains("targets")) {
        const json& t = j.at("targets");
        if (t.contains("kinds")) {
            c.targets.kinds.clear();
            for (const auto& k : t.at("kinds")) {
                auto kind = parse_enum(k.get<std::string>(), kAllLayerKinds);
                if (!kind) throw ValidationError("unknown target kind '" + k.get<std::string>() + "'");
                c.targets.kinds.push_back(*kind);
            }
        }
        c.targets.include_depthwise = t.value("include_depthwise", c.targets.include_depthwise);
        c.targets.include_head = t.value("include_head", c.targets.include_head);
    }
    c.check();
    return c;
}

/// Base graph plus an "adapters" section (one entry per adapted layer) and
/// the trainable parameter ids.
inline json tuned_to_json(const TunedModel& t) {
    json adapters = json::array();
    for (const auto& a : t.adapters) {
        json e = {{"layer", a.layer_id}, {"rank", a.rank}, {"scaling", a.scaling}, {"a_dims", a.a.dims}, {"b_dims", a.b.dims}};
        if (a.magnitude) e["magnitude_dims"] = a.magnitude->dims;
        adapters.push_back(e);
    }
    return {{"format", "peftprof-tuned"},
            {"version", kGraphFormatVersion},
            {"config", config_to_json(t.config)},
            {"graph", graph_to_json(t.base)},
            {"adapters", adapters},
            {"trainable", t.trainable}};
}

/// Re-applies the stored config to the stored graph and checks that the
/// adapters and trainable set agree with the document.
inline TunedModel tuned_from_json(const json& j) {
    try {
        if (j.value("format", std::string("peftprof-tuned")) != "peftprof-tuned") throw ValidationError("not a peftprof tuned-model document");
        ModelGraph g = graph_from_json(j.at("graph"));
        PeftConfig c = config_from_json(j.at("config"));
        TunedModel t = apply_method(infer_shapes(g, g.input_shape), c);
        const json& ads = j.at("adapters");
        if (ads.size() != t.adapters.size())
            throw ValidationError("adapters section lists " + std::to_string(ads.size()) + " adapters, config yields " +
                                  std::to_string(t.adapters.size()));
        for (const auto& e : ads) {
            const auto layer = e.at("layer").get<std::string>();
            const AdapterPair* a = t.adapter_for(layer);
            if (!a) throw ValidationError("adapter on '" + layer + "' does not match the config");
            if (e.at("rank").get<std::int64_t>() != a->rank || e.at("a_dims").get<std::vector<std::int64_t>>() != a->a.dims ||
                e.at("b_dims").get<std::vector<std::int64_t>>() != a->b.dims)
                throw ValidationError("adapter on '" + layer + "' has inconsistent shape");
        }
        if (j.contains("trainable") && j.at("trainable").get<std::set<std::string>>() != t.trainable)
            throw ValidationError("trainable set does not match the config");
        return t;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed tuned-model document: ") + e.what());
    }
}

}  // namespace peftprof

#endif  // PEFTPROF_GRAPH_IO_HPP

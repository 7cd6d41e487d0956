#ifndef PEFTPROF_MEMORY_HPP
#define PEFTPROF_MEMORY_HPP

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "peftprof/grad_flow.hpp"
#include "peftprof/peft.hpp"

namespace peftprof {

enum class MemoryGroup { PARAM, GRAD, ACT, OPT, TEMP };
inline constexpr MemoryGroup kAllMemoryGroups[] = {MemoryGroup::PARAM, MemoryGroup::GRAD, MemoryGroup::ACT, MemoryGroup::OPT,
                                                   MemoryGroup::TEMP};

inline std::string_view to_string(MemoryGroup g) {
    switch (g) {
        case MemoryGroup::PARAM: return "PARAM";
        case MemoryGroup::GRAD: return "GRAD";
        case MemoryGroup::ACT: return "ACT";
        case MemoryGroup::OPT: return "OPT";
        case MemoryGroup::TEMP: return "TEMP";
    }
    return "?";
}

inline MemoryGroup parse_memory_group(std::string_view text) {
    if (auto g = parse_enum(text, kAllMemoryGroups)) return *g;
    throw ValidationError("unknown memory group '" + std::string(text) + "'");
}

/// A tensor kept alive from the forward pass for use in backward. Ids are the
/// producing node id, "input" for the graph input, "<layer>.lora_A.out" /
/// "<layer>.dora.z" for adapter intermediates, or "<layer>.argmax" for the
/// winning positions of a max pool.
struct SavedTensor {
    std::string id;
    std::int64_t numel = 0;
    friend bool operator==(const SavedTensor&, const SavedTensor&) = default;
};

inline constexpr std::string_view kGraphInputId = "input";

namespace detail {

inline TunedModel shaped_copy(const TunedModel& tuned, const TensorShape& input) {
    TunedModel t = tuned;
    if (!(t.base.shaped() && t.base.input_shape == input)) t.base = infer_shapes(t.base, input);
    return t;
}

inline std::string adapter_a_out_id(const std::string& layer) { return layer + ".lora_A.out"; }
inline std::string dora_z_id(const std::string& layer) { return layer + ".dora.z"; }
inline std::string argmax_id(const std::string& layer) { return layer + ".argmax"; }

/// Numel of A's output for an adapted layer (r channels at the host's output resolution).
inline std::int64_t adapter_a_out_numel(const LayerNode& n, std::int64_t rank) {
    const auto& o = *n.out_shape;
    return o.n * rank * o.h * o.w;
}

}  // namespace detail

/// ReLU backward only needs the sign of its output, so it keeps the output
/// instead of the input.
inline bool saves_own_output(const TunedModel& t, const GradFlow& f, std::size_t i) {
    const LayerNode& n = t.base.nodes[i];
    return n.kind == LayerKind::activation && n.activation == Activation::relu && f.input_grad(t.base, i, 0);
}

/// Which inputs a node keeps for its backward pass. Slot i refers to
/// node.inputs[i] (or the graph input when the node has no predecessors).
inline std::vector<bool> saved_input_slots(const TunedModel& t, const GradFlow& f, std::size_t i) {
    const LayerNode& n = t.base.nodes[i];
    const std::size_t slots = std::max<std::size_t>(1, n.inputs.size());
    std::vector<bool> keep(slots, false);
    auto in_grad = [&](std::size_t s) { return f.input_grad(t.base, i, s); };
    auto trainable = [&](ParamRole r) {
        const ParamTensor* p = n.param(r);
        return p && t.is_trainable(p->id);
    };
    switch (n.kind) {
        case LayerKind::conv2d:
        case LayerKind::linear:
            keep[0] = trainable(ParamRole::weight) || t.adapter_for(n.id) != nullptr;
            break;
        case LayerKind::batchnorm2d:
            keep[0] = in_grad(0) || trainable(ParamRole::bn_gamma) || trainable(ParamRole::bn_beta);
            break;
        case LayerKind::activation:
            keep[0] = in_grad(0) && n.activation != Activation::relu;
            break;
        case LayerKind::channel_mul:
            // d(x*s)/dx needs s; d(x*s)/ds needs x
            keep[0] = slots > 1 && in_grad(1);
            if (slots > 1) keep[1] = in_grad(0);
            break;
        case LayerKind::maxpool:  // keeps argmax positions instead, see saved_activation_set
        case LayerKind::avgpool:
        case LayerKind::residual_add:
        case LayerKind::flatten:
            break;
    }
    return keep;
}

/// Activations retained for the backward pass, in graph order, each tensor once.
/// The graph input is listed only when some layer keeps it.
inline std::vector<SavedTensor> saved_activation_set(const TunedModel& tuned, const TensorShape& input) {
    TunedModel t = detail::shaped_copy(tuned, input);
    GradFlow flow = analyze_grad_flow(t);
    const std::size_t n = t.base.nodes.size();
    std::vector<bool> keep_node(n, false);
    bool keep_input = false;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& node = t.base.nodes[i];
        if (saves_own_output(t, flow, i)) keep_node[i] = true;
        auto slots = saved_input_slots(t, flow, i);
        for (std::size_t s = 0; s < slots.size(); ++s) {
            if (!slots[s]) continue;
            if (node.inputs.empty()) keep_input = true;
            else keep_node[node.inputs[s]] = true;
        }
    }
    std::vector<SavedTensor> out;
    if (keep_input) out.push_back({std::string(kGraphInputId), input.numel()});
    for (std::size_t i = 0; i < n; ++i) {
        const auto& node = t.base.nodes[i];
        if (keep_node[i]) out.push_back({node.id, node.out_shape->numel()});
        if (node.kind == LayerKind::maxpool && flow.input_grad(t.base, i, 0))
            out.push_back({detail::argmax_id(node.id), node.out_shape->numel()});
        if (const AdapterPair* ad = t.adapter_for(node.id)) {
            out.push_back({detail::adapter_a_out_id(node.id), detail::adapter_a_out_numel(node, ad->rank)});
            if (t.method == Method::dora) out.push_back({detail::dora_z_id(node.id), node.out_shape->numel()});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Element counts per group
// ---------------------------------------------------------------------------

/// Workspace of one GaLore subspace refresh on an m x n matrix: a working copy
/// plus the thin SVD factors U (m x k), S (k), Vh (k x n), k = min(m, n).
inline std::int64_t galore_refresh_workspace(std::int64_t rows, std::int64_t cols) {
    const std::int64_t k = std::min(rows, cols);
    return rows * cols + rows * k + k + k * cols;
}

/// Transients of one projected update: the rank-space gradient, its Adam
/// direction, and the back-projected full-size update.
inline std::int64_t galore_step_workspace(const ProjectedParam& p, std::int64_t rank) {
    return 2 * p.projected_numel(rank) + p.rows * p.cols;
}

/// Persistent optimizer state elements for one trainable tensor.
inline std::int64_t optimizer_state_elements(const OptimizerPlan& plan, const std::string& param_id, std::int64_t numel) {
    switch (plan.rule) {
        case UpdateRule::sgd_momentum: return numel;
        case UpdateRule::adam: return 2 * numel;
        case UpdateRule::galore_adam:
            if (const auto* p = plan.projection_for(param_id)) return 2 * p->projected_numel(plan.rank) + p->projector_numel(plan.rank);
            return 2 * numel;
    }
    return 0;
}

struct ElementCounts {
    std::int64_t param = 0;
    std::int64_t grad = 0;
    std::int64_t act = 0;
    std::int64_t opt_state = 0;
    std::int64_t opt_workspace = 0;
    std::int64_t temp = 0;

    std::int64_t opt() const { return opt_state + opt_workspace; }
};

namespace detail {

template <class Fn>
void for_each_trainable(const TunedModel& t, Fn&& fn) {
    for (const auto& n : t.base.nodes)
        for (const auto& p : n.params)
            if (!p.buffer && t.is_trainable(p.id)) fn(p);
    for (const auto& a : t.adapters) {
        fn(a.a);
        fn(a.b);
        if (a.magnitude) fn(*a.magnitude);
    }
}

}  // namespace detail

/// Peak of transient buffers during backward. Output gradients are walked in
/// reverse topological order: a node's gradient stays live until all of its
/// input gradients have been produced, and gradients sent to a node that has
/// not run yet stay pending. A DoRA layer also rebuilds V and its row norms
/// while its output gradient is live.
inline std::int64_t temp_peak(const TunedModel& t, const GradFlow& flow) {
    const ModelGraph& g = t.base;
    auto order = topological_order(g);
    auto outs = output_nodes(g);
    if (!order || outs.empty() || !flow.output_grad[outs.front()]) return 0;
    std::vector<bool> live_grad(g.nodes.size(), false);
    live_grad[outs.front()] = true;
    std::int64_t live = g.nodes[outs.front()].out_shape->numel();
    std::int64_t peak = live;
    for (auto it = order->rbegin(); it != order->rend(); ++it) {
        const std::size_t i = *it;
        if (!live_grad[i]) continue;
        const LayerNode& n = g.nodes[i];
        if (t.method == Method::dora && t.adapter_for(n.id)) {
            auto [rows, cols] = dense_update_shape(n);
            peak = std::max(peak, live + rows * cols + rows);
        }
        for (std::size_t s = 0; s < n.inputs.size(); ++s) {
            const std::size_t p = n.inputs[s];
            if (!flow.input_grad(g, i, s) || !flow.output_grad[p] || live_grad[p]) continue;
            live_grad[p] = true;
            live += g.nodes[p].out_shape->numel();
            peak = std::max(peak, live);
        }
        live -= n.out_shape->numel();
        live_grad[i] = false;
    }
    return peak;
}

inline ElementCounts memory_elements(const TunedModel& tuned, const OptimizerPlan& plan, const TensorShape& input) {
    TunedModel t = detail::shaped_copy(tuned, input);
    GradFlow flow = analyze_grad_flow(t);
    ElementCounts e;
    e.param = param_count(t.base, ParamFilter::all) + buffer_count(t.base) + adapter_param_count(t);

    std::int64_t largest_workspace = 0;
    detail::for_each_trainable(t, [&](const ParamTensor& p) {
        e.grad += p.numel();
        e.opt_state += optimizer_state_elements(plan, p.id, p.numel());
        if (plan.rule == UpdateRule::galore_adam)
            if (const auto* pp = plan.projection_for(p.id))
                largest_workspace = std::max({largest_workspace, galore_refresh_workspace(pp->rows, pp->cols),
                                              galore_step_workspace(*pp, plan.rank)});
    });
    e.opt_workspace = largest_workspace;

    // The graph input is always resident during the step.
    bool input_listed = false;
    for (const auto& s : saved_activation_set(t, input)) {
        e.act += s.numel;
        if (s.id == kGraphInputId) input_listed = true;
    }
    if (!input_listed) e.act += input.numel();

    e.temp = temp_peak(t, flow);
    return e;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MemoryReport {
    std::string arch;
    Method method = Method::fft;
    TensorShape input;
    std::int64_t bytes_per_element = 4;
    std::array<std::int64_t, 5> peak{0, 0, 0, 0, 0};

    std::int64_t bytes(MemoryGroup g) const { return peak[static_cast<std::size_t>(g)]; }
    std::int64_t total() const {
        std::int64_t s = 0;
        for (auto v : peak) s += v;
        return s;
    }
};

inline std::int64_t group_bytes(const TunedModel& tuned, const OptimizerPlan& plan, MemoryGroup group, const TensorShape& input,
                                std::int64_t bytes_per_element = 4) {
    if (bytes_per_element < 1) throw ValidationError("bytes per element must be >= 1");
    ElementCounts e = memory_elements(tuned, plan, input);
    switch (group) {
        case MemoryGroup::PARAM: return e.param * bytes_per_element;
        case MemoryGroup::GRAD: return e.grad * bytes_per_element;
        case MemoryGroup::ACT: return e.act * bytes_per_element;
        case MemoryGroup::OPT: return e.opt() * bytes_per_element;
        case MemoryGroup::TEMP: return e.temp * bytes_per_element;
    }
    throw ValidationError("unknown memory group");
}

inline MemoryReport profile_memory(const TunedModel& tuned, const OptimizerPlan& plan, const TensorShape& input,
                                   std::int64_t bytes_per_element = 4) {
    if (bytes_per_element < 1) throw ValidationError("bytes per element must be >= 1");
    ElementCounts e = memory_elements(tuned, plan, input);
    MemoryReport r;
    r.arch = tuned.base.arch;
    r.method = tuned.method;
    r.input = input;
    r.bytes_per_element = bytes_per_element;
    r.peak = {e.param * bytes_per_element, e.grad * bytes_per_element, e.act * bytes_per_element,
              e.opt() * bytes_per_element, e.temp * bytes_per_element};
    return r;
}

}  // namespace peftprof

#endif  // PEFTPROF_MEMORY_HPP

#ifndef PEFTPROF_GRAD_FLOW_HPP
#define PEFTPROF_GRAD_FLOW_HPP

#include <cstdint>
#include <vector>

#include "peftprof/peft.hpp"

namespace peftprof {

/// Which gradients a training step has to compute. Backprop only runs from the
/// loss down to the earliest trainable parameter.
struct GradFlow {
    std::vector<bool> trainable_node;  // node owns a trainable base param or an adapter
    std::vector<bool> output_grad;     // dL/d(node output) is required
    std::vector<int> grad_fanin;       // number of gradient contributions into the node output

    /// Whether node `i` must produce the gradient for its input slot `slot`.
    bool input_grad(const ModelGraph& g, std::size_t i, std::size_t slot = 0) const {
        const auto& ins = g.nodes[i].inputs;
        if (ins.empty()) return false;
        return output_grad[ins.at(slot)];
    }
    bool any_input_grad(const ModelGraph& g, std::size_t i) const {
        for (std::size_t s = 0; s < g.nodes[i].inputs.size(); ++s)
            if (input_grad(g, i, s)) return true;
        return false;
    }
};

inline bool node_has_trainable(const TunedModel& t, const LayerNode& n) {
    for (const auto& p : n.params)
        if (!p.buffer && t.is_trainable(p.id)) return true;
    return t.adapter_for(n.id) != nullptr;
}

inline GradFlow analyze_grad_flow(const TunedModel& t) {
    const ModelGraph& g = t.base;
    const std::size_t n = g.nodes.size();
    GradFlow f;
    f.trainable_node.assign(n, false);
    f.output_grad.assign(n, false);
    f.grad_fanin.assign(n, 0);
    auto order = topological_order(g);
    if (!order) throw ValidationError("graph contains a cycle");
    for (std::size_t i : *order) {
        f.trainable_node[i] = node_has_trainable(t, g.nodes[i]);
        bool need = f.trainable_node[i];
        for (std::size_t p : g.nodes[i].inputs) need = need || f.output_grad[p];
        f.output_grad[i] = need;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p : g.nodes[i].inputs)
            if (f.output_grad[p]) ++f.grad_fanin[p];
    return f;
}

}  // namespace peftprof

#endif  // PEFTPROF_GRAD_FLOW_HPP

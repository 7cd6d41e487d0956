#ifndef PEFTPROF_FLOPS_HPP
#define PEFTPROF_FLOPS_HPP

#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "peftprof/grad_flow.hpp"
#include "peftprof/peft.hpp"

namespace peftprof {

enum class Phase { fwd, bwd_input, bwd_weight, opt };
inline constexpr Phase kAllPhases[] = {Phase::fwd, Phase::bwd_input, Phase::bwd_weight, Phase::opt};

inline std::string_view to_string(Phase p) {
    switch (p) {
        case Phase::fwd: return "fwd";
        case Phase::bwd_input: return "bwd_input";
        case Phase::bwd_weight: return "bwd_weight";
        case Phase::opt: return "opt";
    }
    return "?";
}

/// `paper` charges the weight gradient of a grouped conv as if it were dense
/// (the filter-grouping saving is not realized by the reference counter);
/// `exact` applies the 1/g reduction everywhere.
enum class CountingConvention { paper, exact };
inline constexpr CountingConvention kAllConventions[] = {CountingConvention::paper, CountingConvention::exact};

inline std::string_view to_string(CountingConvention c) {
    return c == CountingConvention::paper ? "paper" : "exact";
}

/// How the GaLore subspace refresh (one SVD per projected matrix every T
/// steps) enters a single-step report.
enum class SvdAccounting { first_step, amortized };
inline constexpr SvdAccounting kAllSvdAccountings[] = {SvdAccounting::first_step, SvdAccounting::amortized};

inline std::string_view to_string(SvdAccounting s) { return s == SvdAccounting::first_step ? "first_step" : "amortized"; }

using PhaseCounts = std::array<std::int64_t, 4>;

inline std::int64_t& at(PhaseCounts& c, Phase p) { return c[static_cast<std::size_t>(p)]; }
inline std::int64_t at(const PhaseCounts& c, Phase p) { return c[static_cast<std::size_t>(p)]; }

/// Scalar-op constants shared with the reference engine's instrumented kernels.
struct CostConstants {
    static constexpr std::int64_t sgd_per_element = 4;    // buf = mu*buf + g; w -= lr*buf
    static constexpr std::int64_t adam_per_element = 14;  // moments, bias corrections, sqrt, eps, divide, update
    static constexpr std::int64_t adam_rank_space = 12;   // adam up to the normalized step
    static constexpr std::int64_t galore_apply = 2;       // w -= (lr*scale) * dW
    static constexpr std::int64_t bn_fwd = 8;             // mean 1, variance 3, normalize 2, affine 2
    static constexpr std::int64_t bn_recompute = 2;       // xhat from saved input
    static constexpr std::int64_t bn_bwd_input = 8;
    static constexpr std::int64_t bn_bwd_weight = 3;
    static constexpr std::int64_t svd_k = 160;
};

// ---------------------------------------------------------------------------
// Per-layer building blocks
// ---------------------------------------------------------------------------

namespace detail {

inline std::int64_t conv_macs(const LayerNode& n) {
    const auto& o = *n.out_shape;
    return o.numel() * (n.conv.in_channels / n.conv.groups) * n.conv.kernel * n.conv.kernel;
}
inline std::int64_t linear_macs(const LayerNode& n) { return n.out_shape->n * n.linear.in_features * n.linear.out_features; }

struct HostDims {
    std::int64_t out_numel;  // numel of the layer output
    std::int64_t in_numel;   // numel of the layer input
    std::int64_t base_macs;  // grouped MACs of the frozen/trainable base op
    std::int64_t groups;
    std::int64_t a_macs;     // adapter A MACs per unit rank
    std::int64_t b_macs;     // adapter B MACs per unit rank
    std::int64_t c_out;
    std::int64_t dense_cols;     // C_in*k*k (dense update width)
    std::int64_t weight_numel;   // grouped base weight numel
    bool bias;
};

inline HostDims host_dims(const LayerNode& n) {
    HostDims d{};
    d.out_numel = n.out_shape->numel();
    d.in_numel = n.in_shape->numel();
    if (n.kind == LayerKind::conv2d) {
        const auto& o = *n.out_shape;
        d.base_macs = conv_macs(n);
        d.groups = n.conv.groups;
        d.a_macs = o.numel() / o.c * n.conv.in_channels * n.conv.kernel * n.conv.kernel;
        d.b_macs = o.numel();
        d.c_out = n.conv.out_channels;
        d.dense_cols = n.conv.in_channels * n.conv.kernel * n.conv.kernel;
        d.weight_numel = n.conv.out_channels * (n.conv.in_channels / n.conv.groups) * n.conv.kernel * n.conv.kernel;
        d.bias = n.conv.bias;
    } else {
        d.base_macs = linear_macs(n);
        d.groups = 1;
        d.a_macs = n.out_shape->n * n.linear.in_features;
        d.b_macs = n.out_shape->n * n.linear.out_features;
        d.c_out = n.linear.out_features;
        d.dense_cols = n.linear.in_features;
        d.weight_numel = n.linear.in_features * n.linear.out_features;
        d.bias = n.linear.bias;
    }
    return d;
}

/// What a training step needs from one node.
struct NodeNeeds {
    std::vector<bool> input_grad;  // per input slot
    bool weight_grad = false;      // base weight trainable
    bool bias_grad = false;
    bool affine_grad = false;      // BN gamma/beta
    bool any_backward = false;     // node output gradient required
    int fanin = 0;
};

inline NodeNeeds node_needs(const TunedModel& t, const GradFlow& f, std::size_t i) {
    const LayerNode& n = t.base.nodes[i];
    NodeNeeds s;
    s.any_backward = f.output_grad[i];
    for (std::size_t k = 0; k < n.inputs.size(); ++k) s.input_grad.push_back(f.input_grad(t.base, i, k));
    if (n.inputs.empty()) s.input_grad.push_back(false);
    if (auto* w = n.param(ParamRole::weight)) s.weight_grad = t.is_trainable(w->id);
    if (auto* b = n.param(ParamRole::bias)) s.bias_grad = t.is_trainable(b->id);
    if (auto* gm = n.param(ParamRole::bn_gamma)) s.affine_grad = t.is_trainable(gm->id);
    s.fanin = f.grad_fanin[i];
    return s;
}

/// FLOPs of one node (with its adapter, if any) for every phase except opt.
inline PhaseCounts node_flops(const LayerNode& n, const NodeNeeds& need, const AdapterPair* ad, Method method,
                              CountingConvention conv) {
    PhaseCounts c{0, 0, 0, 0};
    auto& fwd = at(c, Phase::fwd);
    auto& bin = at(c, Phase::bwd_input);
    auto& bwt = at(c, Phase::bwd_weight);
    const bool in_grad = need.input_grad.at(0);
    switch (n.kind) {
        case LayerKind::conv2d:
        case LayerKind::linear: {
            HostDims d = host_dims(n);
            const std::int64_t weight_factor = conv == CountingConvention::paper ? d.groups : 1;
            fwd += 2 * d.base_macs + (d.bias ? d.out_numel : 0);
            if (in_grad) bin += 2 * d.base_macs;
            if (need.weight_grad) bwt += 2 * d.base_macs * weight_factor;
            if (need.bias_grad) bwt += d.out_numel;
            if (ad) {
                const std::int64_t r = ad->rank;
                const std::int64_t am = d.a_macs * r, bm = d.b_macs * r;
                fwd += 2 * am + 2 * bm;
                bwt += 2 * am + 2 * bm;
                bin += 2 * bm;  // gradient into A's output
                if (in_grad) bin += 2 * am + d.in_numel;  // A input-grad + merge with the base path
                if (method == Method::dora) {
                    const std::int64_t dense = d.c_out * d.dense_cols;
                    // V = s*BA + W0, row norms, m/||V||
                    fwd += 2 * r * dense + dense + d.weight_numel + 2 * dense + 3 * d.c_out;
                    fwd += 3 * d.out_numel;  // z = base + s*ad (2), y = scale*z (1)
                    bin += 2 * d.out_numel;  // dz = scale*dy, d(ad) = s*dz
                    // dscale; V and its norms rebuilt; per-channel chain; dV, s*dV; dB, dA
                    // through BA plus accumulation into the conv-path gradients
                    bwt += 2 * d.out_numel + (2 * r * dense + dense + d.weight_numel) + 2 * dense + 9 * d.c_out +
                           2 * dense + 4 * r * dense + r * (d.c_out + d.dense_cols);
                } else {
                    fwd += 2 * d.out_numel;  // scale and add
                    bin += d.out_numel;      // s*dy
                }
            }
            break;
        }
        case LayerKind::batchnorm2d: {
            const std::int64_t m = n.out_shape->numel();
            fwd += CostConstants::bn_fwd * m;
            if (in_grad) bin += (CostConstants::bn_recompute + CostConstants::bn_bwd_input) * m;
            if (need.affine_grad) bwt += CostConstants::bn_bwd_weight * m + (in_grad ? 0 : CostConstants::bn_recompute * m);
            break;
        }
        case LayerKind::activation: {
            const std::int64_t m = n.out_shape->numel();
            fwd += m;
            if (in_grad) bin += m;
            break;
        }
        case LayerKind::avgpool: {
            fwd += n.in_shape->numel() + n.out_shape->numel();
            if (in_grad) bin += n.out_shape->numel();
            break;
        }
        case LayerKind::maxpool: {
            fwd += n.out_shape->numel() * n.pool.kernel * n.pool.kernel;
            if (in_grad) bin += n.out_shape->numel();
            break;
        }
        case LayerKind::residual_add:
            fwd += n.out_shape->numel();
            break;
        case LayerKind::channel_mul: {
            const std::int64_t m = n.out_shape->numel();
            fwd += m;
            if (need.input_grad.at(0)) bin += m;
            if (need.input_grad.size() > 1 && need.input_grad[1]) bin += 2 * m;
            break;
        }
        case LayerKind::flatten:
            break;
    }
    // Gradient accumulation where the output feeds several consumers.
    if (need.any_backward && need.fanin > 1) bin += static_cast<std::int64_t>(need.fanin - 1) * n.out_shape->numel();
    return c;
}

inline NodeNeeds full_needs(const LayerNode& n) {
    NodeNeeds s;
    s.input_grad.assign(std::max<std::size_t>(1, n.inputs.size()), true);
    s.weight_grad = n.param(ParamRole::weight) != nullptr;
    s.bias_grad = n.param(ParamRole::bias) != nullptr;
    s.affine_grad = n.param(ParamRole::bn_gamma) != nullptr;
    s.any_backward = true;
    return s;
}

}  // namespace detail

/// FLOPs of a plain (adapter-free) shaped layer for one phase, assuming every
/// gradient it can produce is required. The optimizer phase is 0 here; use
/// optimizer_flops.
inline std::int64_t layer_flops(const LayerNode& layer, Phase phase,
                                CountingConvention convention = CountingConvention::paper) {
    if (!layer.out_shape || !layer.in_shape) throw ValidationError("layer '" + layer.id + "' has no inferred shape");
    if (phase == Phase::opt) return 0;
    return at(detail::node_flops(layer, detail::full_needs(layer), nullptr, Method::fft, convention), phase);
}

// ---------------------------------------------------------------------------
// Optimizer step
// ---------------------------------------------------------------------------

struct OptimizerFlops {
    std::int64_t recurring = 0;    // paid every step
    std::int64_t svd_refresh = 0;  // paid once per refresh (every T steps)

    std::int64_t per_step(SvdAccounting acc, std::int64_t period) const {
        if (acc == SvdAccounting::first_step) return recurring + svd_refresh;
        return recurring + (svd_refresh + period / 2) / period;
    }
};

inline std::int64_t svd_flops(std::int64_t rows, std::int64_t cols) {
    return CostConstants::svd_k * rows * cols * std::min(rows, cols);
}

/// Per-element cost of one trainable tensor under the plan.
inline OptimizerFlops tensor_optimizer_flops(const OptimizerPlan& plan, const std::string& param_id, std::int64_t numel) {
    OptimizerFlops f;
    switch (plan.rule) {
        case UpdateRule::sgd_momentum:
            f.recurring = CostConstants::sgd_per_element * numel;
            break;
        case UpdateRule::adam:
            f.recurring = CostConstants::adam_per_element * numel;
            break;
        case UpdateRule::galore_adam:
            if (const auto* p = plan.projection_for(param_id)) {
                const std::int64_t r = plan.rank;
                f.recurring = CostConstants::adam_rank_space * p->projected_numel(r) + 4 * p->rows * r * p->cols +
                              CostConstants::galore_apply * p->rows * p->cols;
                f.svd_refresh = svd_flops(p->rows, p->cols);
            } else {
                f.recurring = CostConstants::adam_per_element * numel;
            }
            break;
    }
    return f;
}

inline OptimizerFlops optimizer_flops_detail(const OptimizerPlan& plan, const TunedModel& tuned) {
    OptimizerFlops total;
    auto add = [&](const std::string& id, std::int64_t numel) {
        auto f = tensor_optimizer_flops(plan, id, numel);
        total.recurring += f.recurring;
        total.svd_refresh += f.svd_refresh;
    };
    for (const auto& n : tuned.base.nodes)
        for (const auto& p : n.params)
            if (!p.buffer && tuned.is_trainable(p.id)) add(p.id, p.numel());
    for (const auto& a : tuned.adapters) {
        add(a.a.id, a.a.numel());
        add(a.b.id, a.b.numel());
        if (a.magnitude) add(a.magnitude->id, a.magnitude->numel());
    }
    return total;
}

/// Optimizer-step FLOPs for one step; GaLore's SVD is charged per `accounting`.
inline std::int64_t optimizer_flops(const OptimizerPlan& plan, const TunedModel& tuned,
                                    SvdAccounting accounting = SvdAccounting::amortized) {
    return optimizer_flops_detail(plan, tuned).per_step(accounting, plan.period);
}

// ---------------------------------------------------------------------------
// Whole-step profile
// ---------------------------------------------------------------------------

struct LayerFlops {
    std::string id;
    PhaseCounts counts{0, 0, 0, 0};
};

struct FlopsReport {
    std::string arch;
    Method method = Method::fft;
    TensorShape input;
    CountingConvention convention = CountingConvention::paper;
    SvdAccounting svd_accounting = SvdAccounting::amortized;
    std::vector<LayerFlops> layers;
    PhaseCounts totals{0, 0, 0, 0};
    std::int64_t opt_recurring = 0;
    std::int64_t svd_refresh = 0;

    std::int64_t total(Phase p) const { return at(totals, p); }
    std::int64_t forward() const { return total(Phase::fwd); }
    std::int64_t backward() const { return total(Phase::bwd_input) + total(Phase::bwd_weight); }
    std::int64_t grand_total() const { return std::accumulate(totals.begin(), totals.end(), std::int64_t{0}); }
};

struct ProfileOptions {
    CountingConvention convention = CountingConvention::paper;
    SvdAccounting svd_accounting = SvdAccounting::amortized;
};

inline FlopsReport profile_flops(const TunedModel& tuned, const OptimizerPlan& plan, const TensorShape& input,
                                 const ProfileOptions& opts = {}) {
    TunedModel t = tuned;
    if (!(t.base.shaped() && t.base.input_shape == input)) t.base = infer_shapes(t.base, input);
    GradFlow flow = analyze_grad_flow(t);
    FlopsReport r;
    r.arch = t.base.arch;
    r.method = t.method;
    r.input = input;
    r.convention = opts.convention;
    r.svd_accounting = opts.svd_accounting;
    for (std::size_t i = 0; i < t.base.nodes.size(); ++i) {
        const LayerNode& n = t.base.nodes[i];
        LayerFlops lf;
        lf.id = n.id;
        lf.counts = detail::node_flops(n, detail::node_needs(t, flow, i), t.adapter_for(n.id), t.method, opts.convention);
        OptimizerFlops of;
        for (const auto& p : n.params)
            if (!p.buffer && t.is_trainable(p.id)) {
                auto f = tensor_optimizer_flops(plan, p.id, p.numel());
                of.recurring += f.recurring;
                of.svd_refresh += f.svd_refresh;
            }
        if (const auto* a = t.adapter_for(n.id)) {
            for (const ParamTensor* p : {&a->a, &a->b}) of.recurring += tensor_optimizer_flops(plan, p->id, p->numel()).recurring;
            if (a->magnitude) of.recurring += tensor_optimizer_flops(plan, a->magnitude->id, a->magnitude->numel()).recurring;
        }
        at(lf.counts, Phase::opt) = of.per_step(opts.svd_accounting, plan.period);
        r.opt_recurring += of.recurring;
        r.svd_refresh += of.svd_refresh;
        for (Phase p : {Phase::fwd, Phase::bwd_input, Phase::bwd_weight}) at(r.totals, p) += at(lf.counts, p);
        r.layers.push_back(std::move(lf));
    }
    at(r.totals, Phase::opt) = OptimizerFlops{r.opt_recurring, r.svd_refresh}.per_step(opts.svd_accounting, plan.period);
    return r;
}

struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

/// Backward total over forward total, reduced.
inline Rational flops_ratio(const FlopsReport& report) {
    if (report.forward() <= 0) throw ValidationError("flops_ratio: forward total is zero");
    std::int64_t a = report.backward(), b = report.forward();
    std::int64_t g = std::gcd(a, b);
    if (g == 0) g = 1;
    return {a / g, b / g};
}

}  // namespace peftprof

#endif  // PEFTPROF_FLOPS_HPP

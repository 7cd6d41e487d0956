#ifndef PEFTPROF_ENGINE_HPP
#define PEFTPROF_ENGINE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "peftprof/flops.hpp"
#include "peftprof/grad_flow.hpp"
#include "peftprof/memory.hpp"
#include "peftprof/peft.hpp"

namespace peftprof {

/// Dense NCHW tensor of doubles.
struct Tensor {
    TensorShape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(TensorShape s, double fill = 0.0) : shape(s), data(static_cast<std::size_t>(s.numel()), fill) {}

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
    double& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>(((n * shape.c + c) * shape.h + h) * shape.w + w)];
    }
    double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>(((n * shape.c + c) * shape.h + h) * shape.w + w)];
    }
};

/// Scalar operations executed per phase. The SVD inside a GaLore refresh is
/// tallied separately because its iteration count is data dependent.
struct OpCounter {
    PhaseCounts counts{0, 0, 0, 0};
    std::int64_t svd = 0;

    void add(Phase p, std::int64_t n) { at(counts, p) += n; }
    std::int64_t get(Phase p) const { return at(counts, p); }
};

/// Live and peak element counts per memory group.
class AllocationLedger {
public:
    void alloc(MemoryGroup g, std::int64_t n) {
        auto i = static_cast<std::size_t>(g);
        live_[i] += n;
        peak_[i] = std::max(peak_[i], live_[i]);
    }
    void release(MemoryGroup g, std::int64_t n) { live_[static_cast<std::size_t>(g)] -= n; }
    std::int64_t live(MemoryGroup g) const { return live_[static_cast<std::size_t>(g)]; }
    std::int64_t peak(MemoryGroup g) const { return peak_[static_cast<std::size_t>(g)]; }
    std::int64_t peak_bytes(MemoryGroup g, std::int64_t width = 4) const { return peak(g) * width; }

private:
    std::array<std::int64_t, 5> live_{0, 0, 0, 0, 0};
    std::array<std::int64_t, 5> peak_{0, 0, 0, 0, 0};
};

struct ExecOptions {
    CountingConvention convention = CountingConvention::paper;
    bool bn_train = true;
};

/// A tuned model whose parameters all carry values.
struct Executable {
    TunedModel model;
    ExecOptions options;
};

using GradMap = std::map<std::string, std::vector<double>>;

// ---------------------------------------------------------------------------
// Parameter materialization
// ---------------------------------------------------------------------------

/// Fills every parameter and buffer of a shaped graph: conv/linear weights and
/// biases uniform in +-1/sqrt(fan_in), BN gamma 1, beta 0, running mean 0,
/// running variance 1.
inline void materialize(ModelGraph& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& n : g.nodes) {
        std::int64_t fan_in = 1;
        if (n.kind == LayerKind::conv2d) fan_in = n.conv.in_channels / n.conv.groups * n.conv.kernel * n.conv.kernel;
        if (n.kind == LayerKind::linear) fan_in = n.linear.in_features;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> uni(-bound, bound);
        for (auto& p : n.params) {
            p.values.assign(static_cast<std::size_t>(p.numel()), 0.0);
            switch (p.role) {
                case ParamRole::weight:
                case ParamRole::bias:
                    for (auto& v : p.values) v = uni(rng);
                    break;
                case ParamRole::bn_gamma:
                case ParamRole::running_var:
                    std::fill(p.values.begin(), p.values.end(), 1.0);
                    break;
                default:
                    break;
            }
        }
    }
}

/// Shapes the graph for its input, fills parameters, and applies the method.
inline Executable make_executable(const ModelGraph& graph, const PeftConfig& config, std::uint64_t seed = 0,
                                  ExecOptions options = {}) {
    ModelGraph g = infer_shapes(graph, graph.input_shape);
    materialize(g, seed);
    PeftConfig c = config;
    c.seed = seed;
    return {apply_method(g, c), options};
}

/// Wraps an already materialized tuned model.
inline Executable make_executable(TunedModel tuned, ExecOptions options = {}) {
    if (!tuned.base.shaped()) tuned.base = infer_shapes(tuned.base, tuned.base.input_shape);
    for (const auto& n : tuned.base.nodes)
        for (const auto& p : n.params)
            if (!p.materialized()) throw ValidationError("parameter '" + p.id + "' has no values");
    for (const auto& a : tuned.adapters)
        if (!a.a.materialized() || !a.b.materialized()) throw ValidationError("adapter '" + a.layer_id + "' has no values");
    return {std::move(tuned), options};
}

/// Every parameter tensor of the executable, base first, then adapters.
template <class Fn>
void for_each_param(Executable& ex, Fn&& fn) {
    for (auto& n : ex.model.base.nodes)
        for (auto& p : n.params) fn(p);
    for (auto& a : ex.model.adapters) {
        fn(a.a);
        fn(a.b);
        if (a.magnitude) fn(*a.magnitude);
    }
}

inline ParamTensor* find_param(Executable& ex, const std::string& id) {
    ParamTensor* found = nullptr;
    for_each_param(ex, [&](ParamTensor& p) {
        if (p.id == id) found = &p;
    });
    return found;
}

/// Replaces the zero-initialized adapter state with random values so the
/// adapter path is exercised: B uniform in +-scale, DoRA magnitudes scaled by
/// a factor in [0.5, 1.5].
inline void randomize_adapters(Executable& ex, std::uint64_t seed, double scale = 0.1) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-scale, scale);
    std::uniform_real_distribution<double> factor(0.5, 1.5);
    for (auto& a : ex.model.adapters) {
        for (auto& v : a.b.values) v = uni(rng);
        if (a.magnitude)
            for (auto& v : a.magnitude->values) v *= factor(rng);
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace kernels {

struct ConvGeom {
    std::int64_t cin = 0, cout = 0, k = 1, stride = 1, pad = 0, groups = 1;
    std::int64_t cin_g() const { return cin / groups; }
    std::int64_t cout_g() const { return cout / groups; }
};

inline ConvGeom host_geom(const LayerNode& n) {
    if (n.kind == LayerKind::conv2d) return {n.conv.in_channels, n.conv.out_channels, n.conv.kernel, n.conv.stride, n.conv.padding, n.conv.groups};
    return {n.linear.in_features, n.linear.out_features, 1, 1, 0, 1};
}

/// Linear layers see their input as N x features x 1 x 1.
inline Tensor as_host_input(const LayerNode& n, const Tensor& x) {
    if (n.kind != LayerKind::linear) return x;
    Tensor y = x;
    y.shape = {x.shape.n, x.shape.c * x.shape.h * x.shape.w, 1, 1};
    return y;
}

inline Tensor pad(const Tensor& x, std::int64_t p) {
    if (p == 0) return x;
    Tensor y({x.shape.n, x.shape.c, x.shape.h + 2 * p, x.shape.w + 2 * p});
    for (std::int64_t n = 0; n < x.shape.n; ++n)
        for (std::int64_t c = 0; c < x.shape.c; ++c)
            for (std::int64_t h = 0; h < x.shape.h; ++h)
                for (std::int64_t w = 0; w < x.shape.w; ++w) y.at(n, c, h + p, w + p) = x.at(n, c, h, w);
    return y;
}

inline Tensor crop(const Tensor& x, std::int64_t p) {
    if (p == 0) return x;
    Tensor y({x.shape.n, x.shape.c, x.shape.h - 2 * p, x.shape.w - 2 * p});
    for (std::int64_t n = 0; n < y.shape.n; ++n)
        for (std::int64_t c = 0; c < y.shape.c; ++c)
            for (std::int64_t h = 0; h < y.shape.h; ++h)
                for (std::int64_t w = 0; w < y.shape.w; ++w) y.at(n, c, h, w) = x.at(n, c, h + p, w + p);
    return y;
}

inline TensorShape conv_out_shape(const TensorShape& x, const ConvGeom& g) {
    return {x.n, g.cout, (x.h + 2 * g.pad - g.k) / g.stride + 1, (x.w + 2 * g.pad - g.k) / g.stride + 1};
}

/// y = conv(x, w) (+ bias). Padding taps are executed against explicit zeros.
inline Tensor conv_forward(const Tensor& x, const std::vector<double>& w, const std::vector<double>* bias, const ConvGeom& g,
                           OpCounter& ops, Phase phase) {
    Tensor xp = pad(x, g.pad);
    Tensor y(conv_out_shape(x.shape, g));
    const std::int64_t taps = g.cin_g() * g.k * g.k;
    for (std::int64_t n = 0; n < y.shape.n; ++n)
        for (std::int64_t o = 0; o < g.cout; ++o) {
            const std::int64_t c0 = (o / g.cout_g()) * g.cin_g();
            for (std::int64_t oh = 0; oh < y.shape.h; ++oh)
                for (std::int64_t ow = 0; ow < y.shape.w; ++ow) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < g.cin_g(); ++i)
                        for (std::int64_t kh = 0; kh < g.k; ++kh)
                            for (std::int64_t kw = 0; kw < g.k; ++kw)
                                acc += w[static_cast<std::size_t>(((o * g.cin_g() + i) * g.k + kh) * g.k + kw)] *
                                       xp.at(n, c0 + i, oh * g.stride + kh, ow * g.stride + kw);
                    y.at(n, o, oh, ow) = acc;
                }
        }
    ops.add(phase, 2 * y.numel() * taps);
    if (bias) {
        for (std::int64_t n = 0; n < y.shape.n; ++n)
            for (std::int64_t o = 0; o < g.cout; ++o)
                for (std::int64_t s = 0; s < y.shape.h * y.shape.w; ++s)
                    y[(n * g.cout + o) * y.shape.h * y.shape.w + s] += (*bias)[static_cast<std::size_t>(o)];
        ops.add(phase, y.numel());
    }
    return y;
}

/// dL/dx of a conv, scattered into a padded buffer and cropped.
inline Tensor conv_backward_input(const Tensor& dy, const std::vector<double>& w, const ConvGeom& g, const TensorShape& in_shape,
                                  OpCounter& ops) {
    Tensor dxp({in_shape.n, in_shape.c, in_shape.h + 2 * g.pad, in_shape.w + 2 * g.pad});
    for (std::int64_t n = 0; n < dy.shape.n; ++n)
        for (std::int64_t o = 0; o < g.cout; ++o) {
            const std::int64_t c0 = (o / g.cout_g()) * g.cin_g();
            for (std::int64_t oh = 0; oh < dy.shape.h; ++oh)
                for (std::int64_t ow = 0; ow < dy.shape.w; ++ow) {
                    const double d = dy.at(n, o, oh, ow);
                    for (std::int64_t i = 0; i < g.cin_g(); ++i)
                        for (std::int64_t kh = 0; kh < g.k; ++kh)
                            for (std::int64_t kw = 0; kw < g.k; ++kw)
                                dxp.at(n, c0 + i, oh * g.stride + kh, ow * g.stride + kw) +=
                                    w[static_cast<std::size_t>(((o * g.cin_g() + i) * g.k + kh) * g.k + kw)] * d;
                }
        }
    ops.add(Phase::bwd_input, 2 * dy.numel() * g.cin_g() * g.k * g.k);
    return crop(dxp, g.pad);
}

/// dL/dw (grouped layout). `charge_groups` bills the work as the ungrouped
/// equivalent, the way the reference profiler does.
inline std::vector<double> conv_backward_weight(const Tensor& dy, const Tensor& x, const ConvGeom& g, bool charge_groups,
                                                OpCounter& ops) {
    Tensor xp = pad(x, g.pad);
    std::vector<double> dw(static_cast<std::size_t>(g.cout * g.cin_g() * g.k * g.k), 0.0);
    for (std::int64_t n = 0; n < dy.shape.n; ++n)
        for (std::int64_t o = 0; o < g.cout; ++o) {
            const std::int64_t c0 = (o / g.cout_g()) * g.cin_g();
            for (std::int64_t oh = 0; oh < dy.shape.h; ++oh)
                for (std::int64_t ow = 0; ow < dy.shape.w; ++ow) {
                    const double d = dy.at(n, o, oh, ow);
                    for (std::int64_t i = 0; i < g.cin_g(); ++i)
                        for (std::int64_t kh = 0; kh < g.k; ++kh)
                            for (std::int64_t kw = 0; kw < g.k; ++kw)
                                dw[static_cast<std::size_t>(((o * g.cin_g() + i) * g.k + kh) * g.k + kw)] +=
                                    d * xp.at(n, c0 + i, oh * g.stride + kh, ow * g.stride + kw);
                }
        }
    ops.add(Phase::bwd_weight, 2 * dy.numel() * g.cin_g() * g.k * g.k * (charge_groups ? g.groups : 1));
    return dw;
}

inline std::vector<double> bias_grad(const Tensor& dy, OpCounter& ops) {
    std::vector<double> db(static_cast<std::size_t>(dy.shape.c), 0.0);
    const std::int64_t hw = dy.shape.h * dy.shape.w;
    for (std::int64_t n = 0; n < dy.shape.n; ++n)
        for (std::int64_t c = 0; c < dy.shape.c; ++c)
            for (std::int64_t s = 0; s < hw; ++s) db[static_cast<std::size_t>(c)] += dy[(n * dy.shape.c + c) * hw + s];
    ops.add(Phase::bwd_weight, dy.numel());
    return db;
}

inline void add_into(Tensor& acc, const Tensor& x, OpCounter& ops, Phase phase) {
    for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += x[i];
    ops.add(phase, acc.numel());
}

inline void add_into(std::vector<double>& acc, const std::vector<double>& x, OpCounter& ops, Phase phase) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
    ops.add(phase, static_cast<std::int64_t>(acc.size()));
}

inline Tensor scaled(const Tensor& x, double s, OpCounter& ops, Phase phase) {
    Tensor y = x;
    for (auto& v : y.data) v *= s;
    ops.add(phase, y.numel());
    return y;
}

/// Index of the linear piece of the activation that x falls in.
inline int act_piece(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0 ? 1 : 0;
        case Activation::relu6: return x <= 0 ? 0 : (x >= 6 ? 2 : 1);
        case Activation::hardswish:
        case Activation::hardsigmoid: return x <= -3 ? 0 : (x >= 3 ? 2 : 1);
        case Activation::none: return 0;
    }
    return 0;
}

inline double act_value(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0 ? x : 0.0;
        case Activation::relu6: return std::clamp(x, 0.0, 6.0);
        case Activation::hardswish: return x * std::clamp(x + 3.0, 0.0, 6.0) / 6.0;
        case Activation::hardsigmoid: return std::clamp(x + 3.0, 0.0, 6.0) / 6.0;
        case Activation::none: return x;
    }
    return x;
}

inline double act_slope(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0 ? 1.0 : 0.0;
        case Activation::relu6: return (x > 0 && x < 6) ? 1.0 : 0.0;
        case Activation::hardswish: return x < -3 ? 0.0 : (x > 3 ? 1.0 : (2.0 * x + 3.0) / 6.0);
        case Activation::hardsigmoid: return (x > -3 && x < 3) ? 1.0 / 6.0 : 0.0;
        case Activation::none: return 1.0;
    }
    return 1.0;
}

/// Dense [C_out, C_in*k*k] view of B*A for an adapter.
inline std::vector<double> adapter_update(const AdapterPair& ad, std::int64_t rows, std::int64_t cols, OpCounter& ops, Phase phase) {
    std::vector<double> ba(static_cast<std::size_t>(rows * cols), 0.0);
    for (std::int64_t o = 0; o < rows; ++o)
        for (std::int64_t q = 0; q < ad.rank; ++q) {
            const double b = ad.b.values[static_cast<std::size_t>(o * ad.rank + q)];
            for (std::int64_t j = 0; j < cols; ++j)
                ba[static_cast<std::size_t>(o * cols + j)] += b * ad.a.values[static_cast<std::size_t>(q * cols + j)];
        }
    ops.add(phase, 2 * ad.rank * rows * cols);
    return ba;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct BnStats {
    std::vector<double> mean;
    std::vector<double> invstd;
};

/// Record of one forward pass: the tensors kept for backward, per-phase
/// operation counts, and the allocation ledger.
struct Tape {
    GradFlow flow;
    std::map<std::string, Tensor> saved;
    std::map<std::size_t, BnStats> bn_stats;  // per-channel vectors, not ledgered
    Tensor output;
    OpCounter ops;
    AllocationLedger ledger;
    bool forward_done = false;
    bool backward_done = false;
    /// Hash of every branch taken by piecewise ops (activation pieces, max
    /// pool winners). Equal signatures mean the same linear region.
    std::uint64_t branch_signature = 1469598103934665603ULL;

    void mix_branch(std::int64_t v) { branch_signature = (branch_signature ^ static_cast<std::uint64_t>(v)) * 1099511628211ULL; }

    void save(const std::string& id, const Tensor& t) {
        if (saved.count(id)) return;
        saved.emplace(id, t);
        ledger.alloc(MemoryGroup::ACT, t.numel());
    }
    const Tensor& load(const std::string& id) const {
        auto it = saved.find(id);
        if (it == saved.end()) throw UsageError("backward needs tensor '" + id + "' that forward did not keep");
        return it->second;
    }
};

namespace detail {

inline std::string edge_id(const ModelGraph& g, const LayerNode& n, std::size_t slot) {
    return n.inputs.empty() ? std::string(kGraphInputId) : g.nodes[n.inputs.at(slot)].id;
}

inline std::vector<double> dense_host_weight(const LayerNode& n, const ParamTensor& w) {
    return n.kind == LayerKind::conv2d ? densify_conv_weight(n, w) : w.values;
}

/// V = dense(W0) + s*B*A, returned together with its row norms.
struct DoraWeight {
    std::vector<double> v;
    std::vector<double> norm;  // ||V_o||
};

inline DoraWeight dora_weight(const LayerNode& n, const AdapterPair& ad, OpCounter& ops, Phase phase) {
    auto [rows, cols] = dense_update_shape(n);
    const ParamTensor& w0 = *n.param(ParamRole::weight);
    DoraWeight d;
    d.v = kernels::adapter_update(ad, rows, cols, ops, phase);
    for (auto& x : d.v) x *= ad.scaling;
    ops.add(phase, rows * cols);
    // Only the nonzero (in-group) positions of W0 are added.
    const std::int64_t cin_g = n.kind == LayerKind::conv2d ? n.conv.in_channels / n.conv.groups : cols;
    const std::int64_t cout_g = n.kind == LayerKind::conv2d ? n.conv.out_channels / n.conv.groups : rows;
    const std::int64_t kk = n.kind == LayerKind::conv2d ? n.conv.kernel * n.conv.kernel : 1;
    const std::int64_t cin = cols / kk;
    for (std::int64_t o = 0; o < rows; ++o) {
        const std::int64_t grp = o / cout_g;
        for (std::int64_t i = 0; i < cin_g; ++i)
            for (std::int64_t t = 0; t < kk; ++t)
                d.v[static_cast<std::size_t>((o * cin + grp * cin_g + i) * kk + t)] +=
                    w0.values[static_cast<std::size_t>((o * cin_g + i) * kk + t)];
    }
    ops.add(phase, w0.numel());
    d.norm.assign(static_cast<std::size_t>(rows), 0.0);
    for (std::int64_t o = 0; o < rows; ++o) {
        double s = 0.0;
        for (std::int64_t j = 0; j < cols; ++j) s += d.v[static_cast<std::size_t>(o * cols + j)] * d.v[static_cast<std::size_t>(o * cols + j)];
        d.norm[static_cast<std::size_t>(o)] = std::sqrt(s);
    }
    ops.add(phase, 2 * rows * cols + rows);
    return d;
}

inline constexpr double kDoraEps = 1e-12;

inline kernels::ConvGeom adapter_a_geom(const LayerNode& n, std::int64_t r) {
    auto g = kernels::host_geom(n);
    return {g.cin, r, g.k, g.stride, g.pad, 1};
}
inline kernels::ConvGeom adapter_b_geom(const LayerNode& n, std::int64_t r) {
    auto g = kernels::host_geom(n);
    return {r, g.cout, 1, 1, 0, 1};
}

/// Forward of a conv or linear node including its adapter.
inline Tensor host_forward(const TunedModel& t, std::size_t i, const Tensor& x_raw, Tape& tape, bool trainable_weight) {
    const LayerNode& n = t.base.nodes[i];
    const Tensor x = kernels::as_host_input(n, x_raw);
    const auto geom = kernels::host_geom(n);
    const ParamTensor& w = *n.param(ParamRole::weight);
    const ParamTensor* b = n.param(ParamRole::bias);
    const AdapterPair* ad = t.adapter_for(n.id);
    OpCounter& ops = tape.ops;

    if (trainable_weight || ad) tape.save(edge_id(t.base, n, 0), x_raw);
    if (!ad) return kernels::conv_forward(x, w.values, b ? &b->values : nullptr, geom, ops, Phase::fwd);

    const bool dora = ad->magnitude.has_value();
    Tensor base = kernels::conv_forward(x, w.values, (b && !dora) ? &b->values : nullptr, geom, ops, Phase::fwd);
    Tensor a = kernels::conv_forward(x, ad->a.values, nullptr, adapter_a_geom(n, ad->rank), ops, Phase::fwd);
    tape.save(detail::adapter_a_out_id(n.id), a);
    Tensor bb = kernels::conv_forward(a, ad->b.values, nullptr, adapter_b_geom(n, ad->rank), ops, Phase::fwd);
    Tensor sb = kernels::scaled(bb, ad->scaling, ops, Phase::fwd);
    kernels::add_into(base, sb, ops, Phase::fwd);
    if (!dora) return base;

    // DoRA: y = (m / ||V||) * z + bias with z = conv(x, W0) + s*B(A(x)).
    tape.save(detail::dora_z_id(n.id), base);
    auto [rows, cols] = dense_update_shape(n);
    tape.ledger.alloc(MemoryGroup::TEMP, rows * cols + rows);
    DoraWeight dw = dora_weight(n, *ad, ops, Phase::fwd);
    std::vector<double> scale(static_cast<std::size_t>(rows));
    for (std::int64_t o = 0; o < rows; ++o)
        scale[static_cast<std::size_t>(o)] = ad->magnitude->values[static_cast<std::size_t>(o)] / (dw.norm[static_cast<std::size_t>(o)] + kDoraEps);
    ops.add(Phase::fwd, 2 * rows);
    tape.ledger.release(MemoryGroup::TEMP, rows * cols + rows);
    Tensor y = base;
    const std::int64_t hw = y.shape.h * y.shape.w;
    for (std::int64_t nn = 0; nn < y.shape.n; ++nn)
        for (std::int64_t o = 0; o < rows; ++o)
            for (std::int64_t s = 0; s < hw; ++s) y[(nn * rows + o) * hw + s] *= scale[static_cast<std::size_t>(o)];
    ops.add(Phase::fwd, y.numel());
    if (b) {
        for (std::int64_t nn = 0; nn < y.shape.n; ++nn)
            for (std::int64_t o = 0; o < rows; ++o)
                for (std::int64_t s = 0; s < hw; ++s) y[(nn * rows + o) * hw + s] += b->values[static_cast<std::size_t>(o)];
        ops.add(Phase::fwd, y.numel());
    }
    return y;
}

}  // namespace detail

struct ForwardResult {
    Tensor output;
    Tape tape;
};

/// Runs the model on `input`. In BN train mode the running statistics of
/// every BN layer are updated.
inline ForwardResult forward(Executable& ex, const Tensor& input) {
    TunedModel& t = ex.model;
    ModelGraph& g = t.base;
    if (!(input.shape == g.input_shape)) {
        if (input.shape.c != g.input_shape.c || input.shape.h != g.input_shape.h || input.shape.w != g.input_shape.w)
            throw ValidationError("input shape " + to_string(input.shape) + " does not match graph input " + to_string(g.input_shape));
        g = infer_shapes(g, input.shape);
    }
    ForwardResult res;
    Tape& tape = res.tape;
    tape.flow = analyze_grad_flow(t);
    OpCounter& ops = tape.ops;

    for (const auto& n : g.nodes)
        for (const auto& p : n.params) tape.ledger.alloc(MemoryGroup::PARAM, p.numel());
    for (const auto& a : t.adapters) tape.ledger.alloc(MemoryGroup::PARAM, a.numel());
    tape.ledger.alloc(MemoryGroup::ACT, input.numel());  // the input stays resident
    bool input_counted = true;

    auto order = topological_order(g);
    std::vector<std::optional<Tensor>> out(g.nodes.size());
    std::vector<int> pending(g.nodes.size(), 0);
    for (const auto& n : g.nodes)
        for (std::size_t p : n.inputs) ++pending[p];

    for (std::size_t i : *order) {
        LayerNode& n = g.nodes[i];
        auto in = [&](std::size_t slot) -> const Tensor& { return n.inputs.empty() ? input : *out[n.inputs.at(slot)]; };
        auto in_grad = [&](std::size_t slot) { return tape.flow.input_grad(g, i, slot); };
        auto trainable = [&](ParamRole r) {
            const ParamTensor* p = n.param(r);
            return p && t.is_trainable(p->id);
        };
        auto save_input = [&](std::size_t slot) {
            const std::string id = detail::edge_id(g, n, slot);
            if (id == kGraphInputId && input_counted) {
                // Already resident; keep it without counting twice.
                tape.saved.emplace(id, input);
                return;
            }
            tape.save(id, in(slot));
        };
        Tensor y;
        switch (n.kind) {
            case LayerKind::conv2d:
            case LayerKind::linear: {
                const bool tw = trainable(ParamRole::weight);
                if ((tw || t.adapter_for(n.id)) && n.inputs.empty()) save_input(0);
                y = detail::host_forward(t, i, in(0), tape, tw);
                if (n.kind == LayerKind::linear) y.shape = *n.out_shape;
                break;
            }
            case LayerKind::batchnorm2d: {
                const Tensor& x = in(0);
                const std::int64_t C = x.shape.c, hw = x.shape.h * x.shape.w, M = x.shape.n * hw;
                const auto& gamma = n.param(ParamRole::bn_gamma)->values;
                const auto& beta = n.param(ParamRole::bn_beta)->values;
                auto& rm = n.param(ParamRole::running_mean)->values;
                auto& rv = n.param(ParamRole::running_var)->values;
                y = Tensor(x.shape);
                BnStats st;
                st.mean.assign(static_cast<std::size_t>(C), 0.0);
                st.invstd.assign(static_cast<std::size_t>(C), 0.0);
                for (std::int64_t c = 0; c < C; ++c) {
                    double mean, invstd;
                    if (ex.options.bn_train) {
                        double s = 0.0;
                        for (std::int64_t nn = 0; nn < x.shape.n; ++nn)
                            for (std::int64_t k = 0; k < hw; ++k) s += x[(nn * C + c) * hw + k];
                        mean = s / static_cast<double>(M);
                        double v = 0.0;
                        for (std::int64_t nn = 0; nn < x.shape.n; ++nn)
                            for (std::int64_t k = 0; k < hw; ++k) {
                                double d = x[(nn * C + c) * hw + k] - mean;
                                v += d * d;
                            }
                        v /= static_cast<double>(M);
                        invstd = 1.0 / std::sqrt(v + n.bn_eps);
                        const double unbiased = M > 1 ? v * static_cast<double>(M) / static_cast<double>(M - 1) : v;
                        rm[static_cast<std::size_t>(c)] = (1 - n.bn_momentum) * rm[static_cast<std::size_t>(c)] + n.bn_momentum * mean;
                        rv[static_cast<std::size_t>(c)] = (1 - n.bn_momentum) * rv[static_cast<std::size_t>(c)] + n.bn_momentum * unbiased;
                    } else {
                        mean = rm[static_cast<std::size_t>(c)];
                        invstd = 1.0 / std::sqrt(rv[static_cast<std::size_t>(c)] + n.bn_eps);
                    }
                    st.mean[static_cast<std::size_t>(c)] = mean;
                    st.invstd[static_cast<std::size_t>(c)] = invstd;
                    for (std::int64_t nn = 0; nn < x.shape.n; ++nn)
                        for (std::int64_t k = 0; k < hw; ++k) {
                            const std::int64_t idx = (nn * C + c) * hw + k;
                            y[idx] = gamma[static_cast<std::size_t>(c)] * ((x[idx] - mean) * invstd) + beta[static_cast<std::size_t>(c)];
                        }
                }
                // mean 1, variance 3, normalize 2, affine 2 per element in train mode
                ops.add(Phase::fwd, (ex.options.bn_train ? CostConstants::bn_fwd : 4) * x.numel());
                tape.bn_stats[i] = std::move(st);
                if (in_grad(0) || trainable(ParamRole::bn_gamma) || trainable(ParamRole::bn_beta)) save_input(0);
                break;
            }
            case LayerKind::activation: {
                const Tensor& x = in(0);
                y = Tensor(x.shape);
                for (std::int64_t k = 0; k < x.numel(); ++k) {
                    y[k] = kernels::act_value(n.activation, x[k]);
                    tape.mix_branch(kernels::act_piece(n.activation, x[k]));
                }
                ops.add(Phase::fwd, x.numel());
                if (in_grad(0)) {
                    if (n.activation == Activation::relu) tape.save(n.id, y);
                    else save_input(0);
                }
                break;
            }
            case LayerKind::avgpool: {
                const Tensor& x = in(0);
                y = Tensor({x.shape.n, x.shape.c, 1, 1});
                const std::int64_t hw = x.shape.h * x.shape.w;
                for (std::int64_t k = 0; k < y.numel(); ++k) {
                    double s = 0.0;
                    for (std::int64_t j = 0; j < hw; ++j) s += x[k * hw + j];
                    y[k] = s / static_cast<double>(hw);
                }
                ops.add(Phase::fwd, x.numel() + y.numel());
                break;
            }
            case LayerKind::maxpool: {
                const Tensor& x = in(0);
                const auto& pp = n.pool;
                y = Tensor(*n.out_shape);
                y.shape.n = x.shape.n;
                y.data.assign(static_cast<std::size_t>(y.shape.numel()), 0.0);
                Tensor arg(y.shape);
                for (std::int64_t nn = 0; nn < y.shape.n; ++nn)
                    for (std::int64_t c = 0; c < y.shape.c; ++c)
                        for (std::int64_t oh = 0; oh < y.shape.h; ++oh)
                            for (std::int64_t ow = 0; ow < y.shape.w; ++ow) {
                                double best = -std::numeric_limits<double>::infinity();
                                std::int64_t where = -1;
                                for (std::int64_t kh = 0; kh < pp.kernel; ++kh)
                                    for (std::int64_t kw = 0; kw < pp.kernel; ++kw) {
                                        std::int64_t ih = oh * pp.stride - pp.padding + kh, iw = ow * pp.stride - pp.padding + kw;
                                        double v = (ih >= 0 && ih < x.shape.h && iw >= 0 && iw < x.shape.w)
                                                       ? x.at(nn, c, ih, iw)
                                                       : -std::numeric_limits<double>::infinity();
                                        if (v > best) {
                                            best = v;
                                            where = ih * x.shape.w + iw;
                                        }
                                    }
                                y.at(nn, c, oh, ow) = best;
                                arg.at(nn, c, oh, ow) = static_cast<double>(where);
                                tape.mix_branch(where);
                            }
                ops.add(Phase::fwd, y.numel() * pp.kernel * pp.kernel);
                if (in_grad(0)) tape.save(detail::argmax_id(n.id), arg);
                break;
            }
            case LayerKind::residual_add: {
                y = in(0);
                const Tensor& b = in(1);
                for (std::int64_t k = 0; k < y.numel(); ++k) y[k] += b[k];
                ops.add(Phase::fwd, y.numel());
                break;
            }
            case LayerKind::channel_mul: {
                const Tensor& x = in(0);
                const Tensor& s = in(1);
                y = x;
                const std::int64_t hw = x.shape.h * x.shape.w;
                for (std::int64_t k = 0; k < y.numel(); ++k) y[k] *= s[k / hw];
                ops.add(Phase::fwd, y.numel());
                if (in_grad(0)) save_input(1);
                if (in_grad(1)) save_input(0);
                break;
            }
            case LayerKind::flatten: {
                y = in(0);
                y.shape = {y.shape.n, y.shape.c * y.shape.h * y.shape.w, 1, 1};
                break;
            }
        }
        // conv/linear hosts reading an interior edge save it inside host_forward
        out[i] = std::move(y);
        for (std::size_t p : n.inputs)
            if (--pending[p] == 0 && !tape.saved.count(g.nodes[p].id)) out[p].reset();
    }
    auto outs = output_nodes(g);
    res.output = *out[outs.front()];
    tape.output = res.output;
    tape.forward_done = true;
    return res;
}

namespace detail {

inline void accumulate_grad(GradMap& grads, Tape& tape, const std::string& id, std::vector<double> g) {
    auto it = grads.find(id);
    if (it == grads.end()) {
        tape.ledger.alloc(MemoryGroup::GRAD, static_cast<std::int64_t>(g.size()));
        grads.emplace(id, std::move(g));
    } else {
        kernels::add_into(it->second, g, tape.ops, Phase::bwd_weight);
    }
}

}  // namespace detail

/// Reverse pass from dL/d(output) = `seed`. Returns gradients for exactly the
/// trainable parameters.
inline GradMap backward(Executable& ex, Tape& tape, const Tensor& seed) {
    if (!tape.forward_done) throw UsageError("backward called before forward");
    if (tape.backward_done) throw UsageError("backward already ran on this tape");
    TunedModel& t = ex.model;
    const ModelGraph& g = t.base;
    OpCounter& ops = tape.ops;
    GradMap grads;
    auto order = topological_order(g);
    std::vector<std::optional<Tensor>> dout(g.nodes.size());
    auto outs = output_nodes(g);
    if (!tape.flow.output_grad[outs.front()]) {
        tape.backward_done = true;
        return grads;  // nothing trainable
    }
    dout[outs.front()] = seed;
    tape.ledger.alloc(MemoryGroup::TEMP, seed.numel());

    auto send = [&](const LayerNode& n, std::size_t slot, Tensor d) {
        if (n.inputs.empty()) return;
        std::size_t p = n.inputs.at(slot);
        if (!tape.flow.output_grad[p]) return;
        d.shape = *g.nodes[p].out_shape;
        d.shape.n = seed.shape.n;
        if (dout[p]) {
            kernels::add_into(*dout[p], d, ops, Phase::bwd_input);
        } else {
            tape.ledger.alloc(MemoryGroup::TEMP, d.numel());
            dout[p] = std::move(d);
        }
    };

    for (auto it = order->rbegin(); it != order->rend(); ++it) {
        const std::size_t i = *it;
        if (!tape.flow.output_grad[i] || !dout[i]) continue;
        const LayerNode& n = g.nodes[i];
        const Tensor dy = std::move(*dout[i]);
        dout[i].reset();
        auto in_grad = [&](std::size_t slot) { return tape.flow.input_grad(g, i, slot); };
        auto trainable = [&](ParamRole r) {
            const ParamTensor* p = n.param(r);
            return p && t.is_trainable(p->id);
        };
        auto input_id = [&](std::size_t slot) { return detail::edge_id(g, n, slot); };

        switch (n.kind) {
            case LayerKind::conv2d:
            case LayerKind::linear: {
                const auto geom = kernels::host_geom(n);
                const ParamTensor& w = *n.param(ParamRole::weight);
                const AdapterPair* ad = t.adapter_for(n.id);
                TensorShape in_shape = *n.in_shape;
                in_shape.n = dy.shape.n;
                if (n.kind == LayerKind::linear) in_shape = {in_shape.n, in_shape.c * in_shape.h * in_shape.w, 1, 1};
                Tensor dy_h = dy;
                dy_h.shape = {dy.shape.n, geom.cout, dy.shape.h, dy.shape.w};
                const bool charge = ex.options.convention == CountingConvention::paper;
                auto host_x = [&]() { return kernels::as_host_input(n, tape.load(input_id(0))); };

                if (!ad) {
                    if (trainable(ParamRole::weight))
                        detail::accumulate_grad(grads, tape, w.id, kernels::conv_backward_weight(dy_h, host_x(), geom, charge, ops));
                    if (trainable(ParamRole::bias))
                        detail::accumulate_grad(grads, tape, n.param(ParamRole::bias)->id, kernels::bias_grad(dy_h, ops));
                    if (in_grad(0)) send(n, 0, kernels::conv_backward_input(dy_h, w.values, geom, in_shape, ops));
                    break;
                }
                const bool dora = ad->magnitude.has_value();
                auto [rows, cols] = dense_update_shape(n);
                const std::int64_t hw = dy_h.shape.h * dy_h.shape.w;
                Tensor dz = dy_h;
                std::vector<double> dscale;
                if (dora) {
                    const Tensor& z = tape.load(detail::dora_z_id(n.id));
                    dscale.assign(static_cast<std::size_t>(rows), 0.0);
                    for (std::int64_t nn = 0; nn < dy_h.shape.n; ++nn)
                        for (std::int64_t o = 0; o < rows; ++o)
                            for (std::int64_t s = 0; s < hw; ++s) {
                                const std::int64_t k = (nn * rows + o) * hw + s;
                                dscale[static_cast<std::size_t>(o)] += dy_h[k] * z[k];
                            }
                    ops.add(Phase::bwd_weight, 2 * dy_h.numel());
                    // The rebuilt V is needed for both the scale and the norm chain.
                    tape.ledger.alloc(MemoryGroup::TEMP, rows * cols + rows);
                    detail::DoraWeight dw = detail::dora_weight(n, *ad, ops, Phase::bwd_weight);
                    std::vector<double> scale(static_cast<std::size_t>(rows)), coef(static_cast<std::size_t>(rows));
                    std::vector<double> dm(static_cast<std::size_t>(rows));
                    for (std::int64_t o = 0; o < rows; ++o) {
                        const auto uo = static_cast<std::size_t>(o);
                        const double den = dw.norm[uo] + detail::kDoraEps;
                        const double m = ad->magnitude->values[uo];
                        scale[uo] = m / den;
                        dm[uo] = dscale[uo] / den;
                        // d scale / d ||V|| = -m / den^2, and d||V||/dV = V / ||V||
                        coef[uo] = dw.norm[uo] > 0 ? -dscale[uo] * m / (den * den * dw.norm[uo]) : 0.0;
                    }
                    ops.add(Phase::bwd_weight, 8 * rows);
                    detail::accumulate_grad(grads, tape, ad->magnitude->id, dm);
                    // dBA = s * coef_o * V
                    std::vector<double> dba(static_cast<std::size_t>(rows * cols));
                    for (std::int64_t o = 0; o < rows; ++o)
                        for (std::int64_t j = 0; j < cols; ++j)
                            dba[static_cast<std::size_t>(o * cols + j)] = ad->scaling * (coef[static_cast<std::size_t>(o)] * dw.v[static_cast<std::size_t>(o * cols + j)]);
                    ops.add(Phase::bwd_weight, 2 * rows * cols);
                    std::vector<double> gb(static_cast<std::size_t>(rows * ad->rank), 0.0);
                    std::vector<double> ga(static_cast<std::size_t>(ad->rank * cols), 0.0);
                    for (std::int64_t o = 0; o < rows; ++o)
                        for (std::int64_t q = 0; q < ad->rank; ++q) {
                            const double bq = ad->b.values[static_cast<std::size_t>(o * ad->rank + q)];
                            double acc = 0.0;
                            for (std::int64_t j = 0; j < cols; ++j) {
                                const double d = dba[static_cast<std::size_t>(o * cols + j)];
                                acc += d * ad->a.values[static_cast<std::size_t>(q * cols + j)];
                                ga[static_cast<std::size_t>(q * cols + j)] += bq * d;
                            }
                            gb[static_cast<std::size_t>(o * ad->rank + q)] = acc;
                        }
                    ops.add(Phase::bwd_weight, 4 * ad->rank * rows * cols);
                    tape.ledger.release(MemoryGroup::TEMP, rows * cols + rows);
                    detail::accumulate_grad(grads, tape, ad->b.id, std::move(gb));
                    detail::accumulate_grad(grads, tape, ad->a.id, std::move(ga));
                    for (std::int64_t nn = 0; nn < dy_h.shape.n; ++nn)
                        for (std::int64_t o = 0; o < rows; ++o)
                            for (std::int64_t s = 0; s < hw; ++s) dz[(nn * rows + o) * hw + s] *= scale[static_cast<std::size_t>(o)];
                    ops.add(Phase::bwd_input, dz.numel());
                }
                // LoRA path: d(s*B(A(x)))
                Tensor dbb = kernels::scaled(dz, ad->scaling, ops, Phase::bwd_input);
                const Tensor& a = tape.load(detail::adapter_a_out_id(n.id));
                const auto ga_geom = detail::adapter_a_geom(n, ad->rank);
                const auto gb_geom = detail::adapter_b_geom(n, ad->rank);
                detail::accumulate_grad(grads, tape, ad->b.id, kernels::conv_backward_weight(dbb, a, gb_geom, false, ops));
                Tensor da = kernels::conv_backward_input(dbb, ad->b.values, gb_geom, a.shape, ops);
                Tensor x = host_x();
                detail::accumulate_grad(grads, tape, ad->a.id, kernels::conv_backward_weight(da, x, ga_geom, false, ops));
                if (in_grad(0)) {
                    Tensor dx = kernels::conv_backward_input(dz, w.values, geom, in_shape, ops);
                    Tensor dxa = kernels::conv_backward_input(da, ad->a.values, ga_geom, in_shape, ops);
                    kernels::add_into(dx, dxa, ops, Phase::bwd_input);
                    send(n, 0, std::move(dx));
                }
                break;
            }
            case LayerKind::batchnorm2d: {
                const bool gin = in_grad(0);
                const bool gaff = trainable(ParamRole::bn_gamma) || trainable(ParamRole::bn_beta);
                if (!gin && !gaff) break;
                const Tensor& x = tape.load(input_id(0));
                const BnStats& st = tape.bn_stats.at(i);
                const std::int64_t C = x.shape.c, hw = x.shape.h * x.shape.w;
                const double M = static_cast<double>(x.shape.n * hw);
                const auto& gamma = n.param(ParamRole::bn_gamma)->values;
                Tensor xhat(x.shape);
                for (std::int64_t k = 0; k < x.numel(); ++k) {
                    const auto c = static_cast<std::size_t>((k / hw) % C);
                    xhat[k] = (x[k] - st.mean[c]) * st.invstd[c];
                }
                ops.add(gin ? Phase::bwd_input : Phase::bwd_weight, CostConstants::bn_recompute * x.numel());
                if (gaff) {
                    std::vector<double> dgamma(static_cast<std::size_t>(C), 0.0), dbeta(static_cast<std::size_t>(C), 0.0);
                    for (std::int64_t k = 0; k < x.numel(); ++k) {
                        const auto c = static_cast<std::size_t>((k / hw) % C);
                        dgamma[c] += dy[k] * xhat[k];
                        dbeta[c] += dy[k];
                    }
                    ops.add(Phase::bwd_weight, CostConstants::bn_bwd_weight * x.numel());
                    if (trainable(ParamRole::bn_gamma)) detail::accumulate_grad(grads, tape, n.param(ParamRole::bn_gamma)->id, dgamma);
                    if (trainable(ParamRole::bn_beta)) detail::accumulate_grad(grads, tape, n.param(ParamRole::bn_beta)->id, dbeta);
                }
                if (gin) {
                    Tensor dx(x.shape);
                    if (ex.options.bn_train) {
                        std::vector<double> sg(static_cast<std::size_t>(C), 0.0), sgx(static_cast<std::size_t>(C), 0.0);
                        for (std::int64_t k = 0; k < x.numel(); ++k) {
                            const auto c = static_cast<std::size_t>((k / hw) % C);
                            const double gk = dy[k] * gamma[c];
                            dx[k] = gk;
                            sg[c] += gk;
                            sgx[c] += gk * xhat[k];
                        }
                        for (std::int64_t k = 0; k < x.numel(); ++k) {
                            const auto c = static_cast<std::size_t>((k / hw) % C);
                            dx[k] = (dx[k] - sg[c] / M - xhat[k] * (sgx[c] / M)) * st.invstd[c];
                        }
                    } else {
                        for (std::int64_t k = 0; k < x.numel(); ++k) {
                            const auto c = static_cast<std::size_t>((k / hw) % C);
                            dx[k] = dy[k] * gamma[c] * st.invstd[c];
                        }
                    }
                    ops.add(Phase::bwd_input, CostConstants::bn_bwd_input * x.numel());
                    send(n, 0, std::move(dx));
                }
                break;
            }
            case LayerKind::activation: {
                if (!in_grad(0)) break;
                Tensor dx(dy.shape);
                if (n.activation == Activation::relu) {
                    const Tensor& y = tape.load(n.id);
                    for (std::int64_t k = 0; k < dx.numel(); ++k) dx[k] = y[k] > 0 ? dy[k] : 0.0;
                } else {
                    const Tensor& x = tape.load(input_id(0));
                    for (std::int64_t k = 0; k < dx.numel(); ++k) dx[k] = dy[k] * kernels::act_slope(n.activation, x[k]);
                }
                ops.add(Phase::bwd_input, dx.numel());
                send(n, 0, std::move(dx));
                break;
            }
            case LayerKind::avgpool: {
                if (!in_grad(0)) break;
                TensorShape s = *n.in_shape;
                s.n = dy.shape.n;
                Tensor dx(s);
                const std::int64_t hw = s.h * s.w;
                for (std::int64_t k = 0; k < dy.numel(); ++k) {
                    const double v = dy[k] / static_cast<double>(hw);
                    for (std::int64_t j = 0; j < hw; ++j) dx[k * hw + j] = v;
                }
                ops.add(Phase::bwd_input, dy.numel());
                send(n, 0, std::move(dx));
                break;
            }
            case LayerKind::maxpool: {
                if (!in_grad(0)) break;
                const Tensor& arg = tape.load(detail::argmax_id(n.id));
                TensorShape s = *n.in_shape;
                s.n = dy.shape.n;
                Tensor dx(s);
                const std::int64_t ohw = dy.shape.h * dy.shape.w, ihw = s.h * s.w;
                for (std::int64_t k = 0; k < dy.numel(); ++k) {
                    const std::int64_t plane = k / ohw;
                    dx[plane * ihw + static_cast<std::int64_t>(arg[k])] += dy[k];
                }
                ops.add(Phase::bwd_input, dy.numel());
                send(n, 0, std::move(dx));
                break;
            }
            case LayerKind::residual_add: {
                if (in_grad(0)) send(n, 0, dy);
                if (in_grad(1)) send(n, 1, dy);
                break;
            }
            case LayerKind::channel_mul: {
                const std::int64_t hw = dy.shape.h * dy.shape.w;
                if (in_grad(0)) {
                    const Tensor& s = tape.load(input_id(1));
                    Tensor dx = dy;
                    for (std::int64_t k = 0; k < dx.numel(); ++k) dx[k] *= s[k / hw];
                    ops.add(Phase::bwd_input, dx.numel());
                    send(n, 0, std::move(dx));
                }
                if (in_grad(1)) {
                    const Tensor& x = tape.load(input_id(0));
                    Tensor ds({dy.shape.n, dy.shape.c, 1, 1});
                    for (std::int64_t k = 0; k < dy.numel(); ++k) ds[k / hw] += dy[k] * x[k];
                    ops.add(Phase::bwd_input, 2 * dy.numel());
                    send(n, 1, std::move(ds));
                }
                break;
            }
            case LayerKind::flatten: {
                if (in_grad(0)) send(n, 0, dy);
                break;
            }
        }
        tape.ledger.release(MemoryGroup::TEMP, dy.numel());
    }
    tape.backward_done = true;
    return grads;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossResult {
    double loss = 0.0;
    Tensor grad;  // dL/dlogits
};

/// Mean softmax cross-entropy over the batch; logits are N x classes x 1 x 1.
inline LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    const std::int64_t n = logits.shape.n, k = logits.shape.c * logits.shape.h * logits.shape.w;
    if (static_cast<std::int64_t>(labels.size()) != n) throw ValidationError("label count does not match batch size");
    LossResult r;
    r.grad = Tensor(logits.shape);
    for (std::int64_t b = 0; b < n; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        if (y < 0 || y >= k) throw ValidationError("label out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < k; ++j) mx = std::max(mx, logits[b * k + j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < k; ++j) z += std::exp(logits[b * k + j] - mx);
        r.loss += (std::log(z) + mx - logits[b * k + y]) / static_cast<double>(n);
        for (std::int64_t j = 0; j < k; ++j)
            r.grad[b * k + j] = (std::exp(logits[b * k + j] - mx) / z - (j == y ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    return r;
}

/// Random input of the graph's shape, uniform in [-1, 1].
inline Tensor random_input(const TensorShape& shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    Tensor t(shape);
    for (auto& v : t.data) v = uni(rng);
    return t;
}

}  // namespace peftprof

#endif  // PEFTPROF_ENGINE_HPP

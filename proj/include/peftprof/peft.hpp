#ifndef PEFTPROF_PEFT_HPP
#define PEFTPROF_PEFT_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "peftprof/graph.hpp"

namespace peftprof {

enum class Method { fft, bnh, lora, dora, galore };
inline constexpr Method kAllMethods[] = {Method::fft, Method::bnh, Method::lora, Method::dora, Method::galore};

inline std::string_view to_string(Method m) {
    switch (m) {
        case Method::fft: return "fft";
        case Method::bnh: return "bnh";
        case Method::lora: return "lora";
        case Method::dora: return "dora";
        case Method::galore: return "galore";
    }
    return "?";
}

inline Method parse_method(std::string_view text) {
    if (auto m = parse_enum(text, kAllMethods)) return *m;
    throw ValidationError("invalid method '" + std::string(text) + "' (expected fft|bnh|lora|dora|galore)");
}

inline bool is_adapter_method(Method m) { return m == Method::lora || m == Method::dora; }

/// Which layers receive adapters. Only conv2d and linear are adaptable.
struct TargetSelector {
    std::vector<LayerKind> kinds{LayerKind::conv2d, LayerKind::linear};
    bool include_depthwise = true;
    bool include_head = true;

    bool selects(const LayerNode& n, bool is_head) const {
        if (std::find(kinds.begin(), kinds.end(), n.kind) == kinds.end()) return false;
        if (n.kind == LayerKind::conv2d && n.conv.groups > 1 && !include_depthwise) return false;
        if (is_head && !include_head) return false;
        return true;
    }
    friend bool operator==(const TargetSelector&, const TargetSelector&) = default;
};

struct PeftConfig {
    Method method = Method::fft;
    std::int64_t rank = 4;
    double alpha = 4.0;
    double galore_scale = 0.25;
    std::int64_t galore_period = 200;
    std::string galore_projection = "std";
    TargetSelector targets;
    std::uint64_t seed = 0;

    double scaling() const { return alpha / static_cast<double>(rank); }

    void check() const {
        if (rank < 1) throw ValidationError("rank must be >= 1, got " + std::to_string(rank));
        if (!(alpha > 0.0)) throw ValidationError("alpha must be > 0");
        if (galore_period < 1) throw ValidationError("galore period T must be >= 1");
        if (!(galore_scale > 0.0)) throw ValidationError("galore scale must be > 0");
        if (galore_projection != "std") throw ValidationError("unsupported galore projection '" + galore_projection + "'");
        for (LayerKind k : targets.kinds)
            if (k != LayerKind::conv2d && k != LayerKind::linear)
                throw ValidationError("unsupported adapter target kind '" + std::string(to_string(k)) + "'");
    }
    friend bool operator==(const PeftConfig&, const PeftConfig&) = default;
};

/// Low-rank adapter attached to one conv2d/linear layer. For conv hosts A is a
/// conv C_in -> r with the host's kernel/stride/padding and B a 1x1 conv r -> C_out;
/// for linear hosts A is [r, d_in] and B is [d_out, r].
struct AdapterPair {
    std::string layer_id;
    std::int64_t rank = 0;
    double scaling = 1.0;
    ParamTensor a;
    ParamTensor b;
    std::optional<ParamTensor> magnitude;  // DoRA only, length C_out

    std::int64_t numel() const { return a.numel() + b.numel() + (magnitude ? magnitude->numel() : 0); }
    friend bool operator==(const AdapterPair&, const AdapterPair&) = default;
};

struct TunedModel {
    ModelGraph base;
    std::vector<AdapterPair> adapters;
    std::set<std::string> trainable;
    Method method = Method::fft;
    PeftConfig config;

    const AdapterPair* adapter_for(std::string_view layer_id) const {
        for (const auto& a : adapters)
            if (a.layer_id == layer_id) return &a;
        return nullptr;
    }
    AdapterPair* adapter_for(std::string_view layer_id) {
        for (auto& a : adapters)
            if (a.layer_id == layer_id) return &a;
        return nullptr;
    }
    bool is_trainable(const std::string& param_id) const { return trainable.count(param_id) > 0; }
};

/// Width of the host layer's weight viewed as the dense update matrix
/// (C_out x C_in*k*k, ignoring groups) that B*A must match.
inline std::pair<std::int64_t, std::int64_t> dense_update_shape(const LayerNode& n) {
    if (n.kind == LayerKind::conv2d) return {n.conv.out_channels, n.conv.in_channels * n.conv.kernel * n.conv.kernel};
    return {n.linear.out_features, n.linear.in_features};
}

namespace detail {

inline ParamTensor adapter_param(const std::string& layer, ParamRole role, std::vector<std::int64_t> dims) {
    ParamTensor p;
    p.id = layer + "." + std::string(to_string(role));
    p.role = role;
    p.dims = std::move(dims);
    p.trainable = true;
    return p;
}

/// Row (output-channel) norms of a host weight, grouped layout.
inline std::vector<double> weight_row_norms(const ParamTensor& w) {
    auto [rows, cols] = w.matricized();
    std::vector<double> norms(static_cast<std::size_t>(rows), 0.0);
    for (std::int64_t o = 0; o < rows; ++o) {
        double s = 0.0;
        for (std::int64_t j = 0; j < cols; ++j) {
            double v = w.values[static_cast<std::size_t>(o * cols + j)];
            s += v * v;
        }
        norms[static_cast<std::size_t>(o)] = std::sqrt(s);
    }
    return norms;
}

}  // namespace detail

/// Transforms a base graph into a tuned model. The input graph is not modified;
/// base weights are copied untouched. Adapter values are initialized only when
/// the base weights carry values (A uniform, B = 0, DoRA m = row norms of W0).
inline TunedModel apply_method(const ModelGraph& graph, const PeftConfig& config) {
    config.check();
    if (auto diags = validate(graph); !diags.empty())
        throw ValidationError("invalid graph: " + (diags.front().node_id.empty() ? std::string() : diags.front().node_id + ": ") +
                              diags.front().message);
    TunedModel t;
    t.base = graph;
    t.method = config.method;
    t.config = config;

    for (auto& n : t.base.nodes)
        for (auto& p : n.params) p.trainable = false;

    auto mark = [&](ParamTensor& p) {
        p.trainable = true;
        t.trainable.insert(p.id);
    };

    switch (config.method) {
        case Method::fft:
        case Method::galore:
            for (auto& n : t.base.nodes)
                for (auto& p : n.params)
                    if (!p.buffer) mark(p);
            break;
        case Method::bnh:
            for (auto& n : t.base.nodes)
                if (t.base.is_head(n.id))
                    for (auto& p : n.params)
                        if (!p.buffer) mark(p);
            break;
        case Method::lora:
        case Method::dora: {
            std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
            for (auto& n : t.base.nodes) {
                if (!config.targets.selects(n, t.base.is_head(n.id))) continue;
                auto [rows, cols] = dense_update_shape(n);
                if (config.rank > std::min(rows, cols))
                    throw ValidationError("rank " + std::to_string(config.rank) + " too large for layer '" + n.id +
                                          "' (update matrix " + std::to_string(rows) + "x" + std::to_string(cols) + ")");
                AdapterPair ad;
                ad.layer_id = n.id;
                ad.rank = config.rank;
                ad.scaling = config.scaling();
                if (n.kind == LayerKind::conv2d) {
                    ad.a = detail::adapter_param(n.id, ParamRole::lora_a,
                                                 {config.rank, n.conv.in_channels, n.conv.kernel, n.conv.kernel});
                    ad.b = detail::adapter_param(n.id, ParamRole::lora_b, {n.conv.out_channels, config.rank, 1, 1});
                } else {
                    ad.a = detail::adapter_param(n.id, ParamRole::lora_a, {config.rank, n.linear.in_features});
                    ad.b = detail::adapter_param(n.id, ParamRole::lora_b, {n.linear.out_features, config.rank});
                }
                if (config.method == Method::dora) ad.magnitude = detail::adapter_param(n.id, ParamRole::dora_magnitude, {rows});

                const ParamTensor* w = n.param(ParamRole::weight);
                if (w && w->materialized()) {
                    double bound = 1.0 / std::sqrt(static_cast<double>(cols));
                    std::uniform_real_distribution<double> uni(-bound, bound);
                    ad.a.values.resize(static_cast<std::size_t>(ad.a.numel()));
                    for (auto& v : ad.a.values) v = uni(rng);
                    ad.b.values.assign(static_cast<std::size_t>(ad.b.numel()), 0.0);
                    if (ad.magnitude) ad.magnitude->values = detail::weight_row_norms(*w);
                }
                t.trainable.insert(ad.a.id);
                t.trainable.insert(ad.b.id);
                if (ad.magnitude) t.trainable.insert(ad.magnitude->id);
                t.adapters.push_back(std::move(ad));
            }
            break;
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Optimizer plan
// ---------------------------------------------------------------------------

enum class UpdateRule { sgd_momentum, adam, galore_adam };
inline constexpr UpdateRule kAllUpdateRules[] = {UpdateRule::sgd_momentum, UpdateRule::adam, UpdateRule::galore_adam};

inline std::string_view to_string(UpdateRule r) {
    switch (r) {
        case UpdateRule::sgd_momentum: return "sgd_momentum";
        case UpdateRule::adam: return "adam";
        case UpdateRule::galore_adam: return "galore_adam";
    }
    return "?";
}

/// A weight whose gradient is optimized in a rank-r subspace. `left` means the
/// projector P is rows x r and the projected gradient is P^T G (r x cols);
/// otherwise P is cols x r and the projected gradient is G P (rows x r).
struct ProjectedParam {
    std::string param_id;
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    bool left = true;

    std::int64_t projected_numel(std::int64_t r) const { return r * (left ? cols : rows); }
    std::int64_t projector_numel(std::int64_t r) const { return r * (left ? rows : cols); }
    friend bool operator==(const ProjectedParam&, const ProjectedParam&) = default;
};

struct OptimizerPlan {
    UpdateRule rule = UpdateRule::adam;
    double lr = 1e-3;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t rank = 4;
    std::int64_t period = 200;
    double scale = 0.25;
    std::vector<ProjectedParam> projected;

    /// Persistent state tensors per trainable element for the plain rules.
    int state_multiplier() const { return rule == UpdateRule::sgd_momentum ? 1 : 2; }

    const ProjectedParam* projection_for(std::string_view param_id) const {
        for (const auto& p : projected)
            if (p.param_id == param_id) return &p;
        return nullptr;
    }
};

/// Lists every trainable weight matrix whose matricized dims both exceed r.
inline OptimizerPlan galore_plan(const ModelGraph& graph, const PeftConfig& config) {
    if (config.method != Method::galore) throw ValidationError("galore_plan requires method galore");
    config.check();
    OptimizerPlan plan;
    plan.rule = UpdateRule::galore_adam;
    plan.rank = config.rank;
    plan.period = config.galore_period;
    plan.scale = config.galore_scale;
    for (const auto& n : graph.nodes) {
        for (const auto& p : n.params) {
            if (p.buffer || !p.is_matrix()) continue;
            auto [rows, cols] = p.matricized();
            if (rows > config.rank && cols > config.rank) plan.projected.push_back({p.id, rows, cols, rows <= cols});
        }
    }
    return plan;
}

inline UpdateRule default_rule(Method m) { return m == Method::galore ? UpdateRule::galore_adam : UpdateRule::adam; }

/// Optimizer plan for a tuned model; galore_adam requires a galore model.
inline OptimizerPlan make_plan(const TunedModel& tuned, std::optional<UpdateRule> rule = std::nullopt) {
    UpdateRule r = rule.value_or(default_rule(tuned.method));
    if (r == UpdateRule::galore_adam) {
        if (tuned.method != Method::galore) throw ValidationError("galore_adam optimizer requires method galore");
        return galore_plan(tuned.base, tuned.config);
    }
    OptimizerPlan plan;
    plan.rule = r;
    plan.rank = tuned.config.rank;
    plan.period = tuned.config.galore_period;
    plan.scale = tuned.config.galore_scale;
    return plan;
}

// ---------------------------------------------------------------------------
// Merging and summaries
// ---------------------------------------------------------------------------

namespace detail {

/// Dense [C_out, C_in*k*k] copy of a (possibly grouped) conv weight.
inline std::vector<double> densify_conv_weight(const LayerNode& n, const ParamTensor& w) {
    const auto& c = n.conv;
    const std::int64_t kk = c.kernel * c.kernel;
    const std::int64_t cin_g = c.in_channels / c.groups;
    const std::int64_t cout_g = c.out_channels / c.groups;
    std::vector<double> dense(static_cast<std::size_t>(c.out_channels * c.in_channels * kk), 0.0);
    for (std::int64_t o = 0; o < c.out_channels; ++o) {
        std::int64_t g = o / cout_g;
        for (std::int64_t i = 0; i < cin_g; ++i)
            for (std::int64_t t = 0; t < kk; ++t)
                dense[static_cast<std::size_t>((o * c.in_channels + g * cin_g + i) * kk + t)] =
                    w.values[static_cast<std::size_t>((o * cin_g + i) * kk + t)];
    }
    return dense;
}

/// B * A as a dense [rows, cols] matrix.
inline std::vector<double> adapter_product(const AdapterPair& ad, std::int64_t rows, std::int64_t cols) {
    std::vector<double> ba(static_cast<std::size_t>(rows * cols), 0.0);
    for (std::int64_t o = 0; o < rows; ++o)
        for (std::int64_t q = 0; q < ad.rank; ++q) {
            double bq = ad.b.values[static_cast<std::size_t>(o * ad.rank + q)];
            if (bq == 0.0) continue;
            for (std::int64_t j = 0; j < cols; ++j)
                ba[static_cast<std::size_t>(o * cols + j)] += bq * ad.a.values[static_cast<std::size_t>(q * cols + j)];
        }
    return ba;
}

}  // namespace detail

/// Folds adapters into the host weights: W0 + (alpha/r) B A for LoRA and
/// m * V / ||V|| row-wise (V = W0 + (alpha/r) B A) for DoRA. A grouped host
/// whose update is not block-diagonal becomes a dense conv.
inline ModelGraph merge_adapters(const TunedModel& tuned, double norm_eps = 1e-12) {
    if (!is_adapter_method(tuned.method))
        throw ValidationError("merge_adapters requires a lora or dora model, got " + std::string(to_string(tuned.method)));
    ModelGraph g = tuned.base;
    for (const auto& ad : tuned.adapters) {
        auto idx = g.find(ad.layer_id);
        if (!idx) throw ValidationError("adapter targets unknown layer '" + ad.layer_id + "'");
        LayerNode& n = g.nodes[*idx];
        ParamTensor* w = n.param(ParamRole::weight);
        if (!w->materialized() || !ad.a.materialized() || !ad.b.materialized())
            throw ValidationError("merge_adapters needs materialized weights for layer '" + n.id + "'");
        auto [rows, cols] = dense_update_shape(n);
        auto ba = detail::adapter_product(ad, rows, cols);
        const bool grouped = n.kind == LayerKind::conv2d && n.conv.groups > 1;
        const bool update_is_zero = std::all_of(ba.begin(), ba.end(), [](double v) { return v == 0.0; });

        std::vector<double> v;
        if (grouped && update_is_zero && tuned.method == Method::lora) {
            v = w->values;  // stays grouped, W0 + 0
        } else {
            v = n.kind == LayerKind::conv2d ? detail::densify_conv_weight(n, *w) : w->values;
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += ad.scaling * ba[i];
        }
        if (tuned.method == Method::dora) {
            std::int64_t vcols = static_cast<std::int64_t>(v.size()) / rows;
            for (std::int64_t o = 0; o < rows; ++o) {
                double s = 0.0;
                for (std::int64_t j = 0; j < vcols; ++j) s += v[static_cast<std::size_t>(o * vcols + j)] * v[static_cast<std::size_t>(o * vcols + j)];
                double scale = ad.magnitude->values[static_cast<std::size_t>(o)] / (std::sqrt(s) + norm_eps);
                for (std::int64_t j = 0; j < vcols; ++j) v[static_cast<std::size_t>(o * vcols + j)] *= scale;
            }
        }
        if (static_cast<std::int64_t>(v.size()) != w->numel()) {
            n.conv.groups = 1;
            w->dims = {n.conv.out_channels, n.conv.in_channels, n.conv.kernel, n.conv.kernel};
        }
        w->values = std::move(v);
    }
    for (auto& n : g.nodes)
        for (auto& p : n.params) p.trainable = !p.buffer;
    return g;
}

struct ParamSummary {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
    double fraction() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total); }
};

inline std::int64_t adapter_param_count(const TunedModel& t) {
    std::int64_t n = 0;
    for (const auto& a : t.adapters) n += a.numel();
    return n;
}

inline ParamSummary trainable_summary(const TunedModel& t) {
    ParamSummary s;
    s.total = param_count(t.base, ParamFilter::all) + adapter_param_count(t);
    s.trainable = param_count(t.base, ParamFilter::trainable_only) + adapter_param_count(t);
    return s;
}

}  // namespace peftprof

#endif  // PEFTPROF_PEFT_HPP

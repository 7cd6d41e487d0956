#ifndef PEFTPROF_VERIFY_HPP
#define PEFTPROF_VERIFY_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "peftprof/flops.hpp"
#include "peftprof/memory.hpp"
#include "peftprof/optim.hpp"
#include "peftprof/toy_gen.hpp"

namespace peftprof {

struct SuiteResult {
    std::string name;
    bool passed = true;
    std::int64_t checks = 0;
    std::string detail;  // first failure, empty when passed
};

struct VerifySummary {
    std::vector<SuiteResult> suites;
    bool passed() const {
        for (const auto& s : suites)
            if (!s.passed) return false;
        return true;
    }
};

struct VerifyOptions {
    int graphs = 20;
    std::uint64_t seed = 1;
    std::int64_t rank = 2;
    std::int64_t batch = 2;
    double fd_eps = 1e-3;
    double fd_tolerance = 1e-4;
    int fd_samples = 16;  // finite-difference entries per tensor
    /// Per-element Adam cost assumed by the analytic side. Only differs from
    /// the model constant when checking that the parity suite catches it.
    std::int64_t adam_per_element = CostConstants::adam_per_element;
};

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

struct GradCheck {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::int64_t entries = 0;
    std::int64_t skipped = 0;  // stencils that crossed a kink
};

/// Compares backward() with central differences of the cross-entropy loss on
/// up to `samples` random entries of every trainable tensor. Entries whose
/// +-eps stencil changes the branch signature (a ReLU flips, a max pool winner
/// moves) are not differentiable there and are skipped. The error of a tensor
/// is |a - f|_2 / max(|a|_2, |f|_2, 1e-7) over the used entries.
inline GradCheck gradient_check(const Executable& ex, const Tensor& input, const std::vector<int>& labels, double eps = 1e-3,
                                int samples = 16, std::uint64_t seed = 0) {
    Executable work = ex;
    auto fw = forward(work, input);
    const std::uint64_t signature = fw.tape.branch_signature;
    auto loss = softmax_cross_entropy(fw.output, labels);
    const GradMap grads = backward(work, fw.tape, loss.grad);

    bool crossed = false;
    auto loss_at = [&](const Executable& e) {
        Executable c = e;
        auto r = forward(c, input);
        if (r.tape.branch_signature != signature) crossed = true;
        return softmax_cross_entropy(r.output, labels).loss;
    };
    std::mt19937_64 rng(seed);
    GradCheck gc;
    work = ex;
    for (const auto& [id, g] : grads) {
        ParamTensor* p = find_param(work, id);
        const auto n = static_cast<std::int64_t>(g.size());
        std::vector<std::int64_t> order(static_cast<std::size_t>(n));
        for (std::int64_t k = 0; k < n; ++k) order[static_cast<std::size_t>(k)] = k;
        std::shuffle(order.begin(), order.end(), rng);
        double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
        int used = 0;
        for (std::int64_t k : order) {
            if (used >= samples) break;
            double& v = p->values[static_cast<std::size_t>(k)];
            const double orig = v;
            crossed = false;
            v = orig + eps;
            const double up = loss_at(work);
            v = orig - eps;
            const double down = loss_at(work);
            v = orig;
            if (crossed) {
                ++gc.skipped;
                continue;
            }
            const double fd = (up - down) / (2.0 * eps);
            const double an = g[static_cast<std::size_t>(k)];
            diff2 += (an - fd) * (an - fd);
            a2 += an * an;
            f2 += fd * fd;
            ++used;
            ++gc.entries;
        }
        const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(f2), 1e-7});
        if (rel > gc.max_rel_error) {
            gc.max_rel_error = rel;
            gc.worst_param = id;
        }
    }
    return gc;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max(den, std::abs(b[i]));
    }
    return den > 0 ? num / den : num;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

namespace detail {

struct ToyCase {
    ModelGraph graph;
    Tensor input;
    std::vector<int> labels;
};

inline ToyCase toy_case(std::uint64_t seed, std::int64_t batch) {
    ToyCase c;
    c.graph = build_model(random_toy_spec(seed), 3);
    c.graph.input_shape.n = batch;
    c.input = random_input(c.graph.input_shape, seed + 7919);
    for (std::int64_t b = 0; b < batch; ++b) c.labels.push_back(static_cast<int>(b % 3));
    return c;
}

inline PeftConfig toy_config(Method m, std::int64_t rank) {
    PeftConfig c;
    c.method = m;
    c.rank = rank;
    c.alpha = static_cast<double>(rank);
    return c;
}

inline void fail(SuiteResult& s, const std::string& what) {
    if (s.passed) s.detail = what;
    s.passed = false;
}

inline std::int64_t adam_elements(const TunedModel& t, const OptimizerPlan& plan) {
    if (plan.rule == UpdateRule::sgd_momentum) return 0;
    std::int64_t n = 0;
    for_each_trainable(t, [&](const ParamTensor& p) {
        if (plan.rule == UpdateRule::adam || !plan.projection_for(p.id)) n += p.numel();
    });
    return n;
}

}  // namespace detail

/// Analytic FLOPs per phase against instrumented engine counts, all methods,
/// both counting conventions.
inline SuiteResult verify_flops_parity(const VerifyOptions& o = {}) {
    SuiteResult s{"flops-parity"};
    for (int gi = 0; gi < o.graphs; ++gi) {
        auto tc = detail::toy_case(o.seed + static_cast<std::uint64_t>(gi), o.batch);
        for (Method m : kAllMethods)
            for (CountingConvention conv : kAllConventions) {
                Executable ex = make_executable(tc.graph, detail::toy_config(m, o.rank), o.seed + gi, {conv, true});
                const auto plan = make_plan(ex.model);
                const auto rep = instrumented_counts(ex, tc.input, tc.labels, plan);
                ProfileOptions po;
                po.convention = conv;
                const auto fr = profile_flops(ex.model, plan, ex.model.base.input_shape, po);
                const std::int64_t opt = fr.opt_recurring + (o.adam_per_element - CostConstants::adam_per_element) *
                                                                detail::adam_elements(ex.model, plan);
                const std::int64_t model[4] = {fr.total(Phase::fwd), fr.total(Phase::bwd_input), fr.total(Phase::bwd_weight), opt};
                for (Phase p : kAllPhases) {
                    ++s.checks;
                    const auto k = static_cast<std::size_t>(p);
                    if (model[k] != rep.counts[k]) {
                        std::ostringstream os;
                        os << "graph " << gi << " " << to_string(m) << " " << to_string(conv) << " " << to_string(p) << ": model "
                           << model[k] << " engine " << rep.counts[k];
                        detail::fail(s, os.str());
                    }
                }
            }
    }
    return s;
}

/// Memory groups in elements against the engine's allocation ledger peaks.
inline SuiteResult verify_memory_parity(const VerifyOptions& o = {}) {
    SuiteResult s{"memory-parity"};
    for (int gi = 0; gi < o.graphs; ++gi) {
        auto tc = detail::toy_case(o.seed + static_cast<std::uint64_t>(gi), o.batch);
        for (Method m : kAllMethods) {
            Executable ex = make_executable(tc.graph, detail::toy_config(m, o.rank), o.seed + gi);
            const auto plan = make_plan(ex.model);
            const auto rep = instrumented_counts(ex, tc.input, tc.labels, plan);
            const auto e = memory_elements(ex.model, plan, ex.model.base.input_shape);
            const std::int64_t model[5] = {e.param, e.grad, e.act, e.opt(), e.temp};
            for (MemoryGroup g : kAllMemoryGroups) {
                ++s.checks;
                const auto k = static_cast<std::size_t>(g);
                if (model[k] != rep.peak_elements[k]) {
                    std::ostringstream os;
                    os << "graph " << gi << " " << to_string(m) << " " << to_string(g) << ": model " << model[k] << " ledger "
                       << rep.peak_elements[k];
                    detail::fail(s, os.str());
                }
            }
        }
    }
    return s;
}

/// Central differences on random toy graphs with random adapter weights.
inline SuiteResult verify_gradients(const VerifyOptions& o = {}) {
    SuiteResult s{"gradient-check"};
    const int graphs = std::max(1, o.graphs / 4);
    for (int gi = 0; gi < graphs; ++gi) {
        auto tc = detail::toy_case(o.seed + 1000 + static_cast<std::uint64_t>(gi), o.batch);
        for (Method m : kAllMethods) {
            Executable ex = make_executable(tc.graph, detail::toy_config(m, o.rank), o.seed + gi);
            randomize_adapters(ex, o.seed + gi);
            auto gc = gradient_check(ex, tc.input, tc.labels, o.fd_eps, o.fd_samples, o.seed + gi);
            ++s.checks;
            if (!(gc.max_rel_error < o.fd_tolerance)) {
                std::ostringstream os;
                os << "graph " << gi << " " << to_string(m) << ": relative error " << gc.max_rel_error << " at " << gc.worst_param;
                detail::fail(s, os.str());
            }
        }
    }
    return s;
}

/// Trains one toy graph for `steps` steps with plain Adam and with GaLore at
/// full rank (r >= min(rows, cols) of every weight) and scale 1, returning the
/// largest parameter difference relative to the largest Adam parameter.
inline double galore_full_rank_gap(std::uint64_t seed, std::int64_t batch, int steps) {
    auto tc = detail::toy_case(seed + 3000, batch);
    ModelGraph shaped = infer_shapes(tc.graph, tc.graph.input_shape);
    std::int64_t full = 1;
    for (const auto& n : shaped.nodes)
        for (const auto& p : n.params)
            if (p.is_matrix()) {
                auto [rows, cols] = p.matricized();
                full = std::max(full, std::min(rows, cols));
            }
    PeftConfig gc = detail::toy_config(Method::galore, full);
    gc.galore_scale = 1.0;
    Executable adam = make_executable(tc.graph, detail::toy_config(Method::fft, full), seed);
    Executable galore = make_executable(tc.graph, gc, seed);
    OptimizerPlan pa = make_plan(adam.model), pg = make_plan(galore.model);
    pa.lr = pg.lr = 1e-2;
    OptimizerState sa = make_optimizer(pa), sg = make_optimizer(pg);
    for (int k = 0; k < steps; ++k)
        for (auto* run : {&adam, &galore}) {
            auto fw = forward(*run, tc.input);
            auto grads = backward(*run, fw.tape, softmax_cross_entropy(fw.output, tc.labels).grad);
            step(run == &adam ? sa : sg, *run, grads, fw.tape.ops, fw.tape.ledger);
        }
    double diff = 0.0, scale = 0.0;
    for (const auto& n : adam.model.base.nodes)
        for (const auto& p : n.params) {
            if (p.buffer) continue;
            const auto& q = galore.model.base.node(n.id).params;
            for (const auto& pg2 : q)
                if (pg2.id == p.id)
                    for (std::size_t i = 0; i < p.values.size(); ++i) {
                        diff = std::max(diff, std::abs(p.values[i] - pg2.values[i]));
                        scale = std::max(scale, std::abs(p.values[i]));
                    }
        }
    return scale > 0 ? diff / scale : diff;
}

/// Adapter init leaves outputs unchanged; merged adapters reproduce the adapted model.
inline SuiteResult verify_adapter_identities(const VerifyOptions& o = {}) {
    SuiteResult s{"adapter-identities"};
    for (int gi = 0; gi < std::max(1, o.graphs / 4); ++gi) {
        auto tc = detail::toy_case(o.seed + 2000 + static_cast<std::uint64_t>(gi), o.batch);
        Executable base = make_executable(tc.graph, detail::toy_config(Method::fft, o.rank), o.seed + gi);
        const Tensor y0 = forward(base, tc.input).output;
        for (Method m : {Method::lora, Method::dora}) {
            Executable ex = make_executable(tc.graph, detail::toy_config(m, o.rank), o.seed + gi);
            const double init = max_rel_diff(forward(ex, tc.input).output, y0);
            ++s.checks;
            if (m == Method::lora ? init != 0.0 : init > 1e-6) detail::fail(s, std::string(to_string(m)) + " init changes outputs");

            randomize_adapters(ex, o.seed + gi);
            const Tensor ya = forward(ex, tc.input).output;
            PeftConfig fc = detail::toy_config(Method::fft, o.rank);
            Executable merged = make_executable(apply_method(merge_adapters(ex.model), fc));
            const double merge = max_rel_diff(forward(merged, tc.input).output, ya);
            ++s.checks;
            if (merge > 1e-6) {
                std::ostringstream os;
                os << to_string(m) << " merge differs by " << merge;
                detail::fail(s, os.str());
            }
        }
    }
    const double galore = galore_full_rank_gap(o.seed, o.batch, 20);
    ++s.checks;
    if (!(galore <= 1e-5)) {
        std::ostringstream os;
        os << "full-rank galore drifts from adam by " << galore;
        detail::fail(s, os.str());
    }
    return s;
}

/// Depthwise layer: the two conventions agree except for the grouped weight
/// gradient, which the `paper` convention charges C_in times over.
inline SuiteResult verify_conventions(const VerifyOptions& = {}) {
    SuiteResult s{"counting-conventions"};
    GraphBuilder b("depthwise");
    b.conv("dw", std::nullopt, 8, 8, 3, 1, 1, 8);
    ModelGraph g = infer_shapes(b.finish({1, 8, 8, 8}), {1, 8, 8, 8});
    const LayerNode& n = g.nodes[0];
    const auto fw = [&](Phase p, CountingConvention c) { return layer_flops(n, p, c); };
    ++s.checks;
    if (fw(Phase::fwd, CountingConvention::paper) != fw(Phase::fwd, CountingConvention::exact)) detail::fail(s, "fwd differs");
    ++s.checks;
    if (fw(Phase::bwd_input, CountingConvention::paper) != fw(Phase::bwd_input, CountingConvention::exact))
        detail::fail(s, "bwd_input differs");
    ++s.checks;
    if (fw(Phase::bwd_weight, CountingConvention::paper) != n.conv.in_channels * fw(Phase::bwd_weight, CountingConvention::exact))
        detail::fail(s, "bwd_weight ratio is not C_in");
    return s;
}

inline VerifySummary run_verify(const VerifyOptions& o = {}) {
    VerifySummary v;
    v.suites.push_back(verify_flops_parity(o));
    v.suites.push_back(verify_memory_parity(o));
    v.suites.push_back(verify_gradients(o));
    v.suites.push_back(verify_adapter_identities(o));
    v.suites.push_back(verify_conventions(o));
    return v;
}

}  // namespace peftprof

#endif  // PEFTPROF_VERIFY_HPP

#ifndef PEFTPROF_OPTIM_HPP
#define PEFTPROF_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "peftprof/engine.hpp"
#include "peftprof/linalg.hpp"

namespace peftprof {

/// Per-parameter optimizer state. For projected GaLore weights `m`/`v` live
/// in rank space and `projector` holds P (rows x r when left, cols x r otherwise).
struct ParamState {
    std::vector<double> m;
    std::vector<double> v;
    std::vector<double> projector;
    std::int64_t last_refresh = -1;
};

struct OptimizerState {
    OptimizerPlan plan;
    std::int64_t step = 0;
    std::map<std::string, ParamState> params;
    double max_projector_error = 0.0;  // worst |P^T P - I| seen at a refresh
};

inline OptimizerState make_optimizer(const OptimizerPlan& plan) { return {plan, 0, {}, 0.0}; }

namespace detail {

inline std::int64_t state_elements(const OptimizerPlan& plan, const std::string& id, std::int64_t numel) {
    return optimizer_state_elements(plan, id, numel);
}

/// m, v updated in place; returns the normalized step mhat / (sqrt(vhat) + eps).
inline std::vector<double> adam_direction(const OptimizerPlan& plan, std::int64_t t, std::vector<double>& m, std::vector<double>& v,
                                          const std::vector<double>& g) {
    const double bc1 = 1.0 - std::pow(plan.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(plan.beta2, static_cast<double>(t));
    std::vector<double> upd(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = plan.beta1 * m[i] + (1.0 - plan.beta1) * g[i];
        v[i] = plan.beta2 * v[i] + (1.0 - plan.beta2) * (g[i] * g[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        upd[i] = mhat / (std::sqrt(vhat) + plan.eps);
    }
    return upd;
}

}  // namespace detail

/// Applies one update to every trainable parameter of `ex`. Operation counts
/// go to `ops` (phase opt, SVD separately) and allocations to `ledger` (OPT).
inline void step(OptimizerState& st, Executable& ex, const GradMap& grads, OpCounter& ops, AllocationLedger& ledger) {
    const OptimizerPlan& plan = st.plan;
    const std::int64_t t = ++st.step;

    // States are created on first use, all before any update.
    for (const auto& [id, g] : grads) {
        if (st.params.count(id)) continue;
        ParamState ps;
        const auto numel = static_cast<std::int64_t>(g.size());
        if (plan.rule == UpdateRule::sgd_momentum) {
            ps.m.assign(g.size(), 0.0);
        } else if (const auto* pp = plan.rule == UpdateRule::galore_adam ? plan.projection_for(id) : nullptr) {
            ps.m.assign(static_cast<std::size_t>(pp->projected_numel(plan.rank)), 0.0);
            ps.v.assign(ps.m.size(), 0.0);
            ps.projector.assign(static_cast<std::size_t>(pp->projector_numel(plan.rank)), 0.0);
        } else {
            ps.m.assign(g.size(), 0.0);
            ps.v.assign(g.size(), 0.0);
        }
        ledger.alloc(MemoryGroup::OPT, detail::state_elements(plan, id, numel));
        st.params.emplace(id, std::move(ps));
    }

    for (const auto& [id, g] : grads) {
        ParamTensor* p = find_param(ex, id);
        if (!p) throw ValidationError("gradient for unknown parameter '" + id + "'");
        if (p->values.size() != g.size()) throw ValidationError("gradient shape mismatch for '" + id + "'");
        ParamState& ps = st.params.at(id);
        auto& w = p->values;
        const auto numel = static_cast<std::int64_t>(g.size());

        if (plan.rule == UpdateRule::sgd_momentum) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                ps.m[i] = plan.momentum * ps.m[i] + g[i];
                w[i] -= plan.lr * ps.m[i];
            }
            ops.add(Phase::opt, CostConstants::sgd_per_element * numel);
            continue;
        }
        const ProjectedParam* pp = plan.rule == UpdateRule::galore_adam ? plan.projection_for(id) : nullptr;
        if (!pp) {
            auto upd = detail::adam_direction(plan, t, ps.m, ps.v, g);
            for (std::size_t i = 0; i < g.size(); ++i) w[i] -= plan.lr * upd[i];
            ops.add(Phase::opt, CostConstants::adam_per_element * numel);
            continue;
        }

        const std::int64_t rows = pp->rows, cols = pp->cols, r = plan.rank;
        if ((t - 1) % plan.period == 0) {
            const std::int64_t ws = galore_refresh_workspace(rows, cols);
            ledger.alloc(MemoryGroup::OPT, ws);
            SvdResult svd = jacobi_svd(g, rows, cols);
            ops.svd += svd.ops;
            if (pp->left) {
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t q = 0; q < r; ++q)
                        ps.projector[static_cast<std::size_t>(i * r + q)] = svd.u[static_cast<std::size_t>(i * svd.k + q)];
                st.max_projector_error = std::max(st.max_projector_error, orthonormality_error(ps.projector, rows, r));
            } else {
                for (std::int64_t j = 0; j < cols; ++j)
                    for (std::int64_t q = 0; q < r; ++q)
                        ps.projector[static_cast<std::size_t>(j * r + q)] = svd.vh[static_cast<std::size_t>(q * cols + j)];
                st.max_projector_error = std::max(st.max_projector_error, orthonormality_error(ps.projector, cols, r));
            }
            ps.last_refresh = t - 1;
            ledger.release(MemoryGroup::OPT, ws);
        }
        const auto& P = ps.projector;
        const std::int64_t rn = pp->projected_numel(r);
        const std::int64_t transient = galore_step_workspace(*pp, r);
        ledger.alloc(MemoryGroup::OPT, transient);
        // R = P^T G (r x cols) or G P (rows x r)
        std::vector<double> R(static_cast<std::size_t>(rn), 0.0);
        if (pp->left) {
            for (std::int64_t q = 0; q < r; ++q)
                for (std::int64_t i = 0; i < rows; ++i) {
                    const double pq = P[static_cast<std::size_t>(i * r + q)];
                    for (std::int64_t j = 0; j < cols; ++j) R[static_cast<std::size_t>(q * cols + j)] += pq * g[static_cast<std::size_t>(i * cols + j)];
                }
        } else {
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cols; ++j) {
                    const double gij = g[static_cast<std::size_t>(i * cols + j)];
                    for (std::int64_t q = 0; q < r; ++q) R[static_cast<std::size_t>(i * r + q)] += gij * P[static_cast<std::size_t>(j * r + q)];
                }
        }
        ops.add(Phase::opt, 2 * rows * r * cols);
        auto N = detail::adam_direction(plan, t, ps.m, ps.v, R);
        ops.add(Phase::opt, CostConstants::adam_rank_space * rn);
        // dW = P N or N P^T
        std::vector<double> dW(static_cast<std::size_t>(rows * cols), 0.0);
        if (pp->left) {
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t q = 0; q < r; ++q) {
                    const double pq = P[static_cast<std::size_t>(i * r + q)];
                    for (std::int64_t j = 0; j < cols; ++j) dW[static_cast<std::size_t>(i * cols + j)] += pq * N[static_cast<std::size_t>(q * cols + j)];
                }
        } else {
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t q = 0; q < r; ++q) {
                    const double nq = N[static_cast<std::size_t>(i * r + q)];
                    for (std::int64_t j = 0; j < cols; ++j) dW[static_cast<std::size_t>(i * cols + j)] += nq * P[static_cast<std::size_t>(j * r + q)];
                }
        }
        ops.add(Phase::opt, 2 * rows * r * cols);
        const double lr_scaled = plan.lr * plan.scale;
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_scaled * dW[i];
        ops.add(Phase::opt, CostConstants::galore_apply * rows * cols);
        ledger.release(MemoryGroup::OPT, transient);
    }
}

// ---------------------------------------------------------------------------
// Whole training step, instrumented
// ---------------------------------------------------------------------------

struct OpCountReport {
    PhaseCounts counts{0, 0, 0, 0};
    std::int64_t svd = 0;
    std::array<std::int64_t, 5> peak_elements{0, 0, 0, 0, 0};
    double loss = 0.0;

    std::int64_t peak(MemoryGroup g) const { return peak_elements[static_cast<std::size_t>(g)]; }
};

/// Runs forward, cross-entropy backward, and one optimizer step on a copy of
/// `ex`, returning what the instrumentation observed.
inline OpCountReport instrumented_counts(const Executable& ex, const Tensor& input, const std::vector<int>& labels,
                                         const OptimizerPlan& plan) {
    Executable copy = ex;
    auto fw = forward(copy, input);
    auto loss = softmax_cross_entropy(fw.output, labels);
    auto grads = backward(copy, fw.tape, loss.grad);
    OptimizerState st = make_optimizer(plan);
    step(st, copy, grads, fw.tape.ops, fw.tape.ledger);
    OpCountReport r;
    r.counts = fw.tape.ops.counts;
    r.svd = fw.tape.ops.svd;
    for (MemoryGroup g : kAllMemoryGroups) r.peak_elements[static_cast<std::size_t>(g)] = fw.tape.ledger.peak(g);
    r.loss = loss.loss;
    return r;
}

}  // namespace peftprof

#endif  // PEFTPROF_OPTIM_HPP

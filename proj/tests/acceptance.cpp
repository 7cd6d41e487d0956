// Acceptance checks: one PASS/FAIL line per criterion, details indented below.
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "peftprof/peftprof.hpp"

using namespace peftprof;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        notes.push_back(std::string(ok ? "ok   " : "MISS ") + what);
        pass = pass && ok;
    }
};

std::string fmt(const char* f, double a) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string fmt(const char* f, double a, double b) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const char* const kModels[] = {"resnet18", "mobilenet_v2", "mobilenet_v3_large"};

ProfileRow row(const std::string& arch, Method m, std::int64_t rank = 4) {
    RunSpec s;
    s.arch = arch;
    s.peft.method = m;
    s.peft.rank = rank;
    return profile_row(s);
}

double reduction_pct(double value, double base) { return 100.0 * (1.0 - value / base); }

Outcome criterion1() {
    Outcome o;
    VerifyOptions vo;
    vo.graphs = 20;
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult s = verify_flops_parity(vo);
    const double dt = seconds_since(t0);
    o.check(s.passed, std::to_string(s.checks) + " per-phase comparisons over 20 graphs x 5 methods x 2 conventions" +
                          (s.passed ? "" : ": " + s.detail));
    o.check(dt < 60.0, fmt("runtime %.1f s < 60 s", dt));
    return o;
}

Outcome criterion2() {
    Outcome o;
    VerifyOptions vo;
    vo.graphs = 20;
    SuiteResult s = verify_memory_parity(vo);
    o.check(s.passed, std::to_string(s.checks) + " group comparisons (PARAM, GRAD, ACT, OPT, TEMP) over 20 graphs x 5 methods" +
                          (s.passed ? "" : ": " + s.detail));
    return o;
}

Outcome criterion3() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    std::set<LayerKind> kinds;
    std::set<Activation> acts;
    std::map<Method, double> worst;
    int graphs = 0;
    auto covered = [&] { return kinds.size() == std::size(kAllLayerKinds) && acts.size() == std::size(kAllActivations) - 1; };
    for (std::uint64_t seed = 1000; graphs < 40 && (graphs < 6 || !covered()); ++seed, ++graphs) {
        auto tc = detail::toy_case(seed, 2);
        for (const auto& n : tc.graph.nodes) {
            kinds.insert(n.kind);
            if (n.kind == LayerKind::activation && n.activation != Activation::none) acts.insert(n.activation);
        }
        for (Method m : kAllMethods) {
            Executable ex = make_executable(tc.graph, detail::toy_config(m, 2), seed);
            randomize_adapters(ex, seed);
            auto gc = gradient_check(ex, tc.input, tc.labels, 1e-3, 16, seed);
            worst[m] = std::max(worst[m], gc.max_rel_error);
        }
    }
    for (Method m : kAllMethods) o.check(worst[m] < 1e-4, std::string(to_string(m)) + fmt(" max relative error %.2e < 1e-4", worst[m]));
    o.check(covered(),
            std::to_string(kinds.size()) + "/" + std::to_string(std::size(kAllLayerKinds)) + " layer kinds, " + std::to_string(acts.size()) + "/" +
                std::to_string(std::size(kAllActivations) - 1) + " activation functions over " + std::to_string(graphs) + " graphs");
    const double dt = seconds_since(t0);
    o.check(dt < 120.0, fmt("runtime %.1f s < 120 s", dt));
    return o;
}

Outcome criterion4() {
    Outcome o;
    double lora_init = 0.0, dora_init = 0.0, lora_merge = 0.0, dora_merge = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ModelGraph g = build_model(random_toy_spec(seed + 2000), 3);
        g.input_shape.n = 2;
        Tensor x = random_input(g.input_shape, seed);
        PeftConfig c;
        c.rank = 2;
        c.alpha = 2;
        Executable base = make_executable(g, c, seed);
        const Tensor y0 = forward(base, x).output;
        for (Method m : {Method::lora, Method::dora}) {
            c.method = m;
            Executable ex = make_executable(g, c, seed);
            const double init = max_rel_diff(forward(ex, x).output, y0);
            randomize_adapters(ex, seed);
            const Tensor ya = forward(ex, x).output;
            PeftConfig fc;
            Executable merged = make_executable(apply_method(merge_adapters(ex.model), fc));
            const double merge = max_rel_diff(forward(merged, x).output, ya);
            (m == Method::lora ? lora_init : dora_init) = std::max(m == Method::lora ? lora_init : dora_init, init);
            (m == Method::lora ? lora_merge : dora_merge) = std::max(m == Method::lora ? lora_merge : dora_merge, merge);
        }
    }
    o.check(lora_init == 0.0, fmt("lora init max rel diff %.2e, bitwise identical", lora_init));
    o.check(dora_init <= 1e-6, fmt("dora init max rel diff %.2e <= 1e-6", dora_init));
    o.check(lora_merge <= 1e-6, fmt("lora merge max rel diff %.2e <= 1e-6", lora_merge));
    o.check(dora_merge <= 1e-6, fmt("dora merge max rel diff %.2e <= 1e-6", dora_merge));
    double gap = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) gap = std::max(gap, galore_full_rank_gap(seed, 2, 20));
    o.check(gap <= 1e-5, fmt("galore full rank, scale 1 vs adam after 20 steps: rel diff %.2e <= 1e-5", gap));
    return o;
}

Outcome criterion5() {
    Outcome o;
    const double r = row("resnet18", Method::fft).bwd_fwd_ratio();
    o.check(std::abs(r - 2.0) <= 0.3, fmt("resnet18 fft bwd/fwd %.3f in 2.0 +- 0.3", r));
    return o;
}

Outcome criterion6() {
    Outcome o;
    for (const char* arch : {"mobilenet_v2", "mobilenet_v3_large"}) {
        const double f = row(arch, Method::fft).bwd_fwd_ratio();
        o.check(std::abs(f - 20.0) <= 5.0, std::string(arch) + fmt(" fft %.3f in 20 +- 5", f));
        for (Method m : {Method::lora, Method::dora}) {
            const double r = row(arch, m).bwd_fwd_ratio();
            o.check(std::abs(r - 1.2) <= 0.3, std::string(arch) + " " + std::string(to_string(m)) + fmt(" %.3f in 1.2 +- 0.3", r));
        }
    }
    return o;
}

Outcome criterion7() {
    Outcome o;
    std::map<std::string, double> fft, lora, galore;
    for (const char* arch : kModels) {
        fft[arch] = static_cast<double>(row(arch, Method::fft).flops_total());
        lora[arch] = static_cast<double>(row(arch, Method::lora).flops_total());
        galore[arch] = static_cast<double>(row(arch, Method::galore).flops_total());
    }
    const double v3 = reduction_pct(lora["mobilenet_v3_large"], fft["mobilenet_v3_large"]);
    const double rn = reduction_pct(lora["resnet18"], fft["resnet18"]);
    const double v2 = reduction_pct(lora["mobilenet_v2"], fft["mobilenet_v2"]);
    o.check(std::abs(v3 - 80.0) <= 5.0, fmt("mobilenet_v3_large lora reduction %.1f%% in 80 +- 5", v3));
    o.check(std::abs(rn - 57.0) <= 5.0, fmt("resnet18 lora reduction %.1f%% in 57 +- 5", rn));
    o.check(v2 >= 90.0, fmt("mobilenet_v2 lora reduction %.1f%% >= 90", v2));
    bool any_band = false, none_negative = true;
    std::string overheads;
    for (const char* arch : kModels) {
        const double ov = 100.0 * (galore[arch] / fft[arch] - 1.0);
        any_band = any_band || (ov >= 10.0 && ov <= 30.0);
        none_negative = none_negative && ov >= 0.0;
        overheads += std::string(overheads.empty() ? "" : ", ") + arch + fmt(" %+.1f%%", ov);
    }
    o.check(any_band, "galore overhead in [+10, +30]% on at least one model (" + overheads + ")");
    o.check(none_negative, "galore overhead never negative");
    return o;
}

Outcome criterion8() {
    Outcome o;
    std::map<std::string, std::map<Method, ProfileRow>> rows;
    for (const char* arch : kModels)
        for (Method m : kAllMethods) rows[arch][m] = row(arch, m);
    auto red = [&](const char* arch, Method m) {
        return reduction_pct(static_cast<double>(rows[arch][m].memory_total()), static_cast<double>(rows[arch][Method::fft].memory_total()));
    };
    auto band = [&](const char* arch, Method m, double target) {
        const double r = red(arch, m);
        o.check(std::abs(r - target) <= 10.0,
                std::string(arch) + " " + std::string(to_string(m)) + fmt(" total reduction %.1f%% in %.0f +- 10", r, target));
    };
    band("mobilenet_v2", Method::bnh, 85);
    band("mobilenet_v3_large", Method::bnh, 52);
    band("resnet18", Method::lora, 67);
    band("mobilenet_v2", Method::lora, 22);
    band("mobilenet_v3_large", Method::lora, 48);
    for (const char* arch : {"mobilenet_v2", "mobilenet_v3_large"}) {
        const double r = red(arch, Method::galore);
        o.check(r >= 5.0 - 10.0 && r <= 10.0 + 10.0, std::string(arch) + fmt(" galore total reduction %.1f%% in [5, 10] +- 10", r));
    }
    double opt_sum = 0.0;
    std::string per_model;
    for (const char* arch : kModels) {
        const double r = reduction_pct(static_cast<double>(rows[arch][Method::galore].memory_bytes(MemoryGroup::OPT)),
                                       static_cast<double>(rows[arch][Method::fft].memory_bytes(MemoryGroup::OPT)));
        opt_sum += r;
        per_model += std::string(per_model.empty() ? "" : ", ") + arch + fmt(" %.1f%%", r);
    }
    const double opt_avg = opt_sum / 3.0;
    o.check(std::abs(opt_avg - 65.0) <= 10.0, fmt("galore OPT reduction averaged %.1f%% in 65 +- 10", opt_avg) + " (" + per_model + ")");
    const double lora_opt = 100.0 * static_cast<double>(rows["resnet18"][Method::lora].memory_bytes(MemoryGroup::OPT)) /
                            static_cast<double>(rows["resnet18"][Method::galore].memory_bytes(MemoryGroup::OPT));
    o.check(std::abs(lora_opt - 10.0) <= 5.0, fmt("resnet18 lora OPT = %.1f%% of galore OPT, in 10 +- 5", lora_opt));
    const double dl = static_cast<double>(rows["mobilenet_v2"][Method::dora].memory_total()) /
                      static_cast<double>(rows["mobilenet_v2"][Method::lora].memory_total());
    o.check(std::abs(dl - 1.5) <= 0.1, fmt("mobilenet_v2 dora/lora total %.3f in 1.50 +- 0.10", dl));
    return o;
}

Outcome criterion9() {
    Outcome o;
    const std::vector<std::int64_t> ranks{1, 2, 4, 8, 16};
    std::map<Method, Report> sweeps;
    for (Method m : {Method::lora, Method::dora, Method::galore}) {
        RunSpec s;
        s.arch = "mobilenet_v2";
        s.peft.method = m;
        sweeps[m] = cmd_sweep(s, ranks);
        const LineFit ff = sweeps[m].flops_fit(), mf = sweeps[m].memory_fit();
        o.check(ff.r2 > 0.999, std::string(to_string(m)) + fmt(" FLOPs R2 %.6f > 0.999 (slope %.4g/rank)", ff.r2, ff.slope));
        o.check(mf.r2 > 0.999, std::string(to_string(m)) + fmt(" memory R2 %.6f > 0.999 (slope %.4g B/rank)", mf.r2, mf.slope));
    }
    const double fr = sweeps[Method::galore].flops_fit().slope / sweeps[Method::lora].flops_fit().slope;
    o.check(fr >= 9.0 / 2.0 && fr <= 9.0 * 2.0, fmt("FLOPs slope galore/lora %.3f in [4.5, 18]", fr));
    const double mr = sweeps[Method::lora].memory_fit().slope / sweeps[Method::galore].memory_fit().slope;
    o.check(mr >= 2.0 && mr <= 4.0, fmt("memory slope lora/galore %.3f in [2, 4]", mr));
    return o;
}

Outcome criterion10() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    ModelGraph g = build_model(toy_classifier_spec(), 2);
    Dataset data = synthetic_two_class(g.input_shape, 8, 8, 7);
    for (Method m : kAllMethods) {
        PeftConfig c;
        c.method = m;
        c.rank = 2;
        c.alpha = 2;
        Executable ex = make_executable(g, c, 1);
        OptimizerPlan plan = make_plan(ex.model);
        plan.lr = 1e-2;
        const auto curve = train_toy(ex, data, plan, 10);
        const double ratio = curve.back() / curve.front();
        o.check(ratio < 0.5, std::string(to_string(m)) + fmt(" loss %.4f -> ", curve.front()) + fmt("%.4f, ratio %.3f < 0.5", curve.back(), ratio));
    }
    const double dt = seconds_since(t0);
    o.check(dt < 300.0, fmt("runtime %.1f s < 300 s", dt));
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"oracle FLOPs parity", criterion1},
        {"oracle memory parity", criterion2},
        {"gradient correctness", criterion3},
        {"adapter identities", criterion4},
        {"bwd/fwd ratio, standard conv", criterion5},
        {"bwd/fwd ratio, depthwise-separable", criterion6},
        {"FLOPs reductions vs fft", criterion7},
        {"memory reductions vs fft", criterion8},
        {"rank scaling", criterion9},
        {"toy training", criterion10},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        std::printf("%s criterion %zu: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first);
        for (const auto& n : o.notes) std::printf("    %s\n", n.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
    return failed == 0 ? 0 : 1;
}

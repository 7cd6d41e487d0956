#ifndef PEFTPROF_REPORT_HPP
#define PEFTPROF_REPORT_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "peftprof/builders.hpp"
#include "peftprof/flops.hpp"
#include "peftprof/graph_io.hpp"
#include "peftprof/memory.hpp"
#include "peftprof/peft.hpp"
#include "peftprof/verify.hpp"

namespace peftprof {

inline constexpr int kReportSchemaVersion = 1;

enum class OutputFormat { json, csv, table };
inline constexpr OutputFormat kAllOutputFormats[] = {OutputFormat::json, OutputFormat::csv, OutputFormat::table};

inline std::string_view to_string(OutputFormat f) {
    switch (f) {
        case OutputFormat::json: return "json";
        case OutputFormat::csv: return "csv";
        case OutputFormat::table: return "table";
    }
    return "?";
}

template <class Enum, std::size_t N>
Enum parse_enum_or_throw(std::string_view text, const Enum (&all)[N], std::string_view what) {
    if (auto e = parse_enum(text, all)) return *e;
    std::string options;
    for (Enum e : all) options += (options.empty() ? "" : ", ") + std::string(to_string(e));
    throw ValidationError("invalid " + std::string(what) + " '" + std::string(text) + "' (expected one of: " + options + ")");
}

/// Everything needed to profile one configuration. Defaults follow the
/// reference hyperparameters: r=4, alpha=4, scale 0.25, T=200, std projection,
/// one 3x224x224 image.
struct RunSpec {
    std::string arch = "mobilenet_v2";
    std::optional<ModelGraph> graph;  // custom graph; overrides arch
    std::int64_t num_classes = 1000;
    TensorShape input{1, 3, 224, 224};
    PeftConfig peft;
    std::optional<UpdateRule> optimizer;  // defaults per method
    CountingConvention convention = CountingConvention::paper;
    SvdAccounting svd_accounting = SvdAccounting::amortized;
    std::int64_t bytes_per_element = 4;
    OutputFormat format = OutputFormat::json;
    std::string label;

    std::string display_label() const { return label.empty() ? std::string(to_string(peft.method)) : label; }
    std::string arch_name() const { return graph ? graph->arch : arch; }
};

/// "HxW" or "NxCxHxW"; HxW keeps the batch and channels of `base`.
inline TensorShape parse_input_dims(std::string_view text, TensorShape base = {1, 3, 224, 224}) {
    std::vector<std::int64_t> v;
    std::string cur;
    auto flush = [&]() {
        if (cur.empty() || cur.size() > 9 || !std::all_of(cur.begin(), cur.end(), [](char c) { return c >= '0' && c <= '9'; }))
            throw ValidationError("invalid input dims '" + std::string(text) + "' (expected HxW or NxCxHxW)");
        v.push_back(std::stoll(cur));
        cur.clear();
    };
    for (char c : text) {
        if (c == 'x' || c == 'X') flush();
        else cur += c;
    }
    flush();
    if (v.size() == 2) base.h = v[0], base.w = v[1];
    else if (v.size() == 4) base = {v[0], v[1], v[2], v[3]};
    else throw ValidationError("invalid input dims '" + std::string(text) + "' (expected HxW or NxCxHxW)");
    if (base.n < 1 || base.c < 1 || base.h < 1 || base.w < 1) throw ValidationError("input dims must be >= 1");
    return base;
}

// ---------------------------------------------------------------------------
// Run-spec documents
// ---------------------------------------------------------------------------

/// A run-spec document: top-level keys configure the base spec; "runs" lists
/// per-run overrides, "sweep" and "plan" carry command inputs.
struct RunDocument {
    RunSpec base;
    std::vector<RunSpec> runs;
    std::vector<std::int64_t> ranks;
    std::optional<double> memory_budget_bytes;
    std::optional<double> flops_budget;
};

namespace detail {

/// Maps byte offsets and key names back to 1-based source lines.
class SourceMap {
public:
    explicit SourceMap(std::string_view text) : text_(text) {}

    std::pair<std::size_t, std::size_t> line_col(std::size_t offset) const {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i < offset && i < text_.size(); ++i) {
            if (text_[i] == '\n') ++line, col = 1;
            else ++col;
        }
        return {line, col};
    }
    /// Line of the first occurrence of "key" as an object key, 0 if absent.
    std::size_t key_line(std::string_view key) const {
        const std::string quoted = "\"" + std::string(key) + "\"";
        std::size_t pos = text_.find(quoted);
        while (pos != std::string_view::npos) {
            std::size_t after = text_.find_first_not_of(" \t\r\n", pos + quoted.size());
            if (after != std::string_view::npos && text_[after] == ':') return line_col(pos).first;
            pos = text_.find(quoted, pos + 1);
        }
        return 0;
    }
    [[noreturn]] void fail(std::string_view key, const std::string& msg) const {
        const std::size_t line = key.empty() || msg.rfind("line ", 0) == 0 ? 0 : key_line(key);
        throw ValidationError(line ? "line " + std::to_string(line) + ": " + msg : msg);
    }

private:
    std::string_view text_;
};

inline void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, std::string_view where, const SourceMap& src) {
    for (const auto& [k, v] : obj.items())
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            src.fail(k, "unknown key '" + k + "' in " + std::string(where));
}

template <class T>
T get_as(const json& j, std::string_view key, const SourceMap& src) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        src.fail(key, "wrong type for '" + std::string(key) + "'");
    }
}

inline std::int64_t get_int(const json& j, std::string_view key, const SourceMap& src) {
    if (!j.is_number_integer()) src.fail(key, "'" + std::string(key) + "' must be an integer");
    return j.get<std::int64_t>();
}

inline void apply_method_section(const json& m, PeftConfig& c, const SourceMap& src) {
    if (m.is_string()) {
        try {
            c.method = parse_enum_or_throw(m.get<std::string>(), kAllMethods, "method");
        } catch (const ValidationError& e) {
            src.fail("method", e.what());
        }
        return;
    }
    if (!m.is_object()) src.fail("method", "'method' must be a string or an object");
    reject_unknown(m, {"name", "rank", "alpha", "galore_scale", "galore_period", "galore_projection", "targets"}, "method", src);
    if (!m.contains("name")) src.fail("method", "method section needs a 'name'");
    try {
        c.method = parse_enum_or_throw(get_as<std::string>(m.at("name"), "name", src), kAllMethods, "method");
    } catch (const ValidationError& e) {
        src.fail("name", e.what());
    }
    if (m.contains("rank")) c.rank = get_int(m.at("rank"), "rank", src);
    if (m.contains("alpha")) c.alpha = get_as<double>(m.at("alpha"), "alpha", src);
    if (m.contains("galore_scale")) c.galore_scale = get_as<double>(m.at("galore_scale"), "galore_scale", src);
    if (m.contains("galore_period")) c.galore_period = get_int(m.at("galore_period"), "galore_period", src);
    if (m.contains("galore_projection")) c.galore_projection = get_as<std::string>(m.at("galore_projection"), "galore_projection", src);
    if (m.contains("targets")) {
        const json& t = m.at("targets");
        reject_unknown(t, {"kinds", "include_depthwise", "include_head"}, "targets", src);
        if (t.contains("kinds")) {
            c.targets.kinds.clear();
            for (const auto& k : t.at("kinds"))
                c.targets.kinds.push_back(parse_enum_or_throw(get_as<std::string>(k, "kinds", src), kAllLayerKinds, "target kind"));
        }
        if (t.contains("include_depthwise")) c.targets.include_depthwise = get_as<bool>(t.at("include_depthwise"), "include_depthwise", src);
        if (t.contains("include_head")) c.targets.include_head = get_as<bool>(t.at("include_head"), "include_head", src);
    }
    if (c.rank < 1) src.fail("rank", "rank must be >= 1, got " + std::to_string(c.rank));
    try {
        c.check();
    } catch (const ValidationError& e) {
        src.fail("", e.what());
    }
}

inline void apply_spec_keys(const json& j, RunSpec& s, const SourceMap& src) {
    auto enum_key = [&](const char* key, auto& out, const auto& all, const char* what) {
        if (!j.contains(key)) return;
        try {
            out = parse_enum_or_throw(get_as<std::string>(j.at(key), key, src), all, what);
        } catch (const ValidationError& e) {
            src.fail(key, e.what());
        }
    };
    if (j.contains("arch")) {
        s.arch = get_as<std::string>(j.at("arch"), "arch", src);
        try {
            parse_arch(s.arch);
        } catch (const ValidationError& e) {
            src.fail("arch", e.what());
        }
    }
    if (j.contains("graph")) s.graph = graph_from_json(j.at("graph"));
    if (j.contains("num_classes")) {
        s.num_classes = get_int(j.at("num_classes"), "num_classes", src);
        if (s.num_classes < 1) src.fail("num_classes", "num_classes must be >= 1");
    }
    if (j.contains("input")) {
        const json& in = j.at("input");
        try {
            if (in.is_string()) {
                s.input = parse_input_dims(in.get<std::string>(), s.input);
            } else if (in.is_object()) {
                reject_unknown(in, {"n", "c", "h", "w"}, "input", src);
                for (auto [key, field] : {std::pair{"n", &s.input.n}, {"c", &s.input.c}, {"h", &s.input.h}, {"w", &s.input.w}})
                    if (in.contains(key)) *field = get_int(in.at(key), key, src);
                if (s.input.n < 1 || s.input.c < 1 || s.input.h < 1 || s.input.w < 1) throw ValidationError("input dims must be >= 1");
            } else {
                throw ValidationError("'input' must be \"HxW\" or an object");
            }
        } catch (const ValidationError& e) {
            src.fail("input", e.what());
        }
    }
    if (j.contains("method")) apply_method_section(j.at("method"), s.peft, src);
    if (j.contains("optimizer")) {
        UpdateRule r{};
        enum_key("optimizer", r, kAllUpdateRules, "optimizer");
        s.optimizer = r;
    }
    enum_key("input_grad", s.convention, kAllConventions, "input_grad convention");
    enum_key("svd_accounting", s.svd_accounting, kAllSvdAccountings, "svd accounting");
    enum_key("format", s.format, kAllOutputFormats, "format");
    if (j.contains("bytes_per_element")) {
        s.bytes_per_element = get_int(j.at("bytes_per_element"), "bytes_per_element", src);
        if (s.bytes_per_element < 1) src.fail("bytes_per_element", "bytes_per_element must be >= 1");
    }
    if (j.contains("label")) s.label = get_as<std::string>(j.at("label"), "label", src);
}

#define PEFTPROF_SPEC_KEYS                                                                                                       \
    "arch", "graph", "num_classes", "input", "method", "optimizer", "input_grad", "svd_accounting", "format", "bytes_per_element", \
        "label"

}  // namespace detail

/// Parses a JSON run-spec document. Errors carry the source line.
inline RunDocument parse_run_document(std::string_view text) {
    detail::SourceMap src(text);
    json j;
    try {
        j = json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        auto [line, col] = src.line_col(e.byte > 0 ? e.byte - 1 : 0);
        std::string msg = e.what();
        if (auto p = msg.find("column "); p != std::string::npos)
            if (auto q = msg.find(": ", p); q != std::string::npos) msg = msg.substr(q + 2);
        throw ValidationError("line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + msg);
    }
    if (!j.is_object()) throw ValidationError("line 1: run spec must be an object");
    detail::reject_unknown(j, {PEFTPROF_SPEC_KEYS, "schema_version", "runs", "sweep", "plan"}, "run spec", src);
    if (j.contains("schema_version") && j.at("schema_version") != kReportSchemaVersion)
        src.fail("schema_version", "unsupported schema_version " + j.at("schema_version").dump());

    RunDocument d;
    try {
        detail::apply_spec_keys(j, d.base, src);
        if (j.contains("runs")) {
            const json& runs = j.at("runs");
            if (!runs.is_array()) src.fail("runs", "'runs' must be an array");
            for (const auto& r : runs) {
                if (!r.is_object()) src.fail("runs", "each run must be an object");
                detail::reject_unknown(r, {PEFTPROF_SPEC_KEYS}, "run", src);
                RunSpec s = d.base;
                detail::apply_spec_keys(r, s, src);
                d.runs.push_back(std::move(s));
            }
        }
        if (j.contains("sweep")) {
            const json& sw = j.at("sweep");
            detail::reject_unknown(sw, {"ranks"}, "sweep", src);
            if (sw.contains("ranks"))
                for (const auto& r : sw.at("ranks")) d.ranks.push_back(detail::get_int(r, "ranks", src));
        }
        if (j.contains("plan")) {
            const json& pl = j.at("plan");
            detail::reject_unknown(pl, {"memory_budget_bytes", "flops_budget"}, "plan", src);
            if (pl.contains("memory_budget_bytes"))
                d.memory_budget_bytes = detail::get_as<double>(pl.at("memory_budget_bytes"), "memory_budget_bytes", src);
            if (pl.contains("flops_budget")) d.flops_budget = detail::get_as<double>(pl.at("flops_budget"), "flops_budget", src);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed run spec: ") + e.what());
    }
    return d;
}

#undef PEFTPROF_SPEC_KEYS

inline RunSpec parse_run_spec(std::string_view text) { return parse_run_document(text).base; }

// ---------------------------------------------------------------------------
// Profiling
// ---------------------------------------------------------------------------

/// One profiled configuration: the inputs that identify it and its FLOPs and
/// memory totals for one training step.
struct ProfileRow {
    std::string label;
    std::string arch;
    Method method = Method::fft;
    std::int64_t rank = 4;
    double alpha = 4.0;
    TensorShape input;
    CountingConvention convention = CountingConvention::paper;
    SvdAccounting svd_accounting = SvdAccounting::amortized;
    UpdateRule optimizer = UpdateRule::adam;
    std::int64_t bytes_per_element = 4;
    std::int64_t params_total = 0;
    std::int64_t params_trainable = 0;
    PhaseCounts flops{0, 0, 0, 0};
    std::int64_t opt_recurring = 0;
    std::int64_t svd_refresh = 0;
    std::array<std::int64_t, 5> memory{0, 0, 0, 0, 0};  // bytes per MemoryGroup

    std::int64_t flops_at(Phase p) const { return at(flops, p); }
    std::int64_t forward() const { return flops_at(Phase::fwd); }
    std::int64_t backward() const { return flops_at(Phase::bwd_input) + flops_at(Phase::bwd_weight); }
    std::int64_t flops_total() const { return forward() + backward() + flops_at(Phase::opt); }
    double bwd_fwd_ratio() const { return forward() > 0 ? static_cast<double>(backward()) / static_cast<double>(forward()) : 0.0; }
    std::int64_t memory_bytes(MemoryGroup g) const { return memory[static_cast<std::size_t>(g)]; }
    std::int64_t memory_total() const {
        std::int64_t s = 0;
        for (auto v : memory) s += v;
        return s;
    }

    friend bool operator==(const ProfileRow&, const ProfileRow&) = default;
};

inline ModelGraph build_for(const RunSpec& s) {
    ModelGraph g = s.graph ? *s.graph : build_model(s.arch, s.num_classes);
    return infer_shapes(g, s.input);
}

inline ProfileRow profile_row(const RunSpec& s) {
    ModelGraph g = build_for(s);
    TunedModel t = apply_method(g, s.peft);
    OptimizerPlan plan = make_plan(t, s.optimizer);
    ProfileOptions po;
    po.convention = s.convention;
    po.svd_accounting = s.svd_accounting;
    FlopsReport fr = profile_flops(t, plan, s.input, po);
    MemoryReport mr = profile_memory(t, plan, s.input, s.bytes_per_element);
    ParamSummary ps = trainable_summary(t);

    ProfileRow r;
    r.label = s.display_label();
    r.arch = s.arch_name();
    r.method = s.peft.method;
    r.rank = s.peft.rank;
    r.alpha = s.peft.alpha;
    r.input = s.input;
    r.convention = s.convention;
    r.svd_accounting = s.svd_accounting;
    r.optimizer = plan.rule;
    r.bytes_per_element = s.bytes_per_element;
    r.params_total = ps.total;
    r.params_trainable = ps.trainable;
    r.flops = fr.totals;
    r.opt_recurring = fr.opt_recurring;
    r.svd_refresh = fr.svd_refresh;
    r.memory = mr.peak;
    return r;
}

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 1.0;
};

/// Ordinary least squares y = slope * x + intercept.
inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ValidationError("line fit needs at least two points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0) throw ValidationError("line fit needs distinct x values");
    LineFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = syy == 0 ? 1.0 : (sxy * sxy) / (sxx * syy);
    return f;
}

struct Report {
    std::string command;
    std::vector<ProfileRow> rows;
    std::optional<double> memory_budget_bytes;  // plan only
    std::optional<double> flops_budget;

    const ProfileRow* baseline() const {
        if (command != "compare") return nullptr;
        for (const auto& r : rows)
            if (r.method == Method::fft) return &r;
        return nullptr;
    }
    LineFit flops_fit() const {
        std::vector<double> x, y;
        for (const auto& r : rows) x.push_back(static_cast<double>(r.rank)), y.push_back(static_cast<double>(r.flops_total()));
        return fit_line(x, y);
    }
    LineFit memory_fit() const {
        std::vector<double> x, y;
        for (const auto& r : rows) x.push_back(static_cast<double>(r.rank)), y.push_back(static_cast<double>(r.memory_total()));
        return fit_line(x, y);
    }

    friend bool operator==(const Report&, const Report&) = default;
};

inline double percent_delta(double value, double base) { return base != 0 ? 100.0 * (value - base) / base : 0.0; }

inline Report cmd_profile(const RunSpec& s) { return {"profile", {profile_row(s)}, std::nullopt, std::nullopt}; }

/// Rows for every spec plus an fft row (added first when missing); all specs
/// must share one architecture and input.
inline Report cmd_compare(std::vector<RunSpec> specs) {
    if (specs.empty()) throw ValidationError("compare needs at least one run");
    for (const auto& s : specs) {
        if (s.arch_name() != specs.front().arch_name())
            throw ValidationError("compare needs a single architecture, got '" + specs.front().arch_name() + "' and '" + s.arch_name() + "'");
        if (!(s.input == specs.front().input)) throw ValidationError("compare needs a single input shape");
    }
    if (std::none_of(specs.begin(), specs.end(), [](const RunSpec& s) { return s.peft.method == Method::fft; })) {
        RunSpec f = specs.front();
        f.peft = PeftConfig{};
        f.optimizer.reset();
        f.label.clear();
        specs.insert(specs.begin(), f);
    }
    Report r{"compare", {}, std::nullopt, std::nullopt};
    for (const auto& s : specs) r.rows.push_back(profile_row(s));
    return r;
}

inline Report cmd_sweep(const RunSpec& s, const std::vector<std::int64_t>& ranks) {
    if (!(s.peft.method == Method::lora || s.peft.method == Method::dora || s.peft.method == Method::galore))
        throw ValidationError("sweep needs a rank-dependent method (lora, dora, galore)");
    if (ranks.size() < 2) throw ValidationError("sweep needs at least two ranks");
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        if (ranks[i] < 1) throw ValidationError("rank must be >= 1, got " + std::to_string(ranks[i]));
        if (i > 0 && ranks[i] <= ranks[i - 1]) throw ValidationError("sweep ranks must be strictly ascending");
    }
    Report r{"sweep", {}, std::nullopt, std::nullopt};
    for (auto rank : ranks) {
        RunSpec x = s;
        x.peft.rank = rank;
        x.label = std::string(to_string(s.peft.method)) + "@r" + std::to_string(rank);
        r.rows.push_back(profile_row(x));
    }
    return r;
}

/// Entries fitting both budgets, by total FLOPs, ties broken by memory total.
inline Report cmd_plan(const std::vector<RunSpec>& grid, double memory_budget_bytes, double flops_budget) {
    if (!(memory_budget_bytes > 0) || !(flops_budget > 0)) throw ValidationError("plan budgets must be > 0");
    Report r{"plan", {}, memory_budget_bytes, flops_budget};
    for (const auto& s : grid) {
        ProfileRow row = profile_row(s);
        if (static_cast<double>(row.memory_total()) <= memory_budget_bytes && static_cast<double>(row.flops_total()) <= flops_budget)
            r.rows.push_back(std::move(row));
    }
    std::stable_sort(r.rows.begin(), r.rows.end(), [](const ProfileRow& a, const ProfileRow& b) {
        if (a.flops_total() != b.flops_total()) return a.flops_total() < b.flops_total();
        return a.memory_total() < b.memory_total();
    });
    return r;
}

/// The five methods on the run's architecture with its rank and settings.
inline std::vector<RunSpec> method_grid(const RunSpec& s) {
    std::vector<RunSpec> grid;
    for (Method m : kAllMethods) {
        RunSpec x = s;
        x.peft.method = m;
        x.optimizer.reset();
        x.label.clear();
        grid.push_back(x);
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

inline json row_to_json(const ProfileRow& r) {
    json mem = json::object();
    for (MemoryGroup g : kAllMemoryGroups) mem[std::string(to_string(g))] = r.memory_bytes(g);
    mem["total"] = r.memory_total();
    return {{"label", r.label},
            {"arch", r.arch},
            {"method", to_string(r.method)},
            {"rank", r.rank},
            {"alpha", r.alpha},
            {"input", shape_to_json(r.input)},
            {"input_grad", to_string(r.convention)},
            {"svd_accounting", to_string(r.svd_accounting)},
            {"optimizer", to_string(r.optimizer)},
            {"bytes_per_element", r.bytes_per_element},
            {"params", {{"total", r.params_total}, {"trainable", r.params_trainable}}},
            {"flops",
             {{"fwd", r.forward()},
              {"bwd_input", r.flops_at(Phase::bwd_input)},
              {"bwd_weight", r.flops_at(Phase::bwd_weight)},
              {"opt", r.flops_at(Phase::opt)},
              {"opt_recurring", r.opt_recurring},
              {"svd_refresh", r.svd_refresh},
              {"backward", r.backward()},
              {"total", r.flops_total()},
              {"bwd_fwd_ratio", r.bwd_fwd_ratio()}}},
            {"memory_bytes", mem}};
}

inline ProfileRow row_from_json(const json& j) {
    ProfileRow r;
    r.label = j.at("label").get<std::string>();
    r.arch = j.at("arch").get<std::string>();
    r.method = parse_method(j.at("method").get<std::string>());
    r.rank = j.at("rank").get<std::int64_t>();
    r.alpha = j.at("alpha").get<double>();
    r.input = shape_from_json(j.at("input"));
    r.convention = parse_enum_or_throw(j.at("input_grad").get<std::string>(), kAllConventions, "input_grad convention");
    r.svd_accounting = parse_enum_or_throw(j.at("svd_accounting").get<std::string>(), kAllSvdAccountings, "svd accounting");
    r.optimizer = parse_enum_or_throw(j.at("optimizer").get<std::string>(), kAllUpdateRules, "optimizer");
    r.bytes_per_element = j.at("bytes_per_element").get<std::int64_t>();
    r.params_total = j.at("params").at("total").get<std::int64_t>();
    r.params_trainable = j.at("params").at("trainable").get<std::int64_t>();
    const json& f = j.at("flops");
    r.flops = {f.at("fwd").get<std::int64_t>(), f.at("bwd_input").get<std::int64_t>(), f.at("bwd_weight").get<std::int64_t>(),
               f.at("opt").get<std::int64_t>()};
    r.opt_recurring = f.at("opt_recurring").get<std::int64_t>();
    r.svd_refresh = f.at("svd_refresh").get<std::int64_t>();
    for (MemoryGroup g : kAllMemoryGroups)
        r.memory[static_cast<std::size_t>(g)] = j.at("memory_bytes").at(std::string(to_string(g))).get<std::int64_t>();
    return r;
}

inline json fit_to_json(const LineFit& f) { return {{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}}; }

inline json report_to_json(const Report& rep) {
    json rows = json::array();
    const ProfileRow* base = rep.baseline();
    for (const auto& r : rep.rows) {
        json jr = row_to_json(r);
        if (base)
            jr["delta_vs_fft_pct"] = {
                {"flops_total", percent_delta(static_cast<double>(r.flops_total()), static_cast<double>(base->flops_total()))},
                {"backward", percent_delta(static_cast<double>(r.backward()), static_cast<double>(base->backward()))},
                {"memory_total", percent_delta(static_cast<double>(r.memory_total()), static_cast<double>(base->memory_total()))}};
        rows.push_back(jr);
    }
    json j = {{"schema_version", kReportSchemaVersion}, {"command", rep.command}, {"rows", rows}};
    if (rep.command == "sweep" && rep.rows.size() >= 2)
        j["fit"] = {{"flops_total", fit_to_json(rep.flops_fit())}, {"memory_total", fit_to_json(rep.memory_fit())}};
    if (rep.memory_budget_bytes || rep.flops_budget) {
        j["budgets"] = json::object();
        if (rep.memory_budget_bytes) j["budgets"]["memory_bytes"] = *rep.memory_budget_bytes;
        if (rep.flops_budget) j["budgets"]["flops"] = *rep.flops_budget;
    }
    return j;
}

/// Inverse of report_to_json; derived fields (deltas, fits) are recomputed, not read.
inline Report report_from_json(const json& j) {
    try {
        if (j.at("schema_version").get<int>() != kReportSchemaVersion)
            throw ValidationError("unsupported report schema_version " + j.at("schema_version").dump());
        Report r;
        r.command = j.at("command").get<std::string>();
        for (const auto& row : j.at("rows")) r.rows.push_back(row_from_json(row));
        if (j.contains("budgets")) {
            const json& b = j.at("budgets");
            if (b.contains("memory_bytes")) r.memory_budget_bytes = b.at("memory_bytes").get<double>();
            if (b.contains("flops")) r.flops_budget = b.at("flops").get<double>();
        }
        return r;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed report: ") + e.what());
    }
}

namespace detail {

inline std::string full_precision(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += (c == '"') ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

}  // namespace detail

inline std::string report_to_csv(const Report& rep) {
    const ProfileRow* base = rep.baseline();
    std::ostringstream os;
    os << "label,arch,method,rank,alpha,input,input_grad,svd_accounting,optimizer,bytes_per_element,params_total,params_trainable,"
          "flops_fwd,flops_bwd_input,flops_bwd_weight,flops_opt,flops_backward,flops_total,bwd_fwd_ratio";
    for (MemoryGroup g : kAllMemoryGroups) os << ",mem_" << to_string(g);
    os << ",mem_total";
    if (base) os << ",flops_total_delta_pct,backward_delta_pct,mem_total_delta_pct";
    os << "\n";
    for (const auto& r : rep.rows) {
        os << detail::csv_field(r.label) << ',' << detail::csv_field(r.arch) << ',' << to_string(r.method) << ',' << r.rank << ','
           << detail::full_precision(r.alpha) << ',' << r.input.n << 'x' << r.input.c << 'x' << r.input.h << 'x' << r.input.w << ','
           << to_string(r.convention) << ',' << to_string(r.svd_accounting) << ',' << to_string(r.optimizer) << ','
           << r.bytes_per_element << ',' << r.params_total << ',' << r.params_trainable << ',' << r.forward() << ','
           << r.flops_at(Phase::bwd_input) << ',' << r.flops_at(Phase::bwd_weight) << ',' << r.flops_at(Phase::opt) << ','
           << r.backward() << ',' << r.flops_total() << ',' << detail::full_precision(r.bwd_fwd_ratio());
        for (MemoryGroup g : kAllMemoryGroups) os << ',' << r.memory_bytes(g);
        os << ',' << r.memory_total();
        if (base)
            os << ',' << detail::full_precision(percent_delta(static_cast<double>(r.flops_total()), static_cast<double>(base->flops_total())))
               << ',' << detail::full_precision(percent_delta(static_cast<double>(r.backward()), static_cast<double>(base->backward())))
               << ','
               << detail::full_precision(percent_delta(static_cast<double>(r.memory_total()), static_cast<double>(base->memory_total())));
        os << "\n";
    }
    return os.str();
}

inline std::string report_to_table(const Report& rep) {
    const ProfileRow* base = rep.baseline();
    std::vector<std::string> head = {"run", "fwd", "bwd_input", "bwd_weight", "opt", "total FLOPs", "bwd/fwd"};
    for (MemoryGroup g : kAllMemoryGroups) head.emplace_back(std::string(to_string(g)) + " B");
    head.emplace_back("total B");
    if (base) head.insert(head.end(), {"dFLOPs %", "dMem %"});
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rep.rows) {
        std::vector<std::string> c = {r.label,
                                      std::to_string(r.forward()),
                                      std::to_string(r.flops_at(Phase::bwd_input)),
                                      std::to_string(r.flops_at(Phase::bwd_weight)),
                                      std::to_string(r.flops_at(Phase::opt)),
                                      std::to_string(r.flops_total()),
                                      detail::fixed(r.bwd_fwd_ratio(), 3)};
        for (MemoryGroup g : kAllMemoryGroups) c.push_back(std::to_string(r.memory_bytes(g)));
        c.push_back(std::to_string(r.memory_total()));
        if (base) {
            c.push_back(detail::fixed(percent_delta(static_cast<double>(r.flops_total()), static_cast<double>(base->flops_total())), 1));
            c.push_back(detail::fixed(percent_delta(static_cast<double>(r.memory_total()), static_cast<double>(base->memory_total())), 1));
        }
        cells.push_back(std::move(c));
    }
    std::vector<std::size_t> width(head.size());
    for (std::size_t k = 0; k < head.size(); ++k) {
        width[k] = head[k].size();
        for (const auto& c : cells) width[k] = std::max(width[k], c[k].size());
    }
    std::ostringstream os;
    if (!rep.rows.empty()) {
        const auto& r0 = rep.rows.front();
        os << rep.command << ": " << r0.arch << ", input " << to_string(r0.input) << ", input_grad " << to_string(r0.convention) << ", "
           << r0.bytes_per_element << " B/element\n";
    } else {
        os << rep.command << ": no rows\n";
    }
    auto line = [&](const std::vector<std::string>& c) {
        for (std::size_t k = 0; k < c.size(); ++k) {
            if (k == 0) os << std::left << std::setw(static_cast<int>(width[k])) << c[k];
            else os << "  " << std::right << std::setw(static_cast<int>(width[k])) << c[k];
        }
        os << "\n";
    };
    line(head);
    for (const auto& c : cells) line(c);
    if (rep.command == "sweep" && rep.rows.size() >= 2) {
        auto ff = rep.flops_fit(), mf = rep.memory_fit();
        os << "slope per rank: FLOPs " << detail::fixed(ff.slope, 1) << " (R2 " << detail::fixed(ff.r2, 6) << "), memory "
           << detail::fixed(mf.slope, 1) << " B (R2 " << detail::fixed(mf.r2, 6) << ")\n";
    }
    if (rep.memory_budget_bytes || rep.flops_budget)
        os << "budgets: memory " << detail::full_precision(rep.memory_budget_bytes.value_or(0)) << " B, FLOPs "
           << detail::full_precision(rep.flops_budget.value_or(0)) << "\n";
    return os.str();
}

inline std::string emit(const Report& rep, OutputFormat f) {
    switch (f) {
        case OutputFormat::json: return report_to_json(rep).dump(2) + "\n";
        case OutputFormat::csv: return report_to_csv(rep);
        case OutputFormat::table: return report_to_table(rep);
    }
    return {};
}

inline std::string emit(const VerifySummary& v, OutputFormat f) {
    switch (f) {
        case OutputFormat::json: {
            json suites = json::array();
            for (const auto& s : v.suites)
                suites.push_back({{"name", s.name}, {"passed", s.passed}, {"checks", s.checks}, {"detail", s.detail}});
            return json{{"schema_version", kReportSchemaVersion}, {"command", "verify"}, {"passed", v.passed()}, {"suites", suites}}.dump(2) +
                   "\n";
        }
        case OutputFormat::csv: {
            std::ostringstream os;
            os << "suite,passed,checks,detail\n";
            for (const auto& s : v.suites)
                os << s.name << ',' << (s.passed ? "true" : "false") << ',' << s.checks << ',' << detail::csv_field(s.detail) << "\n";
            return os.str();
        }
        case OutputFormat::table: {
            std::ostringstream os;
            for (const auto& s : v.suites) {
                os << (s.passed ? "PASS " : "FAIL ") << std::left << std::setw(22) << s.name << s.checks << " checks";
                if (!s.passed) os << "  " << s.detail;
                os << "\n";
            }
            os << (v.passed() ? "all suites passed" : "verification failed") << "\n";
            return os.str();
        }
    }
    return {};
}

}  // namespace peftprof

#endif  // PEFTPROF_REPORT_HPP

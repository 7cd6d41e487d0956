#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peftprof/peftprof.hpp"

namespace {

using namespace peftprof;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitVerifyFailed = 3;

struct CommonFlags {
    std::string spec_path;
    std::string graph_path;
    std::string arch;
    std::string method;
    std::optional<std::int64_t> rank;
    std::optional<double> alpha;
    std::string input;
    std::optional<std::int64_t> num_classes;
    std::string optimizer;
    std::string format;
    std::string input_grad;
    std::string svd_accounting;
    std::optional<std::int64_t> bytes_per_element;
    std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--spec", f.spec_path, "Run-spec JSON document (flags override its values)");
    cmd->add_option("--graph", f.graph_path, "Custom model graph JSON instead of --arch");
    cmd->add_option("--arch", f.arch, "mobilenet_v2 | mobilenet_v3_large | resnet18");
    cmd->add_option("--method", f.method, "fft | bnh | lora | dora | galore");
    cmd->add_option("--rank", f.rank, "Adapter / projection rank r");
    cmd->add_option("--alpha", f.alpha, "LoRA/DoRA alpha");
    cmd->add_option("--input", f.input, "Input dims HxW or NxCxHxW");
    cmd->add_option("--num-classes", f.num_classes, "Classifier width");
    cmd->add_option("--optimizer", f.optimizer, "sgd_momentum | adam | galore_adam");
    cmd->add_option("--format", f.format, "json | csv | table");
    cmd->add_option("--input-grad", f.input_grad, "Counting convention: paper | exact");
    cmd->add_option("--svd-accounting", f.svd_accounting, "GaLore SVD charge: amortized | first_step");
    cmd->add_option("--bytes-per-element", f.bytes_per_element, "Element width for memory reports");
    cmd->add_option("--out", f.out, "Write the report to this file instead of stdout");
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void apply_flags(const CommonFlags& f, RunSpec& s) {
    if (!f.graph_path.empty()) s.graph = graph_from_json(json::parse(read_file(f.graph_path)));
    if (!f.arch.empty()) {
        parse_arch(f.arch);
        s.arch = f.arch;
        s.graph.reset();
    }
    if (!f.method.empty()) s.peft.method = parse_enum_or_throw(f.method, kAllMethods, "method");
    if (f.rank) s.peft.rank = *f.rank;
    if (f.alpha) s.peft.alpha = *f.alpha;
    if (!f.input.empty()) s.input = parse_input_dims(f.input, s.input);
    if (f.num_classes) {
        if (*f.num_classes < 1) throw ValidationError("num_classes must be >= 1");
        s.num_classes = *f.num_classes;
    }
    if (!f.optimizer.empty()) s.optimizer = parse_enum_or_throw(f.optimizer, kAllUpdateRules, "optimizer");
    if (!f.format.empty()) s.format = parse_enum_or_throw(f.format, kAllOutputFormats, "format");
    if (!f.input_grad.empty()) s.convention = parse_enum_or_throw(f.input_grad, kAllConventions, "input_grad convention");
    if (!f.svd_accounting.empty()) s.svd_accounting = parse_enum_or_throw(f.svd_accounting, kAllSvdAccountings, "svd accounting");
    if (f.bytes_per_element) {
        if (*f.bytes_per_element < 1) throw ValidationError("bytes per element must be >= 1");
        s.bytes_per_element = *f.bytes_per_element;
    }
    s.peft.check();
}

RunDocument load_document(const CommonFlags& f) {
    RunDocument d = f.spec_path.empty() ? RunDocument{} : parse_run_document(read_file(f.spec_path));
    apply_flags(f, d.base);
    for (auto& r : d.runs) apply_flags(f, r);
    return d;
}

void write_output(const CommonFlags& f, const std::string& text) {
    if (f.out.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(f.out, std::ios::binary);
    if (!out) throw UsageError("cannot write '" + f.out + "'");
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Phase-resolved FLOPs and peak-memory profiler for parameter-efficient fine-tuning of CNNs"};
    app.require_subcommand(1);

    CommonFlags profile_f, compare_f, sweep_f, plan_f;
    std::string dump_tuned;
    auto* profile = app.add_subcommand("profile", "FLOPs per phase and peak memory per group for one training step");
    add_common(profile, profile_f);
    profile->add_option("--dump-tuned", dump_tuned, "Also write the tuned model (graph + adapters) as JSON");

    std::vector<std::string> methods;
    auto* compare = app.add_subcommand("compare", "Methods side by side with deltas against full fine-tuning");
    add_common(compare, compare_f);
    compare->add_option("--methods", methods, "Methods to compare (default: all)")->delimiter(',');

    std::vector<std::int64_t> ranks;
    auto* sweep = app.add_subcommand("sweep", "Totals over ranks with least-squares slopes");
    add_common(sweep, sweep_f);
    sweep->add_option("--ranks", ranks, "Ascending ranks (default 1,2,4,8,16)")->delimiter(',');

    std::optional<double> memory_budget, flops_budget;
    auto* plan = app.add_subcommand("plan", "Configurations that fit the budgets, cheapest FLOPs first");
    add_common(plan, plan_f);
    plan->add_option("--memory-budget", memory_budget, "Peak memory budget in bytes");
    plan->add_option("--flops-budget", flops_budget, "Per-step FLOPs budget");

    VerifyOptions vopt;
    std::string verify_format = "table", verify_out;
    auto* verify = app.add_subcommand("verify", "Run the oracle suites on random toy graphs");
    verify->add_option("--graphs", vopt.graphs, "Random toy graphs per suite");
    verify->add_option("--seed", vopt.seed, "Seed of the first toy graph");
    verify->add_option("--fd-eps", vopt.fd_eps, "Central-difference step of the gradient check");
    verify->add_option("--format", verify_format, "json | csv | table");
    verify->add_option("--out", verify_out, "Write the summary to this file instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (profile->parsed()) {
            RunDocument d = load_document(profile_f);
            Report r = cmd_profile(d.base);
            write_output(profile_f, emit(r, d.base.format));
            if (!dump_tuned.empty()) {
                std::ofstream out(dump_tuned, std::ios::binary);
                if (!out) throw UsageError("cannot write '" + dump_tuned + "'");
                out << tuned_to_json(apply_method(build_for(d.base), d.base.peft)).dump(2) << "\n";
            }
        } else if (compare->parsed()) {
            RunDocument d = load_document(compare_f);
            std::vector<RunSpec> specs = d.runs;
            if (specs.empty() || !methods.empty()) {
                specs.clear();
                if (methods.empty())
                    for (Method m : kAllMethods) methods.emplace_back(to_string(m));
                for (const auto& m : methods) {
                    RunSpec s = d.base;
                    s.peft.method = parse_enum_or_throw(m, kAllMethods, "method");
                    specs.push_back(s);
                }
            }
            write_output(compare_f, emit(cmd_compare(specs), d.base.format));
        } else if (sweep->parsed()) {
            RunDocument d = load_document(sweep_f);
            if (ranks.empty()) ranks = d.ranks.empty() ? std::vector<std::int64_t>{1, 2, 4, 8, 16} : d.ranks;
            write_output(sweep_f, emit(cmd_sweep(d.base, ranks), d.base.format));
        } else if (plan->parsed()) {
            RunDocument d = load_document(plan_f);
            if (!memory_budget) memory_budget = d.memory_budget_bytes;
            if (!flops_budget) flops_budget = d.flops_budget;
            if (!memory_budget || !flops_budget) throw UsageError("plan needs --memory-budget and --flops-budget");
            std::vector<RunSpec> grid = d.runs.empty() ? method_grid(d.base) : d.runs;
            write_output(plan_f, emit(cmd_plan(grid, *memory_budget, *flops_budget), d.base.format));
        } else if (verify->parsed()) {
            const auto fmt = parse_enum_or_throw(verify_format, kAllOutputFormats, "format");
            if (vopt.graphs < 1) throw ValidationError("--graphs must be >= 1");
            if (!(vopt.fd_eps > 0.0)) throw ValidationError("--fd-eps must be > 0");
            VerifySummary v = run_verify(vopt);
            CommonFlags f;
            f.out = verify_out;
            write_output(f, emit(v, fmt));
            return v.passed() ? kExitOk : kExitVerifyFailed;
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitOk;
}

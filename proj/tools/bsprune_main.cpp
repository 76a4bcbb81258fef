#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "bsprune/builders.hpp"
#include "bsprune/checkpoint.hpp"
#include "bsprune/costing.hpp"
#include "bsprune/decomposition.hpp"
#include "bsprune/error.hpp"
#include "bsprune/pipeline.hpp"
#include "bsprune/pruner.hpp"

namespace {

using namespace bsprune;

ActShape parse_extent(const std::string& s) {
    int h = 0, w = 0, c = 0;
    if (std::sscanf(s.c_str(), "%dx%dx%d", &h, &w, &c) != 3 || h < 1 || w < 1 || c < 1)
        throw Error::config("--input expects HxWxC, got '" + s + "'");
    return {h, w, c};
}

ArchSpec resolve_arch(const std::string& arch, const std::string& input, int classes) {
    ArchSpec spec;
    if (is_known_template(arch)) {
        spec.template_name = arch;
        spec.input = {128, 128, 3};  // paper-scale default, overridable
        if (arch.rfind("tiny_", 0) == 0) spec.input = {16, 16, 1};
    } else {
        spec = load_arch_config(arch);
    }
    if (!input.empty()) spec.input = parse_extent(input);
    if (classes > 0) spec.num_classes = classes;
    return spec;
}

std::string human(std::int64_t v) {
    char buf[32];
    if (v >= 1000000000)
        std::snprintf(buf, sizeof buf, "%.2fG", static_cast<double>(v) / 1e9);
    else if (v >= 1000000)
        std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(v) / 1e6);
    else if (v >= 1000)
        std::snprintf(buf, sizeof buf, "%.2fk", static_cast<double>(v) / 1e3);
    else
        std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(v));
    return buf;
}

void print_stages(const RunResult& result) {
    std::printf("%s", result.report_csv.c_str());
}

int cmd_count(const std::string& arch, const std::string& input, int classes) {
    const ArchSpec spec = resolve_arch(arch, input, classes);
    Rng rng(1);
    NetGraph g = build_architecture(spec, rng);
    replace_head(g, spec.num_classes, rng);
    const CostReport rep = cost_report(g);
    std::printf("architecture: %s  input: %dx%dx%d  classes: %d\n",
                spec.template_name.empty() ? "explicit" : spec.template_name.c_str(), spec.input.h, spec.input.w,
                spec.input.c, spec.num_classes);
    std::printf("conv layers: %d\n", g.conv_layer_count());
    std::printf("params: %lld (%s)\n", static_cast<long long>(rep.total_params), human(rep.total_params).c_str());
    std::printf("flops: %lld (%s MACs)\n", static_cast<long long>(rep.total_flops), human(rep.total_flops).c_str());
    std::printf("trainable params: %lld (%s)\n", static_cast<long long>(rep.trainable_params),
                human(rep.trainable_params).c_str());
    return 0;
}

int cmd_decompose(const std::string& arch, const std::string& ckpt_out, const std::string& input, int classes,
                  std::uint64_t seed) {
    const ArchSpec spec = resolve_arch(arch, input, classes);
    Rng rng(seed);
    NetGraph g = build_architecture(spec, rng);
    replace_head(g, spec.num_classes, rng);
    const CostReport before = cost_report(g);
    decompose_all(g);
    const CostReport after = cost_report(g);
    std::printf("params before: %lld (%s)  after: %lld (%s)  growth: %.4f\n",
                static_cast<long long>(before.total_params), human(before.total_params).c_str(),
                static_cast<long long>(after.total_params), human(after.total_params).c_str(),
                static_cast<double>(after.total_params) / static_cast<double>(before.total_params));
    std::printf("trainable params: %lld (%s)\n", static_cast<long long>(after.trainable_params),
                human(after.trainable_params).c_str());
    save_checkpoint(g, ckpt_out);
    std::printf("checkpoint written to %s\n", ckpt_out.c_str());
    return 0;
}

int cmd_train(const std::string& config_path) {
    RunConfig cfg = load_run_config(config_path);
    cfg.basis_stage.remove_fraction = 0.0;  // training only
    cfg.channel_stage.remove_fraction = 0.0;
    const RunResult result = run_procedure(cfg);
    print_stages(result);
    return 0;
}

int cmd_prune(const std::string& config_path) {
    const RunConfig cfg = load_run_config(config_path);
    if (cfg.checkpoint.empty()) throw Error::config("prune needs a 'checkpoint' entry in the config");
    NetGraph g = load_checkpoint(cfg.checkpoint);
    const RunResult result = run_pruning_stages(std::move(g), cfg);
    print_stages(result);
    return 0;
}

int cmd_run(const std::string& config_path) {
    const RunConfig cfg = load_run_config(config_path);
    const RunResult result = run_procedure(cfg);
    print_stages(result);
    return 0;
}

int cmd_report(const std::string& before_path, const std::string& after_path) {
    const NetGraph before = load_checkpoint(before_path);
    const NetGraph after = load_checkpoint(after_path);
    const PruneReport rep = prune_report(before, after);
    std::printf("params: %lld -> %lld  PR %.1f%%\n", static_cast<long long>(rep.params_before),
                static_cast<long long>(rep.params_after), 100.0 * rep.param_pr);
    std::printf("flops:  %lld -> %lld  PR %.1f%%\n", static_cast<long long>(rep.flops_before),
                static_cast<long long>(rep.flops_after), 100.0 * rep.flop_pr);
    std::printf("%-28s %14s %14s %14s %14s\n", "layer", "params", "params'", "flops", "flops'");
    for (const auto& row : rep.rows) {
        if (row.params_before == 0 && row.flops_before == 0) continue;
        std::printf("%-28s %14lld %14lld %14lld %14lld\n", row.name.c_str(),
                    static_cast<long long>(row.params_before), static_cast<long long>(row.params_after),
                    static_cast<long long>(row.flops_before), static_cast<long long>(row.flops_after));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SVD basis decomposition, importance estimation, and pruning for conv nets"};
    app.require_subcommand(1);

    std::string arch, input, config_path, ckpt_out, before_path, after_path;
    int classes = 10;
    std::uint64_t seed = 1;

    auto* count = app.add_subcommand("count", "parameter/FLOP accounting for an architecture");
    count->add_option("arch", arch, "template name or architecture config path")->required();
    count->add_option("--input", input, "input extent HxWxC");
    count->add_option("--classes", classes, "classifier classes");

    auto* decompose = app.add_subcommand("decompose", "decompose every conv layer and write a checkpoint");
    decompose->add_option("arch", arch, "template name or architecture config path")->required();
    decompose->add_option("ckpt", ckpt_out, "output checkpoint path")->required();
    decompose->add_option("--input", input, "input extent HxWxC");
    decompose->add_option("--classes", classes, "classifier classes");
    decompose->add_option("--seed", seed, "weight init seed");

    auto* train = app.add_subcommand("train", "steps 1-3: head replacement, decomposition, training");
    train->add_option("config", config_path, "run config path")->required();

    auto* prune = app.add_subcommand("prune", "steps 4-5 on a checkpoint named in the config");
    prune->add_option("config", config_path, "run config path")->required();

    auto* run = app.add_subcommand("run", "the full procedure");
    run->add_option("config", config_path, "run config path")->required();

    auto* report = app.add_subcommand("report", "cost comparison between two checkpoints");
    report->add_option("before", before_path, "checkpoint before pruning")->required();
    report->add_option("after", after_path, "checkpoint after pruning")->required();

    try {
        app.parse(argc, argv);
        if (count->parsed()) return cmd_count(arch, input, classes);
        if (decompose->parsed()) return cmd_decompose(arch, ckpt_out, input, classes, seed);
        if (train->parsed()) return cmd_train(config_path);
        if (prune->parsed()) return cmd_prune(config_path);
        if (run->parsed()) return cmd_run(config_path);
        if (report->parsed()) return cmd_report(before_path, after_path);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const bsprune::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 3;
    }
    return 0;
}

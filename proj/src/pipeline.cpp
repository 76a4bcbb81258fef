#include "bsprune/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "bsprune/checkpoint.hpp"
#include "bsprune/costing.hpp"
#include "bsprune/decomposition.hpp"
#include "bsprune/error.hpp"

namespace bsprune {

namespace {

using nlohmann::json;

TrainConfig parse_train(const json& j, std::uint64_t seed) {
    TrainConfig t;
    t.epochs = j.value("epochs", 10);
    t.batch_size = j.value("batch_size", 32);
    t.lr_min = j.value("lr_min", 1e-4);
    t.lr_max = j.value("lr_max", 1e-1);
    t.momentum = j.value("momentum", 0.9);
    t.augment_shift = j.value("augment_shift", false);
    t.augment_flip = j.value("augment_flip", false);
    t.shift_fraction = j.value("shift_fraction", 0.15);
    t.dropout = j.value("dropout", 0.0);
    t.seed = seed;
    return t;
}

StageConfig parse_stage(const json& j) {
    StageConfig s;
    s.remove_fraction = j.value("remove_fraction", 0.0);
    if (s.remove_fraction < 0.0 || s.remove_fraction >= 1.0)
        throw Error::config("remove_fraction must be in [0, 1)");
    s.method = j.value("method", std::string("taylor_fo"));
    s.epochs = j.value("epochs", 10);
    s.iterations = j.value("iterations", 1);
    if (s.iterations < 1) throw Error::config("iterations must be >= 1");
    return s;
}

std::string fmt(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

struct StageContext {
    RunResult& result;
    const RunConfig& cfg;
    std::int64_t ref_params = 0;  // decomposed unpruned reference
    std::int64_t ref_flops = 0;

    void record(const std::string& stage, NetGraph& g, double accuracy) {
        StageRecord rec;
        rec.stage = stage;
        rec.accuracy = accuracy;
        rec.params = count_params(g);
        rec.flops = count_flops(g);
        if (ref_params > 0) {
            rec.param_pr = 1.0 - static_cast<double>(rec.params) / static_cast<double>(ref_params);
            rec.flop_pr = 1.0 - static_cast<double>(rec.flops) / static_cast<double>(ref_flops);
        }
        result.stages.push_back(rec);
        if (!cfg.out_dir.empty()) {
            std::filesystem::create_directories(cfg.out_dir);
            save_checkpoint(g, cfg.out_dir + "/" + stage + ".ckpt");
        }
    }
};

std::string stages_csv(const std::vector<StageRecord>& stages) {
    std::string csv = "stage, accuracy, params, flops, param_pr, flop_pr\n";
    for (const auto& s : stages)
        csv += s.stage + ", " + fmt(s.accuracy, "%.4f") + ", " + std::to_string(s.params) + ", " +
               std::to_string(s.flops) + ", " + fmt(s.param_pr) + ", " + fmt(s.flop_pr) + "\n";
    return csv;
}

ImportanceTable channel_scores(NetGraph& g, const std::string& method, const Dataset& val, int batch_size) {
    if (method == "taylor_fo") return taylor_fo_scores(g, val, batch_size, TargetKind::channel);
    if (method == "l1") return l1_scores(g);
    if (method == "hrank") return hrank_scores(g, val, batch_size);
    throw Error::config("unknown channel importance method '" + method + "'");
}

ImportanceTable basis_scores(NetGraph& g, const std::string& method, const Dataset& val, int batch_size,
                             std::uint64_t seed) {
    if (method == "taylor_fo") return taylor_fo_scores(g, val, batch_size, TargetKind::basis);
    return baseline_scores(g, method, seed);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw Error::config(std::string("run config is not valid JSON: ") + e.what());
    }
    if (j.value("format", 0) != 1) throw Error::config("run config must carry format: 1");

    RunConfig cfg;
    cfg.seed = j.value("seed", 1ull);

    if (!j.contains("arch")) throw Error::config("run config needs an arch section");
    json arch_j = j.at("arch");
    arch_j["format"] = 1;  // nested section inherits the config version
    cfg.arch = parse_arch_config(arch_j.dump());

    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        cfg.dataset.kind = d.value("kind", std::string("synthetic"));
        cfg.dataset.n = d.value("n", 1200);
        cfg.dataset.h = d.value("h", cfg.arch.input.h);
        cfg.dataset.w = d.value("w", cfg.arch.input.w);
        cfg.dataset.c = d.value("c", cfg.arch.input.c);
        cfg.dataset.classes = d.value("classes", cfg.arch.num_classes);
        cfg.dataset.noise = d.value("noise", 1.0);
        cfg.dataset.images_path = d.value("images", std::string());
        cfg.dataset.labels_path = d.value("labels", std::string());
        cfg.dataset.upsample = d.value("upsample", 1);
        cfg.dataset.limit = d.value("limit", 0);
        cfg.dataset.val_fraction = d.value("val_fraction", 0.1);
    } else {
        cfg.dataset.h = cfg.arch.input.h;
        cfg.dataset.w = cfg.arch.input.w;
        cfg.dataset.c = cfg.arch.input.c;
        cfg.dataset.classes = cfg.arch.num_classes;
    }

    cfg.train = parse_train(j.value("train", json::object()), cfg.seed);
    cfg.basis_stage = parse_stage(j.value("basis_stage", json::object()));
    cfg.channel_stage = parse_stage(j.value("channel_stage", json::object()));
    cfg.recompute_bn = j.value("recompute_bn", true);
    cfg.out_dir = j.value("out_dir", std::string());
    cfg.checkpoint = j.value("checkpoint", std::string());
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error::io("cannot open run config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

Dataset build_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
    if (cfg.kind == "synthetic")
        return synth_dataset(cfg.n, cfg.h, cfg.w, cfg.c, cfg.classes, seed, cfg.noise);
    if (cfg.kind == "mnist") {
        Dataset ds = load_mnist_idx(cfg.images_path, cfg.labels_path, cfg.upsample);
        if (cfg.limit > 0 && cfg.limit < ds.size()) {
            std::vector<int> idx(static_cast<size_t>(cfg.limit));
            std::iota(idx.begin(), idx.end(), 0);
            Dataset cut;
            cut.images = gather_images(ds, idx);
            cut.labels = gather_labels(ds, idx);
            cut.num_classes = ds.num_classes;
            return cut;
        }
        return ds;
    }
    throw Error::config("unknown dataset kind '" + cfg.kind + "'");
}

ImportanceTable half_removal_indicator(const ImportanceTable& table) {
    ImportanceTable out;
    out.method = table.method + "_half";
    out.kind = table.kind;
    for (const auto& ls : table.layers) {
        LayerScores ind;
        ind.node_id = ls.node_id;
        ind.name = ls.name;
        const size_t r = ls.normalized.size();
        const size_t keep = r - r / 2;  // ceil(r/2)
        std::vector<size_t> order(r);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t a, size_t b) { return ls.normalized[a] > ls.normalized[b]; });
        ind.raw.assign(r, 0.0);
        for (size_t i = 0; i < keep && i < r; ++i) ind.raw[order[i]] = 1.0;
        ind.normalized = ind.raw;
        out.layers.push_back(std::move(ind));
    }
    return out;
}

namespace {

// Steps 4 and 5 on a trained, decomposed graph.
void pruning_stages(NetGraph& g, StageContext& ctx, const RunConfig& cfg, const Dataset& train, const Dataset& val,
                    RunResult& result, std::string& stage_name) {
    if (cfg.basis_stage.remove_fraction > 0.0) {  // Step 4
        for (int it = 0; it < cfg.basis_stage.iterations; ++it) {
            stage_name = "basis_prune";
            ImportanceTable table = basis_scores(g, cfg.basis_stage.method, val, cfg.train.batch_size,
                                                 cfg.seed * 0x100000001b3ULL + 40 + static_cast<std::uint64_t>(it));
            result.importance_dumps.emplace_back("importance_basis_" + std::to_string(it) + ".txt",
                                                 serialize_table(table));
            const double threshold = global_threshold(table, cfg.basis_stage.remove_fraction);
            Rng prune_head_rng(cfg.seed * 0x100000001b3ULL + 50 + static_cast<std::uint64_t>(it));
            auto [pruned, mask] = basis_prune(g, table, threshold, prune_head_rng);
            mask.fraction = cfg.basis_stage.remove_fraction;
            result.mask_dumps.emplace_back("mask_basis_" + std::to_string(it) + ".txt", mask.serialize());
            g = std::move(pruned);
            if (cfg.recompute_bn) recompute_bn_stats(g, train, cfg.train.batch_size);
            ctx.record("basis_pruned", g, evaluate_accuracy(g, val, cfg.train.batch_size));

            stage_name = "basis_retrain";
            TrainConfig rc = cfg.train;
            rc.epochs = cfg.basis_stage.epochs;
            rc.seed = cfg.seed * 0x100000001b3ULL + 60 + static_cast<std::uint64_t>(it);
            train_stage(g, train, val, rc);
            ctx.record("basis_retrained", g, evaluate_accuracy(g, val, cfg.train.batch_size));
        }
    }

    if (cfg.channel_stage.remove_fraction > 0.0) {  // Step 5
        for (int it = 0; it < cfg.channel_stage.iterations; ++it) {
            stage_name = "channel_prune";
            ImportanceTable table = channel_scores(g, cfg.channel_stage.method, val, cfg.train.batch_size);
            mark_unprunable(table, g);
            result.importance_dumps.emplace_back("importance_channel_" + std::to_string(it) + ".txt",
                                                 serialize_table(table));
            const double threshold = global_threshold(table, cfg.channel_stage.remove_fraction);
            auto [pruned, mask] = double_prune(g, table, threshold);
            mask.fraction = cfg.channel_stage.remove_fraction;
            result.mask_dumps.emplace_back("mask_channel_" + std::to_string(it) + ".txt", mask.serialize());
            g = std::move(pruned);
            if (cfg.recompute_bn) recompute_bn_stats(g, train, cfg.train.batch_size);
            ctx.record("channel_pruned", g, evaluate_accuracy(g, val, cfg.train.batch_size));

            stage_name = "channel_retrain";
            TrainConfig rc = cfg.train;
            rc.epochs = cfg.channel_stage.epochs;
            rc.seed = cfg.seed * 0x100000001b3ULL + 70 + static_cast<std::uint64_t>(it);
            train_stage(g, train, val, rc);
            ctx.record("channel_retrained", g, evaluate_accuracy(g, val, cfg.train.batch_size));
        }
    }
}

}  // namespace

RunResult run_procedure(const RunConfig& cfg) {
    RunResult result;
    std::string stage_name = "setup";
    try {
        Rng arch_rng(cfg.seed * 0x100000001b3ULL + 1);
        Rng head_rng(cfg.seed * 0x100000001b3ULL + 2);

        NetGraph g = build_architecture(cfg.arch, arch_rng);
        replace_head(g, cfg.arch.num_classes, head_rng);  // Step 1

        Dataset full = build_dataset(cfg.dataset, cfg.seed);
        auto [train, val] = split_train_val(full, cfg.dataset.val_fraction, cfg.seed);

        result.baseline_params = count_params(g);
        result.baseline_flops = count_flops(g);

        StageContext ctx{result, cfg};

        stage_name = "baseline";
        ctx.record("baseline", g, evaluate_accuracy(g, val, cfg.train.batch_size));

        stage_name = "decompose";
        decompose_all(g);  // Step 2

        stage_name = "train";
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed * 0x100000001b3ULL + 3;
        train_stage(g, train, val, tc);  // Step 3
        ctx.ref_params = count_params(g);
        ctx.ref_flops = count_flops(g);
        ctx.record("trained", g, evaluate_accuracy(g, val, cfg.train.batch_size));

        pruning_stages(g, ctx, cfg, train, val, result, stage_name);

        result.report_csv = stages_csv(result.stages);
        result.final_graph = std::move(g);
        if (!cfg.out_dir.empty()) emit_report(result, cfg, cfg.out_dir);
        return result;
    } catch (const Error& e) {
        throw Error(e.kind(), "stage '" + stage_name + "': " + e.what());
    }
}

RunResult run_pruning_stages(NetGraph g, const RunConfig& cfg) {
    RunResult result;
    std::string stage_name = "setup";
    try {
        Dataset full = build_dataset(cfg.dataset, cfg.seed);
        auto [train, val] = split_train_val(full, cfg.dataset.val_fraction, cfg.seed);

        StageContext ctx{result, cfg};
        ctx.ref_params = count_params(g);
        ctx.ref_flops = count_flops(g);
        result.baseline_params = ctx.ref_params;
        result.baseline_flops = ctx.ref_flops;

        stage_name = "trained";
        ctx.record("trained", g, evaluate_accuracy(g, val, cfg.train.batch_size));

        pruning_stages(g, ctx, cfg, train, val, result, stage_name);

        result.report_csv = stages_csv(result.stages);
        result.final_graph = std::move(g);
        if (!cfg.out_dir.empty()) emit_report(result, cfg, cfg.out_dir);
        return result;
    } catch (const Error& e) {
        throw Error(e.kind(), "stage '" + stage_name + "': " + e.what());
    }
}

void emit_report(const RunResult& result, const RunConfig& cfg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const auto write_file = [&dir](const std::string& name, const std::string& contents) {
        std::ofstream f(dir + "/" + name, std::ios::trunc);
        if (!f) throw Error::io("cannot write report file '" + dir + "/" + name + "'");
        f << contents;
    };

    write_file("report.csv", result.report_csv);
    for (const auto& [name, contents] : result.importance_dumps) write_file(name, contents);
    for (const auto& [name, contents] : result.mask_dumps) write_file(name, contents);

    json echo;
    echo["format"] = 1;
    echo["seed"] = cfg.seed;
    echo["arch"]["template"] = cfg.arch.template_name;
    echo["arch"]["input"] = {cfg.arch.input.h, cfg.arch.input.w, cfg.arch.input.c};
    echo["arch"]["num_classes"] = cfg.arch.num_classes;
    echo["dataset"]["kind"] = cfg.dataset.kind;
    echo["dataset"]["n"] = cfg.dataset.n;
    echo["dataset"]["noise"] = cfg.dataset.noise;
    echo["dataset"]["val_fraction"] = cfg.dataset.val_fraction;
    echo["train"]["epochs"] = cfg.train.epochs;
    echo["train"]["batch_size"] = cfg.train.batch_size;
    echo["train"]["lr_min"] = cfg.train.lr_min;
    echo["train"]["lr_max"] = cfg.train.lr_max;
    echo["train"]["momentum"] = cfg.train.momentum;
    echo["basis_stage"]["remove_fraction"] = cfg.basis_stage.remove_fraction;
    echo["basis_stage"]["method"] = cfg.basis_stage.method;
    echo["basis_stage"]["epochs"] = cfg.basis_stage.epochs;
    echo["basis_stage"]["iterations"] = cfg.basis_stage.iterations;
    echo["channel_stage"]["remove_fraction"] = cfg.channel_stage.remove_fraction;
    echo["channel_stage"]["method"] = cfg.channel_stage.method;
    echo["channel_stage"]["epochs"] = cfg.channel_stage.epochs;
    echo["channel_stage"]["iterations"] = cfg.channel_stage.iterations;
    echo["recompute_bn"] = cfg.recompute_bn;
    echo["baseline_params"] = result.baseline_params;
    echo["baseline_flops"] = result.baseline_flops;
    write_file("config_echo.json", echo.dump(2) + "\n");
}

AblationResult run_basis_ablation(const RunConfig& base, const std::vector<std::uint64_t>& seeds) {
    AblationResult res;
    res.methods = {"taylor_fo", "singular", "random", "reverse"};

    for (std::uint64_t seed : seeds) {
        RunConfig cfg = base;
        cfg.seed = seed;
        cfg.out_dir.clear();

        Rng arch_rng(seed * 0x100000001b3ULL + 1);
        Rng head_rng(seed * 0x100000001b3ULL + 2);
        NetGraph g = build_architecture(cfg.arch, arch_rng);
        replace_head(g, cfg.arch.num_classes, head_rng);
        decompose_all(g);

        Dataset full = build_dataset(cfg.dataset, seed);
        auto [train, val] = split_train_val(full, cfg.dataset.val_fraction, seed);

        TrainConfig tc = cfg.train;
        tc.seed = seed * 0x100000001b3ULL + 3;
        train_stage(g, train, val, tc);

        for (const auto& method : res.methods) {
            NetGraph copy = g;
            ImportanceTable table = basis_scores(copy, method, val, cfg.train.batch_size, seed * 977 + 5);
            const ImportanceTable indicator = half_removal_indicator(table);
            Rng prune_rng(seed * 977 + 7);
            auto [pruned, mask] = basis_prune(copy, indicator, 0.5, prune_rng);
            if (cfg.recompute_bn) recompute_bn_stats(pruned, train, cfg.train.batch_size);
            res.per_seed_accuracy[method].push_back(evaluate_accuracy(pruned, val, cfg.train.batch_size));
        }
    }

    for (const auto& method : res.methods) {
        const auto& v = res.per_seed_accuracy[method];
        res.mean_accuracy[method] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    }
    return res;
}

}  // namespace bsprune

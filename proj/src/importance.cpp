#include "bsprune/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "bsprune/error.hpp"
#include "bsprune/executor.hpp"
#include "bsprune/factorization.hpp"
#include "bsprune/matrix.hpp"
#include "bsprune/rng.hpp"

namespace bsprune {

namespace {

/// Output-prunable producers: the BasisScalingConv layers of a decomposed
/// graph, or the plain conv layers when no decomposition happened.
std::vector<int> prunable_layer_ids(const NetGraph& g) {
    std::vector<int> bs, conv;
    for (const auto& n : g.nodes) {
        if (n.kind == LayerKind::basis_scaling_conv) bs.push_back(n.id);
        if (n.kind == LayerKind::conv) conv.push_back(n.id);
    }
    return bs.empty() ? conv : bs;
}

int direct_bn_consumer(const NetGraph& g, int id) {
    for (int c : g.consumers(id))
        if (g.node(c).kind == LayerKind::bn) return c;
    return -1;
}

int out_channels(const LayerNode& n) {
    if (n.kind == LayerKind::conv) return n.weight.dim(3);
    if (n.kind == LayerKind::basis_scaling_conv) return n.weight.dim(1);
    throw Error::config("not a prunable layer kind");
}

struct BatchIter {
    const Dataset& ds;
    int batch_size;
    int pos = 0;

    bool next(Tensor& images, std::vector<int>& labels) {
        if (pos >= ds.size()) return false;
        const int end = std::min(pos + batch_size, ds.size());
        std::vector<int> idx;
        idx.reserve(static_cast<size_t>(end - pos));
        for (int i = pos; i < end; ++i) idx.push_back(i);
        images = gather_images(ds, idx);
        labels = gather_labels(ds, idx);
        pos = end;
        return true;
    }
};

}  // namespace

ImportanceTable taylor_fo_scores(NetGraph& g, const Dataset& eval, int batch_size, TargetKind kind) {
    if (eval.size() == 0) throw Error::config("taylor_fo_scores: empty evaluation set");
    if (batch_size < 1) throw Error::config("taylor_fo_scores: batch size must be positive");

    ImportanceTable table;
    table.method = "taylor_fo";
    table.kind = kind;

    struct Target {
        int layer_id;
        int bn_id;  // -1 -> activation-gradient fallback
    };
    std::vector<Target> targets;
    if (kind == TargetKind::basis) {
        for (const auto& n : g.nodes)
            if (n.kind == LayerKind::basis_scaling_conv) targets.push_back({n.id, -1});
        if (targets.empty()) throw Error::config("taylor_fo_scores: basis mode requires a decomposed graph");
    } else {
        for (int id : prunable_layer_ids(g)) targets.push_back({id, direct_bn_consumer(g, id)});
        if (targets.empty()) throw Error::config("taylor_fo_scores: no prunable layers");
    }

    std::vector<std::vector<double>> acc(targets.size());
    for (size_t t = 0; t < targets.size(); ++t) {
        const LayerNode& n = g.node(targets[t].layer_id);
        const int len = kind == TargetKind::basis ? static_cast<int>(n.scale.numel()) : out_channels(n);
        acc[t].assign(static_cast<size_t>(len), 0.0);
    }

    int batches = 0;
    BatchIter iter{eval, batch_size};
    Tensor images;
    std::vector<int> labels;
    while (iter.next(images, labels)) {
        Tape tape;
        ForwardOptions opts;
        opts.mode = ExecMode::infer;
        opts.update_running_stats = false;
        Tensor logits = forward(g, images, opts, &tape);
        const SoftmaxCeResult ce = softmax_cross_entropy(logits, labels);
        const Gradients grads = backward(g, tape, softmax_ce_backward(ce, labels));

        for (size_t t = 0; t < targets.size(); ++t) {
            const Target& tgt = targets[t];
            if (kind == TargetKind::basis) {
                const LayerNode& n = g.node(tgt.layer_id);
                const Tensor* ds = grads.find(tgt.layer_id, ParamSlot::scale);
                if (!ds) continue;  // loss does not reach this layer
                for (size_t i = 0; i < acc[t].size(); ++i) {
                    const double gs = static_cast<double>(ds->data[i]) * n.scale.data[i];
                    acc[t][i] += gs * gs;
                }
            } else if (tgt.bn_id >= 0) {
                const LayerNode& bn = g.node(tgt.bn_id);
                const Tensor* dgamma = grads.find(tgt.bn_id, ParamSlot::gamma);
                if (!dgamma) continue;
                for (size_t i = 0; i < acc[t].size(); ++i) {
                    const double gs = static_cast<double>(dgamma->data[i]) * bn.gamma.data[i];
                    acc[t][i] += gs * gs;
                }
            } else {
                auto dit = grads.node_output.find(tgt.layer_id);
                if (dit == grads.node_output.end()) continue;
                const Tensor& dy = dit->second;
                const Tensor& y = tape.out.at(tgt.layer_id);
                const int c = y.shape.back();
                std::vector<double> per_channel(static_cast<size_t>(c), 0.0);
                const std::int64_t rows = y.numel() / c;
                const float* py = y.data.data();
                const float* pd = dy.data.data();
                for (std::int64_t row = 0; row < rows; ++row, py += c, pd += c)
                    for (int j = 0; j < c; ++j) per_channel[static_cast<size_t>(j)] += static_cast<double>(pd[j]) * py[j];
                for (int j = 0; j < c; ++j) acc[t][static_cast<size_t>(j)] += per_channel[static_cast<size_t>(j)] *
                                                                              per_channel[static_cast<size_t>(j)];
            }
        }
        ++batches;
    }

    for (size_t t = 0; t < targets.size(); ++t) {
        LayerScores ls;
        ls.node_id = targets[t].layer_id;
        ls.name = g.node(targets[t].layer_id).name;
        ls.raw = acc[t];
        for (auto& v : ls.raw) v /= static_cast<double>(batches);
        table.layers.push_back(std::move(ls));
    }
    normalize_per_layer(table);
    return table;
}

ImportanceTable l1_scores(const NetGraph& g) {
    ImportanceTable table;
    table.method = "l1";
    table.kind = TargetKind::channel;
    for (int id : prunable_layer_ids(g)) {
        const LayerNode& n = g.node(id);
        LayerScores ls;
        ls.node_id = id;
        ls.name = n.name;
        const int co = out_channels(n);
        ls.raw.assign(static_cast<size_t>(co), 0.0);
        if (n.kind == LayerKind::conv) {
            const std::int64_t rows = n.weight.numel() / co;
            const float* p = n.weight.data.data();
            for (std::int64_t row = 0; row < rows; ++row, p += co)
                for (int j = 0; j < co; ++j) ls.raw[static_cast<size_t>(j)] += std::fabs(static_cast<double>(p[j]));
        } else {
            const int r = n.weight.dim(0);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < co; ++j)
                    ls.raw[static_cast<size_t>(j)] +=
                        std::fabs(static_cast<double>(n.scale.at(i)) * n.weight.at2(i, j));
        }
        table.layers.push_back(std::move(ls));
    }
    normalize_per_layer(table);
    return table;
}

ImportanceTable hrank_scores(NetGraph& g, const Dataset& eval, int batch_size) {
    if (eval.size() == 0) throw Error::config("hrank_scores: empty evaluation set");

    ImportanceTable table;
    table.method = "hrank";
    table.kind = TargetKind::channel;

    const std::vector<int> ids = prunable_layer_ids(g);
    std::vector<std::vector<double>> acc(ids.size());
    for (size_t t = 0; t < ids.size(); ++t)
        acc[t].assign(static_cast<size_t>(out_channels(g.node(ids[t]))), 0.0);

    int images_seen = 0;
    BatchIter iter{eval, batch_size};
    Tensor images;
    std::vector<int> labels;
    while (iter.next(images, labels)) {
        Tape tape;
        ForwardOptions opts;
        opts.mode = ExecMode::infer;
        opts.update_running_stats = false;
        forward(g, images, opts, &tape);

        for (size_t t = 0; t < ids.size(); ++t) {
            const Tensor& y = tape.out.at(ids[t]);
            const int b = y.dim(0), h = y.dim(1), w = y.dim(2), c = y.dim(3);
            for (int n = 0; n < b; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    Matrix map(h, w);
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < w; ++j) map.at(i, j) = y.at4(n, i, j, ch);
                    const WeightFactorization f = compact_svd(map);
                    const double cutoff = std::max(h, w) * f.sigma[0] * 1e-6;
                    int rank = 0;
                    for (double s : f.sigma)
                        if (s > cutoff && s > 0.0) ++rank;
                    acc[t][static_cast<size_t>(ch)] += rank;
                }
        }
        images_seen += images.dim(0);
    }

    for (size_t t = 0; t < ids.size(); ++t) {
        LayerScores ls;
        ls.node_id = ids[t];
        ls.name = g.node(ids[t]).name;
        ls.raw = acc[t];
        for (auto& v : ls.raw) v /= static_cast<double>(images_seen);
        table.layers.push_back(std::move(ls));
    }
    normalize_per_layer(table);
    return table;
}

ImportanceTable baseline_scores(const NetGraph& g, const std::string& method, std::uint64_t seed) {
    if (method != "singular" && method != "random" && method != "reverse")
        throw Error::config("baseline_scores: unknown method '" + method + "'");

    ImportanceTable table;
    table.method = method;
    table.kind = TargetKind::basis;
    Rng rng(seed);
    for (const auto& n : g.nodes) {
        if (n.kind != LayerKind::basis_scaling_conv) continue;
        LayerScores ls;
        ls.node_id = n.id;
        ls.name = n.name;
        const size_t r = n.sigma.size();
        ls.raw.resize(r);
        if (method == "singular") {
            ls.raw = n.sigma;
        } else if (method == "reverse") {
            const double smax = r ? *std::max_element(n.sigma.begin(), n.sigma.end()) : 0.0;
            for (size_t i = 0; i < r; ++i) ls.raw[i] = smax - n.sigma[i] + 1e-12;
        } else {
            for (size_t i = 0; i < r; ++i) ls.raw[i] = rng.uniform();
        }
        table.layers.push_back(std::move(ls));
    }
    if (table.layers.empty()) throw Error::config("baseline_scores: graph has no decomposed layers");
    normalize_per_layer(table);
    return table;
}

void normalize_per_layer(ImportanceTable& table) {
    for (auto& ls : table.layers) {
        double mx = 0.0;
        for (double v : ls.raw) {
            if (v < 0.0) throw Error::numeric("importance scores must be non-negative");
            mx = std::max(mx, v);
        }
        ls.normalized.assign(ls.raw.size(), 0.0);
        if (mx > 0.0)
            for (size_t i = 0; i < ls.raw.size(); ++i) ls.normalized[i] = ls.raw[i] / mx;
    }
}

double global_threshold(const ImportanceTable& table, double remove_fraction) {
    if (remove_fraction < 0.0 || remove_fraction >= 1.0)
        throw Error::config("remove_fraction must be in [0, 1)");
    std::vector<double> pooled;
    for (const auto& ls : table.layers) {
        if (!ls.prunable) continue;
        pooled.insert(pooled.end(), ls.normalized.begin(), ls.normalized.end());
    }
    if (pooled.empty()) throw Error::config("global_threshold: empty importance table");
    if (remove_fraction == 0.0) return -std::numeric_limits<double>::infinity();
    std::sort(pooled.begin(), pooled.end());
    const size_t m = static_cast<size_t>(remove_fraction * static_cast<double>(pooled.size()));
    return pooled[std::min(m, pooled.size() - 1)];
}

std::string serialize_table(const ImportanceTable& table) {
    std::string out = "# method=" + table.method +
                      " kind=" + (table.kind == TargetKind::basis ? std::string("basis") : std::string("channel")) +
                      "\n";
    char buf[128];
    for (const auto& ls : table.layers)
        for (size_t i = 0; i < ls.raw.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%d, %zu, %.9g, %.9g\n", ls.node_id, i, ls.raw[i], ls.normalized[i]);
            out += buf;
        }
    return out;
}

}  // namespace bsprune

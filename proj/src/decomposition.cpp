#include "bsprune/decomposition.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>

#include "bsprune/error.hpp"

namespace bsprune {

namespace {

bool already_decomposed(const NetGraph& g, int conv_id) {
    for (int c : g.consumers(conv_id)) {
        const LayerNode& n = g.node(c);
        if (n.kind == LayerKind::basis_scaling_conv && n.pair_u_id == conv_id) return true;
    }
    return false;
}

WeightFactorization factorize_conv_weight(const Tensor& w4) {
    const Matrix m = reshape_weights(w4);
    bool any = false;
    for (double v : m.data)
        if (v != 0.0) {
            any = true;
            break;
        }
    if (!any) throw Error::numeric("degenerate weight: conv kernel is identically zero");
    return compact_svd(m);
}

void splice_pair(NetGraph& g, int conv_id, const WeightFactorization& f, float s_init) {
    LayerNode& conv = g.node(conv_id);
    const int kh = conv.kh, kw = conv.kw;
    const int ci = conv.weight.dim(2), co = conv.weight.dim(3);
    const int r = f.rank_bound();

    LayerNode bs;
    bs.kind = LayerKind::basis_scaling_conv;
    bs.name = conv.name + "_bs";
    bs.inputs = {conv_id};
    bs.weight = Tensor({r, co});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < co; ++j)
            bs.weight.at2(i, j) = static_cast<float>(f.sigma[static_cast<size_t>(i)] * f.v.at(j, i));
    bs.scale = Tensor::full({r}, s_init);
    bs.scale_trainable = true;
    bs.sigma = f.sigma;
    bs.pair_u_id = conv_id;
    bs.has_bias = conv.has_bias;
    if (conv.has_bias) bs.bias = conv.bias;

    const std::vector<int> outs = g.consumers(conv_id);

    conv.name += "_u";
    conv.weight = unreshape_weights(f.u, kh, kw, ci, r);
    conv.bias = Tensor();
    conv.has_bias = false;

    const int bs_id = g.add_node(std::move(bs));
    for (int o : outs)
        for (int& in : g.node(o).inputs)
            if (in == conv_id) in = bs_id;

    LayerNode moved = std::move(g.nodes.back());
    g.nodes.pop_back();
    for (size_t i = 0; i < g.nodes.size(); ++i)
        if (g.nodes[i].id == conv_id) {
            g.nodes.insert(g.nodes.begin() + static_cast<std::ptrdiff_t>(i) + 1, std::move(moved));
            break;
        }
}

}  // namespace

int worker_thread_count() {
    if (const char* env = std::getenv("BSPRUNE_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

DecomposedPair decompose_conv(NetGraph& g, int conv_id, float s_init) {
    const LayerNode& node = g.node(conv_id);
    if (node.kind != LayerKind::conv)
        throw Error::config("decompose_conv: node '" + node.name + "' is not a conv layer");
    if (already_decomposed(g, conv_id))
        throw Error::config("decompose_conv: layer '" + node.name + "' is already decomposed");

    const WeightFactorization f = factorize_conv_weight(node.weight);
    splice_pair(g, conv_id, f, s_init);
    g.infer_shapes();

    DecomposedPair pair;
    pair.u_id = conv_id;
    for (int c : g.consumers(conv_id))
        if (g.node(c).kind == LayerKind::basis_scaling_conv) pair.bs_id = c;
    return pair;
}

void decompose_all(NetGraph& g, float s_init, int workers) {
    std::vector<int> conv_ids;
    for (const auto& n : g.nodes)
        if (n.kind == LayerKind::conv) {
            if (already_decomposed(g, n.id))
                throw Error::config("decompose_all: layer '" + n.name + "' is already decomposed");
            conv_ids.push_back(n.id);
        }

    // heaviest factorizations first, so the worker pool stays balanced
    std::stable_sort(conv_ids.begin(), conv_ids.end(), [&g](int a, int b) {
        const auto cost = [&g](int id) {
            const LayerNode& n = g.node(id);
            const std::int64_t k = static_cast<std::int64_t>(n.kh) * n.kw * n.weight.dim(2);
            const std::int64_t co = n.weight.dim(3);
            const std::int64_t small = std::min(k, co);
            return std::max(k, co) * small * small;
        };
        return cost(a) > cost(b);
    });

    std::vector<WeightFactorization> factors(conv_ids.size());
    std::vector<std::string> failures(conv_ids.size());
    std::atomic<size_t> next{0};
    if (workers <= 0) workers = worker_thread_count();
    workers = std::min<int>(workers, std::max<int>(1, static_cast<int>(conv_ids.size())));
    auto work = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= conv_ids.size()) return;
            try {
                factors[i] = factorize_conv_weight(g.node(conv_ids[i]).weight);
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(workers));
        for (int t = 0; t < workers; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    for (size_t i = 0; i < conv_ids.size(); ++i)
        if (!failures[i].empty())
            throw Error::numeric("decompose_all: layer '" + g.node(conv_ids[i]).name + "': " + failures[i]);

    for (size_t i = 0; i < conv_ids.size(); ++i) splice_pair(g, conv_ids[i], factors[i], s_init);
    g.infer_shapes();
}

LayerNode fuse_pair(const NetGraph& g, int u_id, int bs_id) {
    const LayerNode& u = g.node(u_id);
    const LayerNode& bs = g.node(bs_id);
    if (bs.kind != LayerKind::basis_scaling_conv || bs.pair_u_id != u_id)
        throw Error::config("fuse_pair: nodes " + std::to_string(u_id) + " and " + std::to_string(bs_id) +
                            " are not a decomposed pair");

    const int kh = u.kh, kw = u.kw;
    const int ci = u.weight.dim(2);
    const int r = u.weight.dim(3);
    const int co = bs.weight.dim(1);

    const Matrix umat = reshape_weights(u.weight);  // k x r
    Matrix fused(umat.rows, co);
    for (int i = 0; i < umat.rows; ++i)
        for (int l = 0; l < r; ++l) {
            const double us = umat.at(i, l) * static_cast<double>(bs.scale.at(l));
            if (us == 0.0) continue;
            for (int j = 0; j < co; ++j) fused.at(i, j) += us * static_cast<double>(bs.weight.at2(l, j));
        }

    LayerNode conv;
    conv.kind = LayerKind::conv;
    conv.name = bs.name + "_fused";
    conv.inputs = u.inputs;
    conv.kh = kh;
    conv.kw = kw;
    conv.stride = u.stride;
    conv.padding = u.padding;
    conv.weight = unreshape_weights(fused, kh, kw, ci, co);
    conv.has_bias = bs.has_bias;
    if (bs.has_bias) conv.bias = bs.bias;
    return conv;
}

std::vector<DecomposedPair> decomposed_pairs(const NetGraph& g) {
    std::vector<DecomposedPair> pairs;
    for (const auto& n : g.nodes)
        if (n.kind == LayerKind::basis_scaling_conv) pairs.push_back({n.pair_u_id, n.id});
    return pairs;
}

}  // namespace bsprune

#include "bsprune/pruner.hpp"

#include <algorithm>
#include <stdexcept>

#include "bsprune/builders.hpp"
#include "bsprune/error.hpp"

namespace bsprune {

namespace {

int keep_count(const std::vector<char>& keep) {
    int n = 0;
    for (char k : keep) n += k ? 1 : 0;
    return n;
}

Tensor slice_axis(const Tensor& t, int axis, const std::vector<char>& keep) {
    if (t.dim(axis) != static_cast<int>(keep.size()))
        throw Error::numeric("slice_axis: mask length does not match extent");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= t.dim(i);
    for (int i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);

    std::vector<int> out_shape = t.shape;
    out_shape[static_cast<size_t>(axis)] = keep_count(keep);
    Tensor out(out_shape);

    const std::int64_t n_axis = t.dim(axis);
    const float* src = t.data.data();
    float* dst = out.data.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t a = 0; a < n_axis; ++a) {
            if (!keep[static_cast<size_t>(a)]) continue;
            const float* s = src + (o * n_axis + a) * inner;
            std::copy(s, s + inner, dst);
            dst += inner;
        }
    return out;
}

std::vector<double> slice_vec(const std::vector<double>& v, const std::vector<char>& keep) {
    std::vector<double> out;
    out.reserve(v.size());
    for (size_t i = 0; i < v.size(); ++i)
        if (keep[i]) out.push_back(v[i]);
    return out;
}

bool channel_preserving(LayerKind k) {
    return k == LayerKind::bn || k == LayerKind::relu || k == LayerKind::maxpool || k == LayerKind::avgpool ||
           k == LayerKind::global_avg_pool;
}

bool all_true(const std::vector<char>& v) {
    return std::all_of(v.begin(), v.end(), [](char c) { return c != 0; });
}

// Walks upstream from an add input to the mask-owning producers and forces
// their masks all-true.
void force_branch_masks(const NetGraph& g, int id, std::unordered_map<int, std::vector<char>>& masks) {
    const LayerNode& n = g.node(id);
    if (n.is_conv_like() || n.kind == LayerKind::dense) {
        auto it = masks.find(id);
        if (it != masks.end()) std::fill(it->second.begin(), it->second.end(), 1);
        return;
    }
    if (n.kind == LayerKind::input) return;
    for (int in : n.inputs) force_branch_masks(g, in, masks);
}

}  // namespace

std::string PruneMask::serialize() const {
    std::string out = "# method=" + method + " fraction=" + std::to_string(fraction) + "\n";
    const auto emit = [&out](const char* tag, const std::vector<LayerMask>& group) {
        for (const auto& m : group) {
            out += tag;
            out += " " + std::to_string(m.node_id) + " ->";
            for (size_t i = 0; i < m.keep.size(); ++i)
                if (m.keep[i]) out += " " + std::to_string(i);
            out += "\n";
        }
    };
    emit("basis", basis);
    emit("channel", channel);
    return out;
}

std::vector<int> merge_protected_layers(const NetGraph& g) {
    std::vector<int> result;
    for (const auto& n : g.nodes) {
        if (!n.is_conv_like()) continue;
        std::vector<int> stack = {n.id};
        std::vector<int> seen;
        bool merged = false;
        while (!stack.empty() && !merged) {
            const int id = stack.back();
            stack.pop_back();
            for (int c : g.consumers(id)) {
                const LayerNode& cn = g.node(c);
                if (cn.kind == LayerKind::add) {
                    merged = true;
                    break;
                }
                if (channel_preserving(cn.kind) || cn.kind == LayerKind::concat) {
                    if (std::find(seen.begin(), seen.end(), c) == seen.end()) {
                        seen.push_back(c);
                        stack.push_back(c);
                    }
                }
            }
        }
        if (merged) result.push_back(n.id);
    }
    return result;
}

void mark_unprunable(ImportanceTable& table, const NetGraph& g) {
    const std::vector<int> prot = merge_protected_layers(g);
    for (auto& ls : table.layers)
        if (std::find(prot.begin(), prot.end(), ls.node_id) != prot.end()) ls.prunable = false;
}

std::unordered_map<int, std::vector<char>> propagate_masks(const NetGraph& g,
                                                           const std::unordered_map<int, std::vector<char>>& given) {
    std::unordered_map<int, std::vector<char>> producer = given;
    std::unordered_map<int, std::vector<char>> out;

    for (int pass = 0; pass < static_cast<int>(g.nodes.size()) + 2; ++pass) {
        out.clear();
        bool forced = false;
        for (const auto& n : g.nodes) {
            std::vector<char> m;
            switch (n.kind) {
            case LayerKind::input:
                m.assign(static_cast<size_t>(n.out_shape.c), 1);
                break;
            case LayerKind::conv:
            case LayerKind::basis_scaling_conv:
            case LayerKind::dense: {
                auto it = producer.find(n.id);
                if (it != producer.end())
                    m = it->second;
                else
                    m.assign(static_cast<size_t>(n.out_shape.c), 1);
                break;
            }
            case LayerKind::bn:
            case LayerKind::relu:
            case LayerKind::maxpool:
            case LayerKind::avgpool:
            case LayerKind::global_avg_pool:
                m = out.at(n.inputs[0]);
                break;
            case LayerKind::concat:
                for (int in : n.inputs) {
                    const auto& part = out.at(in);
                    m.insert(m.end(), part.begin(), part.end());
                }
                break;
            case LayerKind::add:
                for (int in : n.inputs)
                    if (!all_true(out.at(in))) {
                        force_branch_masks(g, in, producer);
                        forced = true;
                    }
                m.assign(static_cast<size_t>(n.out_shape.c), 1);
                break;
            }
            out[n.id] = std::move(m);
        }
        if (!forced) return out;
    }
    throw std::logic_error("propagate_masks: no fixed point (cyclic graph?)");
}

std::pair<NetGraph, PruneMask> basis_prune(const NetGraph& g, const ImportanceTable& table, double threshold,
                                           Rng& head_rng) {
    if (table.kind != TargetKind::basis) throw Error::config("basis_prune needs a basis-mode importance table");

    NetGraph out = g;
    PruneMask mask;
    mask.method = table.method;
    mask.threshold = threshold;

    const int num_classes = out.node(out.output_id).kind == LayerKind::dense
                                ? out.node(out.output_id).weight.dim(1)
                                : 0;

    std::vector<int> dead_bs;
    bool first_pair = true;
    for (const auto& n : g.nodes) {
        if (n.kind != LayerKind::basis_scaling_conv) continue;
        const LayerScores* ls = nullptr;
        for (const auto& l : table.layers)
            if (l.node_id == n.id) ls = &l;
        if (!ls) throw Error::config("basis_prune: no scores for layer '" + n.name + "'");
        if (ls->normalized.size() != n.sigma.size())
            throw Error::config("basis_prune: score length mismatch on '" + n.name + "'");

        PruneMask::LayerMask lm;
        lm.node_id = n.id;
        lm.name = n.name;
        lm.keep.resize(ls->normalized.size());
        for (size_t i = 0; i < lm.keep.size(); ++i) lm.keep[i] = ls->normalized[i] >= threshold ? 1 : 0;

        const int rp = keep_count(lm.keep);
        if (rp == 0) {
            if (first_pair)
                throw Error::numeric("model destroyed: threshold removes every basis vector of the first layer '" +
                                     n.name + "'");
            dead_bs.push_back(n.id);
        } else if (rp < static_cast<int>(lm.keep.size())) {
            LayerNode& bs = out.node(n.id);
            LayerNode& u = out.node(bs.pair_u_id);
            u.weight = slice_axis(u.weight, 3, lm.keep);
            bs.weight = slice_axis(bs.weight, 0, lm.keep);
            bs.scale = slice_axis(bs.scale, 0, lm.keep);
            bs.sigma = slice_vec(bs.sigma, lm.keep);
        }
        mask.basis.push_back(std::move(lm));
        first_pair = false;
    }

    if (!dead_bs.empty()) {
        // An emptied pair takes everything downstream with it; the head is
        // rebuilt on what survives.
        std::unordered_map<int, size_t> index;
        for (size_t i = 0; i < out.nodes.size(); ++i) index[out.nodes[i].id] = i;
        std::vector<char> dead(out.nodes.size(), 0);
        for (int id : dead_bs) {
            dead[index[id]] = 1;
            dead[index[out.node(id).pair_u_id]] = 1;
        }
        for (size_t i = 0; i < out.nodes.size(); ++i) {
            if (dead[i]) continue;
            for (int in : out.nodes[i].inputs)
                if (dead[index[in]]) {
                    dead[i] = 1;
                    break;
                }
        }
        std::vector<char> keep(out.nodes.size());
        for (size_t i = 0; i < keep.size(); ++i) keep[i] = dead[i] ? 0 : 1;
        out.retain_nodes(keep);
        if (out.last_conv_id() < 0)
            throw Error::numeric("model destroyed: pruning removed every convolutional layer");
        replace_head(out, num_classes, head_rng);
    } else {
        out.infer_shapes();
    }
    return {std::move(out), std::move(mask)};
}

std::pair<NetGraph, PruneMask> double_prune(const NetGraph& g, const ImportanceTable& table, double threshold) {
    if (table.kind != TargetKind::channel) throw Error::config("double_prune needs a channel-mode importance table");

    const std::vector<int> prot = merge_protected_layers(g);
    const auto is_protected = [&prot](int id) { return std::find(prot.begin(), prot.end(), id) != prot.end(); };

    PruneMask mask;
    mask.method = table.method;
    mask.threshold = threshold;

    std::unordered_map<int, std::vector<char>> producer_masks;
    for (const auto& ls : table.layers) {
        if (!g.has_node(ls.node_id)) throw Error::config("double_prune: stale importance table");
        const LayerNode& n = g.node(ls.node_id);
        PruneMask::LayerMask lm;
        lm.node_id = ls.node_id;
        lm.name = n.name;
        lm.keep.resize(ls.normalized.size());
        if (is_protected(ls.node_id)) {
            std::fill(lm.keep.begin(), lm.keep.end(), 1);
        } else {
            for (size_t i = 0; i < lm.keep.size(); ++i) lm.keep[i] = ls.normalized[i] >= threshold ? 1 : 0;
            if (keep_count(lm.keep) == 0) {
                // normalization pins the layer max at 1.0, so this only
                // happens for an all-zero layer; keep its first channel
                lm.keep[0] = 1;
            }
        }
        producer_masks[ls.node_id] = lm.keep;
        mask.channel.push_back(std::move(lm));
    }

    const auto node_masks = propagate_masks(g, producer_masks);
    for (const auto& lm : mask.channel)
        if (!is_protected(lm.node_id) && node_masks.count(lm.node_id) && node_masks.at(lm.node_id) != lm.keep)
            throw std::logic_error("double_prune: merge protection missed a branch feeding an add node");

    NetGraph out = g;
    for (auto& n : out.nodes) {
        switch (n.kind) {
        case LayerKind::conv: {
            const auto& in_mask = node_masks.at(n.inputs[0]);
            if (!all_true(in_mask)) n.weight = slice_axis(n.weight, 2, in_mask);
            const auto& own = node_masks.at(n.id);
            if (!all_true(own)) {
                n.weight = slice_axis(n.weight, 3, own);
                if (n.has_bias) n.bias = slice_axis(n.bias, 0, own);
            }
            break;
        }
        case LayerKind::basis_scaling_conv: {
            const auto& own = node_masks.at(n.id);
            if (!all_true(own)) {
                n.weight = slice_axis(n.weight, 1, own);
                if (n.has_bias) n.bias = slice_axis(n.bias, 0, own);
            }
            break;
        }
        case LayerKind::bn: {
            const auto& in_mask = node_masks.at(n.inputs[0]);
            if (!all_true(in_mask)) {
                n.gamma = slice_axis(n.gamma, 0, in_mask);
                n.beta = slice_axis(n.beta, 0, in_mask);
                n.running_mean = slice_axis(n.running_mean, 0, in_mask);
                n.running_var = slice_axis(n.running_var, 0, in_mask);
            }
            break;
        }
        case LayerKind::dense: {
            const auto& in_mask = node_masks.at(n.inputs[0]);
            if (!all_true(in_mask)) n.weight = slice_axis(n.weight, 0, in_mask);
            break;
        }
        default:
            break;
        }
    }
    out.infer_shapes();
    return {std::move(out), std::move(mask)};
}

PruneReport prune_report(const NetGraph& before, const NetGraph& after) {
    const CostReport cb = cost_report(before);
    const CostReport ca = cost_report(after);

    PruneReport rep;
    rep.params_before = cb.total_params;
    rep.params_after = ca.total_params;
    rep.flops_before = cb.total_flops;
    rep.flops_after = ca.total_flops;
    rep.param_pr = cb.total_params > 0 ? 1.0 - static_cast<double>(ca.total_params) / cb.total_params : 0.0;
    rep.flop_pr = cb.total_flops > 0 ? 1.0 - static_cast<double>(ca.total_flops) / cb.total_flops : 0.0;

    std::unordered_map<std::string, const LayerCost*> after_by_name;
    for (const auto& lc : ca.layers) after_by_name[lc.name] = &lc;
    for (const auto& lc : cb.layers) {
        PruneReport::Row row;
        row.name = lc.name;
        row.params_before = lc.params;
        row.flops_before = lc.flops;
        auto it = after_by_name.find(lc.name);
        if (it != after_by_name.end()) {
            row.params_after = it->second->params;
            row.flops_after = it->second->flops;
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

}  // namespace bsprune

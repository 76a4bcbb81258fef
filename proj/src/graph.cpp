#include "bsprune/graph.hpp"

#include <algorithm>
#include <unordered_map>

#include "bsprune/error.hpp"

namespace bsprune {

namespace {
const std::unordered_map<std::string, LayerKind> kKindByName = {
    {"input", LayerKind::input},
    {"conv", LayerKind::conv},
    {"basis_scaling_conv", LayerKind::basis_scaling_conv},
    {"bn", LayerKind::bn},
    {"relu", LayerKind::relu},
    {"maxpool", LayerKind::maxpool},
    {"avgpool", LayerKind::avgpool},
    {"global_avg_pool", LayerKind::global_avg_pool},
    {"add", LayerKind::add},
    {"concat", LayerKind::concat},
    {"dense", LayerKind::dense},
};
}

const char* kind_name(LayerKind k) {
    switch (k) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::basis_scaling_conv: return "basis_scaling_conv";
    case LayerKind::bn: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::add: return "add";
    case LayerKind::concat: return "concat";
    case LayerKind::dense: return "dense";
    }
    return "?";
}

LayerKind kind_from_name(const std::string& name) {
    auto it = kKindByName.find(name);
    if (it == kKindByName.end()) throw Error::config("unknown layer kind '" + name + "'");
    return it->second;
}

LayerNode& NetGraph::node(int id) {
    for (auto& n : nodes)
        if (n.id == id) return n;
    throw Error::config("no node with id " + std::to_string(id));
}

const LayerNode& NetGraph::node(int id) const {
    for (const auto& n : nodes)
        if (n.id == id) return n;
    throw Error::config("no node with id " + std::to_string(id));
}

bool NetGraph::has_node(int id) const {
    return std::any_of(nodes.begin(), nodes.end(), [id](const LayerNode& n) { return n.id == id; });
}

int NetGraph::add_node(LayerNode n) {
    int next = 0;
    for (const auto& m : nodes) next = std::max(next, m.id + 1);
    n.id = next;
    nodes.push_back(std::move(n));
    return next;
}

std::vector<int> NetGraph::consumers(int id) const {
    std::vector<int> out;
    for (const auto& n : nodes)
        for (int in : n.inputs)
            if (in == id) {
                out.push_back(n.id);
                break;
            }
    return out;
}

int NetGraph::conv_layer_count() const {
    int c = 0;
    for (const auto& n : nodes)
        if (n.kind == LayerKind::conv) ++c;
    return c;
}

int NetGraph::last_conv_id() const {
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it)
        if (it->is_conv_like()) return it->id;
    return -1;
}

void NetGraph::retain_nodes(const std::vector<char>& keep) {
    std::vector<LayerNode> kept;
    kept.reserve(nodes.size());
    for (size_t i = 0; i < nodes.size(); ++i)
        if (keep[i]) kept.push_back(std::move(nodes[i]));
    nodes = std::move(kept);
}

void NetGraph::infer_shapes() {
    std::unordered_map<int, size_t> index;
    for (size_t i = 0; i < nodes.size(); ++i) {
        if (index.count(nodes[i].id)) throw Error::config("duplicate node id " + std::to_string(nodes[i].id));
        index[nodes[i].id] = i;
    }
    if (!index.count(input_id)) throw Error::config("graph has no input node");
    if (!index.count(output_id)) throw Error::config("graph has no output node");

    std::vector<char> seen(nodes.size(), 0);
    for (size_t i = 0; i < nodes.size(); ++i) {
        LayerNode& n = nodes[i];
        const auto fail = [&](const std::string& why) {
            throw Error::config("node '" + n.name + "' (id " + std::to_string(n.id) + ", " + kind_name(n.kind) +
                                "): " + why);
        };

        std::vector<ActShape> in_shapes;
        for (int in : n.inputs) {
            auto it = index.find(in);
            if (it == index.end()) fail("references missing node " + std::to_string(in));
            if (it->second >= i) fail("inputs must precede the node (not topologically ordered)");
            in_shapes.push_back(nodes[it->second].out_shape);
        }

        switch (n.kind) {
        case LayerKind::input:
            if (n.id != input_id) fail("only the designated input node may have kind input");
            if (!n.inputs.empty()) fail("input node cannot have producers");
            if (n.out_shape.h < 1 || n.out_shape.w < 1 || n.out_shape.c < 1) fail("input extent not set");
            break;
        case LayerKind::conv: {
            if (in_shapes.size() != 1) fail("expects exactly one input");
            if (n.weight.rank() != 4) fail("missing conv weight");
            if (in_shapes[0].c != n.weight.dim(2))
                fail("input channels " + std::to_string(in_shapes[0].c) + " vs kernel channels " +
                     std::to_string(n.weight.dim(2)));
            ConvGeom g;
            try {
                g = conv_geometry(in_shapes[0].h, in_shapes[0].w, n.kh, n.kw, n.stride, n.padding);
            } catch (const Error& e) {
                fail(e.what());
            }
            n.out_shape = {g.out_h, g.out_w, n.weight.dim(3)};
            break;
        }
        case LayerKind::basis_scaling_conv: {
            if (in_shapes.size() != 1) fail("expects exactly one input");
            if (n.weight.rank() != 2) fail("missing Vbar^T weight");
            if (in_shapes[0].c != n.weight.dim(0))
                fail("input channels " + std::to_string(in_shapes[0].c) + " vs basis count " +
                     std::to_string(n.weight.dim(0)));
            if (n.scale.numel() != n.weight.dim(0)) fail("scaling vector length mismatch");
            n.out_shape = {in_shapes[0].h, in_shapes[0].w, n.weight.dim(1)};
            break;
        }
        case LayerKind::bn:
            if (in_shapes.size() != 1) fail("expects exactly one input");
            if (n.gamma.numel() != in_shapes[0].c)
                fail("gamma length " + std::to_string(n.gamma.numel()) + " vs channels " +
                     std::to_string(in_shapes[0].c));
            n.out_shape = in_shapes[0];
            break;
        case LayerKind::relu:
            if (in_shapes.size() != 1) fail("expects exactly one input");
            n.out_shape = in_shapes[0];
            break;
        case LayerKind::maxpool:
        case LayerKind::avgpool: {
            if (in_shapes.size() != 1) fail("expects exactly one input");
            ConvGeom g;
            try {
                g = conv_geometry(in_shapes[0].h, in_shapes[0].w, n.kh, n.kw, n.stride, n.padding);
            } catch (const Error& e) {
                fail(e.what());
            }
            n.out_shape = {g.out_h, g.out_w, in_shapes[0].c};
            break;
        }
        case LayerKind::global_avg_pool:
            if (in_shapes.size() != 1) fail("expects exactly one input");
            n.out_shape = {1, 1, in_shapes[0].c};
            break;
        case LayerKind::add: {
            if (in_shapes.size() < 2) fail("expects at least two inputs");
            for (const auto& s : in_shapes)
                if (!(s == in_shapes[0])) fail("add inputs must share an identical shape");
            n.out_shape = in_shapes[0];
            break;
        }
        case LayerKind::concat: {
            if (in_shapes.size() < 2) fail("expects at least two inputs");
            int c = 0;
            for (const auto& s : in_shapes) {
                if (s.h != in_shapes[0].h || s.w != in_shapes[0].w)
                    fail("concat inputs must share spatial extents");
                c += s.c;
            }
            n.out_shape = {in_shapes[0].h, in_shapes[0].w, c};
            break;
        }
        case LayerKind::dense: {
            if (in_shapes.size() != 1) fail("expects exactly one input");
            const int flat = in_shapes[0].h * in_shapes[0].w * in_shapes[0].c;
            if (n.weight.rank() != 2 || n.weight.dim(0) != flat)
                fail("weight rows " + std::to_string(n.weight.rank() == 2 ? n.weight.dim(0) : -1) +
                     " vs flattened input " + std::to_string(flat));
            n.out_shape = {1, 1, n.weight.dim(1)};
            break;
        }
        }
        seen[i] = 1;
    }

    // reachability from the input
    std::vector<char> reach(nodes.size(), 0);
    for (size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].id == input_id) {
            reach[i] = 1;
            continue;
        }
        bool ok = !nodes[i].inputs.empty();
        for (int in : nodes[i].inputs)
            if (!reach[index[in]]) ok = false;
        reach[i] = ok ? 1 : 0;
        if (!ok)
            throw Error::config("node '" + nodes[i].name + "' (id " + std::to_string(nodes[i].id) +
                                ") is not reachable from the input");
    }
}

}  // namespace bsprune

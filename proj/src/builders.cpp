#include "bsprune/builders.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bsprune/error.hpp"

namespace bsprune {

namespace {

using nlohmann::json;

/// Incremental graph assembly: tracks the running cursor so sequential
/// architectures read top-to-bottom.
struct Builder {
    NetGraph g;
    Rng& rng;
    int cursor = -1;

    explicit Builder(Rng& r, ActShape input) : rng(r) {
        LayerNode in;
        in.kind = LayerKind::input;
        in.name = "input";
        in.out_shape = input;
        g.input_id = g.add_node(std::move(in));
        cursor = g.input_id;
        track_channels(cursor, input.c);
    }

    int conv(const std::string& name, int filters, int k, int stride, bool bias, int from = -1,
             Padding padding = Padding::same) {
        const int src = from < 0 ? cursor : from;
        LayerNode n;
        n.kind = LayerKind::conv;
        n.name = name;
        n.inputs = {src};
        n.kh = k;
        n.kw = k;
        n.stride = stride;
        n.padding = padding;
        n.has_bias = bias;
        const int ci = channels_at(src);
        n.weight = Tensor({k, k, ci, filters});
        rng.fill_he_normal(n.weight, k * k * ci);
        if (bias) n.bias = Tensor({filters});
        cursor = g.add_node(std::move(n));
        track_channels(cursor, filters);
        return cursor;
    }

    int bn(const std::string& name, int from = -1) {
        const int src = from < 0 ? cursor : from;
        LayerNode n;
        n.kind = LayerKind::bn;
        n.name = name;
        n.inputs = {src};
        const int c = channels_at(src);
        n.gamma = Tensor::full({c}, 1.f);
        n.beta = Tensor({c});
        n.running_mean = Tensor({c});
        n.running_var = Tensor::full({c}, 1.f);
        n.bn_trainable = true;
        cursor = g.add_node(std::move(n));
        track_channels(cursor, c);
        return cursor;
    }

    int relu(const std::string& name, int from = -1) {
        return passthrough(LayerKind::relu, name, from);
    }

    int maxpool(const std::string& name, int k, int stride, int from = -1, Padding padding = Padding::same) {
        return pool(LayerKind::maxpool, name, k, stride, from, padding);
    }

    int avgpool(const std::string& name, int k, int stride, int from = -1, Padding padding = Padding::same) {
        return pool(LayerKind::avgpool, name, k, stride, from, padding);
    }

    int add(const std::string& name, int a, int b) {
        LayerNode n;
        n.kind = LayerKind::add;
        n.name = name;
        n.inputs = {a, b};
        cursor = g.add_node(std::move(n));
        track_channels(cursor, channels_at(a));
        return cursor;
    }

    int concat(const std::string& name, const std::vector<int>& srcs) {
        LayerNode n;
        n.kind = LayerKind::concat;
        n.name = name;
        n.inputs = srcs;
        int c = 0;
        for (int s : srcs) c += channels_at(s);
        cursor = g.add_node(std::move(n));
        track_channels(cursor, c);
        return cursor;
    }

    int gap(const std::string& name, int from = -1) {
        return passthrough(LayerKind::global_avg_pool, name, from);
    }

    int dense(const std::string& name, int units, int from = -1) {
        const int src = from < 0 ? cursor : from;
        LayerNode n;
        n.kind = LayerKind::dense;
        n.name = name;
        n.inputs = {src};
        const int in = channels_at(src);  // heads sit after gap, so h = w = 1
        n.weight = Tensor({in, units});
        rng.fill_he_normal(n.weight, in);
        n.bias = Tensor({units});
        n.dense_trainable = true;
        cursor = g.add_node(std::move(n));
        track_channels(cursor, units);
        return cursor;
    }

    void finish() {
        g.output_id = cursor;
        g.infer_shapes();
    }

private:
    int pool(LayerKind kind, const std::string& name, int k, int stride, int from, Padding padding) {
        const int src = from < 0 ? cursor : from;
        LayerNode n;
        n.kind = kind;
        n.name = name;
        n.inputs = {src};
        n.kh = k;
        n.kw = k;
        n.stride = stride;
        n.padding = padding;
        cursor = g.add_node(std::move(n));
        track_channels(cursor, channels_at(src));
        return cursor;
    }

    int passthrough(LayerKind kind, const std::string& name, int from) {
        const int src = from < 0 ? cursor : from;
        LayerNode n;
        n.kind = kind;
        n.name = name;
        n.inputs = {src};
        cursor = g.add_node(std::move(n));
        track_channels(cursor, channels_at(src));
        return cursor;
    }

    int channels_at(int id) {
        auto it = channels_.find(id);
        if (it == channels_.end()) throw Error::config("builder: unknown source node " + std::to_string(id));
        return it->second;
    }
    void track_channels(int id, int c) { channels_[id] = c; }

    std::unordered_map<int, int> channels_;
};

void build_vgg16(Builder& b, int num_classes) {
    const int block_sizes[5] = {2, 2, 3, 3, 3};
    const int block_channels[5] = {64, 128, 256, 512, 512};
    for (int blk = 0; blk < 5; ++blk) {
        for (int i = 0; i < block_sizes[blk]; ++i) {
            const std::string tag = "block" + std::to_string(blk + 1) + "_conv" + std::to_string(i + 1);
            b.conv(tag, block_channels[blk], 3, 1, /*bias=*/true);
            b.relu(tag + "_relu");
        }
        b.maxpool("block" + std::to_string(blk + 1) + "_pool", 2, 2);
    }
    b.gap("gap");
    b.dense("fc", num_classes);
}

int resnet_bottleneck(Builder& b, const std::string& tag, int entry, int f1, int f3, int stride, bool conv_shortcut) {
    int x = b.conv(tag + "_1_conv", f1, 1, stride, true, entry);
    x = b.bn(tag + "_1_bn", x);
    x = b.relu(tag + "_1_relu", x);
    x = b.conv(tag + "_2_conv", f1, 3, 1, true, x);
    x = b.bn(tag + "_2_bn", x);
    x = b.relu(tag + "_2_relu", x);
    x = b.conv(tag + "_3_conv", f3, 1, 1, true, x);
    x = b.bn(tag + "_3_bn", x);
    int shortcut = entry;
    if (conv_shortcut) {
        shortcut = b.conv(tag + "_0_conv", f3, 1, stride, true, entry);
        shortcut = b.bn(tag + "_0_bn", shortcut);
    }
    int merged = b.add(tag + "_add", x, shortcut);
    return b.relu(tag + "_out", merged);
}

void build_resnet50(Builder& b, int num_classes) {
    b.conv("conv1", 64, 7, 2, true);
    b.bn("conv1_bn");
    int x = b.relu("conv1_relu");
    x = b.maxpool("pool1", 3, 2, x);

    const int blocks[4] = {3, 4, 6, 3};
    const int f1s[4] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage) {
        const int f1 = f1s[stage];
        const int f3 = f1 * 4;
        for (int blk = 0; blk < blocks[stage]; ++blk) {
            const std::string tag = "conv" + std::to_string(stage + 2) + "_block" + std::to_string(blk + 1);
            const int stride = (stage > 0 && blk == 0) ? 2 : 1;
            x = resnet_bottleneck(b, tag, x, f1, f3, stride, blk == 0);
        }
    }
    b.gap("gap", x);
    b.dense("fc", num_classes);
}

int densenet_layer(Builder& b, const std::string& tag, int entry, int growth) {
    int x = b.bn(tag + "_0_bn", entry);
    x = b.relu(tag + "_0_relu", x);
    x = b.conv(tag + "_1_conv", 4 * growth, 1, 1, false, x);
    x = b.bn(tag + "_1_bn", x);
    x = b.relu(tag + "_1_relu", x);
    x = b.conv(tag + "_2_conv", growth, 3, 1, false, x);
    return b.concat(tag + "_concat", {entry, x});
}

void build_densenet121(Builder& b, int num_classes) {
    b.conv("conv1", 64, 7, 2, false);
    b.bn("conv1_bn");
    int x = b.relu("conv1_relu");
    x = b.maxpool("pool1", 3, 2, x);

    const int blocks[4] = {6, 12, 24, 16};
    const int growth = 32;
    int channels = 64;
    for (int blk = 0; blk < 4; ++blk) {
        for (int l = 0; l < blocks[blk]; ++l) {
            const std::string tag = "block" + std::to_string(blk + 1) + "_layer" + std::to_string(l + 1);
            x = densenet_layer(b, tag, x, growth);
            channels += growth;
        }
        if (blk < 3) {
            const std::string tag = "transition" + std::to_string(blk + 1);
            x = b.bn(tag + "_bn", x);
            x = b.relu(tag + "_relu", x);
            channels /= 2;
            x = b.conv(tag + "_conv", channels, 1, 1, false, x);
            x = b.avgpool(tag + "_pool", 2, 2, x);
        }
    }
    x = b.bn("final_bn", x);
    b.relu("final_relu", x);
    b.gap("gap");
    b.dense("fc", num_classes);
}

void build_tiny_vgg(Builder& b, int num_classes) {
    b.conv("conv1", 8, 3, 1, true);
    b.relu("conv1_relu");
    b.maxpool("pool1", 2, 2);
    b.conv("conv2", 16, 3, 1, true);
    b.relu("conv2_relu");
    b.maxpool("pool2", 2, 2);
    b.conv("conv3", 16, 3, 1, true);
    b.relu("conv3_relu");
    b.gap("gap");
    b.dense("fc", num_classes);
}

void build_tiny_resnet(Builder& b, int num_classes) {
    b.conv("conv1", 8, 3, 1, false);
    b.bn("conv1_bn");
    int stem = b.relu("conv1_relu");

    int x = b.conv("block1_conv1", 8, 3, 1, false, stem);
    x = b.bn("block1_bn1", x);
    x = b.relu("block1_relu1", x);
    x = b.conv("block1_conv2", 8, 3, 1, false, x);
    x = b.bn("block1_bn2", x);
    x = b.add("block1_add", x, stem);
    int out1 = b.relu("block1_out", x);

    x = b.conv("block2_conv1", 16, 3, 2, false, out1);
    x = b.bn("block2_bn1", x);
    x = b.relu("block2_relu1", x);
    x = b.conv("block2_conv2", 16, 3, 1, false, x);
    x = b.bn("block2_bn2", x);
    int shortcut = b.conv("block2_short", 16, 1, 2, false, out1);
    shortcut = b.bn("block2_short_bn", shortcut);
    x = b.add("block2_add", x, shortcut);
    b.relu("block2_out", x);
    b.gap("gap");
    b.dense("fc", num_classes);
}

void build_tiny_densenet(Builder& b, int num_classes) {
    b.conv("conv1", 8, 3, 1, false);
    b.bn("conv1_bn");
    int x = b.relu("conv1_relu");

    const int growth = 8;
    x = densenet_layer(b, "block1_layer1", x, growth);
    x = densenet_layer(b, "block1_layer2", x, growth);

    x = b.bn("transition1_bn", x);
    x = b.relu("transition1_relu", x);
    x = b.conv("transition1_conv", 12, 1, 1, false, x);
    x = b.avgpool("transition1_pool", 2, 2, x);

    x = densenet_layer(b, "block2_layer1", x, growth);
    x = b.bn("final_bn", x);
    b.relu("final_relu", x);
    b.gap("gap");
    b.dense("fc", num_classes);
}

Padding padding_from(const std::string& s) {
    if (s == "same") return Padding::same;
    if (s == "valid") return Padding::valid;
    throw Error::config("unknown padding '" + s + "'");
}

}  // namespace

bool is_known_template(const std::string& name) {
    return name == "vgg16" || name == "densenet121" || name == "resnet50" || name == "tiny_vgg" ||
           name == "tiny_resnet" || name == "tiny_densenet";
}

ArchSpec parse_arch_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw Error::config(std::string("architecture config is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.value("format", 0) != 1)
        throw Error::config("architecture config must carry format: 1");

    ArchSpec spec;
    if (j.contains("input")) {
        const auto& in = j.at("input");
        if (!in.is_array() || in.size() != 3) throw Error::config("input must be [h, w, c]");
        spec.input = {in[0].get<int>(), in[1].get<int>(), in[2].get<int>()};
    }
    spec.num_classes = j.value("num_classes", 10);

    if (j.contains("template")) {
        spec.template_name = j.at("template").get<std::string>();
        if (!is_known_template(spec.template_name))
            throw Error::config("unknown template '" + spec.template_name + "'");
        return spec;
    }
    if (!j.contains("layers")) throw Error::config("architecture config needs either template or layers");
    for (const auto& l : j.at("layers")) {
        ExplicitLayer e;
        e.kind = l.at("kind").get<std::string>();
        e.filters = l.value("filters", 0);
        if (l.contains("kernel")) {
            if (l.at("kernel").is_array()) {
                e.kh = l.at("kernel")[0].get<int>();
                e.kw = l.at("kernel")[1].get<int>();
            } else {
                e.kh = e.kw = l.at("kernel").get<int>();
            }
        }
        e.stride = l.value("stride", 1);
        e.padding = padding_from(l.value("padding", std::string("same")));
        e.bias = l.value("bias", true);
        e.units = l.value("units", 0);
        spec.layers.push_back(e);
    }
    return spec;
}

ArchSpec load_arch_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error::io("cannot open architecture config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_arch_config(ss.str());
}

NetGraph build_architecture(const ArchSpec& spec, Rng& rng) {
    if (spec.input.h < 1 || spec.input.w < 1 || spec.input.c < 1)
        throw Error::config("build_architecture: input extent must be set");

    Builder b(rng, spec.input);
    if (!spec.template_name.empty()) {
        if (spec.template_name == "vgg16")
            build_vgg16(b, spec.num_classes);
        else if (spec.template_name == "resnet50")
            build_resnet50(b, spec.num_classes);
        else if (spec.template_name == "densenet121")
            build_densenet121(b, spec.num_classes);
        else if (spec.template_name == "tiny_vgg")
            build_tiny_vgg(b, spec.num_classes);
        else if (spec.template_name == "tiny_resnet")
            build_tiny_resnet(b, spec.num_classes);
        else if (spec.template_name == "tiny_densenet")
            build_tiny_densenet(b, spec.num_classes);
        else
            throw Error::config("unknown template '" + spec.template_name + "'");
    } else {
        int idx = 0;
        for (const auto& l : spec.layers) {
            const std::string name = l.kind + std::to_string(idx++);
            if (l.kind == "conv") {
                if (l.kh != l.kw) throw Error::config("explicit conv layers must use square kernels");
                b.conv(name, l.filters, l.kh, l.stride, l.bias, -1, l.padding);
            } else if (l.kind == "bn") {
                b.bn(name);
            } else if (l.kind == "relu") {
                b.relu(name);
            } else if (l.kind == "maxpool") {
                b.maxpool(name, l.kh, l.stride, -1, l.padding);
            } else if (l.kind == "avgpool") {
                b.avgpool(name, l.kh, l.stride, -1, l.padding);
            } else if (l.kind == "global_avg_pool") {
                b.gap(name);
            } else if (l.kind == "dense") {
                b.dense(name, l.units);
            } else {
                throw Error::config("explicit layer kind '" + l.kind + "' is not supported");
            }
        }
        if (spec.num_classes > 0 && (spec.layers.empty() || spec.layers.back().kind != "dense")) {
            b.gap("gap");
            b.dense("fc", spec.num_classes);
        }
    }
    b.finish();
    return b.g;
}

namespace {

bool is_glue(LayerKind k) {
    return k == LayerKind::bn || k == LayerKind::relu || k == LayerKind::add || k == LayerKind::concat;
}

// A conv counts as BN-covered when a BN directly consumes it, or when its
// producer chain (through relus) ends in a BN — the latter is the
// pre-activation ordering of densely connected blocks. The U-conv of a
// decomposed pair is covered by whatever follows its BasisScalingConv.
bool conv_has_adjacent_bn(const NetGraph& g, const LayerNode& conv) {
    for (int c : g.consumers(conv.id)) {
        const LayerKind k = g.node(c).kind;
        if (k == LayerKind::bn || k == LayerKind::basis_scaling_conv) return true;
    }
    int p = conv.inputs.empty() ? -1 : conv.inputs[0];
    while (p >= 0) {
        const LayerNode& n = g.node(p);
        if (n.kind == LayerKind::bn) return true;
        if (n.kind != LayerKind::relu) break;
        p = n.inputs.empty() ? -1 : n.inputs[0];
    }
    return false;
}

}  // namespace

void replace_head(NetGraph& g, int num_classes, Rng& rng) {
    const int last_conv = g.last_conv_id();
    if (last_conv < 0) throw Error::config("replace_head: graph has no convolutional layer");

    // Frontier of BN/activation/merge nodes downstream of the last conv.
    std::vector<int> frontier = {last_conv};
    std::vector<char> in_frontier(g.nodes.size(), 0);
    std::unordered_map<int, size_t> index;
    for (size_t i = 0; i < g.nodes.size(); ++i) index[g.nodes[i].id] = i;
    in_frontier[index[last_conv]] = 1;
    int sink = last_conv;
    for (size_t qi = 0; qi < frontier.size(); ++qi) {
        for (int c : g.consumers(frontier[qi])) {
            if (!is_glue(g.node(c).kind)) continue;
            if (in_frontier[index[c]]) continue;
            in_frontier[index[c]] = 1;
            frontier.push_back(c);
            if (index[c] > index[sink]) sink = c;
        }
    }

    // Keep the sink and all of its ancestors.
    std::vector<char> keep(g.nodes.size(), 0);
    std::vector<int> stack = {sink};
    keep[index[sink]] = 1;
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        for (int in : g.node(id).inputs)
            if (!keep[index[in]]) {
                keep[index[in]] = 1;
                stack.push_back(in);
            }
    }
    g.retain_nodes(keep);

    // Insert BN after convs lacking one.
    std::vector<int> bare_convs;
    for (const auto& n : g.nodes)
        if (n.kind == LayerKind::conv && !conv_has_adjacent_bn(g, n)) bare_convs.push_back(n.id);
    for (int cid : bare_convs) {
        std::vector<int> outs = g.consumers(cid);
        LayerNode bn;
        bn.kind = LayerKind::bn;
        bn.name = g.node(cid).name + "_bn";
        bn.inputs = {cid};
        const int c = g.node(cid).weight.dim(3);
        bn.gamma = Tensor::full({c}, 1.f);
        bn.beta = Tensor({c});
        bn.running_mean = Tensor({c});
        bn.running_var = Tensor::full({c}, 1.f);
        bn.bn_trainable = true;
        const int bn_id = g.add_node(std::move(bn));
        for (int o : outs)
            for (int& in : g.node(o).inputs)
                if (in == cid) in = bn_id;
        // keep topological order: the new node was appended, move it right
        // after its producer
        LayerNode moved = std::move(g.nodes.back());
        g.nodes.pop_back();
        for (size_t i = 0; i < g.nodes.size(); ++i)
            if (g.nodes[i].id == cid) {
                g.nodes.insert(g.nodes.begin() + static_cast<std::ptrdiff_t>(i) + 1, std::move(moved));
                break;
            }
    }

    // Attach the classifier to the unique sink.
    int attach = -1;
    for (const auto& n : g.nodes)
        if (g.consumers(n.id).empty()) attach = n.id;

    LayerNode gap;
    gap.kind = LayerKind::global_avg_pool;
    gap.name = "gap";
    gap.inputs = {attach};
    const int gap_id = g.add_node(std::move(gap));

    g.output_id = gap_id;
    g.infer_shapes();  // need channel count at the gap for the dense init
    const int feat = g.node(gap_id).out_shape.c;

    LayerNode fc;
    fc.kind = LayerKind::dense;
    fc.name = "fc";
    fc.inputs = {gap_id};
    fc.weight = Tensor({feat, num_classes});
    rng.fill_he_normal(fc.weight, feat);
    fc.bias = Tensor({num_classes});
    fc.dense_trainable = true;
    g.output_id = g.add_node(std::move(fc));

    for (auto& n : g.nodes) {
        if (n.kind == LayerKind::bn) n.bn_trainable = true;
        if (n.kind == LayerKind::basis_scaling_conv) n.scale_trainable = true;
    }
    g.infer_shapes();
}

}  // namespace bsprune

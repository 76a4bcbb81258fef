#include "bsprune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "bsprune/error.hpp"

namespace bsprune {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'B', 'S', 'P', 'R', 'U', 'N', 'E', '1'};

enum TensorSlot : std::uint8_t {
    slot_weight = 0,
    slot_bias = 1,
    slot_scale = 2,
    slot_gamma = 3,
    slot_beta = 4,
    slot_running_mean = 5,
    slot_running_var = 6,
};

void require_little_endian() {
    if constexpr (std::endian::native != std::endian::little)
        throw Error::io("checkpoint format requires a little-endian host");
}

void write_u32(std::ofstream& f, std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
    std::uint32_t v = 0;
    if (!f.read(reinterpret_cast<char*>(&v), 4)) throw Error::io("truncated checkpoint '" + path + "'");
    return v;
}

json topology_json(const NetGraph& g) {
    json nodes = json::array();
    for (const auto& n : g.nodes) {
        json jn;
        jn["id"] = n.id;
        jn["name"] = n.name;
        jn["kind"] = kind_name(n.kind);
        jn["inputs"] = n.inputs;
        if (n.kh) jn["kh"] = n.kh;
        if (n.kw) jn["kw"] = n.kw;
        if (n.stride != 1) jn["stride"] = n.stride;
        jn["padding"] = n.padding == Padding::same ? "same" : "valid";
        if (n.has_bias) jn["has_bias"] = true;
        if (n.pair_u_id >= 0) jn["pair_u_id"] = n.pair_u_id;
        if (n.bn_trainable) jn["bn_trainable"] = true;
        if (n.dense_trainable) jn["dense_trainable"] = true;
        if (n.scale_trainable) jn["scale_trainable"] = true;
        if (!n.sigma.empty()) jn["sigma"] = n.sigma;
        if (n.kind == LayerKind::input) jn["extent"] = {n.out_shape.h, n.out_shape.w, n.out_shape.c};
        nodes.push_back(std::move(jn));
    }
    json j;
    j["format"] = 1;
    j["input_id"] = g.input_id;
    j["output_id"] = g.output_id;
    j["nodes"] = std::move(nodes);
    return j;
}

void write_tensor(std::ofstream& f, int node_id, TensorSlot slot, const Tensor& t) {
    write_u32(f, static_cast<std::uint32_t>(node_id));
    const std::uint8_t meta[2] = {static_cast<std::uint8_t>(slot), 0 /* dtype f32 */};
    f.write(reinterpret_cast<const char*>(meta), 2);
    const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
    f.write(reinterpret_cast<const char*>(&rank), 1);
    for (int d : t.shape) write_u32(f, static_cast<std::uint32_t>(d));
    f.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
}

}  // namespace

void save_checkpoint(const NetGraph& g, const std::string& path) {
    require_little_endian();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error::io("cannot write checkpoint '" + path + "'");

    f.write(kMagic, 8);
    const std::string topo = topology_json(g).dump();
    write_u32(f, static_cast<std::uint32_t>(topo.size()));
    f.write(topo.data(), static_cast<std::streamsize>(topo.size()));

    std::uint32_t count = 0;
    for (const auto& n : g.nodes) {
        if (n.weight.numel()) ++count;
        if (n.bias.numel()) ++count;
        if (n.scale.numel()) ++count;
        if (n.gamma.numel()) count += 4;  // gamma, beta, running mean/var travel together
    }
    write_u32(f, count);
    for (const auto& n : g.nodes) {
        if (n.weight.numel()) write_tensor(f, n.id, slot_weight, n.weight);
        if (n.bias.numel()) write_tensor(f, n.id, slot_bias, n.bias);
        if (n.scale.numel()) write_tensor(f, n.id, slot_scale, n.scale);
        if (n.gamma.numel()) {
            write_tensor(f, n.id, slot_gamma, n.gamma);
            write_tensor(f, n.id, slot_beta, n.beta);
            write_tensor(f, n.id, slot_running_mean, n.running_mean);
            write_tensor(f, n.id, slot_running_var, n.running_var);
        }
    }
    if (!f) throw Error::io("write failure on checkpoint '" + path + "'");
}

NetGraph load_checkpoint(const std::string& path) {
    require_little_endian();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error::io("cannot open checkpoint '" + path + "'");

    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw Error::io("'" + path + "' is not a checkpoint (magic mismatch)");

    const std::uint32_t topo_len = read_u32(f, path);
    std::string topo(topo_len, '\0');
    if (!f.read(topo.data(), topo_len)) throw Error::io("truncated checkpoint '" + path + "'");

    json j;
    try {
        j = json::parse(topo);
    } catch (const std::exception& e) {
        throw Error::io("corrupt checkpoint topology in '" + path + "': " + e.what());
    }
    if (j.value("format", 0) != 1) throw Error::io("unsupported checkpoint format version in '" + path + "'");

    NetGraph g;
    g.input_id = j.at("input_id").get<int>();
    g.output_id = j.at("output_id").get<int>();
    for (const auto& jn : j.at("nodes")) {
        LayerNode n;
        n.id = jn.at("id").get<int>();
        n.name = jn.at("name").get<std::string>();
        const std::string kind = jn.at("kind").get<std::string>();
        try {
            n.kind = kind_from_name(kind);
        } catch (const Error&) {
            throw Error::io("unknown node kind '" + kind + "' in '" + path +
                            "' (checkpoint written by a newer format?)");
        }
        n.inputs = jn.at("inputs").get<std::vector<int>>();
        n.kh = jn.value("kh", 0);
        n.kw = jn.value("kw", 0);
        n.stride = jn.value("stride", 1);
        n.padding = jn.value("padding", std::string("same")) == "valid" ? Padding::valid : Padding::same;
        n.has_bias = jn.value("has_bias", false);
        n.pair_u_id = jn.value("pair_u_id", -1);
        n.bn_trainable = jn.value("bn_trainable", false);
        n.dense_trainable = jn.value("dense_trainable", false);
        n.scale_trainable = jn.value("scale_trainable", false);
        if (jn.contains("sigma")) n.sigma = jn.at("sigma").get<std::vector<double>>();
        if (jn.contains("extent")) {
            const auto& e = jn.at("extent");
            n.out_shape = {e[0].get<int>(), e[1].get<int>(), e[2].get<int>()};
        }
        g.nodes.push_back(std::move(n));
    }

    const std::uint32_t tensor_count = read_u32(f, path);
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        const int node_id = static_cast<int>(read_u32(f, path));
        std::uint8_t meta[3];
        if (!f.read(reinterpret_cast<char*>(meta), 3)) throw Error::io("truncated checkpoint '" + path + "'");
        if (meta[1] != 0) throw Error::io("unsupported tensor dtype in '" + path + "'");
        std::vector<int> shape(meta[2]);
        for (auto& d : shape) d = static_cast<int>(read_u32(f, path));
        Tensor t(shape);
        if (!f.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4)))
            throw Error::io("truncated checkpoint '" + path + "'");
        LayerNode& n = g.node(node_id);
        switch (meta[0]) {
        case slot_weight: n.weight = std::move(t); break;
        case slot_bias: n.bias = std::move(t); break;
        case slot_scale: n.scale = std::move(t); break;
        case slot_gamma: n.gamma = std::move(t); break;
        case slot_beta: n.beta = std::move(t); break;
        case slot_running_mean: n.running_mean = std::move(t); break;
        case slot_running_var: n.running_var = std::move(t); break;
        default: throw Error::io("unknown tensor slot in '" + path + "'");
        }
    }

    g.infer_shapes();
    return g;
}

}  // namespace bsprune

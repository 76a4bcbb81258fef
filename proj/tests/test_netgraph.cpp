#include <doctest.h>

#include <cmath>
#include <fstream>

#include "bsprune/builders.hpp"
#include "bsprune/costing.hpp"
#include "bsprune/decomposition.hpp"
#include "bsprune/error.hpp"
#include "test_util.hpp"

using namespace bsprune;

namespace {

NetGraph headed_template(const std::string& name, ActShape input, int classes = 10) {
    Rng rng(1);
    ArchSpec spec;
    spec.template_name = name;
    spec.input = input;
    spec.num_classes = classes;
    NetGraph g = build_architecture(spec, rng);
    replace_head(g, classes, rng);
    return g;
}

bool within(double value, double target, double rel) { return std::fabs(value - target) <= rel * target; }

}  // namespace

TEST_CASE("template conv layer counts") {
    CHECK(headed_template("vgg16", {128, 128, 3}).conv_layer_count() == 13);
    CHECK(headed_template("resnet50", {128, 128, 3}).conv_layer_count() == 53);
    CHECK(headed_template("densenet121", {112, 112, 3}).conv_layer_count() == 120);
}

TEST_CASE("explicit single-conv spec yields input, conv, gap, dense") {
    Rng rng(2);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 4, .kh = 3, .kw = 3}};
    spec.input = {8, 8, 1};
    spec.num_classes = 2;
    const NetGraph g = build_architecture(spec, rng);
    REQUIRE(g.nodes.size() == 4);
    CHECK(g.nodes[0].kind == LayerKind::input);
    CHECK(g.nodes[1].kind == LayerKind::conv);
    CHECK(g.nodes[2].kind == LayerKind::global_avg_pool);
    CHECK(g.nodes[3].kind == LayerKind::dense);
}

TEST_CASE("unknown template and inconsistent explicit specs are config errors") {
    CHECK_THROWS_AS(parse_arch_config(R"({"format":1,"template":"vgg99","input":[8,8,1]})"), Error);

    Rng rng(3);
    ArchSpec spec;
    spec.layers = {{.kind = "maxpool", .filters = 0, .kh = 9, .kw = 9, .stride = 1, .padding = Padding::valid}};
    spec.input = {4, 4, 1};
    spec.num_classes = 2;
    CHECK_THROWS_WITH_AS(build_architecture(spec, rng), doctest::Contains("maxpool0"), Error);
}

TEST_CASE("arch config schema") {
    const ArchSpec spec =
        parse_arch_config(R"({"format":1,"template":"tiny_vgg","input":[16,16,1],"num_classes":2})");
    CHECK(spec.template_name == "tiny_vgg");
    CHECK(spec.input.h == 16);
    CHECK(spec.num_classes == 2);

    CHECK_THROWS_AS(parse_arch_config(R"({"template":"vgg16"})"), Error);       // missing format
    CHECK_THROWS_AS(parse_arch_config(R"({"format":2,"template":"vgg16"})"), Error);
    CHECK_THROWS_AS(parse_arch_config("not json"), Error);
}

TEST_CASE("replace_head on vgg16 freezes convs and sizes the classifier") {
    NetGraph g = headed_template("vgg16", {128, 128, 3});
    const LayerNode& fc = g.node(g.output_id);
    CHECK(fc.kind == LayerKind::dense);
    CHECK(fc.weight.dim(0) == 512);
    CHECK(fc.weight.dim(1) == 10);
    CHECK((fc.weight.numel() + fc.bias.numel()) == 5130);

    // trainable set is BN + dense only
    std::int64_t expect = 5130;
    for (const auto& n : g.nodes)
        if (n.kind == LayerKind::bn) expect += 2 * n.gamma.numel();
    CHECK(trainable_param_count(g) == expect);
}

TEST_CASE("replace_head appends only pool and dense when the tail is conv+bn+relu") {
    Rng rng(4);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 4}, {.kind = "bn"}, {.kind = "relu"}};
    spec.input = {8, 8, 1};
    spec.num_classes = 0;  // no head from the builder
    NetGraph g = build_architecture(spec, rng);
    const size_t before = g.nodes.size();
    replace_head(g, 5, rng);
    CHECK(g.nodes.size() == before + 2);
    CHECK(g.node(g.output_id).weight.dim(1) == 5);
}

TEST_CASE("replace_head inserts a bn after every bare conv of tiny_vgg") {
    Rng rng(5);
    NetGraph g = build_architecture(testutil::tiny_spec("tiny_vgg"), rng);
    int bn_before = 0;
    for (const auto& n : g.nodes) bn_before += n.kind == LayerKind::bn ? 1 : 0;
    CHECK(bn_before == 0);
    replace_head(g, 2, rng);
    int bn_after = 0;
    for (const auto& n : g.nodes) bn_after += n.kind == LayerKind::bn ? 1 : 0;
    CHECK(bn_after == g.conv_layer_count());
    // and each conv's consumer is its bn
    for (const auto& n : g.nodes)
        if (n.kind == LayerKind::conv) {
            const auto cs = g.consumers(n.id);
            REQUIRE(cs.size() == 1);
            CHECK(g.node(cs[0]).kind == LayerKind::bn);
        }
}

TEST_CASE("parameter counts reproduce the published totals") {
    CHECK(within(static_cast<double>(count_params(headed_template("vgg16", {128, 128, 3}))), 14.74e6, 0.005));
    CHECK(within(static_cast<double>(count_params(headed_template("resnet50", {128, 128, 3}))), 23.61e6, 0.005));
    CHECK(within(static_cast<double>(count_params(headed_template("densenet121", {112, 112, 3}))), 7.05e6, 0.005));
}

TEST_CASE("an input-only graph counts zero parameters") {
    Rng rng(6);
    ArchSpec spec;
    spec.input = {8, 8, 3};
    spec.num_classes = 0;
    const NetGraph g = build_architecture(spec, rng);
    CHECK(count_params(g) == 0);
    CHECK(count_flops(g) == 0);
}

TEST_CASE("flop counts reproduce the published totals") {
    CHECK(within(static_cast<double>(count_flops(headed_template("vgg16", {128, 128, 3}))), 5.03e9, 0.05));
    CHECK(within(static_cast<double>(count_flops(headed_template("vgg16", {112, 112, 3}))), 3.85e9, 0.05));
    CHECK(within(static_cast<double>(count_flops(headed_template("densenet121", {112, 112, 3}))), 0.71e9, 0.05));
    CHECK(within(static_cast<double>(count_flops(headed_template("resnet50", {128, 128, 3}))), 1.29e9, 0.05));
}

TEST_CASE("a single 3x3 valid conv costs positions times window") {
    Rng rng(7);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 1, .kh = 3, .kw = 3, .stride = 1, .padding = Padding::valid,
                    .bias = false}};
    spec.input = {4, 4, 1};
    spec.num_classes = 0;
    const NetGraph g = build_architecture(spec, rng);
    CHECK(count_flops(g) == 36);  // 2x2 positions * 9 MACs
}

TEST_CASE("decomposed tiny template counting follows the closed form") {
    Rng rng(8);
    NetGraph g = build_architecture(testutil::tiny_spec("tiny_vgg"), rng);
    replace_head(g, 2, rng);
    const std::int64_t before = count_params(g);

    std::int64_t growth = 0;
    for (const auto& n : g.nodes)
        if (n.kind == LayerKind::conv) {
            const std::int64_t r = std::min<std::int64_t>(
                static_cast<std::int64_t>(n.kh) * n.kw * n.weight.dim(2), n.weight.dim(3));
            growth += r * r + r;
        }
    decompose_all(g);
    CHECK(count_params(g) == before + growth);
    CHECK(static_cast<double>(count_params(g)) / static_cast<double>(before) < 1.22);

    std::int64_t expect_trainable = 0;
    for (const auto& n : g.nodes) {
        if (n.kind == LayerKind::bn) expect_trainable += 2 * n.gamma.numel();
        if (n.kind == LayerKind::basis_scaling_conv) expect_trainable += n.scale.numel();
        if (n.kind == LayerKind::dense) expect_trainable += (n.weight.dim(0) + 1) * n.weight.dim(1);
    }
    CHECK(trainable_param_count(g) == expect_trainable);
}

TEST_CASE("undecomposed trainable count is bn plus dense exactly") {
    NetGraph g = headed_template("tiny_resnet", {16, 16, 1}, 2);
    std::int64_t expect = 0;
    for (const auto& n : g.nodes) {
        if (n.kind == LayerKind::bn) expect += 2 * n.gamma.numel();
        if (n.kind == LayerKind::dense) expect += (n.weight.dim(0) + 1) * n.weight.dim(1);
    }
    CHECK(trainable_param_count(g) == expect);
}

TEST_CASE("templates match their golden structural fixtures") {
    const struct {
        const char* name;
        ActShape input;
    } cases[] = {
        {"vgg16", {128, 128, 3}},    {"resnet50", {128, 128, 3}},   {"densenet121", {112, 112, 3}},
        {"tiny_vgg", {16, 16, 1}},   {"tiny_resnet", {16, 16, 1}},  {"tiny_densenet", {16, 16, 1}},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        Rng rng(1);
        ArchSpec spec;
        spec.template_name = c.name;
        spec.input = c.input;
        spec.num_classes = 10;
        const NetGraph g = build_architecture(spec, rng);
        const std::string digest = testutil::structural_digest(g);

        const std::string path = std::string(BSPRUNE_FIXTURE_DIR) + "/" + c.name + ".structure.txt";
        std::ifstream f(path);
        REQUIRE_MESSAGE(f.good(), "missing fixture ", path);
        std::string expected((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        CHECK_MESSAGE(digest == expected, "structural drift in template ", c.name);
    }
}

TEST_CASE("shape inference is idempotent") {
    NetGraph g = headed_template("tiny_densenet", {16, 16, 1}, 2);
    const auto shapes = [&g] {
        std::vector<ActShape> s;
        for (const auto& n : g.nodes) s.push_back(n.out_shape);
        return s;
    };
    const auto first = shapes();
    g.infer_shapes();
    CHECK(shapes() == first);
}

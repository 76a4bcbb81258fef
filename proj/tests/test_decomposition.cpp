#include <doctest.h>

#include <cmath>

#include "bsprune/costing.hpp"
#include "bsprune/decomposition.hpp"
#include "bsprune/error.hpp"
#include "bsprune/executor.hpp"
#include "test_util.hpp"

using namespace bsprune;

namespace {

void set_all_scales(NetGraph& g, float value) {
    for (auto& n : g.nodes)
        if (n.kind == LayerKind::basis_scaling_conv)
            for (auto& s : n.scale.data) s = value;
}

Tensor infer_logits(NetGraph& g, const Tensor& x) {
    ForwardOptions opts;
    opts.mode = ExecMode::infer;
    return forward(g, x, opts, nullptr);
}

}  // namespace

TEST_CASE("decompose_conv shapes: 1x1x64x256 gives r = 64") {
    Rng rng(41);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 256, .kh = 1, .kw = 1, .stride = 1, .padding = Padding::same,
                    .bias = true}};
    spec.input = {4, 4, 64};
    spec.num_classes = 0;
    NetGraph g = build_architecture(spec, rng);
    const int conv_id = g.last_conv_id();
    g.output_id = conv_id;
    const DecomposedPair pair = decompose_conv(g, conv_id);

    const LayerNode& u = g.node(pair.u_id);
    const LayerNode& bs = g.node(pair.bs_id);
    CHECK(u.weight.shape == std::vector<int>{1, 1, 64, 64});
    CHECK_FALSE(u.has_bias);
    CHECK(bs.weight.shape == std::vector<int>{64, 256});
    CHECK(bs.scale.numel() == 64);
    CHECK(bs.bias.numel() == 256);
    for (float s : bs.scale.data) CHECK(s == 0.5f);
}

TEST_CASE("Vbar^T row norms equal the singular values at decomposition time") {
    NetGraph g = testutil::tiny_decomposed("tiny_vgg", 42);
    for (const auto& n : g.nodes) {
        if (n.kind != LayerKind::basis_scaling_conv) continue;
        for (int i = 0; i < n.weight.dim(0); ++i) {
            double norm = 0;
            for (int j = 0; j < n.weight.dim(1); ++j)
                norm += static_cast<double>(n.weight.at2(i, j)) * n.weight.at2(i, j);
            norm = std::sqrt(norm);
            const double sigma = n.sigma[static_cast<size_t>(i)];
            CHECK(std::fabs(norm - sigma) <= 1e-5 * (sigma + 1e-12));
        }
    }
}

TEST_CASE("a pair with s = 1 reproduces the original conv output") {
    Rng rng(43);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 6, .kh = 3, .kw = 3, .stride = 1, .padding = Padding::same,
                    .bias = true}};
    spec.input = {7, 7, 3};
    spec.num_classes = 0;
    NetGraph original = build_architecture(spec, rng);
    original.output_id = original.last_conv_id();

    NetGraph decomposed = original;
    decompose_conv(decomposed, decomposed.last_conv_id(), 1.0f);
    decomposed.output_id = decomposed.nodes.back().id;
    for (const auto& n : decomposed.nodes)
        if (n.kind == LayerKind::basis_scaling_conv) decomposed.output_id = n.id;
    decomposed.infer_shapes();

    Rng drng(44);
    const Tensor x = testutil::random_batch(drng, 2, 7, 7, 3);
    const Tensor y0 = infer_logits(original, x);
    const Tensor y1 = infer_logits(decomposed, x);
    REQUIRE(y0.same_shape(y1));
    double scale = 0;
    for (float v : y0.data) scale = std::max(scale, static_cast<double>(std::fabs(v)));
    for (size_t i = 0; i < y0.data.size(); ++i)
        CHECK(std::fabs(y0.data[i] - y1.data[i]) <= 1e-4 * (scale + 1e-6));
}

TEST_CASE("basis scaling forward equals the fused conv") {
    Rng rng(45);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 5, .kh = 3, .kw = 3, .stride = 1, .padding = Padding::same,
                    .bias = true}};
    spec.input = {6, 6, 2};
    spec.num_classes = 0;
    NetGraph g = build_architecture(spec, rng);
    g.output_id = g.last_conv_id();
    const DecomposedPair pair = decompose_conv(g, g.last_conv_id());

    // random s
    LayerNode& bs = g.node(pair.bs_id);
    for (auto& s : bs.scale.data) s = static_cast<float>(rng.uniform(0.0, 2.0));

    const LayerNode fused = fuse_pair(g, pair.u_id, pair.bs_id);

    Rng drng(46);
    const Tensor x = testutil::random_batch(drng, 2, 6, 6, 2);
    const Tensor z = conv2d_forward(x, g.node(pair.u_id).weight, std::nullopt, 1, Padding::same);
    const Tensor via_pair = basis_scaling_forward(z, bs.scale, bs.weight, bs.bias);
    const Tensor via_fused = conv2d_forward(x, fused.weight, fused.bias, 1, Padding::same);
    REQUIRE(via_pair.same_shape(via_fused));
    for (size_t i = 0; i < via_pair.data.size(); ++i)
        CHECK(std::fabs(via_pair.data[i] - via_fused.data[i]) <= 1e-4);
}

TEST_CASE("fuse of an s = 1 decomposition recovers the original kernel") {
    Rng rng(47);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 8, .kh = 3, .kw = 3, .stride = 1, .padding = Padding::same,
                    .bias = true}};
    spec.input = {5, 5, 4};
    spec.num_classes = 0;
    NetGraph g = build_architecture(spec, rng);
    g.output_id = g.last_conv_id();
    const Tensor original_kernel = g.node(g.last_conv_id()).weight;
    const DecomposedPair pair = decompose_conv(g, g.last_conv_id(), 1.0f);

    const LayerNode fused = fuse_pair(g, pair.u_id, pair.bs_id);
    REQUIRE(fused.weight.same_shape(original_kernel));
    for (size_t i = 0; i < fused.weight.data.size(); ++i)
        CHECK(std::fabs(fused.weight.data[i] - original_kernel.data[i]) <= 1e-4);

    SUBCASE("zero scales fuse to an all-zero kernel") {
        LayerNode& bs = g.node(pair.bs_id);
        std::fill(bs.scale.data.begin(), bs.scale.data.end(), 0.f);
        const LayerNode zero = fuse_pair(g, pair.u_id, pair.bs_id);
        for (float v : zero.weight.data) CHECK(v == 0.f);
    }

    SUBCASE("mismatched pair ids are rejected") {
        CHECK_THROWS_AS(fuse_pair(g, pair.bs_id, pair.u_id), Error);
    }
}

TEST_CASE("decompose_all on a one-conv graph adds exactly one node") {
    Rng rng(48);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 4, .kh = 3, .kw = 3}};
    spec.input = {8, 8, 1};
    spec.num_classes = 2;
    NetGraph g = build_architecture(spec, rng);
    const size_t before = g.nodes.size();
    decompose_all(g);
    CHECK(g.nodes.size() == before + 1);
}

TEST_CASE("decomposing twice and degenerate kernels are errors") {
    Rng rng(49);
    ArchSpec spec;
    spec.layers = {{.kind = "conv", .filters = 4, .kh = 3, .kw = 3}};
    spec.input = {8, 8, 1};
    spec.num_classes = 2;

    SUBCASE("twice") {
        NetGraph g = build_architecture(spec, rng);
        const int conv_id = g.last_conv_id();
        decompose_conv(g, conv_id);
        CHECK_THROWS_WITH_AS(decompose_conv(g, conv_id), doctest::Contains("already decomposed"), Error);
        CHECK_THROWS_AS(decompose_all(g), Error);
    }

    SUBCASE("zero kernel") {
        NetGraph g = build_architecture(spec, rng);
        const int conv_id = g.last_conv_id();
        std::fill(g.node(conv_id).weight.data.begin(), g.node(conv_id).weight.data.end(), 0.f);
        CHECK_THROWS_WITH_AS(decompose_conv(g, conv_id), doctest::Contains("degenerate weight"), Error);
    }
}

TEST_CASE("decomposition preserves external channels and wins under 22% growth") {
    for (const char* tmpl : {"tiny_vgg", "tiny_resnet", "tiny_densenet"}) {
        CAPTURE(tmpl);
        Rng rng(50);
        NetGraph g = build_architecture(testutil::tiny_spec(tmpl), rng);
        replace_head(g, 2, rng);

        std::vector<std::pair<int, int>> conv_io;  // (ci, co) per conv in order
        for (const auto& n : g.nodes)
            if (n.kind == LayerKind::conv) conv_io.emplace_back(n.weight.dim(2), n.weight.dim(3));
        const std::int64_t before = count_params(g);

        decompose_all(g);
        size_t i = 0;
        for (const auto& n : g.nodes) {
            if (n.kind != LayerKind::basis_scaling_conv) continue;
            const LayerNode& u = g.node(n.pair_u_id);
            CHECK(u.weight.dim(2) == conv_io[i].first);
            CHECK(n.weight.dim(1) == conv_io[i].second);
            ++i;
        }
        CHECK(i == conv_io.size());
        CHECK(static_cast<double>(count_params(g)) / static_cast<double>(before) < 1.22);
    }
}

TEST_CASE("worker pool honors BSPRUNE_THREADS") {
    setenv("BSPRUNE_THREADS", "3", 1);
    CHECK(worker_thread_count() == 3);
    setenv("BSPRUNE_THREADS", "0", 1);  // invalid values fall back
    CHECK(worker_thread_count() >= 1);
    unsetenv("BSPRUNE_THREADS");
    CHECK(worker_thread_count() >= 1);

    // the worker count does not change the result
    Rng rng(53);
    NetGraph a = build_architecture(testutil::tiny_spec("tiny_densenet"), rng);
    replace_head(a, 2, rng);
    NetGraph b = a;
    decompose_all(a, 0.5f, 1);
    decompose_all(b, 0.5f, 4);
    REQUIRE(a.nodes.size() == b.nodes.size());
    for (size_t i = 0; i < a.nodes.size(); ++i) {
        CHECK(a.nodes[i].weight.data == b.nodes[i].weight.data);
        CHECK(a.nodes[i].sigma == b.nodes[i].sigma);
    }
}

TEST_CASE("decomposed logits with s = 1 match the original network") {
    for (const char* tmpl : {"tiny_vgg", "tiny_resnet", "tiny_densenet"}) {
        CAPTURE(tmpl);
        Rng rng(51);
        NetGraph original = build_architecture(testutil::tiny_spec(tmpl), rng);
        replace_head(original, 2, rng);
        NetGraph decomposed = original;
        decompose_all(decomposed);
        set_all_scales(decomposed, 1.0f);

        Rng drng(52);
        int identical_argmax = 0;
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor x = testutil::random_batch(drng, 5, 16, 16, 1);
            const Tensor y0 = infer_logits(original, x);
            const Tensor y1 = infer_logits(decomposed, x);
            for (size_t j = 0; j < y0.data.size(); ++j) CHECK(std::fabs(y0.data[j] - y1.data[j]) <= 1e-3);
            for (int n = 0; n < 5; ++n) {
                const int a0 = y0.at2(n, 0) >= y0.at2(n, 1) ? 0 : 1;
                const int a1 = y1.at2(n, 0) >= y1.at2(n, 1) ? 0 : 1;
                identical_argmax += a0 == a1 ? 1 : 0;
            }
        }
        CHECK(identical_argmax == 100);
    }
}

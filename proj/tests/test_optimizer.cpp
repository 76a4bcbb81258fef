#include <doctest.h>

#include <cmath>

#include "bsprune/error.hpp"
#include "bsprune/optimizer.hpp"
#include "test_util.hpp"

using namespace bsprune;

TEST_CASE("plain sgd step without momentum") {
    std::vector<float> p = {1.f}, g = {1.f}, v;
    sgd_step_inplace(p, g, v, 0.1, 0.0, false);
    CHECK(p[0] == doctest::Approx(0.9));
}

TEST_CASE("non-negativity constraint clamps scaling factors") {
    std::vector<float> p = {0.01f}, g = {0.5f}, v;
    sgd_step_inplace(p, g, v, 0.1, 0.0, true);  // unclamped value would be -0.04
    CHECK(p[0] == 0.f);
}

TEST_CASE("two momentum steps match the hand-unrolled recurrence") {
    std::vector<float> p = {2.f}, v;
    const double lr = 0.05, mu = 0.9;
    sgd_step_inplace(p, {1.5f}, v, lr, mu, false);
    sgd_step_inplace(p, {-0.5f}, v, lr, mu, false);

    double vv = 0.0, pp = 2.0;
    vv = mu * vv - lr * 1.5;
    pp += vv;
    vv = mu * vv - lr * (-0.5);
    pp += vv;
    CHECK(std::fabs(p[0] - pp) < 1e-7);
}

TEST_CASE("cosine annealing endpoints and midpoint") {
    CHECK(cosine_lr(0, 100) == doctest::Approx(0.1));
    CHECK(cosine_lr(100, 100) == doctest::Approx(1e-4));
    CHECK(cosine_lr(50, 100) == doctest::Approx(0.05005));
    CHECK_THROWS_AS(cosine_lr(0, 0), Error);
}

TEST_CASE("cosine annealing is monotonically non-increasing") {
    double prev = cosine_lr(0, 257);
    for (int t = 1; t <= 257; ++t) {
        const double lr = cosine_lr(t, 257);
        CHECK(lr <= prev + 1e-15);
        prev = lr;
    }
}

TEST_CASE("graph-level sgd keeps every scaling vector non-negative") {
    NetGraph g = testutil::tiny_decomposed("tiny_vgg", 21, 8, 8, 1);
    Rng rng(22);
    SgdMomentum opt(0.9);
    for (int step = 0; step < 5; ++step) {
        Gradients grads;
        for (auto& n : g.nodes)
            if (n.kind == LayerKind::basis_scaling_conv) {
                Tensor dg({static_cast<int>(n.scale.numel())});
                rng.fill_normal(dg, 4.0);  // large enough to push below zero
                grads.param[param_handle(n.id, ParamSlot::scale)] = dg;
            }
        opt.step(g, grads, 0.1);
        for (const auto& n : g.nodes)
            if (n.kind == LayerKind::basis_scaling_conv)
                for (float s : n.scale.data) CHECK(s >= 0.f);
    }
}

#include <doctest.h>

#include <cmath>

#include "bsprune/error.hpp"
#include "bsprune/factorization.hpp"
#include "bsprune/ops.hpp"
#include "bsprune/rng.hpp"
#include "oracles.hpp"

using namespace bsprune;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.data) v = rng.normal() * stddev;
    return m;
}

void check_factorization_invariants(const Matrix& w, const WeightFactorization& f) {
    const int r = f.rank_bound();
    REQUIRE(r == std::min(w.rows, w.cols));

    // orthonormal columns
    const Matrix utu = matmul_at_b(f.u, f.u);
    const Matrix vtv = matmul_at_b(f.v, f.v);
    CHECK(max_abs(utu - Matrix::identity(r)) <= 1e-5);
    CHECK(max_abs(vtv - Matrix::identity(r)) <= 1e-5);

    // descending non-negative sigma
    for (int i = 0; i < r; ++i) {
        CHECK(f.sigma[static_cast<size_t>(i)] >= 0.0);
        if (i) CHECK(f.sigma[static_cast<size_t>(i)] <= f.sigma[static_cast<size_t>(i - 1)] + 1e-12);
    }

    // reconstruction
    const double wnorm = frobenius_norm(w);
    CHECK(frobenius_norm(f.reconstruct() - w) <= 1e-5 * (wnorm + 1e-12));
}

}  // namespace

TEST_CASE("weight reshape is an exact bijection in im2col order") {
    SUBCASE("1x1xc_i x c_o weights become a row vector per input channel") {
        const Tensor w = Tensor::from({1, 1, 1, 4}, {1, 2, 3, 4});
        const Matrix m = reshape_weights(w);
        CHECK(m.rows == 1);
        CHECK(m.cols == 4);
        for (int j = 0; j < 4; ++j) CHECK(m.at(0, j) == doctest::Approx(j + 1));
    }

    SUBCASE("round trip restores the tensor exactly") {
        Rng rng(31);
        Tensor w({3, 3, 4, 8});
        rng.fill_normal(w, 1.0);
        const Matrix m = reshape_weights(w);
        const Tensor back = unreshape_weights(m, 3, 3, 4, 8);
        for (size_t i = 0; i < w.data.size(); ++i) CHECK(back.data[i] == w.data[i]);
    }

    SUBCASE("conv equals im2col times the reshaped weights") {
        Rng rng(32);
        Tensor x({1, 5, 5, 3});
        rng.fill_normal(x, 1.0);
        Tensor w({3, 3, 3, 4});
        rng.fill_normal(w, 1.0);
        const Tensor conv = conv2d_forward(x, w, std::nullopt, 1, Padding::same);

        const Tensor cols = im2col(x, 3, 3, 1, Padding::same);
        const Matrix wm = reshape_weights(w);
        for (int row = 0; row < cols.dim(0); ++row)
            for (int j = 0; j < 4; ++j) {
                double acc = 0;
                for (int k = 0; k < cols.dim(1); ++k) acc += static_cast<double>(cols.at2(row, k)) * wm.at(k, j);
                CHECK(std::fabs(conv.data[static_cast<size_t>(row * 4 + j)] - acc) < 1e-4);
            }
    }
}

TEST_CASE("compact svd of simple matrices") {
    SUBCASE("identity") {
        const WeightFactorization f = compact_svd(Matrix::identity(2));
        CHECK(f.sigma[0] == doctest::Approx(1.0));
        CHECK(f.sigma[1] == doctest::Approx(1.0));
        Matrix uvt(2, 2);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                for (int l = 0; l < 2; ++l) uvt.at(i, j) += f.u.at(i, l) * f.v.at(j, l);
        CHECK(max_abs(uvt - Matrix::identity(2)) <= 1e-10);
    }

    SUBCASE("diagonal") {
        Matrix w(2, 2);
        w.at(0, 0) = 3;
        w.at(1, 1) = 1;
        const WeightFactorization f = compact_svd(w);
        CHECK(f.sigma[0] == doctest::Approx(3.0));
        CHECK(f.sigma[1] == doctest::Approx(1.0));
    }
}

TEST_CASE("compact svd matches the symmetric-eigen oracle on W^T W") {
    Rng rng(33);
    const Matrix w = random_matrix(rng, 27, 16);
    const WeightFactorization f = compact_svd(w);
    check_factorization_invariants(w, f);

    const std::vector<double> eig = oracles::symmetric_eigenvalues(matmul_at_b(w, w));
    for (size_t i = 0; i < f.sigma.size(); ++i) {
        const double expected = std::sqrt(std::max(0.0, eig[i]));
        CHECK(std::fabs(f.sigma[i] - expected) / (expected + 1e-12) < 1e-4);
    }
}

TEST_CASE("factorization invariants hold over 100 seeded random matrices") {
    Rng rng(34);
    const int shapes[4][2] = {{27, 16}, {576, 64}, {64, 576}, {1, 8}};
    for (int trial = 0; trial < 100; ++trial) {
        const auto& sh = shapes[trial % 4];
        const Matrix w = random_matrix(rng, sh[0], sh[1], 0.5 + 0.5 * rng.uniform());
        const WeightFactorization f = compact_svd(w);
        check_factorization_invariants(w, f);
    }
}

TEST_CASE("duplicated columns produce a near-zero singular value") {
    Rng rng(35);
    Matrix w = random_matrix(rng, 20, 6);
    for (int i = 0; i < 20; ++i) w.at(i, 5) = w.at(i, 0);  // exact duplicate
    const WeightFactorization f = compact_svd(w);
    check_factorization_invariants(w, f);
    CHECK(f.sigma.back() <= 1e-6 * f.sigma.front());
}

TEST_CASE("compact svd is deterministic") {
    Rng rng(36);
    const Matrix w = random_matrix(rng, 40, 12);
    const WeightFactorization a = compact_svd(w);
    const WeightFactorization b = compact_svd(w);
    CHECK(a.sigma == b.sigma);
    CHECK(a.u.data == b.u.data);
    CHECK(a.v.data == b.v.data);
}

TEST_CASE("compact svd rejects non-finite input") {
    Matrix w(2, 2);
    w.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(compact_svd(w), Error);
}

TEST_CASE("pca equivalence identities") {
    Rng rng(37);

    SUBCASE("random matrices") {
        for (const auto& sh : {std::pair{24, 10}, std::pair{8, 32}}) {
            const Matrix w = random_matrix(rng, sh.first, sh.second);
            const WeightFactorization f = compact_svd(w);
            const PcaDiagnostics d = pca_identities_check(w, f);
            const double budget = 1e-4 * frobenius_norm(w);
            CHECK(d.covariance_residual <= budget);
            CHECK(d.projection_residual <= budget);
        }
    }

    SUBCASE("zero matrix has exactly zero residuals") {
        const Matrix w(5, 3);
        const WeightFactorization f = compact_svd(w);
        const PcaDiagnostics d = pca_identities_check(w, f);
        CHECK(d.covariance_residual == 0.0);
        CHECK(d.projection_residual == 0.0);
    }
}

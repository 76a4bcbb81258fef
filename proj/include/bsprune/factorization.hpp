#pragma once

#include "bsprune/matrix.hpp"
#include "bsprune/tensor.hpp"

namespace bsprune {

/// Compact SVD of a reshaped conv weight matrix W (k x co, k = kh*kw*ci):
/// W = U * diag(sigma) * V^T with r = min(k, co), U k x r, V co x r,
/// sigma descending and non-negative.
struct WeightFactorization {
    Matrix u;                   // k x r, orthonormal columns
    std::vector<double> sigma;  // length r, descending
    Matrix v;                   // co x r, orthonormal columns

    int rank_bound() const { return static_cast<int>(sigma.size()); }
    Matrix reconstruct() const;  // U * diag(sigma) * V^T
};

/// Reshape a [kh, kw, ci, co] weight tensor into the k x co matrix whose
/// row index enumerates (kh, kw, ci) in im2col patch order. With row-major
/// storage this is a relabeling, so the inverse is exact.
Matrix reshape_weights(const Tensor& w4);
Tensor unreshape_weights(const Matrix& w, int kh, int kw, int ci, int co);

/// One-sided Jacobi SVD (QR-preconditioned for tall inputs). Wide matrices
/// are handled by factorizing the transpose and swapping U/V. Converges when
/// no column pair has normalized off-diagonal mass above 1e-10; throws after
/// 60 sweeps with the residual attached.
WeightFactorization compact_svd(const Matrix& w);

struct PcaDiagnostics {
    double covariance_residual;  // max-abs of W^T W - V Sigma^2 V^T
    double projection_residual;  // max-abs of W V - U Sigma
};

/// Residuals of the PCA-equivalence identities; both are <= 1e-4 * ||W||_F
/// for a factorization produced by compact_svd.
PcaDiagnostics pca_identities_check(const Matrix& w, const WeightFactorization& f);

}  // namespace bsprune

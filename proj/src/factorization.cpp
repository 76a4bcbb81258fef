#include "bsprune/factorization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bsprune/error.hpp"

namespace bsprune {

Matrix WeightFactorization::reconstruct() const {
    const int k = u.rows;
    const int co = v.rows;
    const int r = rank_bound();
    Matrix w(k, co);
    for (int i = 0; i < k; ++i)
        for (int l = 0; l < r; ++l) {
            const double us = u.at(i, l) * sigma[static_cast<size_t>(l)];
            if (us == 0.0) continue;
            for (int j = 0; j < co; ++j) w.at(i, j) += us * v.at(j, l);
        }
    return w;
}

Matrix reshape_weights(const Tensor& w4) {
    if (w4.rank() != 4) throw Error::config("reshape_weights expects a rank-4 tensor, got " + shape_str(w4.shape));
    const int k = w4.dim(0) * w4.dim(1) * w4.dim(2);
    const int co = w4.dim(3);
    Matrix m(k, co);
    // Row-major [kh, kw, ci, co] already enumerates rows in im2col patch
    // order, so this is a pure relabeling.
    for (std::int64_t i = 0; i < w4.numel(); ++i) m.data[static_cast<size_t>(i)] = w4.data[static_cast<size_t>(i)];
    return m;
}

Tensor unreshape_weights(const Matrix& w, int kh, int kw, int ci, int co) {
    if (w.rows != kh * kw * ci || w.cols != co) throw Error::config("unreshape_weights extent mismatch");
    Tensor t({kh, kw, ci, co});
    for (size_t i = 0; i < w.data.size(); ++i) t.data[i] = static_cast<float>(w.data[i]);
    return t;
}

namespace {

// Column-major working buffer; Jacobi and the reflector loops walk columns.
struct ColMat {
    int rows = 0;
    int cols = 0;
    std::vector<double> d;

    ColMat(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {}
    double* col(int j) { return d.data() + static_cast<size_t>(j) * rows; }
    const double* col(int j) const { return d.data() + static_cast<size_t>(j) * rows; }
};

double dot(const double* __restrict a, const double* __restrict b, int n) {
    // four accumulators break the FMA latency chain
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

void rotate_cols(double* __restrict p, double* __restrict q, int n, double c, double s) {
    for (int i = 0; i < n; ++i) {
        const double xp = p[i], xq = q[i];
        p[i] = c * xp - s * xq;
        q[i] = s * xp + c * xq;
    }
}

void axpy(double a, const double* __restrict x, double* __restrict y, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

// Householder QR in place; returns tau. R lands in the upper triangle,
// reflector tails below the diagonal (v[0] == 1 implied).
std::vector<double> householder_qr(ColMat& a) {
    const int k = a.rows, n = a.cols;
    std::vector<double> tau(static_cast<size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
        double* cj = a.col(j);
        const double norm = std::sqrt(dot(cj + j, cj + j, k - j));
        if (norm == 0.0) continue;
        const double alpha = cj[j];
        const double beta = alpha >= 0.0 ? -norm : norm;
        const double dval = alpha - beta;
        tau[static_cast<size_t>(j)] = -dval / beta;
        cj[j] = beta;
        for (int i = j + 1; i < k; ++i) cj[i] /= dval;
        const int tail = k - j - 1;
        for (int c = j + 1; c < n; ++c) {
            double* cc = a.col(c);
            double s = cc[j] + dot(cj + j + 1, cc + j + 1, tail);
            s *= tau[static_cast<size_t>(j)];
            cc[j] -= s;
            axpy(-s, cj + j + 1, cc + j + 1, tail);
        }
    }
    return tau;
}

// b := Q * b using the reflectors stored in a.
void apply_q(const ColMat& a, const std::vector<double>& tau, ColMat& b) {
    const int k = a.rows, n = a.cols;
    for (int j = n - 1; j >= 0; --j) {
        if (tau[static_cast<size_t>(j)] == 0.0) continue;
        const double* vj = a.col(j);
        const int tail = k - j - 1;
        for (int c = 0; c < b.cols; ++c) {
            double* cc = b.col(c);
            double s = cc[j] + dot(vj + j + 1, cc + j + 1, tail);
            s *= tau[static_cast<size_t>(j)];
            cc[j] -= s;
            axpy(-s, vj + j + 1, cc + j + 1, tail);
        }
    }
}

constexpr double kJacobiTol = 1e-10;
constexpr int kMaxSweeps = 60;

// Cyclic one-sided Jacobi on r (n x n). Converged when a full sweep sees no
// normalized column correlation above kJacobiTol. The right rotations are
// accumulated into v when given; the fast path skips that and recovers V
// afterwards from A0^T U Sigma^-1.
void one_sided_jacobi(ColMat& r, ColMat* v) {
    const int n = r.cols;
    const int rows = r.rows;
    std::vector<double> norms(static_cast<size_t>(n), 0.0);
    double max_off = 0.0;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        for (int j = 0; j < n; ++j) norms[static_cast<size_t>(j)] = dot(r.col(j), r.col(j), rows);
        max_off = 0.0;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double a = norms[static_cast<size_t>(p)];
                const double b = norms[static_cast<size_t>(q)];
                if (a == 0.0 || b == 0.0) continue;
                double* cp = r.col(p);
                double* cq = r.col(q);
                const double g = dot(cp, cq, rows);
                const double off = std::fabs(g) / std::sqrt(a * b);
                max_off = std::max(max_off, off);
                if (off <= kJacobiTol) continue;
                const double zeta = (b - a) / (2.0 * g);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_cols(cp, cq, rows, c, s);
                if (v) rotate_cols(v->col(p), v->col(q), n, c, s);
                norms[static_cast<size_t>(p)] = c * c * a - 2.0 * c * s * g + s * s * b;
                norms[static_cast<size_t>(q)] = s * s * a + 2.0 * c * s * g + c * c * b;
            }
        }
        if (max_off <= kJacobiTol) return;
    }
    throw Error::numeric("compact_svd: Jacobi sweeps exhausted, off-diagonal mass " + std::to_string(max_off));
}

// Columns whose singular value underflowed carry no usable direction; fill
// them with unit vectors orthogonalized against the rest so U stays
// orthonormal even for rank-deficient input.
void complete_orthonormal(ColMat& u, const std::vector<bool>& degenerate) {
    const int n = u.cols;
    const int rows = u.rows;
    int probe = 0;
    for (int j = 0; j < n; ++j) {
        if (!degenerate[static_cast<size_t>(j)]) continue;
        double* cj = u.col(j);
        for (; probe < rows; ++probe) {
            std::fill(cj, cj + rows, 0.0);
            cj[probe] = 1.0;
            for (int o = 0; o < n; ++o) {
                if (o == j || degenerate[static_cast<size_t>(o)]) continue;
                const double proj = dot(cj, u.col(o), rows);
                const double* co = u.col(o);
                for (int i = 0; i < rows; ++i) cj[i] -= proj * co[i];
            }
            // also against previously completed columns
            for (int o = 0; o < j; ++o) {
                if (!degenerate[static_cast<size_t>(o)]) continue;
                const double proj = dot(cj, u.col(o), rows);
                const double* co = u.col(o);
                for (int i = 0; i < rows; ++i) cj[i] -= proj * co[i];
            }
            const double rem = std::sqrt(dot(cj, cj, rows));
            if (rem > 0.5) {
                for (int i = 0; i < rows; ++i) cj[i] /= rem;
                ++probe;
                break;
            }
        }
    }
}

}  // namespace

WeightFactorization compact_svd(const Matrix& w) {
    for (double x : w.data)
        if (!std::isfinite(x)) throw Error::numeric("compact_svd: non-finite entry in input");

    if (w.rows < w.cols) {
        WeightFactorization f = compact_svd(w.transposed());
        std::swap(f.u, f.v);
        return f;
    }

    const int k = w.rows, n = w.cols;
    ColMat a(k, n);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < n; ++j) a.col(j)[i] = w.at(i, j);

    // W = Q R; the sweeps then run on the n x n factor only.
    const std::vector<double> tau = householder_qr(a);

    ColMat r(n, n);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i <= j; ++i) r.col(j)[i] = a.col(j)[i];
    const ColMat a0 = r;  // kept for the V recovery

    one_sided_jacobi(r, nullptr);

    std::vector<double> sigma(static_cast<size_t>(n), 0.0);
    double sigma_max = 0.0, sigma_min = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
        sigma[static_cast<size_t>(j)] = std::sqrt(dot(r.col(j), r.col(j), n));
        sigma_max = std::max(sigma_max, sigma[static_cast<size_t>(j)]);
        sigma_min = std::min(sigma_min, sigma[static_cast<size_t>(j)]);
    }

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        return sigma[static_cast<size_t>(x)] > sigma[static_cast<size_t>(y)];
    });

    const double tiny = sigma_max * 1e-13;
    ColMat ur(n, n);
    std::vector<bool> degenerate(static_cast<size_t>(n), false);
    std::vector<double> sorted_sigma(static_cast<size_t>(n));
    for (int jj = 0; jj < n; ++jj) {
        const int src = order[static_cast<size_t>(jj)];
        const double s = sigma[static_cast<size_t>(src)];
        sorted_sigma[static_cast<size_t>(jj)] = s;
        if (s <= tiny) {
            degenerate[static_cast<size_t>(jj)] = true;
            continue;
        }
        const double* rc = r.col(src);
        double* uc = ur.col(jj);
        for (int i = 0; i < n; ++i) uc[i] = rc[i] / s;
    }
    complete_orthonormal(ur, degenerate);

    // Right singular vectors, already in sorted order. Well-conditioned
    // inputs take the algebraic recovery V = A0^T U_r Sigma^-1; anything
    // near-singular reruns the sweeps with explicit accumulation instead.
    ColMat vj(n, n);
    if (sigma_min > 1e-6 * sigma_max) {
        for (int jj = 0; jj < n; ++jj) {
            const double inv = 1.0 / sorted_sigma[static_cast<size_t>(jj)];
            double* vc = vj.col(jj);
            for (int i = 0; i < n; ++i) vc[i] = dot(a0.col(i), ur.col(jj), n) * inv;
        }
    } else {
        ColMat rwork = a0;
        ColMat vacc(n, n);
        for (int j = 0; j < n; ++j) vacc.col(j)[j] = 1.0;
        one_sided_jacobi(rwork, &vacc);
        for (int jj = 0; jj < n; ++jj) {
            const int src = order[static_cast<size_t>(jj)];
            std::copy(vacc.col(src), vacc.col(src) + n, vj.col(jj));
        }
    }

    ColMat ub(k, n);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) ub.col(j)[i] = ur.col(j)[i];
    apply_q(a, tau, ub);

    WeightFactorization f;
    f.sigma = std::move(sorted_sigma);
    f.u = Matrix(k, n);
    f.v = Matrix(n, n);
    for (int j = 0; j < n; ++j) {
        // Sign convention: the largest-magnitude entry of each U column is
        // made non-negative, flipping the V column with it.
        const double* uc = ub.col(j);
        int arg = 0;
        double best = 0.0;
        for (int i = 0; i < k; ++i) {
            const double m = std::fabs(uc[i]);
            if (m > best) {
                best = m;
                arg = i;
            }
        }
        const double flip = uc[arg] < 0.0 ? -1.0 : 1.0;
        for (int i = 0; i < k; ++i) f.u.at(i, j) = flip * uc[i];
        const double* vc = vj.col(j);
        for (int i = 0; i < n; ++i) f.v.at(i, j) = flip * vc[i];
    }
    return f;
}

PcaDiagnostics pca_identities_check(const Matrix& w, const WeightFactorization& f) {
    const int n = w.cols;
    const int r = f.rank_bound();

    Matrix c = matmul_at_b(w, w);
    Matrix vs2vt(n, n);
    for (int i = 0; i < n; ++i)
        for (int l = 0; l < r; ++l) {
            const double vis2 = f.v.at(i, l) * f.sigma[static_cast<size_t>(l)] * f.sigma[static_cast<size_t>(l)];
            if (vis2 == 0.0) continue;
            for (int j = 0; j < n; ++j) vs2vt.at(i, j) += vis2 * f.v.at(j, l);
        }

    Matrix wv = matmul(w, f.v);
    Matrix us(w.rows, r);
    for (int i = 0; i < w.rows; ++i)
        for (int l = 0; l < r; ++l) us.at(i, l) = f.u.at(i, l) * f.sigma[static_cast<size_t>(l)];

    return PcaDiagnostics{max_abs(c - vs2vt), max_abs(wv - us)};
}

}  // namespace bsprune

#include "bsprune/matrix.hpp"

#include <cmath>

#include "bsprune/error.hpp"

namespace bsprune {

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols, rows);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) t.at(j, i) = at(i, j);
    return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw Error::numeric("matmul shape mismatch");
    Matrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[static_cast<size_t>(i) * a.cols];
        double* crow = &c.data[static_cast<size_t>(i) * c.cols];
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
            for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw Error::numeric("matmul_at_b shape mismatch");
    Matrix c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* arow = &a.data[static_cast<size_t>(k) * a.cols];
        const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
        for (int i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = &c.data[static_cast<size_t>(i) * c.cols];
            for (int j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return std::sqrt(s);
}

double max_abs(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s = std::max(s, std::fabs(v));
    return s;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] - b.data[i];
    return c;
}

}  // namespace bsprune

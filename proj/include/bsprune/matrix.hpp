#pragma once

#include <cstdint>
#include <vector>

namespace bsprune {

/// Dense row-major double matrix. Factorizations run in f64 even though
/// network weights are f32; the extra precision keeps the reconstruction
/// residuals well under the 1e-5 relative budget.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

    static Matrix identity(int n);
    Matrix transposed() const;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_at_b(const Matrix& a, const Matrix& b);  // a^T * b
double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
Matrix operator-(const Matrix& a, const Matrix& b);

}  // namespace bsprune

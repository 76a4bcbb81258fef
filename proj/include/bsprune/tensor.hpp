#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bsprune {

/// Dense n-dimensional array of f32 with row-major layout.
/// Activations are [batch, height, width, channels]; conv weights are
/// [kh, kw, c_in, c_out]; dense weights are [in, out].
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, float v);
    static Tensor from(std::vector<int> s, std::vector<float> values);

    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    float& at(int i) { return data[static_cast<size_t>(i)]; }
    float at(int i) const { return data[static_cast<size_t>(i)]; }

    // Row-major offset helpers for the common ranks.
    std::int64_t idx2(int i, int j) const { return static_cast<std::int64_t>(i) * shape[1] + j; }
    std::int64_t idx3(int i, int j, int k) const {
        return (static_cast<std::int64_t>(i) * shape[1] + j) * shape[2] + k;
    }
    std::int64_t idx4(int i, int j, int k, int l) const {
        return ((static_cast<std::int64_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l;
    }

    float& at2(int i, int j) { return data[static_cast<size_t>(idx2(i, j))]; }
    float at2(int i, int j) const { return data[static_cast<size_t>(idx2(i, j))]; }
    float& at4(int i, int j, int k, int l) { return data[static_cast<size_t>(idx4(i, j, k, l))]; }
    float at4(int i, int j, int k, int l) const { return data[static_cast<size_t>(idx4(i, j, k, l))]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

std::int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

}  // namespace bsprune

#include "bsprune/tensor.hpp"

#include <cmath>
#include <cstdio>

#include "bsprune/error.hpp"

namespace bsprune {

std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    for (int d : shape) {
        if (d < 0) throw Error::config("negative tensor extent in " + shape_str(shape));
    }
    data.assign(static_cast<size_t>(numel_of(shape)), 0.f);
}

Tensor Tensor::full(std::vector<int> s, float v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<float> values) {
    Tensor t;
    t.shape = std::move(s);
    if (numel_of(t.shape) != static_cast<std::int64_t>(values.size()))
        throw Error::config("tensor literal size mismatch for shape " + shape_str(t.shape));
    t.data = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace bsprune

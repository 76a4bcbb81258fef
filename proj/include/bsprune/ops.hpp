#pragma once

#include <optional>
#include <vector>

#include "bsprune/tensor.hpp"

namespace bsprune {

enum class Padding { same, valid };

struct ConvGeom {
    int out_h = 0, out_w = 0;
    int pad_top = 0, pad_left = 0;
};

/// Output extents and padding for the TF convention:
/// same -> ceil(in / stride), valid -> floor((in - k) / stride) + 1.
ConvGeom conv_geometry(int in_h, int in_w, int kh, int kw, int stride, Padding padding);

/// Patch extraction: x[b,h,w,ci] -> cols[b*oh*ow, kh*kw*ci], column index
/// enumerating (kh, kw, ci) in the same order reshape_weights enumerates
/// rows, so conv == cols * Wmat.
Tensor im2col(const Tensor& x, int kh, int kw, int stride, Padding padding);

/// Scatter-add inverse of im2col; used for input gradients.
Tensor col2im(const Tensor& cols, const std::vector<int>& x_shape, int kh, int kw, int stride, Padding padding);

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
                      Padding padding);

/// d(loss)/d(x) for a convolution with frozen weights.
Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, const std::vector<int>& x_shape, int stride,
                             Padding padding);

struct BatchNormCache {
    std::vector<double> mean;     // per channel, batch statistics
    std::vector<double> inv_std;  // 1 / sqrt(var + eps)
    Tensor x;                     // forward input, needed for backward
};

struct BatchNormState {
    Tensor gamma, beta;
    Tensor running_mean, running_var;
};

Tensor batchnorm_forward(const Tensor& x, BatchNormState& state, bool train_mode, float eps, float momentum,
                         BatchNormCache* cache, bool update_running = true);

struct BatchNormGrads {
    Tensor dx, dgamma, dbeta;
};

BatchNormGrads batchnorm_backward(const Tensor& dy, const BatchNormState& state, const BatchNormCache& cache,
                                  bool train_mode, float eps);

Tensor relu_forward(const Tensor& x);
Tensor relu_backward(const Tensor& dy, const Tensor& x);

Tensor maxpool_forward(const Tensor& x, int kh, int kw, int stride, Padding padding,
                       std::vector<std::int64_t>* argmax);
Tensor maxpool_backward(const Tensor& dy, const std::vector<int>& x_shape, const std::vector<std::int64_t>& argmax);

Tensor avgpool_forward(const Tensor& x, int kh, int kw, int stride, Padding padding);
Tensor avgpool_backward(const Tensor& dy, const std::vector<int>& x_shape, int kh, int kw, int stride,
                        Padding padding);

Tensor global_avg_pool(const Tensor& x);                                        // [b,h,w,c] -> [b,c]
Tensor global_avg_pool_backward(const Tensor& dy, const std::vector<int>& x_shape);

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& bias);     // [b,in] -> [b,out]

struct DenseGrads {
    Tensor dx, dw, dbias;
};
DenseGrads dense_backward(const Tensor& dy, const Tensor& x, const Tensor& w);

struct SoftmaxCeResult {
    double loss = 0.0;
    Tensor probs;  // [b, classes]
};

/// Mean over the batch of -log softmax(logits)[label], max-stabilized,
/// loss accumulated in f64.
SoftmaxCeResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// d(loss)/d(logits) = (softmax - onehot) / batch.
Tensor softmax_ce_backward(const SoftmaxCeResult& fwd, const std::vector<int>& labels);

/// Channel-wise scale by s then 1x1 convolution with vbar_t [r, co] plus
/// optional bias; the second half of a decomposed pair.
Tensor basis_scaling_forward(const Tensor& z, const Tensor& s, const Tensor& vbar_t,
                             const std::optional<Tensor>& bias);

struct BasisScalingGrads {
    Tensor dz, ds;
};
BasisScalingGrads basis_scaling_backward(const Tensor& dy, const Tensor& z, const Tensor& s, const Tensor& vbar_t);

}  // namespace bsprune

#include "bsprune/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bsprune/error.hpp"

namespace bsprune {

namespace {

// C[m,n] += A[m,k] * B[k,n], accumulation in ascending-k order. The order
// matters: pruning a basis index or channel must equal zero-masking it
// bit-for-bit, which holds because dropping an exactly-zero term never
// changes a partial sum.
void gemm(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::int64_t>(i) * k;
        float* crow = c + static_cast<std::int64_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const float av = arow[l];
            if (av == 0.f) continue;
            const float* brow = b + static_cast<std::int64_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,k] = A[m,n] * B[k,n]^T
void gemm_bt(const float* a, const float* b, float* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::int64_t>(i) * n;
        float* crow = c + static_cast<std::int64_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const float* brow = b + static_cast<std::int64_t>(l) * n;
            float s = 0.f;
            for (int j = 0; j < n; ++j) s += arow[j] * brow[j];
            crow[l] = s;
        }
    }
}

int channels_of(const Tensor& x) { return x.shape.back(); }

}  // namespace

ConvGeom conv_geometry(int in_h, int in_w, int kh, int kw, int stride, Padding padding) {
    if (stride < 1) throw Error::config("stride must be >= 1");
    ConvGeom g;
    if (padding == Padding::same) {
        g.out_h = (in_h + stride - 1) / stride;
        g.out_w = (in_w + stride - 1) / stride;
        const int pad_h = std::max(0, (g.out_h - 1) * stride + kh - in_h);
        const int pad_w = std::max(0, (g.out_w - 1) * stride + kw - in_w);
        g.pad_top = pad_h / 2;
        g.pad_left = pad_w / 2;
    } else {
        g.out_h = (in_h - kh) / stride + 1;
        g.out_w = (in_w - kw) / stride + 1;
        if (in_h < kh || in_w < kw || g.out_h < 1 || g.out_w < 1) throw Error::numeric("spatial underflow");
    }
    if (g.out_h < 1 || g.out_w < 1) throw Error::numeric("spatial underflow");
    return g;
}

Tensor im2col(const Tensor& x, int kh, int kw, int stride, Padding padding) {
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
    const ConvGeom g = conv_geometry(h, w, kh, kw, stride, padding);
    const int patch = kh * kw * ci;
    Tensor cols({b * g.out_h * g.out_w, patch});
    std::int64_t row = 0;
    for (int n = 0; n < b; ++n) {
        for (int oy = 0; oy < g.out_h; ++oy) {
            for (int ox = 0; ox < g.out_w; ++ox, ++row) {
                float* dst = cols.data.data() + row * patch;
                for (int dy = 0; dy < kh; ++dy) {
                    const int iy = oy * stride + dy - g.pad_top;
                    for (int dx = 0; dx < kw; ++dx) {
                        const int ix = ox * stride + dx - g.pad_left;
                        float* cell = dst + (dy * kw + dx) * ci;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                            std::fill(cell, cell + ci, 0.f);
                        } else {
                            const float* src = x.data.data() + x.idx4(n, iy, ix, 0);
                            std::copy(src, src + ci, cell);
                        }
                    }
                }
            }
        }
    }
    return cols;
}

Tensor col2im(const Tensor& cols, const std::vector<int>& x_shape, int kh, int kw, int stride, Padding padding) {
    const int b = x_shape[0], h = x_shape[1], w = x_shape[2], ci = x_shape[3];
    const ConvGeom g = conv_geometry(h, w, kh, kw, stride, padding);
    const int patch = kh * kw * ci;
    Tensor x(x_shape);
    std::int64_t row = 0;
    for (int n = 0; n < b; ++n) {
        for (int oy = 0; oy < g.out_h; ++oy) {
            for (int ox = 0; ox < g.out_w; ++ox, ++row) {
                const float* src = cols.data.data() + row * patch;
                for (int dy = 0; dy < kh; ++dy) {
                    const int iy = oy * stride + dy - g.pad_top;
                    if (iy < 0 || iy >= h) continue;
                    for (int dx = 0; dx < kw; ++dx) {
                        const int ix = ox * stride + dx - g.pad_left;
                        if (ix < 0 || ix >= w) continue;
                        const float* cell = src + (dy * kw + dx) * ci;
                        float* dst = x.data.data() + x.idx4(n, iy, ix, 0);
                        for (int c = 0; c < ci; ++c) dst[c] += cell[c];
                    }
                }
            }
        }
    }
    return x;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
                      Padding padding) {
    if (x.rank() != 4 || w.rank() != 4)
        throw Error::config("conv2d: expected rank-4 input and kernel, got " + shape_str(x.shape) + " and " +
                            shape_str(w.shape));
    if (x.dim(3) != w.dim(2))
        throw Error::config("conv2d: input channels " + std::to_string(x.dim(3)) + " do not match kernel channels " +
                            std::to_string(w.dim(2)) + " (x=" + shape_str(x.shape) + ", w=" + shape_str(w.shape) + ")");
    const int kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
    const ConvGeom g = conv_geometry(x.dim(1), x.dim(2), kh, kw, stride, padding);

    const Tensor cols = im2col(x, kh, kw, stride, padding);
    const int m = cols.dim(0);
    const int patch = cols.dim(1);
    Tensor out({x.dim(0), g.out_h, g.out_w, co});
    gemm(cols.data.data(), w.data.data(), out.data.data(), m, patch, co);
    if (bias) {
        if (bias->numel() != co) throw Error::config("conv2d: bias length mismatch");
        float* p = out.data.data();
        for (int i = 0; i < m; ++i, p += co)
            for (int c = 0; c < co; ++c) p[c] += bias->data[static_cast<size_t>(c)];
    }
    return out;
}

Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, const std::vector<int>& x_shape, int stride,
                             Padding padding) {
    const int kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
    const int patch = kh * kw * w.dim(2);
    const int m = dy.dim(0) * dy.dim(1) * dy.dim(2);
    Tensor dcols({m, patch});
    gemm_bt(dy.data.data(), w.data.data(), dcols.data.data(), m, co, patch);
    return col2im(dcols, x_shape, kh, kw, stride, padding);
}

Tensor batchnorm_forward(const Tensor& x, BatchNormState& state, bool train_mode, float eps, float momentum,
                         BatchNormCache* cache, bool update_running) {
    if (eps <= 0.f) throw Error::config("batchnorm: eps must be positive");
    const int c = channels_of(x);
    if (state.gamma.numel() != c || state.beta.numel() != c)
        throw Error::config("batchnorm: gamma/beta length " + std::to_string(state.gamma.numel()) +
                            " does not match channel count " + std::to_string(c));

    const std::int64_t n = x.numel() / c;
    std::vector<double> mean(static_cast<size_t>(c), 0.0), inv_std(static_cast<size_t>(c), 0.0);

    if (train_mode) {
        std::vector<double> sum(static_cast<size_t>(c), 0.0), sq(static_cast<size_t>(c), 0.0);
        const float* p = x.data.data();
        for (std::int64_t i = 0; i < n; ++i, p += c)
            for (int j = 0; j < c; ++j) {
                const double v = p[j];
                sum[static_cast<size_t>(j)] += v;
                sq[static_cast<size_t>(j)] += v * v;
            }
        for (int j = 0; j < c; ++j) {
            mean[static_cast<size_t>(j)] = sum[static_cast<size_t>(j)] / static_cast<double>(n);
            const double var =
                std::max(0.0, sq[static_cast<size_t>(j)] / static_cast<double>(n) -
                                  mean[static_cast<size_t>(j)] * mean[static_cast<size_t>(j)]);
            inv_std[static_cast<size_t>(j)] = 1.0 / std::sqrt(var + eps);
            if (update_running) {
                state.running_mean.at(j) = momentum * state.running_mean.at(j) +
                                           (1.f - momentum) * static_cast<float>(mean[static_cast<size_t>(j)]);
                state.running_var.at(j) =
                    momentum * state.running_var.at(j) + (1.f - momentum) * static_cast<float>(var);
            }
        }
    } else {
        for (int j = 0; j < c; ++j) {
            mean[static_cast<size_t>(j)] = state.running_mean.at(j);
            inv_std[static_cast<size_t>(j)] = 1.0 / std::sqrt(static_cast<double>(state.running_var.at(j)) + eps);
        }
    }

    Tensor out(x.shape);
    const float* p = x.data.data();
    float* q = out.data.data();
    for (std::int64_t i = 0; i < n; ++i, p += c, q += c)
        for (int j = 0; j < c; ++j) {
            const double xhat = (p[j] - mean[static_cast<size_t>(j)]) * inv_std[static_cast<size_t>(j)];
            q[j] = static_cast<float>(xhat * state.gamma.at(j) + state.beta.at(j));
        }

    if (cache) {
        cache->mean = std::move(mean);
        cache->inv_std = std::move(inv_std);
        cache->x = x;
    }
    return out;
}

BatchNormGrads batchnorm_backward(const Tensor& dy, const BatchNormState& state, const BatchNormCache& cache,
                                  bool train_mode, float /*eps*/) {
    const int c = channels_of(dy);
    const std::int64_t n = dy.numel() / c;

    BatchNormGrads g;
    g.dgamma = Tensor({c});
    g.dbeta = Tensor({c});
    g.dx = Tensor(dy.shape);

    std::vector<double> sum_dy(static_cast<size_t>(c), 0.0), sum_dy_xhat(static_cast<size_t>(c), 0.0);
    const float* pdy = dy.data.data();
    const float* px = cache.x.data.data();
    for (std::int64_t i = 0; i < n; ++i, pdy += c, px += c)
        for (int j = 0; j < c; ++j) {
            const double xhat = (px[j] - cache.mean[static_cast<size_t>(j)]) * cache.inv_std[static_cast<size_t>(j)];
            sum_dy[static_cast<size_t>(j)] += pdy[j];
            sum_dy_xhat[static_cast<size_t>(j)] += pdy[j] * xhat;
        }
    for (int j = 0; j < c; ++j) {
        g.dgamma.at(j) = static_cast<float>(sum_dy_xhat[static_cast<size_t>(j)]);
        g.dbeta.at(j) = static_cast<float>(sum_dy[static_cast<size_t>(j)]);
    }

    pdy = dy.data.data();
    px = cache.x.data.data();
    float* pdx = g.dx.data.data();
    for (std::int64_t i = 0; i < n; ++i, pdy += c, px += c, pdx += c)
        for (int j = 0; j < c; ++j) {
            const double istd = cache.inv_std[static_cast<size_t>(j)];
            const double gamma = state.gamma.at(j);
            if (train_mode) {
                const double xhat = (px[j] - cache.mean[static_cast<size_t>(j)]) * istd;
                pdx[j] = static_cast<float>(gamma * istd *
                                            (pdy[j] - sum_dy[static_cast<size_t>(j)] / static_cast<double>(n) -
                                             xhat * sum_dy_xhat[static_cast<size_t>(j)] / static_cast<double>(n)));
            } else {
                pdx[j] = static_cast<float>(gamma * istd * pdy[j]);
            }
        }
    return g;
}

Tensor relu_forward(const Tensor& x) {
    Tensor out(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) out.data[i] = x.data[i] > 0.f ? x.data[i] : 0.f;
    return out;
}

Tensor relu_backward(const Tensor& dy, const Tensor& x) {
    Tensor dx(dy.shape);
    for (size_t i = 0; i < dy.data.size(); ++i) dx.data[i] = x.data[i] > 0.f ? dy.data[i] : 0.f;
    return dx;
}

Tensor maxpool_forward(const Tensor& x, int kh, int kw, int stride, Padding padding,
                       std::vector<std::int64_t>* argmax) {
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const ConvGeom g = conv_geometry(h, w, kh, kw, stride, padding);
    Tensor out({b, g.out_h, g.out_w, c});
    if (argmax) argmax->assign(static_cast<size_t>(out.numel()), -1);
    for (int n = 0; n < b; ++n)
        for (int oy = 0; oy < g.out_h; ++oy)
            for (int ox = 0; ox < g.out_w; ++ox)
                for (int ch = 0; ch < c; ++ch) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int64_t best_idx = -1;
                    for (int dy = 0; dy < kh; ++dy) {
                        const int iy = oy * stride + dy - g.pad_top;
                        if (iy < 0 || iy >= h) continue;
                        for (int dx = 0; dx < kw; ++dx) {
                            const int ix = ox * stride + dx - g.pad_left;
                            if (ix < 0 || ix >= w) continue;
                            const float v = x.at4(n, iy, ix, ch);
                            if (v > best) {
                                best = v;
                                best_idx = x.idx4(n, iy, ix, ch);
                            }
                        }
                    }
                    const std::int64_t o = out.idx4(n, oy, ox, ch);
                    out.data[static_cast<size_t>(o)] = best_idx >= 0 ? best : 0.f;
                    if (argmax) (*argmax)[static_cast<size_t>(o)] = best_idx;
                }
    return out;
}

Tensor maxpool_backward(const Tensor& dy, const std::vector<int>& x_shape, const std::vector<std::int64_t>& argmax) {
    Tensor dx(x_shape);
    for (size_t i = 0; i < dy.data.size(); ++i) {
        const std::int64_t src = argmax[i];
        if (src >= 0) dx.data[static_cast<size_t>(src)] += dy.data[i];
    }
    return dx;
}

Tensor avgpool_forward(const Tensor& x, int kh, int kw, int stride, Padding padding) {
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const ConvGeom g = conv_geometry(h, w, kh, kw, stride, padding);
    Tensor out({b, g.out_h, g.out_w, c});
    for (int n = 0; n < b; ++n)
        for (int oy = 0; oy < g.out_h; ++oy)
            for (int ox = 0; ox < g.out_w; ++ox) {
                int count = 0;
                float* dst = out.data.data() + out.idx4(n, oy, ox, 0);
                for (int dy = 0; dy < kh; ++dy) {
                    const int iy = oy * stride + dy - g.pad_top;
                    if (iy < 0 || iy >= h) continue;
                    for (int dx = 0; dx < kw; ++dx) {
                        const int ix = ox * stride + dx - g.pad_left;
                        if (ix < 0 || ix >= w) continue;
                        ++count;
                        const float* src = x.data.data() + x.idx4(n, iy, ix, 0);
                        for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
                }
                if (count > 0)
                    for (int ch = 0; ch < c; ++ch) dst[ch] /= static_cast<float>(count);
            }
    return out;
}

Tensor avgpool_backward(const Tensor& dy, const std::vector<int>& x_shape, int kh, int kw, int stride,
                        Padding padding) {
    const int b = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3];
    const ConvGeom g = conv_geometry(h, w, kh, kw, stride, padding);
    Tensor dx(x_shape);
    for (int n = 0; n < b; ++n)
        for (int oy = 0; oy < g.out_h; ++oy)
            for (int ox = 0; ox < g.out_w; ++ox) {
                int count = 0;
                for (int dy = 0; dy < kh; ++dy) {
                    const int iy = oy * stride + dy - g.pad_top;
                    if (iy < 0 || iy >= h) continue;
                    for (int dx2 = 0; dx2 < kw; ++dx2) {
                        const int ix = ox * stride + dx2 - g.pad_left;
                        if (ix < 0 || ix >= w) continue;
                        ++count;
                    }
                }
                if (count == 0) continue;
                const float* src = dy.data.data() + dy.idx4(n, oy, ox, 0);
                for (int dy2 = 0; dy2 < kh; ++dy2) {
                    const int iy = oy * stride + dy2 - g.pad_top;
                    if (iy < 0 || iy >= h) continue;
                    for (int dx2 = 0; dx2 < kw; ++dx2) {
                        const int ix = ox * stride + dx2 - g.pad_left;
                        if (ix < 0 || ix >= w) continue;
                        float* dst = dx.data.data() + dx.idx4(n, iy, ix, 0);
                        for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch] / static_cast<float>(count);
                    }
                }
            }
    return dx;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw Error::config("global_avg_pool expects rank-4 input");
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (h < 1 || w < 1) throw Error::numeric("global_avg_pool: empty spatial extent");
    Tensor out({b, c});
    const double scale = 1.0 / (static_cast<double>(h) * w);
    for (int n = 0; n < b; ++n) {
        std::vector<double> acc(static_cast<size_t>(c), 0.0);
        const float* p = x.data.data() + x.idx4(n, 0, 0, 0);
        for (int i = 0; i < h * w; ++i, p += c)
            for (int ch = 0; ch < c; ++ch) acc[static_cast<size_t>(ch)] += p[ch];
        for (int ch = 0; ch < c; ++ch) out.at2(n, ch) = static_cast<float>(acc[static_cast<size_t>(ch)] * scale);
    }
    return out;
}

Tensor global_avg_pool_backward(const Tensor& dy, const std::vector<int>& x_shape) {
    const int b = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3];
    Tensor dx(x_shape);
    const float scale = 1.f / static_cast<float>(h * w);
    for (int n = 0; n < b; ++n) {
        const float* src = dy.data.data() + dy.idx2(n, 0);
        float* p = dx.data.data() + dx.idx4(n, 0, 0, 0);
        for (int i = 0; i < h * w; ++i, p += c)
            for (int ch = 0; ch < c; ++ch) p[ch] = src[ch] * scale;
    }
    return dx;
}

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& bias) {
    const int b = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
    if (w.dim(0) != in)
        throw Error::config("dense: input width " + std::to_string(in) + " does not match weight rows " +
                            std::to_string(w.dim(0)));
    Tensor out({b, out_dim});
    gemm(x.data.data(), w.data.data(), out.data.data(), b, in, out_dim);
    for (int n = 0; n < b; ++n)
        for (int j = 0; j < out_dim; ++j) out.at2(n, j) += bias.at(j);
    return out;
}

DenseGrads dense_backward(const Tensor& dy, const Tensor& x, const Tensor& w) {
    const int b = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
    DenseGrads g;
    g.dx = Tensor({b, in});
    gemm_bt(dy.data.data(), w.data.data(), g.dx.data.data(), b, out_dim, in);
    g.dw = Tensor({in, out_dim});
    for (int n = 0; n < b; ++n)
        for (int i = 0; i < in; ++i) {
            const float xv = x.at2(n, i);
            if (xv == 0.f) continue;
            for (int j = 0; j < out_dim; ++j) g.dw.at2(i, j) += xv * dy.at2(n, j);
        }
    g.dbias = Tensor({out_dim});
    for (int n = 0; n < b; ++n)
        for (int j = 0; j < out_dim; ++j) g.dbias.at(j) += dy.at2(n, j);
    return g;
}

SoftmaxCeResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    const int b = logits.dim(0), classes = logits.dim(1);
    if (b == 0) throw Error::config("softmax_cross_entropy: empty batch");
    if (static_cast<int>(labels.size()) != b) throw Error::config("softmax_cross_entropy: label count mismatch");

    SoftmaxCeResult res;
    res.probs = Tensor({b, classes});
    double loss = 0.0;
    for (int n = 0; n < b; ++n) {
        if (labels[static_cast<size_t>(n)] < 0 || labels[static_cast<size_t>(n)] >= classes)
            throw Error::config("softmax_cross_entropy: label out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < classes; ++j) mx = std::max(mx, static_cast<double>(logits.at2(n, j)));
        double denom = 0.0;
        for (int j = 0; j < classes; ++j) denom += std::exp(static_cast<double>(logits.at2(n, j)) - mx);
        for (int j = 0; j < classes; ++j)
            res.probs.at2(n, j) = static_cast<float>(std::exp(static_cast<double>(logits.at2(n, j)) - mx) / denom);
        const double z = static_cast<double>(logits.at2(n, labels[static_cast<size_t>(n)])) - mx;
        loss += std::log(denom) - z;
    }
    res.loss = loss / static_cast<double>(b);
    return res;
}

Tensor softmax_ce_backward(const SoftmaxCeResult& fwd, const std::vector<int>& labels) {
    const int b = fwd.probs.dim(0), classes = fwd.probs.dim(1);
    Tensor d({b, classes});
    const float inv_b = 1.f / static_cast<float>(b);
    for (int n = 0; n < b; ++n)
        for (int j = 0; j < classes; ++j) {
            const float onehot = j == labels[static_cast<size_t>(n)] ? 1.f : 0.f;
            d.at2(n, j) = (fwd.probs.at2(n, j) - onehot) * inv_b;
        }
    return d;
}

Tensor basis_scaling_forward(const Tensor& z, const Tensor& s, const Tensor& vbar_t,
                             const std::optional<Tensor>& bias) {
    const int r = vbar_t.dim(0), co = vbar_t.dim(1);
    if (z.shape.back() != r)
        throw Error::config("basis_scaling: input channels " + std::to_string(z.shape.back()) +
                            " do not match basis count " + std::to_string(r));
    if (s.numel() != r) throw Error::config("basis_scaling: scaling vector length mismatch");

    const std::int64_t m = z.numel() / r;
    std::vector<int> out_shape = z.shape;
    out_shape.back() = co;
    Tensor out(out_shape);

    const float* zp = z.data.data();
    float* op = out.data.data();
    for (std::int64_t i = 0; i < m; ++i, zp += r, op += co) {
        for (int l = 0; l < r; ++l) {
            const float t = zp[l] * s.at(l);
            if (t == 0.f) continue;
            const float* vrow = vbar_t.data.data() + static_cast<std::int64_t>(l) * co;
            for (int j = 0; j < co; ++j) op[j] += t * vrow[j];
        }
        if (bias)
            for (int j = 0; j < co; ++j) op[j] += bias->at(j);
    }
    return out;
}

BasisScalingGrads basis_scaling_backward(const Tensor& dy, const Tensor& z, const Tensor& s, const Tensor& vbar_t) {
    const int r = vbar_t.dim(0), co = vbar_t.dim(1);
    const std::int64_t m = z.numel() / r;

    BasisScalingGrads g;
    g.dz = Tensor(z.shape);
    g.ds = Tensor({r});

    std::vector<double> ds_acc(static_cast<size_t>(r), 0.0);
    const float* dyp = dy.data.data();
    const float* zp = z.data.data();
    float* dzp = g.dz.data.data();
    for (std::int64_t i = 0; i < m; ++i, dyp += co, zp += r, dzp += r) {
        for (int l = 0; l < r; ++l) {
            const float* vrow = vbar_t.data.data() + static_cast<std::int64_t>(l) * co;
            float dt = 0.f;
            for (int j = 0; j < co; ++j) dt += dyp[j] * vrow[j];
            ds_acc[static_cast<size_t>(l)] += static_cast<double>(dt) * zp[l];
            dzp[l] = dt * s.at(l);
        }
    }
    for (int l = 0; l < r; ++l) g.ds.at(l) = static_cast<float>(ds_acc[static_cast<size_t>(l)]);
    return g;
}

}  // namespace bsprune

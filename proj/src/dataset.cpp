#include "bsprune/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "bsprune/error.hpp"
#include "bsprune/rng.hpp"

namespace bsprune {

namespace {

std::uint32_t read_u32_be(std::ifstream& f, const std::string& path) {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4)) throw Error::io("truncated IDX file '" + path + "'");
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path, int upsample) {
    if (upsample < 1) throw Error::config("upsample factor must be >= 1");

    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw Error::io("cannot open IDX image file '" + images_path + "'");
    const std::uint32_t magic_i = read_u32_be(fi, images_path);
    if (magic_i != 0x00000803u)
        throw Error::io("bad IDX image magic in '" + images_path + "': expected 0x00000803, got " + hex32(magic_i));
    const int n = static_cast<int>(read_u32_be(fi, images_path));
    const int rows = static_cast<int>(read_u32_be(fi, images_path));
    const int cols = static_cast<int>(read_u32_be(fi, images_path));

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw Error::io("cannot open IDX label file '" + labels_path + "'");
    const std::uint32_t magic_l = read_u32_be(fl, labels_path);
    if (magic_l != 0x00000801u)
        throw Error::io("bad IDX label magic in '" + labels_path + "': expected 0x00000801, got " + hex32(magic_l));
    const int nl = static_cast<int>(read_u32_be(fl, labels_path));
    if (nl != n)
        throw Error::io("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");

    std::vector<unsigned char> pixels(static_cast<size_t>(n) * rows * cols);
    if (!fi.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
        throw Error::io("truncated IDX file '" + images_path + "'");
    std::vector<unsigned char> raw_labels(static_cast<size_t>(n));
    if (!fl.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(raw_labels.size())))
        throw Error::io("truncated IDX file '" + labels_path + "'");

    Dataset ds;
    const int h = rows * upsample, w = cols * upsample;
    ds.images = Tensor({n, h, w, 1});
    double mean_acc = 0.0;
    for (unsigned char p : pixels) mean_acc += p / 255.0;
    const float mean = static_cast<float>(mean_acc / static_cast<double>(pixels.size()));

    for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const unsigned char p =
                    pixels[(static_cast<size_t>(i) * rows + static_cast<size_t>(y / upsample)) * cols +
                           static_cast<size_t>(x / upsample)];
                ds.images.at4(i, y, x, 0) = static_cast<float>(p) / 255.f - mean;
            }

    ds.labels.resize(static_cast<size_t>(n));
    int max_label = 0;
    for (int i = 0; i < n; ++i) {
        ds.labels[static_cast<size_t>(i)] = raw_labels[static_cast<size_t>(i)];
        max_label = std::max(max_label, ds.labels[static_cast<size_t>(i)]);
    }
    ds.num_classes = max_label + 1;
    return ds;
}

Dataset synth_dataset(int n, int h, int w, int c, int num_classes, std::uint64_t seed, double noise) {
    if (n <= 0) throw Error::config("synth_dataset: n must be positive");
    if (num_classes < 2) throw Error::config("synth_dataset: need at least two classes");

    Rng rng(seed);

    // Per-class prototype: a coarse 4x4 random field, bilinearly upsampled,
    // then normalized to zero mean and unit RMS per class.
    const int grid = 4;
    std::vector<Tensor> protos;
    for (int cls = 0; cls < num_classes; ++cls) {
        Tensor coarse({grid, grid, c});
        for (auto& v : coarse.data) v = static_cast<float>(rng.normal());
        Tensor proto({h, w, c});
        for (int y = 0; y < h; ++y) {
            const double gy = (static_cast<double>(y) + 0.5) / h * (grid - 1);
            const int y0 = static_cast<int>(gy);
            const int y1 = std::min(y0 + 1, grid - 1);
            const double fy = gy - y0;
            for (int x = 0; x < w; ++x) {
                const double gx = (static_cast<double>(x) + 0.5) / w * (grid - 1);
                const int x0 = static_cast<int>(gx);
                const int x1 = std::min(x0 + 1, grid - 1);
                const double fx = gx - x0;
                for (int ch = 0; ch < c; ++ch) {
                    const double v00 = coarse.at(static_cast<int>(coarse.idx3(y0, x0, ch)));
                    const double v01 = coarse.at(static_cast<int>(coarse.idx3(y0, x1, ch)));
                    const double v10 = coarse.at(static_cast<int>(coarse.idx3(y1, x0, ch)));
                    const double v11 = coarse.at(static_cast<int>(coarse.idx3(y1, x1, ch)));
                    const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
                    proto.at(static_cast<int>(proto.idx3(y, x, ch))) = static_cast<float>(v);
                }
            }
        }
        double mean = 0.0;
        for (float v : proto.data) mean += v;
        mean /= static_cast<double>(proto.numel());
        double rms = 0.0;
        for (auto& v : proto.data) {
            v -= static_cast<float>(mean);
            rms += static_cast<double>(v) * v;
        }
        rms = std::sqrt(rms / static_cast<double>(proto.numel()));
        if (rms > 0)
            for (auto& v : proto.data) v = static_cast<float>(v / rms);
        protos.push_back(std::move(proto));
    }

    Dataset ds;
    ds.images = Tensor({n, h, w, c});
    ds.labels.resize(static_cast<size_t>(n));
    ds.num_classes = num_classes;
    const std::int64_t per_image = static_cast<std::int64_t>(h) * w * c;
    for (int i = 0; i < n; ++i) {
        const int cls = i % num_classes;
        ds.labels[static_cast<size_t>(i)] = cls;
        float* dst = ds.images.data.data() + static_cast<std::int64_t>(i) * per_image;
        const float* src = protos[static_cast<size_t>(cls)].data.data();
        for (std::int64_t j = 0; j < per_image; ++j)
            dst[j] = src[j] + static_cast<float>(noise * rng.normal());
    }
    return ds;
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed) {
    if (val_fraction <= 0.0 || val_fraction >= 1.0) throw Error::config("val_fraction must be in (0,1)");
    std::vector<int> idx(static_cast<size_t>(ds.size()));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Rng rng(seed);
    rng.shuffle(idx.begin(), idx.end());

    const int n_val = std::max(1, static_cast<int>(static_cast<double>(ds.size()) * val_fraction));
    std::vector<int> val_idx(idx.begin(), idx.begin() + n_val);
    std::vector<int> train_idx(idx.begin() + n_val, idx.end());

    Dataset train, val;
    train.images = gather_images(ds, train_idx);
    train.labels = gather_labels(ds, train_idx);
    train.split = "train";
    train.num_classes = ds.num_classes;
    val.images = gather_images(ds, val_idx);
    val.labels = gather_labels(ds, val_idx);
    val.split = "val";
    val.num_classes = ds.num_classes;
    return {std::move(train), std::move(val)};
}

Tensor gather_images(const Dataset& ds, const std::vector<int>& idx) {
    const int h = ds.images.dim(1), w = ds.images.dim(2), c = ds.images.dim(3);
    Tensor out({static_cast<int>(idx.size()), h, w, c});
    const std::int64_t per_image = static_cast<std::int64_t>(h) * w * c;
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(ds.images.data.begin() + idx[i] * per_image, ds.images.data.begin() + (idx[i] + 1) * per_image,
                  out.data.begin() + static_cast<std::int64_t>(i) * per_image);
    return out;
}

std::vector<int> gather_labels(const Dataset& ds, const std::vector<int>& idx) {
    std::vector<int> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = ds.labels[static_cast<size_t>(idx[i])];
    return out;
}

}  // namespace bsprune

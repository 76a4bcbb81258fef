#include "bsprune/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "bsprune/error.hpp"
#include "bsprune/executor.hpp"
#include "bsprune/optimizer.hpp"
#include "bsprune/rng.hpp"

namespace bsprune {

namespace {

void augment_batch(Tensor& images, bool shift, bool flip, double shift_fraction, Rng& rng) {
    const int b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
    const int max_dy = shift ? static_cast<int>(std::lround(shift_fraction * h)) : 0;
    const int max_dx = shift ? static_cast<int>(std::lround(shift_fraction * w)) : 0;
    Tensor scratch({h, w, c});
    for (int n = 0; n < b; ++n) {
        const int dy = shift ? rng.uniform_int(-max_dy, max_dy) : 0;
        const int dx = shift ? rng.uniform_int(-max_dx, max_dx) : 0;
        const bool do_flip = flip && rng.uniform() < 0.5;
        if (dy == 0 && dx == 0 && !do_flip) continue;
        std::fill(scratch.data.begin(), scratch.data.end(), 0.f);
        for (int y = 0; y < h; ++y) {
            const int sy = y - dy;
            if (sy < 0 || sy >= h) continue;
            for (int x = 0; x < w; ++x) {
                int sx = x - dx;
                if (do_flip) sx = w - 1 - sx;
                if (sx < 0 || sx >= w) continue;
                for (int ch = 0; ch < c; ++ch)
                    scratch.at(static_cast<int>(scratch.idx3(y, x, ch))) = images.at4(n, sy, sx, ch);
            }
        }
        std::copy(scratch.data.begin(), scratch.data.end(),
                  images.data.begin() + images.idx4(n, 0, 0, 0));
    }
}

}  // namespace

std::vector<EpochStats> train_stage(NetGraph& g, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
    std::vector<EpochStats> history;
    if (cfg.epochs == 0) return history;
    if (train.size() == 0) throw Error::config("train_stage: empty training set");

    const int steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;

    Rng rng(cfg.seed);
    SgdMomentum opt(cfg.momentum);

    std::vector<int> order(static_cast<size_t>(train.size()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double loss_acc = 0.0;
        int steps = 0;
        for (int start = 0; start < train.size(); start += cfg.batch_size) {
            const int end = std::min(start + cfg.batch_size, train.size());
            std::vector<int> idx(order.begin() + start, order.begin() + end);
            Tensor images = gather_images(train, idx);
            const std::vector<int> labels = gather_labels(train, idx);
            if (cfg.augment_shift || cfg.augment_flip)
                augment_batch(images, cfg.augment_shift, cfg.augment_flip, cfg.shift_fraction, rng);

            Tape tape;
            ForwardOptions opts;
            opts.mode = ExecMode::train;
            opts.dropout_rate = static_cast<float>(cfg.dropout);
            opts.dropout_rng = &rng;
            const Tensor logits = forward(g, images, opts, &tape);
            const SoftmaxCeResult ce = softmax_cross_entropy(logits, labels);
            if (!std::isfinite(ce.loss))
                throw Error::numeric("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
            loss_acc += ce.loss;
            ++steps;

            const Gradients grads = backward(g, tape, softmax_ce_backward(ce, labels));
            const double lr = cosine_lr(step, total_steps, cfg.lr_min, cfg.lr_max);
            opt.step(g, grads, lr);
            ++step;
        }
        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_acc / steps;
        st.val_accuracy = val.size() > 0 ? evaluate_accuracy(g, val, cfg.batch_size) : 0.0;
        history.push_back(st);
    }
    return history;
}

double evaluate_accuracy(NetGraph& g, const Dataset& ds, int batch_size) {
    if (ds.size() == 0) throw Error::config("evaluate_accuracy: empty dataset");
    int correct = 0;
    for (int start = 0; start < ds.size(); start += batch_size) {
        const int end = std::min(start + batch_size, ds.size());
        std::vector<int> idx;
        idx.reserve(static_cast<size_t>(end - start));
        for (int i = start; i < end; ++i) idx.push_back(i);
        const Tensor images = gather_images(ds, idx);
        const std::vector<int> labels = gather_labels(ds, idx);

        ForwardOptions opts;
        opts.mode = ExecMode::infer;
        const Tensor logits = forward(g, images, opts, nullptr);
        const int classes = logits.dim(1);
        for (int n = 0; n < logits.dim(0); ++n) {
            int arg = 0;
            float best = logits.at2(n, 0);
            for (int j = 1; j < classes; ++j)
                if (logits.at2(n, j) > best) {
                    best = logits.at2(n, j);
                    arg = j;
                }
            if (arg == labels[static_cast<size_t>(n)]) ++correct;
        }
    }
    return static_cast<double>(correct) / ds.size();
}

void recompute_bn_stats(NetGraph& g, const Dataset& train, int batch_size) {
    if (train.size() == 0) throw Error::config("recompute_bn_stats: empty dataset");

    std::unordered_map<int, std::vector<double>> mean_acc, var_acc;
    int batches = 0;
    for (int start = 0; start < train.size(); start += batch_size) {
        const int end = std::min(start + batch_size, train.size());
        std::vector<int> idx;
        idx.reserve(static_cast<size_t>(end - start));
        for (int i = start; i < end; ++i) idx.push_back(i);
        const Tensor images = gather_images(train, idx);

        Tape tape;
        ForwardOptions opts;
        opts.mode = ExecMode::train;
        opts.update_running_stats = false;
        forward(g, images, opts, &tape);

        for (const auto& n : g.nodes) {
            if (n.kind != LayerKind::bn) continue;
            const BatchNormCache& cache = tape.bn.at(n.id);
            auto& ma = mean_acc[n.id];
            auto& va = var_acc[n.id];
            ma.resize(cache.mean.size(), 0.0);
            va.resize(cache.mean.size(), 0.0);
            for (size_t j = 0; j < cache.mean.size(); ++j) {
                ma[j] += cache.mean[j];
                const double istd = cache.inv_std[j];
                va[j] += 1.0 / (istd * istd) - 1e-3;  // matches the executor's BN eps
            }
        }
        ++batches;
    }

    for (auto& n : g.nodes) {
        if (n.kind != LayerKind::bn) continue;
        const auto& ma = mean_acc.at(n.id);
        const auto& va = var_acc.at(n.id);
        for (size_t j = 0; j < ma.size(); ++j) {
            n.running_mean.data[j] = static_cast<float>(ma[j] / batches);
            n.running_var.data[j] = static_cast<float>(std::max(0.0, va[j] / batches));
        }
    }
}

}  // namespace bsprune

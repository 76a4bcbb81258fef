#include "bsprune/executor.hpp"

#include "bsprune/error.hpp"

namespace bsprune {

namespace {
constexpr float kBnEps = 1e-3f;
constexpr float kBnMomentum = 0.99f;
}

Tensor forward(NetGraph& g, const Tensor& x, const ForwardOptions& opts, Tape* tape) {
    if (x.rank() != 4) throw Error::config("forward expects a [b,h,w,c] batch");
    const ActShape in_shape = g.node(g.input_id).out_shape;
    if (x.dim(1) != in_shape.h || x.dim(2) != in_shape.w || x.dim(3) != in_shape.c)
        throw Error::config("forward: batch shape " + shape_str(x.shape) + " does not match graph input [" +
                            std::to_string(in_shape.h) + "," + std::to_string(in_shape.w) + "," +
                            std::to_string(in_shape.c) + "]");

    std::unordered_map<int, Tensor> acts;
    if (tape) {
        tape->valid = false;
        tape->mode = opts.mode;
        tape->out.clear();
        tape->bn.clear();
        tape->pool_argmax.clear();
        tape->dense_input.clear();
        tape->dropout_mask.clear();
    }

    const bool train = opts.mode == ExecMode::train;
    Tensor result;
    for (auto& n : g.nodes) {
        Tensor out;
        switch (n.kind) {
        case LayerKind::input:
            out = x;
            break;
        case LayerKind::conv: {
            const Tensor& in = acts.at(n.inputs[0]);
            std::optional<Tensor> bias;
            if (n.has_bias) bias = n.bias;
            out = conv2d_forward(in, n.weight, bias, n.stride, n.padding);
            break;
        }
        case LayerKind::basis_scaling_conv: {
            const Tensor& in = acts.at(n.inputs[0]);
            std::optional<Tensor> bias;
            if (n.has_bias) bias = n.bias;
            out = basis_scaling_forward(in, n.scale, n.weight, bias);
            break;
        }
        case LayerKind::bn: {
            const Tensor& in = acts.at(n.inputs[0]);
            BatchNormState state{n.gamma, n.beta, n.running_mean, n.running_var};
            BatchNormCache cache;
            out = batchnorm_forward(in, state, train, kBnEps, kBnMomentum, tape ? &cache : nullptr,
                                    opts.update_running_stats);
            if (train && opts.update_running_stats) {
                n.running_mean = std::move(state.running_mean);
                n.running_var = std::move(state.running_var);
            }
            if (tape) tape->bn[n.id] = std::move(cache);
            break;
        }
        case LayerKind::relu:
            out = relu_forward(acts.at(n.inputs[0]));
            break;
        case LayerKind::maxpool: {
            std::vector<std::int64_t> argmax;
            out = maxpool_forward(acts.at(n.inputs[0]), n.kh, n.kw, n.stride, n.padding, tape ? &argmax : nullptr);
            if (tape) tape->pool_argmax[n.id] = std::move(argmax);
            break;
        }
        case LayerKind::avgpool:
            out = avgpool_forward(acts.at(n.inputs[0]), n.kh, n.kw, n.stride, n.padding);
            break;
        case LayerKind::global_avg_pool:
            out = global_avg_pool(acts.at(n.inputs[0]));
            break;
        case LayerKind::add: {
            out = acts.at(n.inputs[0]);
            for (size_t i = 1; i < n.inputs.size(); ++i) {
                const Tensor& other = acts.at(n.inputs[i]);
                if (!out.same_shape(other))
                    throw Error::numeric("add node '" + n.name + "': input shapes differ at runtime");
                for (size_t j = 0; j < out.data.size(); ++j) out.data[j] += other.data[j];
            }
            break;
        }
        case LayerKind::concat: {
            const Tensor& first = acts.at(n.inputs[0]);
            const int b = first.dim(0), h = first.dim(1), w = first.dim(2);
            int c = 0;
            for (int in : n.inputs) c += acts.at(in).shape.back();
            out = Tensor({b, h, w, c});
            const std::int64_t rows = static_cast<std::int64_t>(b) * h * w;
            int offset = 0;
            for (int in : n.inputs) {
                const Tensor& part = acts.at(in);
                const int pc = part.shape.back();
                for (std::int64_t row = 0; row < rows; ++row)
                    std::copy(part.data.begin() + row * pc, part.data.begin() + (row + 1) * pc,
                              out.data.begin() + row * c + offset);
                offset += pc;
            }
            break;
        }
        case LayerKind::dense: {
            Tensor in = acts.at(n.inputs[0]);
            if (in.rank() != 2) {
                const int b = in.dim(0);
                in.shape = {b, static_cast<int>(in.numel() / b)};
            }
            if (train && opts.dropout_rate > 0.f) {
                if (!opts.dropout_rng) throw Error::config("dropout enabled without an RNG stream");
                const float keep = 1.f - opts.dropout_rate;
                Tensor mask(in.shape);
                for (auto& m : mask.data)
                    m = opts.dropout_rng->uniform() < keep ? 1.f / keep : 0.f;
                for (size_t i = 0; i < in.data.size(); ++i) in.data[i] *= mask.data[i];
                if (tape) tape->dropout_mask[n.id] = std::move(mask);
            }
            out = dense_forward(in, n.weight, n.bias);
            if (tape) tape->dense_input[n.id] = std::move(in);
            break;
        }
        }
        if (n.id == g.output_id) result = out;
        if (tape) tape->out[n.id] = out;
        acts[n.id] = std::move(out);
    }

    if (tape) tape->valid = true;
    return result;
}

Gradients backward(const NetGraph& g, const Tape& tape, const Tensor& dlogits) {
    if (!tape.valid) throw Error::config("backward called without a recorded forward pass");

    Gradients grads;
    std::unordered_map<int, Tensor>& dout = grads.node_output;
    dout[g.output_id] = dlogits;

    const bool train = tape.mode == ExecMode::train;

    auto accumulate = [&dout](int id, Tensor&& t) {
        auto it = dout.find(id);
        if (it == dout.end()) {
            dout.emplace(id, std::move(t));
        } else {
            for (size_t i = 0; i < t.data.size(); ++i) it->second.data[i] += t.data[i];
        }
    };

    for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
        const LayerNode& n = *it;
        auto dit = dout.find(n.id);
        if (dit == dout.end()) continue;  // loss does not depend on this node
        const Tensor& dy = dit->second;

        switch (n.kind) {
        case LayerKind::input:
            break;
        case LayerKind::conv: {
            const int producer = n.inputs[0];
            if (producer != g.input_id) {
                const Tensor& in = tape.out.at(producer);
                accumulate(producer, conv2d_backward_input(dy, n.weight, in.shape, n.stride, n.padding));
            }
            break;
        }
        case LayerKind::basis_scaling_conv: {
            const Tensor& z = tape.out.at(n.inputs[0]);
            BasisScalingGrads bg = basis_scaling_backward(dy, z, n.scale, n.weight);
            if (n.scale_trainable) grads.param[param_handle(n.id, ParamSlot::scale)] = std::move(bg.ds);
            accumulate(n.inputs[0], std::move(bg.dz));
            break;
        }
        case LayerKind::bn: {
            const BatchNormState state{n.gamma, n.beta, n.running_mean, n.running_var};
            BatchNormGrads bg = batchnorm_backward(dy, state, tape.bn.at(n.id), train, kBnEps);
            if (n.bn_trainable) {
                grads.param[param_handle(n.id, ParamSlot::gamma)] = std::move(bg.dgamma);
                grads.param[param_handle(n.id, ParamSlot::beta)] = std::move(bg.dbeta);
            }
            accumulate(n.inputs[0], std::move(bg.dx));
            break;
        }
        case LayerKind::relu:
            accumulate(n.inputs[0], relu_backward(dy, tape.out.at(n.inputs[0])));
            break;
        case LayerKind::maxpool:
            accumulate(n.inputs[0], maxpool_backward(dy, tape.out.at(n.inputs[0]).shape, tape.pool_argmax.at(n.id)));
            break;
        case LayerKind::avgpool:
            accumulate(n.inputs[0],
                       avgpool_backward(dy, tape.out.at(n.inputs[0]).shape, n.kh, n.kw, n.stride, n.padding));
            break;
        case LayerKind::global_avg_pool:
            accumulate(n.inputs[0], global_avg_pool_backward(dy, tape.out.at(n.inputs[0]).shape));
            break;
        case LayerKind::add:
            for (int in : n.inputs) {
                Tensor copy = dy;
                accumulate(in, std::move(copy));
            }
            break;
        case LayerKind::concat: {
            const int c = dy.shape.back();
            const std::int64_t rows = dy.numel() / c;
            int offset = 0;
            for (int in : n.inputs) {
                const Tensor& part = tape.out.at(in);
                const int pc = part.shape.back();
                Tensor dpart(part.shape);
                for (std::int64_t row = 0; row < rows; ++row)
                    std::copy(dy.data.begin() + row * c + offset, dy.data.begin() + row * c + offset + pc,
                              dpart.data.begin() + row * pc);
                offset += pc;
                accumulate(in, std::move(dpart));
            }
            break;
        }
        case LayerKind::dense: {
            const Tensor& in = tape.dense_input.at(n.id);
            DenseGrads dg = dense_backward(dy, in, n.weight);
            if (n.dense_trainable) {
                grads.param[param_handle(n.id, ParamSlot::weight)] = std::move(dg.dw);
                grads.param[param_handle(n.id, ParamSlot::bias)] = std::move(dg.dbias);
            }
            auto mit = tape.dropout_mask.find(n.id);
            if (mit != tape.dropout_mask.end())
                for (size_t i = 0; i < dg.dx.data.size(); ++i) dg.dx.data[i] *= mit->second.data[i];
            const Tensor& producer_out = tape.out.at(n.inputs[0]);
            dg.dx.shape = producer_out.shape;  // undo the flatten
            accumulate(n.inputs[0], std::move(dg.dx));
            break;
        }
        }
    }
    return grads;
}

}  // namespace bsprune

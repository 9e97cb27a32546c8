#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mixtts/core/ops.hpp"
#include "mixtts/core/rng.hpp"
#include "mixtts/core/tensor.hpp"

// Parameter-holding building blocks shared by the model modules. Weights are
// drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases start at zero,
// layer-norm at gamma=1/beta=0.

namespace mixtts {

template <typename T>
using ParamMap = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
inline void add_param(ParamMap<T>& out, const std::string& name, const Tensor<T>& p) {
    out.emplace_back(name, p);
}

template <typename T>
inline Tensor<T> init_weight(Shape shape, Index fan_in, Rng& rng) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
    Tensor<T> w = Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
    w.set_requires_grad(true);
    return w;
}

template <typename T>
inline Tensor<T> init_zeros(Shape shape) {
    Tensor<T> b = Tensor<T>::zeros(std::move(shape));
    b.set_requires_grad(true);
    return b;
}

template <typename T>
struct LinearLayer {
    Tensor<T> weight;  // [In, Out]
    Tensor<T> bias;    // [Out]

    LinearLayer() = default;
    LinearLayer(Index in, Index out, Rng& rng)
        : weight(init_weight<T>({in, out}, in, rng)), bias(init_zeros<T>({out})) {}

    Tensor<T> forward(Tape<T>* tape, Tensor<T> x) const { return linear(tape, x, weight, bias); }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        add_param(out, prefix + ".weight", weight);
        add_param(out, prefix + ".bias", bias);
    }
};

template <typename T>
struct ConvLayer {
    Tensor<T> weight;  // [Cout, Cin, K]
    Tensor<T> bias;    // [Cout]

    ConvLayer() = default;
    ConvLayer(Index cin, Index cout, Index k, Rng& rng)
        : weight(init_weight<T>({cout, cin, k}, cin * k, rng)), bias(init_zeros<T>({cout})) {}

    Tensor<T> forward(Tape<T>* tape, Tensor<T> x) const { return conv1d(tape, x, weight, bias); }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        add_param(out, prefix + ".weight", weight);
        add_param(out, prefix + ".bias", bias);
    }
};

template <typename T>
struct DepthwiseLayer {
    Tensor<T> kernels;  // [C, K]
    Tensor<T> bias;     // [C]

    DepthwiseLayer() = default;
    DepthwiseLayer(Index c, Index k, Rng& rng)
        : kernels(init_weight<T>({c, k}, k, rng)), bias(init_zeros<T>({c})) {}

    Tensor<T> forward(Tape<T>* tape, Tensor<T> x) const {
        return depthwise_conv1d(tape, x, kernels, bias);
    }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        add_param(out, prefix + ".kernels", kernels);
        add_param(out, prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNormLayer {
    Tensor<T> gamma;
    Tensor<T> beta;
    T eps = static_cast<T>(1e-5);

    LayerNormLayer() = default;
    explicit LayerNormLayer(Index c) {
        gamma = Tensor<T>::full({c}, T(1));
        gamma.set_requires_grad(true);
        beta = init_zeros<T>({c});
    }

    Tensor<T> forward(Tape<T>* tape, Tensor<T> x) const {
        return layer_norm(tape, x, gamma, beta, eps);
    }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        add_param(out, prefix + ".gamma", gamma);
        add_param(out, prefix + ".beta", beta);
    }
};

template <typename T>
inline Index param_count(const ParamMap<T>& params) {
    Index n = 0;
    for (const auto& [name, p] : params) n += p.numel();
    return n;
}

template <typename T>
inline void zero_grads(ParamMap<T>& params) {
    for (auto& [name, p] : params) p.zero_grad();
}

}  // namespace mixtts

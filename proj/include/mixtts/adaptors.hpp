#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mixtts/core/nn.hpp"
#include "mixtts/core/ops.hpp"

// Variance adaptors: token-level duration and pitch predictors (conv towers in
// the FastPitch style), the scalar-pitch embedding, and symbol-level pitch
// averaging. Durations live in log(1+d) space end to end.

namespace mixtts {

struct PredictorConfig {
    Index in_dim = 384;
    Index hidden = 256;
    Index kernel = 3;
    Index n_layers = 2;
    double dropout_p = 0.1;

    void validate() const {
        require_config(hidden > 0, "predictor: hidden width must be positive");
        require_config(kernel % 2 == 1, "predictor: kernel must be odd");
        require_config(n_layers >= 1, "predictor: need at least one layer");
        require_config(dropout_p >= 0.0 && dropout_p < 1.0, "predictor: dropout must lie in [0,1)");
    }
};

template <typename T>
struct PitchContour {
    std::vector<T> frame_f0;  // Hz, 0 = unvoiced
    bool normalized = false;
    T mean_hz = 0;  // dataset statistics over voiced frames
    T std_hz = 1;
};

// Per-token mean of voiced frames within each token's span; 0 when the span
// is entirely unvoiced. Operates on raw Hz values.
template <typename T>
std::vector<T> average_pitch(const std::vector<T>& frame_f0, const std::vector<Index>& durations) {
    Index total = 0;
    for (Index d : durations) total += d;
    require_shape(total == static_cast<Index>(frame_f0.size()),
                  "average_pitch: durations cover " + std::to_string(total) + " frames but contour has " +
                      std::to_string(frame_f0.size()));
    std::vector<T> out(durations.size(), T(0));
    Index t = 0;
    for (std::size_t n = 0; n < durations.size(); ++n) {
        T sum = 0;
        Index voiced = 0;
        for (Index k = 0; k < durations[n]; ++k, ++t) {
            if (frame_f0[static_cast<std::size_t>(t)] > T(0)) {
                sum += frame_f0[static_cast<std::size_t>(t)];
                ++voiced;
            }
        }
        out[n] = voiced > 0 ? sum / static_cast<T>(voiced) : T(0);
    }
    return out;
}

// duration <-> log(1+duration)
template <typename T>
inline T encode_duration(Index d) {
    return static_cast<T>(std::log1p(static_cast<double>(d)));
}

template <typename T>
inline Index decode_duration(T log_dur, double pace = 1.0) {
    const double d = std::round(std::expm1(static_cast<double>(log_dur)));
    const double clamped = d < 0.0 ? 0.0 : d;
    return static_cast<Index>(std::llround(clamped * pace));
}

// Conv tower over [B,N,C]: n_layers of (conv -> ReLU -> layer norm -> dropout),
// then a linear head to one scalar per position. Output [B,N,1].
template <typename T>
struct TokenPredictor {
    PredictorConfig cfg;
    std::vector<ConvLayer<T>> convs;
    std::vector<LayerNormLayer<T>> norms;
    LinearLayer<T> head;

    TokenPredictor() = default;
    TokenPredictor(const PredictorConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        for (Index i = 0; i < cfg.n_layers; ++i) {
            convs.emplace_back(i == 0 ? cfg.in_dim : cfg.hidden, cfg.hidden, cfg.kernel, rng);
            norms.emplace_back(cfg.hidden);
        }
        head = LinearLayer<T>(cfg.hidden, 1, rng);
    }

    Tensor<T> forward(Tape<T>* tape, Tensor<T> x, const std::vector<Index>& lengths, Mode mode,
                      Rng& rng) const {
        auto h = apply_sequence_mask(tape, x, lengths);
        for (std::size_t i = 0; i < convs.size(); ++i) {
            h = convs[i].forward(tape, h);
            h = apply_sequence_mask(tape, h, lengths);
            h = relu(tape, h);
            h = norms[i].forward(tape, h);
            h = dropout(tape, h, cfg.dropout_p, mode, rng);
            h = apply_sequence_mask(tape, h, lengths);
        }
        h = head.forward(tape, h);
        return apply_sequence_mask(tape, h, lengths);
    }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        for (std::size_t i = 0; i < convs.size(); ++i) {
            convs[i].collect(prefix + ".conv" + std::to_string(i), out);
            norms[i].collect(prefix + ".norm" + std::to_string(i), out);
        }
        head.collect(prefix + ".head", out);
    }
};

// Lifts one scalar pitch value per token into the model width with a small
// same-padded convolution over the token axis.
template <typename T>
struct PitchEmbedding {
    ConvLayer<T> conv;

    PitchEmbedding() = default;
    PitchEmbedding(Index out_dim, Rng& rng) : conv(1, out_dim, 3, rng) {}

    // pitch [B,N,1] -> [B,N,C]
    Tensor<T> forward(Tape<T>* tape, Tensor<T> pitch, const std::vector<Index>& lengths) const {
        auto h = apply_sequence_mask(tape, pitch, lengths);
        h = conv.forward(tape, h);
        return apply_sequence_mask(tape, h, lengths);
    }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        conv.collect(prefix + ".conv", out);
    }
};

}  // namespace mixtts

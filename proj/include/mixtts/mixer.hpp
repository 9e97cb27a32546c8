#pragma once

#include <string>
#include <vector>

#include "mixtts/core/nn.hpp"
#include "mixtts/core/ops.hpp"

// Mixer blocks for variable-length sequences: a time-mix half built from two
// depthwise 1D convolutions and a channel-mix half built from two MLP layers,
// each wrapped in pre-norm residuals. Padded positions are kept at exact zero
// so batched runs match per-sample runs at every valid frame.

namespace mixtts {

struct MixerBlockConfig {
    Index feature_dim = 384;
    Index kernel_size = 11;
    Index expansion_factor = 4;  // channel mix only; time mix has none
    double dropout_p = 0.15;

    void validate() const {
        require_config(feature_dim > 0, "mixer: feature_dim must be positive");
        require_config(kernel_size % 2 == 1, "mixer: kernel_size must be odd, got " +
                                                 std::to_string(kernel_size));
        require_config(expansion_factor >= 1, "mixer: expansion_factor must be >= 1");
        require_config(dropout_p >= 0.0 && dropout_p < 1.0, "mixer: dropout_p must lie in [0,1)");
    }
};

struct StackConfig {
    Index n_blocks = 0;
    Index kernel_start = 0;
    Index kernel_end = 0;
    Index kernel_step = 0;

    void validate() const {
        require_config(n_blocks >= 0, "stack: n_blocks must be >= 0");
        if (n_blocks == 0) return;
        if (n_blocks == 1)
            require_config(kernel_start == kernel_end,
                           "stack: single block needs kernel_start == kernel_end");
        else
            require_config(kernel_start + (n_blocks - 1) * kernel_step == kernel_end,
                           "stack: kernel schedule must satisfy start + (n-1)*step == end, got " +
                               std::to_string(kernel_start) + ".." + std::to_string(kernel_end) +
                               " step " + std::to_string(kernel_step) + " over " +
                               std::to_string(n_blocks) + " blocks");
        for (Index i = 0; i < n_blocks; ++i)
            require_config((kernel_start + i * kernel_step) % 2 == 1,
                           "stack: kernel of block " + std::to_string(i) + " is even");
    }

    Index kernel_of(Index block) const { return kernel_start + block * kernel_step; }
};

template <typename T>
struct MixerBlock {
    MixerBlockConfig cfg;
    // time mix
    LayerNormLayer<T> time_norm;
    DepthwiseLayer<T> time_conv1;
    DepthwiseLayer<T> time_conv2;
    // channel mix
    LayerNormLayer<T> chan_norm;
    LinearLayer<T> chan_up;
    LinearLayer<T> chan_down;

    MixerBlock() = default;
    MixerBlock(const MixerBlockConfig& c, Rng& rng)
        : cfg(c),
          time_norm(c.feature_dim),
          time_conv1(c.feature_dim, c.kernel_size, rng),
          time_conv2(c.feature_dim, c.kernel_size, rng),
          chan_norm(c.feature_dim),
          chan_up(c.feature_dim, c.feature_dim * c.expansion_factor, rng),
          chan_down(c.feature_dim * c.expansion_factor, c.feature_dim, rng) {
        cfg.validate();
    }

    // x + Dropout(Mask(DW2(GELU(Mask(DW1(Mask(LN(x)))))))). The mask in front
    // of the first conv keeps padded frames out of its receptive field, which
    // the zero same-padding contract requires.
    Tensor<T> time_mix(Tape<T>* tape, Tensor<T> x, const std::vector<Index>& lengths, Mode mode,
                       Rng& rng) const {
        require_shape(x.rank() == 3 && x.dim(2) == cfg.feature_dim,
                      "time_mix: expected [B,T," + std::to_string(cfg.feature_dim) + "], got " +
                          shape_str(x.shape()));
        auto h = time_norm.forward(tape, x);
        h = apply_sequence_mask(tape, h, lengths);
        h = time_conv1.forward(tape, h);
        h = apply_sequence_mask(tape, h, lengths);
        h = gelu(tape, h);
        h = time_conv2.forward(tape, h);
        h = apply_sequence_mask(tape, h, lengths);
        h = dropout(tape, h, cfg.dropout_p, mode, rng);
        return add(tape, x, h);
    }

    // x + Dropout(Mask(Lin_down(GELU(Mask(Lin_up(LN(x)))))))
    Tensor<T> channel_mix(Tape<T>* tape, Tensor<T> x, const std::vector<Index>& lengths, Mode mode,
                          Rng& rng) const {
        require_shape(x.rank() == 3 && x.dim(2) == cfg.feature_dim,
                      "channel_mix: expected [B,T," + std::to_string(cfg.feature_dim) + "], got " +
                          shape_str(x.shape()));
        auto h = chan_norm.forward(tape, x);
        h = chan_up.forward(tape, h);
        h = apply_sequence_mask(tape, h, lengths);
        h = gelu(tape, h);
        h = chan_down.forward(tape, h);
        h = apply_sequence_mask(tape, h, lengths);
        h = dropout(tape, h, cfg.dropout_p, mode, rng);
        return add(tape, x, h);
    }

    Tensor<T> forward(Tape<T>* tape, Tensor<T> x, const std::vector<Index>& lengths, Mode mode,
                      Rng& rng) const {
        return channel_mix(tape, time_mix(tape, x, lengths, mode, rng), lengths, mode, rng);
    }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        time_norm.collect(prefix + ".time_norm", out);
        time_conv1.collect(prefix + ".time_conv1", out);
        time_conv2.collect(prefix + ".time_conv2", out);
        chan_norm.collect(prefix + ".chan_norm", out);
        chan_up.collect(prefix + ".chan_up", out);
        chan_down.collect(prefix + ".chan_down", out);
    }
};

template <typename T>
struct MixerStack {
    std::vector<MixerBlock<T>> blocks;

    MixerStack() = default;
    MixerStack(const StackConfig& stack_cfg, const MixerBlockConfig& block_cfg, Rng& rng) {
        stack_cfg.validate();
        for (Index i = 0; i < stack_cfg.n_blocks; ++i) {
            MixerBlockConfig c = block_cfg;
            c.kernel_size = stack_cfg.kernel_of(i);
            blocks.emplace_back(c, rng);
        }
    }

    std::vector<Index> kernel_sizes() const {
        std::vector<Index> ks;
        for (const auto& b : blocks) ks.push_back(b.cfg.kernel_size);
        return ks;
    }

    // Input is masked once on entry; every block keeps padding at zero.
    Tensor<T> forward(Tape<T>* tape, Tensor<T> x, const std::vector<Index>& lengths, Mode mode,
                      Rng& rng) const {
        x = apply_sequence_mask(tape, x, lengths);
        for (const auto& b : blocks) x = b.forward(tape, x, lengths, mode, rng);
        return x;
    }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    }
};

}  // namespace mixtts

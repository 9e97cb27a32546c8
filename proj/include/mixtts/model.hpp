#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mixtts/adaptors.hpp"
#include "mixtts/aligner.hpp"
#include "mixtts/config.hpp"
#include "mixtts/lm.hpp"
#include "mixtts/mixer.hpp"

// Full text-to-mel model. Training mode: symbols -> encoder -> (optional LM
// attention) -> alignment lattice, Viterbi durations and ground-truth symbol
// pitch -> pitch embedding -> length regulation -> decoder -> mel frames, with
// token predictors running on a detached copy of the encoder output.
// Inference mode: the predictors supply durations and pitch instead.

namespace mixtts {

template <typename T>
struct TrainSample {
    std::vector<int> symbol_ids;
    Tensor<T> mel;            // [T, n_mels] target
    std::vector<T> pitch_hz;  // per-frame contour, 0 = unvoiced
    std::vector<int> lm_ids;  // extended model only
};

template <typename T>
struct PitchStats {
    T mean = 0;
    T stddev = 1;
};

template <typename T>
struct ForwardOutput {
    Tensor<T> mel_out;        // [B, Tmax, M]
    Tensor<T> pred_log_durs;  // [B, Nmax, 1]
    Tensor<T> pred_pitch;     // [B, Nmax, 1]
    std::vector<Tensor<T>> aligner_losses;          // scalar per sample
    std::vector<std::vector<Index>> used_durations;  // per sample, sums to T_b
    std::vector<std::vector<T>> used_pitch;          // normalized symbol pitch
    std::vector<Index> symbol_lengths;
    std::vector<Index> frame_lengths;
};

template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    Tensor<T> mel;
    Tensor<T> aligner;
    Tensor<T> durs;
    Tensor<T> pitch;
};

template <typename T>
struct InferResult {
    Tensor<T> mel;  // [T, M]
    std::vector<Index> durations;
    std::vector<T> pitch;
};

struct TrainForwardOptions {
    // When set, skips Viterbi and uses these durations (gradcheck needs the
    // graph to stay smooth under parameter perturbations).
    const std::vector<std::vector<Index>>* fixed_durations = nullptr;
    // Finite differences cannot see a stop-gradient; gradcheck disables the
    // detach so analytic and numeric gradients describe the same function.
    bool detach_predictor_inputs = true;
};

template <typename T>
class MixerTtsModel {
  public:
    MixerTtsModel(const Config& cfg, Rng& rng, const FrozenEmbeddingTable<T>* lm_table = nullptr)
        : cfg_(cfg) {
        cfg_.validate();
        const Index c = cfg_.model.feature_dim;
        symbol_emb_ = init_weight<T>({cfg_.model.vocab_size, c}, c, rng);

        MixerBlockConfig block;
        block.feature_dim = c;
        block.expansion_factor = cfg_.model.expansion;
        block.dropout_p = cfg_.model.dropout;
        encoder_ = MixerStack<T>(cfg_.model.encoder, block, rng);
        decoder_ = MixerStack<T>(cfg_.model.decoder, block, rng);

        aligner_ = AlignmentEncoder<T>(c, cfg_.audio.n_mels, cfg_.model.aligner_dim, rng);

        PredictorConfig dp = cfg_.duration_predictor;
        dp.in_dim = c;
        dur_pred_ = TokenPredictor<T>(dp, rng);
        PredictorConfig pp = cfg_.pitch_predictor;
        pp.in_dim = c;
        pitch_pred_ = TokenPredictor<T>(pp, rng);

        pitch_emb_ = PitchEmbedding<T>(c, rng);
        mel_head_ = LinearLayer<T>(c, cfg_.audio.n_mels, rng);

        // LM additions come last so that a basic and an extended model built
        // from the same seed share every common parameter bit-for-bit.
        if (cfg_.model.extended) {
            if (lm_table)
                lm_table_ = *lm_table;
            else
                lm_table_ = load_embedding_table<T>(cfg_.model.lm_table);
            lm_att_.emplace(c, lm_table_.dim, cfg_.model.lm_max_len, rng);
        }
    }

    const Config& config() const { return cfg_; }
    bool extended() const { return lm_att_.has_value(); }
    const FrozenEmbeddingTable<T>& lm_table() const { return lm_table_; }
    LmAttention<T>& lm_attention() { return *lm_att_; }

    void set_pitch_stats(const PitchStats<T>& stats) { pitch_stats_ = stats; }
    const PitchStats<T>& pitch_stats() const { return pitch_stats_; }

    ParamMap<T> parameters() const {
        ParamMap<T> out;
        add_param(out, "symbol_emb", symbol_emb_);
        encoder_.collect("encoder", out);
        decoder_.collect("decoder", out);
        aligner_.collect("aligner", out);
        dur_pred_.collect("dur_pred", out);
        pitch_pred_.collect("pitch_pred", out);
        pitch_emb_.collect("pitch_emb", out);
        mel_head_.collect("mel_head", out);
        if (lm_att_) lm_att_->collect("lm_att", out);
        return out;
    }

    Index count_parameters() const { return param_count(parameters()); }

    void zero_grad() {
        auto params = parameters();
        zero_grads(params);
    }

    T normalize_pitch(T hz) const {
        return hz > T(0) ? (hz - pitch_stats_.mean) / pitch_stats_.stddev : T(0);
    }

    // Encoder output with optional LM conditioning, shared by both modes.
    // Returns [B, Nmax, C] with padded rows at zero.
    Tensor<T> encode_symbols(Tape<T>* tape, const std::vector<TrainSample<T>>& batch, Mode mode,
                             Rng& rng) const {
        std::vector<Tensor<T>> embeddings;
        std::vector<Index> lengths;
        for (const auto& sample : batch) {
            require_shape(!sample.symbol_ids.empty(), "forward: sample with no symbols");
            embeddings.push_back(embedding(tape, symbol_emb_, sample.symbol_ids));
            lengths.push_back(static_cast<Index>(sample.symbol_ids.size()));
        }
        Tensor<T> x = stack_padded(tape, embeddings);
        Tensor<T> t_e = encoder_.forward(tape, x, lengths, mode, rng);
        if (lm_att_) {
            std::vector<Tensor<T>> conditioned;
            const Index n_max = t_e.dim(1);
            for (std::size_t b = 0; b < batch.size(); ++b) {
                require_shape(!batch[b].lm_ids.empty(), "forward: extended model needs lm token ids");
                auto slice = select_batch(tape, t_e, static_cast<Index>(b), lengths[b]);
                auto lm_emb = embedding(tape, lm_table_.matrix, batch[b].lm_ids);
                conditioned.push_back(lm_att_->forward(tape, slice, lm_emb));
            }
            t_e = stack_padded(tape, conditioned, n_max);
            t_e = apply_sequence_mask(tape, t_e, lengths);
        }
        return t_e;
    }

    ForwardOutput<T> forward_train(Tape<T>* tape, const std::vector<TrainSample<T>>& batch, Mode mode,
                                   Rng& rng, const TrainForwardOptions& opts = {}) const {
        require_shape(!batch.empty(), "forward_train: empty batch");
        const Index n_mels = cfg_.audio.n_mels;
        ForwardOutput<T> out;
        for (const auto& sample : batch) {
            require_shape(sample.mel.rank() == 2 && sample.mel.dim(1) == n_mels,
                          "forward_train: mel target must be [T," + std::to_string(n_mels) + "], got " +
                              shape_str(sample.mel.shape()));
            require_shape(static_cast<Index>(sample.pitch_hz.size()) == sample.mel.dim(0),
                          "forward_train: pitch contour length does not match mel frames");
            out.symbol_lengths.push_back(static_cast<Index>(sample.symbol_ids.size()));
            out.frame_lengths.push_back(sample.mel.dim(0));
        }

        Tensor<T> t_e = encode_symbols(tape, batch, mode, rng);

        // alignment: lattice per sample from the conditioned encoder output
        std::vector<Tensor<T>> mel_targets;
        for (const auto& sample : batch) mel_targets.push_back(sample.mel);
        Tensor<T> mel_in = stack_padded(tape, mel_targets);
        auto [text_enc, mel_enc] =
            aligner_.encode(tape, t_e, mel_in, out.symbol_lengths, out.frame_lengths);

        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Index n_b = out.symbol_lengths[b];
            const Index t_b = out.frame_lengths[b];
            if (n_b > t_b)
                throw AlignmentError("sample " + std::to_string(b) + ": " + std::to_string(n_b) +
                                     " symbols cannot align to " + std::to_string(t_b) + " frames");
            auto te_b = select_batch(tape, text_enc, static_cast<Index>(b), n_b);
            auto me_b = select_batch(tape, mel_enc, static_cast<Index>(b), t_b);
            std::optional<Tensor<T>> prior;
            if (cfg_.model.aligner_prior)
                prior = beta_binomial_prior<T>(t_b, n_b, cfg_.model.aligner_prior_scale);
            auto lattice = soft_alignment(tape, te_b, me_b, prior ? &*prior : nullptr);
            out.aligner_losses.push_back(forward_sum_loss(tape, lattice));
            if (opts.fixed_durations) {
                out.used_durations.push_back((*opts.fixed_durations)[b]);
            } else {
                out.used_durations.push_back(viterbi_durations(lattice));
            }
        }

        // ground-truth symbol pitch from the contour under the used durations
        for (std::size_t b = 0; b < batch.size(); ++b) {
            auto avg_hz = average_pitch(batch[b].pitch_hz, out.used_durations[b]);
            std::vector<T> norm(avg_hz.size());
            for (std::size_t i = 0; i < avg_hz.size(); ++i) norm[i] = normalize_pitch(avg_hz[i]);
            out.used_pitch.push_back(std::move(norm));
        }

        // predictors run on a detached copy so their losses leave the encoder
        // untouched
        Tensor<T> predictor_in = opts.detach_predictor_inputs ? detach(t_e) : t_e;
        out.pred_log_durs = dur_pred_.forward(tape, predictor_in, out.symbol_lengths, mode, rng);
        out.pred_pitch = pitch_pred_.forward(tape, predictor_in, out.symbol_lengths, mode, rng);

        // pitch conditioning and length regulation
        std::vector<Tensor<T>> pitch_cols;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            Tensor<T> col({out.symbol_lengths[b], 1});
            for (Index i = 0; i < out.symbol_lengths[b]; ++i)
                col.at(i, 0) = out.used_pitch[b][static_cast<std::size_t>(i)];
            pitch_cols.push_back(col);
        }
        Tensor<T> pitch_in = stack_padded(tape, pitch_cols, t_e.dim(1));
        Tensor<T> pemb = pitch_emb_.forward(tape, pitch_in, out.symbol_lengths);
        Tensor<T> conditioned = add(tape, t_e, pemb);
        conditioned = apply_sequence_mask(tape, conditioned, out.symbol_lengths);

        std::vector<Tensor<T>> regulated;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            auto slice = select_batch(tape, conditioned, static_cast<Index>(b), out.symbol_lengths[b]);
            regulated.push_back(length_regulate(tape, slice, out.used_durations[b]));
        }
        Tensor<T> frames = stack_padded(tape, regulated);
        frames = decoder_.forward(tape, frames, out.frame_lengths, mode, rng);
        out.mel_out = mel_head_.forward(tape, frames);
        out.mel_out = apply_sequence_mask(tape, out.mel_out, out.frame_lengths);
        return out;
    }

    LossBreakdown<T> total_loss(Tape<T>* tape, const ForwardOutput<T>& out,
                                const std::vector<TrainSample<T>>& batch) const {
        const Index batch_size = static_cast<Index>(batch.size());
        const Index n_mels = cfg_.audio.n_mels;

        // mel: mean over valid elements across the whole batch
        Tensor<T> mel_sum = Tensor<T>::scalar(T(0));
        Index mel_count = 0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Index t_b = out.frame_lengths[b];
            auto pred = select_batch(tape, out.mel_out, static_cast<Index>(b), t_b);
            auto diff = sub(tape, pred, batch[b].mel);
            mel_sum = add(tape, mel_sum, sum_all(tape, mul(tape, diff, diff)));
            mel_count += t_b * n_mels;
        }
        Tensor<T> l_mel = scale(tape, mel_sum, T(1) / static_cast<T>(mel_count));

        // aligner: per-frame forward-sum, averaged over the batch
        Tensor<T> l_aligner = Tensor<T>::scalar(T(0));
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const T w = T(1) / static_cast<T>(batch_size * out.frame_lengths[b]);
            l_aligner = add(tape, l_aligner, scale(tape, out.aligner_losses[b], w));
        }

        // durations and pitch: mean over tokens
        Tensor<T> dur_sum = Tensor<T>::scalar(T(0));
        Tensor<T> pitch_sum = Tensor<T>::scalar(T(0));
        Index token_count = 0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Index n_b = out.symbol_lengths[b];
            Tensor<T> dur_target({n_b, 1});
            Tensor<T> pitch_target({n_b, 1});
            for (Index i = 0; i < n_b; ++i) {
                dur_target.at(i, 0) = encode_duration<T>(out.used_durations[b][static_cast<std::size_t>(i)]);
                pitch_target.at(i, 0) = out.used_pitch[b][static_cast<std::size_t>(i)];
            }
            auto dur_pred = select_batch(tape, out.pred_log_durs, static_cast<Index>(b), n_b);
            auto dur_diff = sub(tape, dur_pred, dur_target);
            dur_sum = add(tape, dur_sum, sum_all(tape, mul(tape, dur_diff, dur_diff)));
            auto pitch_pred = select_batch(tape, out.pred_pitch, static_cast<Index>(b), n_b);
            auto pitch_diff = sub(tape, pitch_pred, pitch_target);
            pitch_sum = add(tape, pitch_sum, sum_all(tape, mul(tape, pitch_diff, pitch_diff)));
            token_count += n_b;
        }
        Tensor<T> l_durs = scale(tape, dur_sum, T(1) / static_cast<T>(token_count));
        Tensor<T> l_pitch = scale(tape, pitch_sum, T(1) / static_cast<T>(token_count));

        LossBreakdown<T> loss;
        loss.mel = l_mel;
        loss.aligner = l_aligner;
        loss.durs = l_durs;
        loss.pitch = l_pitch;
        loss.total = add(tape, add(tape, scale(tape, l_aligner, static_cast<T>(cfg_.loss.aligner)),
                                   scale(tape, l_mel, static_cast<T>(cfg_.loss.mel))),
                         add(tape, scale(tape, l_durs, static_cast<T>(cfg_.loss.durs)),
                             scale(tape, l_pitch, static_cast<T>(cfg_.loss.pitch))));
        return loss;
    }

    InferResult<T> forward_infer(const std::vector<int>& symbol_ids, const std::vector<int>& lm_ids,
                                 double pace = 1.0) const {
        require_shape(!symbol_ids.empty(), "forward_infer: empty symbol sequence");
        require_config(pace > 0, "forward_infer: pace must be positive");
        Rng rng(0);  // eval mode never draws from it
        TrainSample<T> sample;
        sample.symbol_ids = symbol_ids;
        sample.lm_ids = lm_ids;
        std::vector<TrainSample<T>> batch{sample};
        Tensor<T> t_e = encode_symbols(nullptr, batch, Mode::eval, rng);
        const Index n = static_cast<Index>(symbol_ids.size());
        std::vector<Index> lengths{n};

        auto log_durs = dur_pred_.forward(nullptr, t_e, lengths, Mode::eval, rng);
        auto pitch = pitch_pred_.forward(nullptr, t_e, lengths, Mode::eval, rng);

        InferResult<T> result;
        result.durations.resize(static_cast<std::size_t>(n));
        result.pitch.resize(static_cast<std::size_t>(n));
        Index total = 0;
        for (Index i = 0; i < n; ++i) {
            result.durations[static_cast<std::size_t>(i)] = decode_duration(log_durs.at(0, i, 0), pace);
            result.pitch[static_cast<std::size_t>(i)] = pitch.at(0, i, 0);
            total += result.durations[static_cast<std::size_t>(i)];
        }
        if (total == 0) {
            // keep at least one frame: give it to the most confident token
            Index best = 0;
            for (Index i = 1; i < n; ++i)
                if (log_durs.at(0, i, 0) > log_durs.at(0, best, 0)) best = i;
            result.durations[static_cast<std::size_t>(best)] = 1;
        }

        Tensor<T> pitch_col({1, n, 1});
        for (Index i = 0; i < n; ++i) pitch_col.at(0, i, 0) = result.pitch[static_cast<std::size_t>(i)];
        Tensor<T> pemb = pitch_emb_.forward(nullptr, pitch_col, lengths);
        Tensor<T> conditioned = add<T>(nullptr, t_e, pemb);

        auto slice = select_batch<T>(nullptr, conditioned, 0, n);
        auto frames2d = length_regulate<T>(nullptr, slice, result.durations);
        std::vector<Index> frame_lengths{frames2d.dim(0)};
        Tensor<T> frames = stack_padded<T>(nullptr, {frames2d});
        frames = decoder_.forward(nullptr, frames, frame_lengths, Mode::eval, rng);
        Tensor<T> mel3 = mel_head_.forward(nullptr, frames);
        result.mel = select_batch<T>(nullptr, mel3, 0, frames2d.dim(0));
        return result;
    }

    // Lattice for one utterance, eval mode; used by the align command.
    AlignmentLattice<T> alignment_lattice(const std::vector<int>& symbol_ids, const Tensor<T>& mel,
                                          const std::vector<int>& lm_ids = {}) const {
        Rng rng(0);
        TrainSample<T> sample;
        sample.symbol_ids = symbol_ids;
        sample.lm_ids = lm_ids;
        std::vector<TrainSample<T>> batch{sample};
        Tensor<T> t_e = encode_symbols(nullptr, batch, Mode::eval, rng);
        const Index n = static_cast<Index>(symbol_ids.size());
        const Index t = mel.dim(0);
        auto [text_enc, mel_enc] =
            aligner_.encode(nullptr, t_e, stack_padded<T>(nullptr, {mel}), {n}, {t});
        std::optional<Tensor<T>> prior;
        if (cfg_.model.aligner_prior) prior = beta_binomial_prior<T>(t, n, cfg_.model.aligner_prior_scale);
        return soft_alignment<T>(nullptr, select_batch<T>(nullptr, text_enc, 0, n),
                                 select_batch<T>(nullptr, mel_enc, 0, t), prior ? &*prior : nullptr);
    }

  private:
    Config cfg_;
    Tensor<T> symbol_emb_;
    MixerStack<T> encoder_;
    MixerStack<T> decoder_;
    AlignmentEncoder<T> aligner_;
    TokenPredictor<T> dur_pred_;
    TokenPredictor<T> pitch_pred_;
    PitchEmbedding<T> pitch_emb_;
    LinearLayer<T> mel_head_;
    std::optional<LmAttention<T>> lm_att_;
    FrozenEmbeddingTable<T> lm_table_;
    PitchStats<T> pitch_stats_;
};

}  // namespace mixtts

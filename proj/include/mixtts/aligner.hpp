#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mixtts/core/nn.hpp"
#include "mixtts/core/ops.hpp"

// Unsupervised speech-to-text alignment. Text and mel sequences are encoded
// into a shared space, a soft per-frame distribution over tokens is formed
// from negated pairwise L2 distances, a monotonic forward-sum loss trains it,
// and Viterbi decoding binarizes it into per-token durations.
//
// Monotonic path semantics: the path starts at token 0 on frame 0, ends at
// token N-1 on frame T-1, advances by 0 or 1 token per frame, and therefore
// gives every token a strictly positive duration. Feasible only when N <= T.

namespace mixtts {

template <typename T>
struct AlignmentLattice {
    Tensor<T> log_probs;  // [T, N], rows normalized over tokens
    Index n_frames = 0;
    Index n_tokens = 0;

    AlignmentLattice() = default;
    explicit AlignmentLattice(Tensor<T> lp)
        : log_probs(std::move(lp)), n_frames(log_probs.dim(0)), n_tokens(log_probs.dim(1)) {
        require_shape(log_probs.rank() == 2,
                      "lattice: expected [T,N] log-probs, got " + shape_str(log_probs.shape()));
        for (Index t = 0; t < n_frames; ++t) {
            T mx = -std::numeric_limits<T>::infinity();
            for (Index n = 0; n < n_tokens; ++n) mx = std::max(mx, log_probs.at(t, n));
            T lse = 0;
            for (Index n = 0; n < n_tokens; ++n) lse += std::exp(log_probs.at(t, n) - mx);
            lse = mx + std::log(lse);
            if (std::abs(static_cast<double>(lse)) > 1e-5)
                throw NumericalError("lattice row " + std::to_string(t) +
                                     " is not normalized (logsumexp = " + std::to_string(lse) + ")");
        }
    }
};

struct MonotonicPath {
    std::vector<Index> assignment;  // token index per frame

    std::vector<Index> durations(Index n_tokens) const {
        std::vector<Index> d(static_cast<std::size_t>(n_tokens), 0);
        for (Index tok : assignment) ++d[static_cast<std::size_t>(tok)];
        return d;
    }
};

// Static monotonic prior over (frame, token) positions shaped like a
// beta-binomial along the token axis, width-normalized to the pair (T, N).
template <typename T>
Tensor<T> beta_binomial_prior(Index n_frames, Index n_tokens, double scale = 1.0) {
    auto log_beta = [](double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); };
    auto log_choose = [](double n, double k) {
        return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1);
    };
    Tensor<T> prior({n_frames, n_tokens});
    const double n = static_cast<double>(n_tokens - 1);
    for (Index t = 0; t < n_frames; ++t) {
        const double a = scale * static_cast<double>(t + 1);
        const double b = scale * static_cast<double>(n_frames - t);
        for (Index k = 0; k < n_tokens; ++k) {
            const double kk = static_cast<double>(k);
            const double lp =
                log_choose(n, kk) + log_beta(kk + a, n - kk + b) - log_beta(a, b);
            prior.at(t, k) = static_cast<T>(lp);
        }
    }
    return prior;
}

// log_probs[t,n] = log_softmax over n of (-|text_n - mel_t| + prior[t,n])
template <typename T>
AlignmentLattice<T> soft_alignment(Tape<T>* tape, Tensor<T> text_enc, Tensor<T> mel_enc,
                                   const Tensor<T>* prior = nullptr) {
    Tensor<T> dist = pairwise_l2(tape, text_enc, mel_enc);  // [T, N]
    Tensor<T> logits = scale(tape, dist, T(-1));
    if (prior) logits = add(tape, logits, *prior);
    return AlignmentLattice<T>(log_softmax(tape, logits, 1));
}

// -log sum over all monotonic paths of exp(sum_t log_probs[t, s(t)]).
// Forward recursion in the log domain; backward fills the posterior occupancy
// -exp(alpha + beta - logZ) per cell.
template <typename T>
Tensor<T> forward_sum_loss(Tape<T>* tape, const AlignmentLattice<T>& lattice) {
    const Index n_frames = lattice.n_frames;
    const Index n_tokens = lattice.n_tokens;
    if (n_tokens > n_frames)
        throw AlignmentError("alignment infeasible: " + std::to_string(n_tokens) + " tokens need at least " +
                             std::to_string(n_tokens) + " frames, got " + std::to_string(n_frames));
    Tensor<T> lp = lattice.log_probs;
    const T neg_inf = -std::numeric_limits<T>::infinity();

    auto alpha = std::make_shared<std::vector<T>>(
        static_cast<std::size_t>(n_frames * n_tokens), neg_inf);
    auto at = [&](std::vector<T>& m, Index t, Index n) -> T& {
        return m[static_cast<std::size_t>(t * n_tokens + n)];
    };
    at(*alpha, 0, 0) = lp.at(0, 0);
    for (Index t = 1; t < n_frames; ++t) {
        // reachable band: n <= t and n >= N - (T - t)
        const Index lo = std::max<Index>(0, n_tokens - (n_frames - t));
        const Index hi = std::min<Index>(t, n_tokens - 1);
        for (Index n = lo; n <= hi; ++n) {
            const T stay = at(*alpha, t - 1, n);
            const T advance = n > 0 ? at(*alpha, t - 1, n - 1) : neg_inf;
            at(*alpha, t, n) = lp.at(t, n) + logaddexp(stay, advance);
        }
    }
    const T log_z = at(*alpha, n_frames - 1, n_tokens - 1);
    Tensor<T> out = Tensor<T>::scalar(-log_z);
    finalize_op(
        tape, out, lp.requires_grad(),
        [lp, out, alpha, n_frames, n_tokens, neg_inf, log_z]() mutable {
            if (!out.has_grad() || !lp.requires_grad()) return;
            const T g = out.grad()[0];
            std::vector<T> beta(static_cast<std::size_t>(n_frames * n_tokens), neg_inf);
            auto at = [&](std::vector<T>& m, Index t, Index n) -> T& {
                return m[static_cast<std::size_t>(t * n_tokens + n)];
            };
            beta[static_cast<std::size_t>((n_frames - 1) * n_tokens + n_tokens - 1)] = T(0);
            for (Index t = n_frames - 2; t >= 0; --t) {
                const Index lo = std::max<Index>(0, n_tokens - (n_frames - t));
                const Index hi = std::min<Index>(t, n_tokens - 1);
                for (Index n = lo; n <= hi; ++n) {
                    const T stay = lp.at(t + 1, n) + at(beta, t + 1, n);
                    const T advance = n + 1 < n_tokens ? lp.at(t + 1, n + 1) + at(beta, t + 1, n + 1)
                                                       : neg_inf;
                    at(beta, t, n) = logaddexp(stay, advance);
                }
            }
            auto& glp = lp.grad();
            for (Index t = 0; t < n_frames; ++t)
                for (Index n = 0; n < n_tokens; ++n) {
                    const T a = (*alpha)[static_cast<std::size_t>(t * n_tokens + n)];
                    if (a == neg_inf) continue;
                    const T b = beta[static_cast<std::size_t>(t * n_tokens + n)];
                    if (b == neg_inf) continue;
                    glp[static_cast<std::size_t>(t * n_tokens + n)] -= g * std::exp(a + b - log_z);
                }
        },
        "forward_sum_loss");
    return out;
}

// Highest-scoring monotonic path; ties prefer staying on the current token.
template <typename T>
MonotonicPath viterbi_path(const AlignmentLattice<T>& lattice) {
    const Index n_frames = lattice.n_frames;
    const Index n_tokens = lattice.n_tokens;
    if (n_tokens > n_frames)
        throw AlignmentError("alignment infeasible: " + std::to_string(n_tokens) + " tokens over " +
                             std::to_string(n_frames) + " frames");
    const T neg_inf = -std::numeric_limits<T>::infinity();
    std::vector<T> score(static_cast<std::size_t>(n_frames * n_tokens), neg_inf);
    std::vector<std::uint8_t> came_from_prev(static_cast<std::size_t>(n_frames * n_tokens), 0);
    auto idx = [&](Index t, Index n) { return static_cast<std::size_t>(t * n_tokens + n); };
    score[idx(0, 0)] = lattice.log_probs.at(0, 0);
    for (Index t = 1; t < n_frames; ++t) {
        const Index lo = std::max<Index>(0, n_tokens - (n_frames - t));
        const Index hi = std::min<Index>(t, n_tokens - 1);
        for (Index n = lo; n <= hi; ++n) {
            const T stay = score[idx(t - 1, n)];
            const T advance = n > 0 ? score[idx(t - 1, n - 1)] : neg_inf;
            // On ties take the advance edge: entering a token as late as
            // possible is the path that stays on each token longest.
            if (stay > advance) {
                score[idx(t, n)] = lattice.log_probs.at(t, n) + stay;
            } else {
                score[idx(t, n)] = lattice.log_probs.at(t, n) + advance;
                came_from_prev[idx(t, n)] = 1;
            }
        }
    }
    MonotonicPath path;
    path.assignment.assign(static_cast<std::size_t>(n_frames), 0);
    Index n = n_tokens - 1;
    for (Index t = n_frames - 1; t >= 0; --t) {
        path.assignment[static_cast<std::size_t>(t)] = n;
        if (t > 0 && came_from_prev[idx(t, n)]) --n;
    }
    return path;
}

template <typename T>
T viterbi_score(const AlignmentLattice<T>& lattice, const MonotonicPath& path) {
    T s = 0;
    for (Index t = 0; t < lattice.n_frames; ++t)
        s += lattice.log_probs.at(t, path.assignment[static_cast<std::size_t>(t)]);
    return s;
}

template <typename T>
std::vector<Index> viterbi_durations(const AlignmentLattice<T>& lattice) {
    return viterbi_path(lattice).durations(lattice.n_tokens);
}

// Text and mel branch encoders: two same-padded convolutions each, shared
// output dimension.
template <typename T>
struct AlignmentEncoder {
    ConvLayer<T> text_conv1, text_conv2;
    ConvLayer<T> mel_conv1, mel_conv2;

    AlignmentEncoder() = default;
    AlignmentEncoder(Index text_dim, Index mel_dim, Index out_dim, Rng& rng)
        : text_conv1(text_dim, out_dim, 3, rng),
          text_conv2(out_dim, out_dim, 3, rng),
          mel_conv1(mel_dim, out_dim, 3, rng),
          mel_conv2(out_dim, out_dim, 3, rng) {}

    // text [B,N,C] and mel [B,T,M], masked between conv layers so padded
    // positions never reach a valid frame's receptive field
    std::pair<Tensor<T>, Tensor<T>> encode(Tape<T>* tape, Tensor<T> text, Tensor<T> mel,
                                           const std::vector<Index>& text_lengths,
                                           const std::vector<Index>& mel_lengths) const {
        auto te = apply_sequence_mask(tape, text, text_lengths);
        te = text_conv1.forward(tape, te);
        te = apply_sequence_mask(tape, te, text_lengths);
        te = relu(tape, te);
        te = text_conv2.forward(tape, te);
        te = apply_sequence_mask(tape, te, text_lengths);

        auto me = apply_sequence_mask(tape, mel, mel_lengths);
        me = mel_conv1.forward(tape, me);
        me = apply_sequence_mask(tape, me, mel_lengths);
        me = relu(tape, me);
        me = mel_conv2.forward(tape, me);
        me = apply_sequence_mask(tape, me, mel_lengths);
        return {te, me};
    }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        text_conv1.collect(prefix + ".text_conv1", out);
        text_conv2.collect(prefix + ".text_conv2", out);
        mel_conv1.collect(prefix + ".mel_conv1", out);
        mel_conv2.collect(prefix + ".mel_conv2", out);
    }
};

}  // namespace mixtts

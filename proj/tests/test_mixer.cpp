#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "mixtts/core/gradcheck.hpp"
#include "mixtts/mixer.hpp"

using namespace mixtts;
using Catch::Approx;

namespace {

template <typename T>
void zero_params(MixerBlock<T>& block) {
    ParamMap<T> params;
    block.collect("b", params);
    for (auto& [name, p] : params)
        if (name.find("norm.gamma") == std::string::npos)
            std::fill(p.values().begin(), p.values().end(), T(0));
}

MixerBlockConfig small_cfg(Index dim = 8, Index k = 3, double dropout = 0.0) {
    MixerBlockConfig c;
    c.feature_dim = dim;
    c.kernel_size = k;
    c.expansion_factor = 4;
    c.dropout_p = dropout;
    return c;
}

}  // namespace

TEST_CASE("zeroed branches reduce both sub-blocks to the residual") {
    Rng rng(11);
    MixerBlock<double> block(small_cfg(), rng);
    zero_params(block);
    Tensor<double> x = Tensor<double>::randn({2, 5, 8}, rng);
    x = apply_sequence_mask<double>(nullptr, x, {5, 5});
    Rng drop(1);
    auto t = block.time_mix(nullptr, x, {5, 5}, Mode::eval, drop);
    auto c = block.channel_mix(nullptr, x, {5, 5}, Mode::eval, drop);
    auto f = block.forward(nullptr, x, {5, 5}, Mode::eval, drop);
    for (Index i = 0; i < x.numel(); ++i) {
        REQUIRE(t.at(i) == Approx(x.at(i)).margin(1e-12));
        REQUIRE(c.at(i) == Approx(x.at(i)).margin(1e-12));
        REQUIRE(f.at(i) == Approx(x.at(i)).margin(1e-12));
    }
}

TEST_CASE("length-one sequences are valid") {
    Rng rng(12);
    MixerBlock<double> block(small_cfg(8, 11), rng);
    Tensor<double> x = Tensor<double>::randn({1, 1, 8}, rng);
    Rng drop(1);
    auto y = block.forward(nullptr, x, {1}, Mode::eval, drop);
    REQUIRE(y.shape() == x.shape());
}

TEST_CASE("block output shape equals input shape") {
    Rng rng(13);
    MixerBlock<double> block(small_cfg(), rng);
    Rng drop(1);
    for (Index t : {1, 3, 9}) {
        Tensor<double> x = Tensor<double>::randn({2, t, 8}, rng);
        auto y = block.forward(nullptr, x, {t, t}, Mode::train, drop);
        REQUIRE(y.shape() == Shape{2, t, 8});
    }
}

TEST_CASE("time-then-channel differs from channel-then-time") {
    Rng rng(14);
    MixerBlock<double> block(small_cfg(), rng);
    Tensor<double> x = Tensor<double>::randn({1, 6, 8}, rng);
    Rng drop(1);
    auto tc = block.channel_mix(nullptr, block.time_mix(nullptr, x, {6}, Mode::eval, drop), {6},
                                Mode::eval, drop);
    auto ct = block.time_mix(nullptr, block.channel_mix(nullptr, x, {6}, Mode::eval, drop), {6},
                             Mode::eval, drop);
    auto fwd = block.forward(nullptr, x, {6}, Mode::eval, drop);
    double max_diff_orders = 0, max_diff_fwd = 0;
    for (Index i = 0; i < x.numel(); ++i) {
        max_diff_orders = std::max(max_diff_orders, std::abs(tc.at(i) - ct.at(i)));
        max_diff_fwd = std::max(max_diff_fwd, std::abs(tc.at(i) - fwd.at(i)));
    }
    REQUIRE(max_diff_orders > 1e-6);  // order matters
    REQUIRE(max_diff_fwd == 0.0);     // forward is time-mix first
}

TEST_CASE("paper geometry: hidden width and kernel schedules") {
    Rng rng(15);
    MixerBlockConfig paper;
    paper.feature_dim = 384;
    paper.expansion_factor = 4;
    MixerBlock<float> block(paper, rng);
    REQUIRE(block.chan_up.weight.shape() == Shape{384, 1536});

    StackConfig enc{6, 11, 21, 2};
    StackConfig dec{9, 15, 31, 2};
    MixerBlockConfig small = small_cfg();
    MixerStack<float> encoder(enc, small, rng);
    MixerStack<float> decoder(dec, small, rng);
    REQUIRE(encoder.kernel_sizes() == std::vector<Index>{11, 13, 15, 17, 19, 21});
    REQUIRE(decoder.kernel_sizes() == std::vector<Index>{15, 17, 19, 21, 23, 25, 27, 29, 31});

    StackConfig bad{6, 11, 22, 2};
    REQUIRE_THROWS_AS(MixerStack<float>(bad, small, rng), ConfigError);
}

TEST_CASE("empty stack is the identity") {
    Rng rng(16);
    MixerStack<double> stack(StackConfig{0, 0, 0, 0}, small_cfg(), rng);
    Tensor<double> x = Tensor<double>::randn({1, 4, 8}, rng);
    Rng drop(1);
    auto y = stack.forward(nullptr, x, {4}, Mode::eval, drop);
    for (Index i = 0; i < x.numel(); ++i) REQUIRE(y.at(i) == x.at(i));
}

TEST_CASE("padding invariance of stacks at valid positions") {
    Rng rng(17);
    MixerBlockConfig cfg = small_cfg(8, 3);
    MixerStack<double> stack(StackConfig{2, 3, 5, 2}, cfg, rng);
    Rng drop(1);
    for (int inst = 0; inst < 20; ++inst) {
        const Index len_a = 12, len_b = 20;
        Tensor<double> a = Tensor<double>::randn({1, len_a, 8}, rng);
        Tensor<double> b = Tensor<double>::randn({1, len_b, 8}, rng);
        // batch with a padded to 20 (padding filled with junk) next to b
        Tensor<double> batch({2, len_b, 8});
        for (Index t = 0; t < len_b; ++t)
            for (Index c = 0; c < 8; ++c) {
                batch.at(0, t, c) = t < len_a ? a.at(0, t, c) : 99.0;  // junk past the length
                batch.at(1, t, c) = b.at(0, t, c);
            }
        auto padded = stack.forward(nullptr, batch, {len_a, len_b}, Mode::eval, drop);
        auto solo = stack.forward(nullptr, a, {len_a}, Mode::eval, drop);
        for (Index t = 0; t < len_a; ++t)
            for (Index c = 0; c < 8; ++c)
                REQUIRE(padded.at(0, t, c) == Approx(solo.at(0, t, c)).margin(1e-5));
    }
}

TEST_CASE("time-mix receptive field is bounded by the kernel") {
    Rng rng(18);
    const Index k = 5, tlen = 24, dim = 6;
    MixerBlockConfig cfg = small_cfg(dim, k);
    MixerStack<double> stack(StackConfig{1, k, k, 0}, cfg, rng);
    Rng drop(1);
    Tensor<double> x = Tensor<double>::randn({1, tlen, dim}, rng);
    auto base = stack.forward(nullptr, x, {tlen}, Mode::eval, drop);
    const Index t0 = 11;
    Tensor<double> xp = x.detached_copy();
    xp.at(0, t0, 2) += 0.5;
    auto moved = stack.forward(nullptr, xp, {tlen}, Mode::eval, drop);
    for (Index t = 0; t < tlen; ++t) {
        double diff = 0;
        for (Index c = 0; c < dim; ++c) diff = std::max(diff, std::abs(moved.at(0, t, c) - base.at(0, t, c)));
        if (std::abs(t - t0) > k - 1)
            REQUIRE(diff == 0.0);  // outside two stacked kernels
    }
    // and the perturbed frame itself must move
    double self_diff = 0;
    for (Index c = 0; c < dim; ++c) self_diff = std::max(self_diff, std::abs(moved.at(0, t0, c) - base.at(0, t0, c)));
    REQUIRE(self_diff > 1e-9);
}

TEST_CASE("eval forward is bit-reproducible") {
    Rng rng(19);
    MixerStack<float> stack(StackConfig{2, 3, 5, 2}, small_cfg(8, 3, 0.15), rng);
    Tensor<float> x = Tensor<float>::randn({2, 7, 8}, rng);
    Rng d1(123), d2(456);  // dropout rngs differ; eval must ignore them
    auto y1 = stack.forward(nullptr, x, {7, 5}, Mode::eval, d1);
    auto y2 = stack.forward(nullptr, x, {7, 5}, Mode::eval, d2);
    REQUIRE(std::memcmp(y1.data(), y2.data(), sizeof(float) * y1.numel()) == 0);
}

TEST_CASE("channel-mix gradients match central differences") {
    Rng rng(20);
    MixerBlock<double> block(small_cfg(6, 3), rng);
    ParamMap<double> pm;
    block.collect("blk", pm);
    for (int inst = 0; inst < 5; ++inst) {
        std::vector<Tensor<double>> leaves;
        leaves.push_back(Tensor<double>::randn({1, 4, 6}, rng));
        for (auto& [name, p] : pm) leaves.push_back(p);
        auto make_loss = [&](Tape<double>* tape) {
            Rng drop(1);
            Rng probe(7700 + inst);
            auto y = block.channel_mix(tape, leaves[0], {4}, Mode::eval, drop);
            return weighted_probe(tape, y, probe);
        };
        REQUIRE(finite_difference_check(make_loss, leaves) <= 1e-4);
    }
}

TEST_CASE("full block gradients match central differences") {
    Rng rng(21);
    MixerBlock<double> block(small_cfg(5, 3), rng);
    ParamMap<double> pm;
    block.collect("blk", pm);
    std::vector<Tensor<double>> leaves;
    leaves.push_back(Tensor<double>::randn({1, 4, 5}, rng));
    for (auto& [name, p] : pm) leaves.push_back(p);
    auto make_loss = [&](Tape<double>* tape) {
        Rng drop(1);
        Rng probe(7800);
        auto y = block.forward(tape, leaves[0], {4}, Mode::eval, drop);
        return weighted_probe(tape, y, probe);
    };
    REQUIRE(finite_difference_check(make_loss, leaves) <= 1e-4);
}

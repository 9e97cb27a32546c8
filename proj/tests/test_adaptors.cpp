#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mixtts/adaptors.hpp"
#include "mixtts/core/gradcheck.hpp"

using namespace mixtts;
using Catch::Approx;

TEST_CASE("average pitch takes exact means over spans") {
    std::vector<double> contour{100, 100, 200};
    auto avg = average_pitch<double>(contour, {2, 1});
    REQUIRE(avg == std::vector<double>{100, 200});
}

TEST_CASE("average pitch maps fully unvoiced spans to zero") {
    std::vector<double> contour{0, 0, 220};
    auto avg = average_pitch<double>(contour, {2, 1});
    REQUIRE(avg == std::vector<double>{0, 220});
}

TEST_CASE("average pitch conserves voiced mass") {
    Rng rng(51);
    for (int inst = 0; inst < 30; ++inst) {
        const Index n = 1 + static_cast<Index>(rng.uniform_int(0, 5));
        std::vector<Index> durations;
        Index total = 0;
        for (Index i = 0; i < n; ++i) {
            const Index d = static_cast<Index>(rng.uniform_int(1, 4));
            durations.push_back(d);
            total += d;
        }
        std::vector<double> contour;
        for (Index t = 0; t < total; ++t)
            contour.push_back(rng.bernoulli(0.35) ? 0.0 : rng.uniform(80, 300));
        auto avg = average_pitch<double>(contour, durations);

        double lhs = 0;
        Index t = 0;
        for (std::size_t k = 0; k < durations.size(); ++k) {
            Index voiced = 0;
            for (Index j = 0; j < durations[k]; ++j, ++t)
                if (contour[static_cast<std::size_t>(t)] > 0) ++voiced;
            lhs += avg[k] * static_cast<double>(voiced);
        }
        double rhs = 0;
        for (double v : contour) rhs += v;
        REQUIRE(lhs == Approx(rhs).margin(1e-9));
    }
}

TEST_CASE("average pitch rejects mismatched durations") {
    std::vector<double> contour{1, 2, 3};
    REQUIRE_THROWS_AS(average_pitch<double>(contour, {1, 1}), ShapeError);
}

TEST_CASE("duration codec round trip and decode rules") {
    // p=0 -> duration 0; p=ln 3 -> duration 2
    REQUIRE(decode_duration<double>(0.0) == 0);
    REQUIRE(decode_duration<double>(std::log(3.0)) == 2);
    // training target for durations [2,5] is [ln 3, ln 6]
    REQUIRE(encode_duration<double>(2) == Approx(std::log(3.0)));
    REQUIRE(encode_duration<double>(5) == Approx(std::log(6.0)));
    // round trip for integers
    for (Index d = 0; d <= 40; ++d) REQUIRE(decode_duration(encode_duration<double>(d)) == d);
    // pace scales after decoding
    REQUIRE(decode_duration<double>(std::log(3.0), 2.0) == 4);
    // negative predictions clamp at zero
    REQUIRE(decode_duration<double>(-5.0) == 0);
}

TEST_CASE("predictor output shape and zero-head behavior") {
    Rng rng(52);
    PredictorConfig cfg;
    cfg.in_dim = 8;
    cfg.hidden = 6;
    TokenPredictor<double> pred(cfg, rng);
    Tensor<double> x = Tensor<double>::randn({2, 5, 8}, rng);
    Rng drop(1);
    auto y = pred.forward(nullptr, x, {5, 3}, Mode::eval, drop);
    REQUIRE(y.shape() == Shape{2, 5, 1});

    // zero final layer -> all-zero predictions
    std::fill(pred.head.weight.values().begin(), pred.head.weight.values().end(), 0.0);
    std::fill(pred.head.bias.values().begin(), pred.head.bias.values().end(), 0.0);
    auto z = pred.forward(nullptr, x, {5, 3}, Mode::eval, drop);
    for (Index i = 0; i < z.numel(); ++i) REQUIRE(z.at(i) == 0.0);
}

TEST_CASE("predictors are padding invariant at valid positions") {
    Rng rng(53);
    PredictorConfig cfg;
    cfg.in_dim = 6;
    cfg.hidden = 5;
    TokenPredictor<double> pred(cfg, rng);
    Rng drop(1);
    for (int inst = 0; inst < 20; ++inst) {
        const Index n_valid = 4, n_pad = 9;
        Tensor<double> solo = Tensor<double>::randn({1, n_valid, 6}, rng);
        Tensor<double> padded({1, n_pad, 6});
        for (Index t = 0; t < n_pad; ++t)
            for (Index c = 0; c < 6; ++c)
                padded.at(0, t, c) = t < n_valid ? solo.at(0, t, c) : 7.5;
        auto a = pred.forward(nullptr, solo, {n_valid}, Mode::eval, drop);
        auto b = pred.forward(nullptr, padded, {n_valid}, Mode::eval, drop);
        for (Index t = 0; t < n_valid; ++t) REQUIRE(b.at(0, t, 0) == Approx(a.at(0, t, 0)).margin(1e-5));
    }
}

TEST_CASE("predictor gradients match central differences") {
    Rng rng(54);
    PredictorConfig cfg;
    cfg.in_dim = 4;
    cfg.hidden = 3;
    cfg.dropout_p = 0.1;
    TokenPredictor<double> pred(cfg, rng);
    ParamMap<double> pm;
    pred.collect("p", pm);
    std::vector<Tensor<double>> leaves;
    leaves.push_back(Tensor<double>::randn({1, 5, 4}, rng));
    for (auto& [name, p] : pm) leaves.push_back(p);
    auto make_loss = [&](Tape<double>* tape) {
        Rng drop(99);  // same dropout mask on every evaluation
        Rng probe(8800);
        auto y = pred.forward(tape, leaves[0], {5}, Mode::train, drop);
        return weighted_probe(tape, y, probe);
    };
    REQUIRE(finite_difference_check(make_loss, leaves) <= 1e-4);
}

TEST_CASE("pitch embedding lifts scalars to the model width") {
    Rng rng(55);
    PitchEmbedding<double> emb(8, rng);
    Tensor<double> pitch = Tensor<double>::randn({1, 6, 1}, rng);
    auto y = emb.forward(nullptr, pitch, {6});
    REQUIRE(y.shape() == Shape{1, 6, 8});

    // zero pitch + zero bias -> zero embedding
    Tensor<double> zeros({1, 6, 1});
    auto z = emb.forward(nullptr, zeros, {6});
    for (Index i = 0; i < z.numel(); ++i) REQUIRE(z.at(i) == 0.0);
}

TEST_CASE("pitch embedding gradients match central differences") {
    Rng rng(56);
    PitchEmbedding<double> emb(5, rng);
    std::vector<Tensor<double>> leaves = {Tensor<double>::randn({1, 4, 1}, rng), emb.conv.weight,
                                          emb.conv.bias};
    auto make_loss = [&](Tape<double>* tape) {
        Rng probe(8900);
        return weighted_probe(tape, emb.forward(tape, leaves[0], {4}), probe);
    };
    REQUIRE(finite_difference_check(make_loss, leaves) <= 1e-4);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "mixtts/core/gradcheck.hpp"
#include "mixtts/model.hpp"
#include "test_util.hpp"

using namespace mixtts;
using namespace mixtts::testutil;
using Catch::Approx;

namespace {

// closed-form trainable parameter count, written out independently of the
// parameter registry
Index closed_form_count(const Config& cfg, Index d_lm) {
    const Index c = cfg.model.feature_dim;
    const Index m = cfg.audio.n_mels;
    const Index d = cfg.model.aligner_dim;
    Index total = cfg.model.vocab_size * c;  // symbol embedding
    auto stack = [&](const StackConfig& s) {
        Index acc = 0;
        for (Index i = 0; i < s.n_blocks; ++i) {
            const Index k = s.kernel_start + i * s.kernel_step;
            acc += 2 * c;                                  // time norm
            acc += 2 * (c * k + c);                        // two depthwise convs
            acc += 2 * c;                                  // channel norm
            const Index hidden = c * cfg.model.expansion;  // expansion MLP
            acc += c * hidden + hidden;
            acc += hidden * c + c;
        }
        return acc;
    };
    total += stack(cfg.model.encoder) + stack(cfg.model.decoder);
    total += (3 * c * d + d) + (3 * d * d + d);  // aligner text branch
    total += (3 * m * d + d) + (3 * d * d + d);  // aligner mel branch
    auto predictor = [&](const PredictorConfig& p) {
        Index acc = 0;
        for (Index i = 0; i < p.n_layers; ++i) {
            const Index in = i == 0 ? c : p.hidden;
            acc += p.kernel * in * p.hidden + p.hidden;  // conv
            acc += 2 * p.hidden;                         // layer norm
        }
        acc += p.hidden * 1 + 1;  // head
        return acc;
    };
    total += predictor(cfg.duration_predictor) + predictor(cfg.pitch_predictor);
    total += 3 * 1 * c + c;  // pitch embedding conv
    total += c * m + m;      // mel head
    if (cfg.model.extended) {
        total += 2 * cfg.model.lm_max_len * c;  // positional tables
        total += d_lm * c + c;                  // lm projection
        total += 2 * (3 * c * c + c);           // query/key convs
        total += d_lm * c + c;                  // value projection
        total += c * c + c;                     // output projection
    }
    return total;
}

}  // namespace

TEST_CASE("train forward produces aligned shapes and finite losses") {
    Config cfg = toy_config();
    Rng rng(101);
    MixerTtsModel<double> model(cfg, rng);
    Rng data_rng(7);
    auto batch = random_batch<double>(cfg, data_rng, 3);
    Rng fw(3);
    Tape<double> tape;
    auto out = model.forward_train(&tape, batch, Mode::train, fw);
    auto loss = model.total_loss(&tape, out, batch);

    REQUIRE(out.mel_out.dim(0) == 3);
    REQUIRE(out.mel_out.dim(2) == cfg.audio.n_mels);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        Index total = 0;
        for (Index d : out.used_durations[b]) {
            REQUIRE(d >= 1);
            total += d;
        }
        REQUIRE(total == batch[b].mel.dim(0));  // output length == target length
    }
    REQUIRE(std::isfinite(loss.total.item()));
    REQUIRE(std::isfinite(loss.mel.item()));
    REQUIRE(std::isfinite(loss.aligner.item()));
    REQUIRE(std::isfinite(loss.durs.item()));
    REQUIRE(std::isfinite(loss.pitch.item()));
    REQUIRE(loss.total.item() > 0);
}

TEST_CASE("alignment infeasibility is reported") {
    Config cfg = toy_config();
    Rng rng(102);
    MixerTtsModel<double> model(cfg, rng);
    TrainSample<double> sample;
    for (int i = 0; i < 6; ++i) sample.symbol_ids.push_back(1 + i);
    Rng mel_rng(1);
    sample.mel = Tensor<double>::randn({3, cfg.audio.n_mels}, mel_rng);  // 6 tokens, 3 frames
    sample.pitch_hz.assign(3, 120.0);
    Rng fw(3);
    Tape<double> tape;
    REQUIRE_THROWS_AS(model.forward_train(&tape, {sample}, Mode::eval, fw), AlignmentError);
}

TEST_CASE("every trainable parameter receives a gradient") {
    Config cfg = toy_config();
    cfg.model.extended = true;
    cfg.model.lm_table = "unused";
    auto table = build_demo_lm_table<double>(8);
    Rng rng(103);
    MixerTtsModel<double> model(cfg, rng, &table);
    Rng data_rng(11);
    auto batch = random_batch<double>(cfg, data_rng, 2);
    Rng fw(5);
    Tape<double> tape;
    auto out = model.forward_train(&tape, batch, Mode::train, fw);
    auto loss = model.total_loss(&tape, out, batch);
    tape.backward(loss.total);
    for (const auto& [name, p] : model.parameters()) {
        INFO(name);
        REQUIRE(p.has_grad());
        double norm = 0;
        for (double g : p.grad_view()) norm += g * g;
        REQUIRE(norm > 0);
    }
    REQUIRE_FALSE(model.lm_table().matrix.has_grad());  // frozen
}

TEST_CASE("predictor losses leave encoder gradients untouched") {
    Config cfg = toy_config();
    Rng rng(104);
    MixerTtsModel<double> model(cfg, rng);
    Rng data_rng(13);
    auto batch = random_batch<double>(cfg, data_rng, 2);

    auto encoder_grads = [&](bool with_predictor_losses) {
        model.zero_grad();
        Rng fw(5);
        Tape<double> tape;
        auto out = model.forward_train(&tape, batch, Mode::eval, fw);
        auto loss = model.total_loss(&tape, out, batch);
        if (with_predictor_losses) {
            tape.backward(loss.total);
        } else {
            auto reduced = add(&tape, loss.aligner, loss.mel);
            tape.backward(reduced);
        }
        std::vector<std::vector<double>> grads;
        for (const auto& [name, p] : model.parameters())
            if (name.rfind("encoder.", 0) == 0 || name == "symbol_emb") grads.push_back(p.grad_view());
        return grads;
    };

    auto with = encoder_grads(true);
    auto without = encoder_grads(false);
    REQUIRE(with.size() == without.size());
    for (std::size_t i = 0; i < with.size(); ++i)
        for (std::size_t j = 0; j < with[i].size(); ++j)
            REQUIRE(with[i][j] == Approx(without[i][j]).margin(1e-12));
}

TEST_CASE("loss equation: perfect predictors leave aligner plus mel") {
    Config cfg = toy_config();
    REQUIRE(cfg.loss.aligner == 1.0);
    REQUIRE(cfg.loss.mel == 1.0);
    REQUIRE(cfg.loss.durs == 0.1);
    REQUIRE(cfg.loss.pitch == 0.1);

    Rng rng(105);
    MixerTtsModel<double> model(cfg, rng);
    Rng data_rng(17);
    auto batch = random_batch<double>(cfg, data_rng, 2);
    Rng fw(5);
    Tape<double> tape;
    auto out = model.forward_train(&tape, batch, Mode::eval, fw);

    // overwrite predictions with the exact targets
    ForwardOutput<double> perfect = out;
    perfect.pred_log_durs = Tensor<double>(out.pred_log_durs.shape());
    perfect.pred_pitch = Tensor<double>(out.pred_pitch.shape());
    for (std::size_t b = 0; b < batch.size(); ++b)
        for (Index i = 0; i < out.symbol_lengths[b]; ++i) {
            perfect.pred_log_durs.at(static_cast<Index>(b), i, 0) =
                encode_duration<double>(out.used_durations[b][static_cast<std::size_t>(i)]);
            perfect.pred_pitch.at(static_cast<Index>(b), i, 0) =
                out.used_pitch[b][static_cast<std::size_t>(i)];
        }
    auto loss = model.total_loss(&tape, perfect, batch);
    REQUIRE(loss.durs.item() == 0.0);
    REQUIRE(loss.pitch.item() == 0.0);
    REQUIRE(loss.total.item() == loss.aligner.item() + loss.mel.item());
}

TEST_CASE("doubling the mel error quadruples the mel loss") {
    Config cfg = toy_config();
    Rng rng(106);
    MixerTtsModel<double> model(cfg, rng);
    Rng data_rng(19);
    auto batch = random_batch<double>(cfg, data_rng, 2);
    Rng fw(5);
    Tape<double> tape;
    auto out = model.forward_train(&tape, batch, Mode::eval, fw);

    auto with_offset = [&](double delta) {
        auto shifted = batch;
        for (std::size_t b = 0; b < shifted.size(); ++b) {
            Tensor<double> target(batch[b].mel.shape());
            for (Index i = 0; i < target.numel(); ++i)
                target.at(i) =
                    out.mel_out.at(static_cast<Index>(b) * out.mel_out.dim(1) * out.mel_out.dim(2) + i) -
                    delta;
            shifted[b].mel = target;
        }
        return model.total_loss(nullptr, out, shifted).mel.item();
    };
    const double l1 = with_offset(0.25);
    const double l2 = with_offset(0.5);
    REQUIRE(l2 == Approx(4.0 * l1).epsilon(1e-9));
}

TEST_CASE("inference is deterministic and honors pace") {
    Config cfg = toy_config();
    Rng rng(107);
    MixerTtsModel<double> model(cfg, rng);
    std::vector<int> symbols{3, 7, 2, 11, 5};

    auto a = model.forward_infer(symbols, {});
    auto b = model.forward_infer(symbols, {});
    REQUIRE(a.mel.shape() == b.mel.shape());
    REQUIRE(std::memcmp(a.mel.data(), b.mel.data(), sizeof(double) * a.mel.numel()) == 0);
    REQUIRE(a.mel.dim(1) == cfg.audio.n_mels);
    REQUIRE(a.mel.dim(0) >= 1);

    auto paced = model.forward_infer(symbols, {}, 2.0);
    Index t1 = 0, t2 = 0;
    for (Index d : a.durations) t1 += d;
    for (Index d : paced.durations) t2 += d;
    REQUIRE(std::abs(t2 - 2 * t1) <= static_cast<Index>(symbols.size()));
}

TEST_CASE("extended model with zeroed output projection equals the basic model") {
    Config basic_cfg = toy_config();
    Config ext_cfg = toy_config();
    ext_cfg.model.extended = true;
    ext_cfg.model.lm_table = "unused";
    auto table = build_demo_lm_table<double>(8);

    Rng rng_a(2024), rng_b(2024);  // identical seeds: shared params identical
    MixerTtsModel<double> basic(basic_cfg, rng_a);
    MixerTtsModel<double> extended(ext_cfg, rng_b, &table);
    auto& proj = extended.lm_attention().out_proj;
    std::fill(proj.weight.values().begin(), proj.weight.values().end(), 0.0);
    std::fill(proj.bias.values().begin(), proj.bias.values().end(), 0.0);

    Rng data_rng(23);
    for (int inst = 0; inst < 10; ++inst) {
        std::vector<int> symbols;
        const Index n = 2 + static_cast<Index>(data_rng.uniform_int(0, 6));
        for (Index i = 0; i < n; ++i)
            symbols.push_back(1 + static_cast<int>(data_rng.uniform_int(0, basic_cfg.model.vocab_size - 2)));
        std::vector<int> lm_ids{static_cast<int>(data_rng.uniform_int(0, 30)),
                                static_cast<int>(data_rng.uniform_int(0, 30))};
        auto a = basic.forward_infer(symbols, {});
        auto b = extended.forward_infer(symbols, lm_ids);
        REQUIRE(a.mel.shape() == b.mel.shape());
        REQUIRE(std::memcmp(a.mel.data(), b.mel.data(), sizeof(double) * a.mel.numel()) == 0);
        REQUIRE(a.durations == b.durations);
    }
}

TEST_CASE("parameter counts: toy closed form exactly, paper configs within ten percent") {
    // toy, basic and extended
    {
        Config cfg = toy_config();
        Rng rng(108);
        MixerTtsModel<float> model(cfg, rng);
        REQUIRE(model.count_parameters() == closed_form_count(cfg, 0));

        Config ext = toy_config();
        ext.model.extended = true;
        ext.model.lm_table = "unused";
        ext.model.lm_max_len = 64;
        auto table = build_demo_lm_table<float>(8);
        Rng rng2(109);
        MixerTtsModel<float> ext_model(ext, rng2, &table);
        REQUIRE(ext_model.count_parameters() == closed_form_count(ext, 8));
    }
    // paper-scale configs
    {
        Config cfg;  // defaults are the paper geometry
        Rng rng(110);
        MixerTtsModel<float> model(cfg, rng);
        const double count = static_cast<double>(model.count_parameters());
        REQUIRE(count >= 19.2e6 * 0.9);
        REQUIRE(count <= 19.2e6 * 1.1);

        Config ext;
        ext.model.extended = true;
        ext.model.lm_table = "unused";
        auto table = build_demo_lm_table<float>(128);  // external-LM embedding width
        Rng rng2(111);
        MixerTtsModel<float> ext_model(ext, rng2, &table);
        const double ext_count = static_cast<double>(ext_model.count_parameters());
        REQUIRE(ext_count >= 24.0e6 * 0.9);
        REQUIRE(ext_count <= 24.0e6 * 1.1);
        REQUIRE(ext_count > count);
    }
}

TEST_CASE("full training graph gradients match central differences") {
    Config cfg = toy_config();
    Rng rng(112);
    MixerTtsModel<double> model(cfg, rng);
    Rng data_rng(29);
    auto batch = random_batch<double>(cfg, data_rng, 2, 4, 3);

    // durations frozen so the objective stays smooth under perturbation
    Rng fw(5);
    Tape<double> probe_tape;
    auto probe = model.forward_train(&probe_tape, batch, Mode::eval, fw);
    TrainForwardOptions opts;
    opts.fixed_durations = &probe.used_durations;
    opts.detach_predictor_inputs = false;  // finite differences see through a detach

    std::vector<Tensor<double>> leaves;
    for (auto& [name, p] : model.parameters()) leaves.push_back(p);
    auto make_loss = [&](Tape<double>* tape) {
        Rng fw2(5);
        auto out = model.forward_train(tape, batch, Mode::eval, fw2, opts);
        return model.total_loss(tape, out, batch).total;
    };
    Rng pick(31);
    REQUIRE(finite_difference_check_sampled(make_loss, leaves, pick, 4) <= 1e-4);
}

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mixtts/core/gradcheck.hpp"
#include "mixtts/model.hpp"

// Named f64 gradient-check suites covering every differentiable operation and
// the assembled training graphs. The CLI gradcheck command and the acceptance
// suite both run this registry.

namespace mixtts {

struct GradCheckCase {
    std::string module;  // numerics | aligner | model
    std::string name;
    std::function<GradCheckReport(std::uint64_t seed, int instances)> run;
};

namespace checks_detail {

template <typename BuildFn>
GradCheckReport run_op_check(const std::string& name, std::uint64_t seed, int instances,
                             BuildFn&& build) {
    GradCheckReport report;
    report.name = name;
    report.instances = instances;
    for (int inst = 0; inst < instances; ++inst) {
        Rng rng(Rng::mix(seed, std::hash<std::string>{}(name), static_cast<std::uint64_t>(inst)));
        auto [leaves, make_loss] = build(rng, inst);
        report.max_rel_err = std::max(report.max_rel_err, finite_difference_check(make_loss, leaves));
    }
    return report;
}

using Leaves = std::vector<Tensor<double>>;
using LossFn = std::function<Tensor<double>(Tape<double>*)>;

}  // namespace checks_detail

inline std::vector<GradCheckCase> gradcheck_registry() {
    using namespace checks_detail;
    std::vector<GradCheckCase> cases;
    auto add_case = [&](const std::string& module, const std::string& name, auto build) {
        cases.push_back({module, name,
                         [name, build](std::uint64_t seed, int instances) {
                             return run_op_check(name, seed, instances, build);
                         }});
    };

    // ----- numerics ---------------------------------------------------------
    add_case("numerics", "linear", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({3, 4}, rng), Tensor<double>::randn({4, 2}, rng),
                   Tensor<double>::randn({2}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(500 + inst);
            return weighted_probe(tape, linear(tape, (*leaves)[0], (*leaves)[1], (*leaves)[2]), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "matmul", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({3, 4}, rng), Tensor<double>::randn({4, 3}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(510 + inst);
            auto y = matmul(tape, (*leaves)[0], (*leaves)[1]);
            auto z = matmul_nt(tape, y, (*leaves)[1]);
            return weighted_probe(tape, z, probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "elementwise", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({4, 3}, rng), Tensor<double>::randn({4, 3}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(520 + inst);
            auto s = add(tape, (*leaves)[0], (*leaves)[1]);
            auto d = sub(tape, (*leaves)[0], (*leaves)[1]);
            auto m = mul(tape, s, scale(tape, d, 0.5));
            auto e = exp_elem(tape, scale(tape, relu(tape, m), 0.2));
            return weighted_probe(tape, e, probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "gelu", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({13}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(530 + inst);
            return weighted_probe(tape, gelu(tape, (*leaves)[0]), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "log_softmax", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({4, 5}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(540 + inst);
            return weighted_probe(tape, log_softmax(tape, (*leaves)[0], inst % 2), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "dropout", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({24}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng mask_rng(640 + inst);
            Rng probe(550 + inst);
            return weighted_probe(tape, dropout(tape, (*leaves)[0], 0.3, Mode::train, mask_rng), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "sequence_mask", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({2, 5, 3}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(560 + inst);
            return weighted_probe(tape, apply_sequence_mask(tape, (*leaves)[0], {3, 5}), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "conv1d", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({6, 3}, rng), Tensor<double>::randn({4, 3, 3}, rng),
                   Tensor<double>::randn({4}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(570 + inst);
            return weighted_probe(tape, conv1d(tape, (*leaves)[0], (*leaves)[1], (*leaves)[2]), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "depthwise_conv1d", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({7, 3}, rng), Tensor<double>::randn({3, 5}, rng),
                   Tensor<double>::randn({3}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(580 + inst);
            return weighted_probe(tape,
                                  depthwise_conv1d(tape, (*leaves)[0], (*leaves)[1], (*leaves)[2]),
                                  probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "layer_norm", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({4, 6}, rng), Tensor<double>::uniform({6}, rng, 0.5, 1.5),
                   Tensor<double>::randn({6}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(590 + inst);
            return weighted_probe(tape, layer_norm(tape, (*leaves)[0], (*leaves)[1], (*leaves)[2]),
                                  probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "gather_scatter", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({5, 3}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(600 + inst);
            auto emb = embedding(tape, (*leaves)[0], {0, 2, 4, 2});
            auto st = stack_padded(tape, {emb}, 6);
            auto sel = select_batch(tape, st, 0, 4);
            auto lr = length_regulate(tape, sel, {1, 2, 0, 3});
            return weighted_probe(tape, lr, probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("numerics", "pairwise_l2", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({3, 4}, rng), Tensor<double>::randn({6, 4}, rng)});
        LossFn fn = [leaves, inst](Tape<double>* tape) {
            Rng probe(610 + inst);
            return weighted_probe(tape, pairwise_l2(tape, (*leaves)[0], (*leaves)[1]), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });

    // ----- aligner ----------------------------------------------------------
    add_case("aligner", "forward_sum_loss", [](Rng& rng, int inst) {
        const Index n = 2 + static_cast<Index>(rng.uniform_int(0, 2));
        const Index t = n + 2 + static_cast<Index>(rng.uniform_int(0, 3));
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({t, n}, rng)});
        LossFn fn = [leaves](Tape<double>* tape) {
            auto lat = AlignmentLattice<double>(log_softmax(tape, (*leaves)[0], 1));
            return forward_sum_loss(tape, lat);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("aligner", "soft_alignment", [](Rng& rng, int inst) {
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({3, 5}, rng), Tensor<double>::randn({7, 5}, rng)});
        LossFn fn = [leaves](Tape<double>* tape) {
            auto lat = soft_alignment(tape, (*leaves)[0], (*leaves)[1]);
            return forward_sum_loss(tape, lat);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("aligner", "alignment_encoder", [](Rng& rng, int inst) {
        auto enc = std::make_shared<AlignmentEncoder<double>>(3, 2, 4, rng);
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({1, 3, 3}, rng), Tensor<double>::randn({1, 6, 2}, rng)});
        ParamMap<double> pm;
        enc->collect("a", pm);
        for (auto& [name, p] : pm) leaves->push_back(p);
        LossFn fn = [leaves, enc](Tape<double>* tape) {
            auto [te, me] = enc->encode(tape, (*leaves)[0], (*leaves)[1], {3}, {6});
            auto lat = soft_alignment(tape, select_batch(tape, te, 0, 3), select_batch(tape, me, 0, 6));
            return forward_sum_loss(tape, lat);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });

    // ----- model ------------------------------------------------------------
    add_case("model", "mixer_block", [](Rng& rng, int inst) {
        MixerBlockConfig cfg;
        cfg.feature_dim = 6;
        cfg.kernel_size = 3;
        cfg.expansion_factor = 2;
        cfg.dropout_p = 0.0;
        auto block = std::make_shared<MixerBlock<double>>(cfg, rng);
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({1, 5, 6}, rng)});
        ParamMap<double> pm;
        block->collect("b", pm);
        for (auto& [name, p] : pm) leaves->push_back(p);
        LossFn fn = [leaves, block, inst](Tape<double>* tape) {
            Rng drop(1);
            Rng probe(620 + inst);
            return weighted_probe(tape, block->forward(tape, (*leaves)[0], {5}, Mode::eval, drop),
                                  probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("model", "token_predictor", [](Rng& rng, int inst) {
        PredictorConfig cfg{4, 3, 3, 2, 0.1};
        auto pred = std::make_shared<TokenPredictor<double>>(cfg, rng);
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({1, 5, 4}, rng)});
        ParamMap<double> pm;
        pred->collect("p", pm);
        for (auto& [name, p] : pm) leaves->push_back(p);
        LossFn fn = [leaves, pred, inst](Tape<double>* tape) {
            Rng drop(770 + inst);
            Rng probe(630 + inst);
            return weighted_probe(tape,
                                  pred->forward(tape, (*leaves)[0], {5}, Mode::train, drop), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("model", "pitch_embedding", [](Rng& rng, int inst) {
        auto emb = std::make_shared<PitchEmbedding<double>>(5, rng);
        auto leaves = std::make_shared<Leaves>(Leaves{Tensor<double>::randn({1, 4, 1}, rng)});
        leaves->push_back(emb->conv.weight);
        leaves->push_back(emb->conv.bias);
        LossFn fn = [leaves, emb, inst](Tape<double>* tape) {
            Rng probe(640 + inst);
            return weighted_probe(tape, emb->forward(tape, (*leaves)[0], {4}), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    add_case("model", "lm_attention", [](Rng& rng, int inst) {
        auto att = std::make_shared<LmAttention<double>>(4, 3, 32, rng);
        auto leaves = std::make_shared<Leaves>(
            Leaves{Tensor<double>::randn({3, 4}, rng), Tensor<double>::randn({5, 3}, rng)});
        ParamMap<double> pm;
        att->collect("lm", pm);
        for (auto& [name, p] : pm) leaves->push_back(p);
        LossFn fn = [leaves, att, inst](Tape<double>* tape) {
            Rng probe(650 + inst);
            return weighted_probe(tape, att->forward(tape, (*leaves)[0], (*leaves)[1]), probe);
        };
        return std::pair<Leaves&, LossFn>(*leaves, fn);
    });
    return cases;
}

namespace checks_detail {

inline Config tiny_graph_config(bool extended) {
    Config cfg;
    cfg.model.vocab_size = 16;
    cfg.model.feature_dim = 10;
    cfg.model.encoder = StackConfig{2, 3, 5, 2};
    cfg.model.decoder = StackConfig{2, 3, 5, 2};
    cfg.model.expansion = 2;
    cfg.model.dropout = 0.0;
    cfg.model.aligner_dim = 8;
    cfg.duration_predictor.hidden = 6;
    cfg.pitch_predictor.hidden = 6;
    cfg.audio.n_mels = 6;
    cfg.model.extended = extended;
    if (extended) cfg.model.lm_table = "injected";
    return cfg;
}

}  // namespace checks_detail

// Sampled-coordinate check of the complete training graph (basic or
// extended): durations frozen, stop-gradient disabled so the analytic and
// numeric gradients describe the same smooth function.
inline GradCheckReport gradcheck_full_graph(bool extended, std::uint64_t seed, int instances,
                                            int coords_per_leaf = 3) {
    GradCheckReport report;
    report.name = extended ? "full_graph_extended" : "full_graph_basic";
    report.instances = instances;
    for (int inst = 0; inst < instances; ++inst) {
        Config cfg = checks_detail::tiny_graph_config(extended);
        Rng rng(Rng::mix(seed, 0xF0F0, static_cast<std::uint64_t>(inst)));
        FrozenEmbeddingTable<double> table = build_demo_lm_table<double>(6, seed + inst);
        MixerTtsModel<double> model(cfg, rng, extended ? &table : nullptr);

        Rng data_rng(Rng::mix(seed, 0xDA7A, static_cast<std::uint64_t>(inst)));
        std::vector<TrainSample<double>> batch;
        for (int b = 0; b < 2; ++b) {
            TrainSample<double> sample;
            const Index n = 2 + static_cast<Index>(data_rng.uniform_int(0, 2));
            const Index t = n + 2 + static_cast<Index>(data_rng.uniform_int(0, 2));
            for (Index i = 0; i < n; ++i)
                sample.symbol_ids.push_back(1 + static_cast<int>(data_rng.uniform_int(0, 14)));
            sample.mel = Tensor<double>::randn({t, cfg.audio.n_mels}, data_rng);
            for (Index i = 0; i < t; ++i)
                sample.pitch_hz.push_back(data_rng.bernoulli(0.3) ? 0.0 : data_rng.uniform(90, 280));
            if (extended) {
                sample.lm_ids.push_back(static_cast<int>(data_rng.uniform_int(0, 20)));
                sample.lm_ids.push_back(static_cast<int>(data_rng.uniform_int(0, 20)));
            }
            batch.push_back(std::move(sample));
        }

        Rng fw(5);
        Tape<double> probe_tape;
        auto probe = model.forward_train(&probe_tape, batch, Mode::eval, fw);
        TrainForwardOptions opts;
        opts.fixed_durations = &probe.used_durations;
        opts.detach_predictor_inputs = false;

        std::vector<Tensor<double>> leaves;
        for (auto& [name, p] : model.parameters()) leaves.push_back(p);
        auto make_loss = [&](Tape<double>* tape) {
            Rng fw2(5);
            auto out = model.forward_train(tape, batch, Mode::eval, fw2, opts);
            return model.total_loss(tape, out, batch).total;
        };
        Rng pick(Rng::mix(seed, 0x91C6, static_cast<std::uint64_t>(inst)));
        report.max_rel_err = std::max(
            report.max_rel_err, finite_difference_check_sampled(make_loss, leaves, pick, coords_per_leaf));
    }
    return report;
}

}  // namespace mixtts

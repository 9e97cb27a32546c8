#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "mixtts/fixtures.hpp"
#include "mixtts/train.hpp"
#include "test_util.hpp"

using namespace mixtts;
using namespace mixtts::testutil;
using Catch::Approx;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

template <typename T>
Dataset<T> synthetic_dataset(const Config& cfg, std::uint64_t seed, Index n_samples) {
    Rng rng(seed);
    Dataset<T> ds;
    ds.samples = random_batch<T>(cfg, rng, n_samples, 6, 8);
    ds.pitch_stats = compute_pitch_stats(ds.samples);
    return ds;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("micro batch schedule is deterministic and covers each epoch") {
    const std::size_t n = 7;
    for (Index k = 0; k < 12; ++k) {
        auto a = micro_batch_indices(42, n, 3, k);
        auto b = micro_batch_indices(42, n, 3, k);
        REQUIRE(a == b);
        REQUIRE(!a.empty());
    }
    // one epoch = ceil(7/3) = 3 micro batches covering all 7 samples
    std::vector<std::size_t> seen;
    for (Index k = 0; k < 3; ++k) {
        auto m = micro_batch_indices(42, n, 3, k);
        seen.insert(seen.end(), m.begin(), m.end());
    }
    std::sort(seen.begin(), seen.end());
    REQUIRE(seen == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
}

TEST_CASE("checkpoints survive a save/load round trip bit for bit") {
    Config cfg = toy_config();
    cfg.train.batch_size = 2;
    cfg.train.accum = 1;
    Trainer<float> trainer(cfg);
    trainer.set_dataset(synthetic_dataset<float>(cfg, 5, 4));
    for (int i = 0; i < 2; ++i) trainer.run_step();

    const auto dir = temp_dir("mixtts_ckpt_roundtrip");
    const std::string path = (dir / "ck.mtck").string();
    trainer.save(path);

    auto restored = restore_checkpoint<float>(path);
    REQUIRE(restored.step == 2);
    REQUIRE(restored.seed == cfg.train.seed);
    auto orig_params = trainer.model().parameters();
    auto new_params = restored.model.parameters();
    REQUIRE(orig_params.size() == new_params.size());
    for (std::size_t i = 0; i < orig_params.size(); ++i) {
        REQUIRE(orig_params[i].first == new_params[i].first);
        REQUIRE(orig_params[i].second.values() == new_params[i].second.values());
    }
    for (std::size_t i = 0; i < trainer.optimizer_state().m.size(); ++i) {
        REQUIRE(trainer.optimizer_state().m[i] == restored.opt_state.m[i]);
        REQUIRE(trainer.optimizer_state().v[i] == restored.opt_state.v[i]);
    }
    REQUIRE(restored.model.pitch_stats().mean == trainer.model().pitch_stats().mean);

    // corrupting the magic is caught
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE";
    }
    try {
        load_checkpoint(path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("bad checkpoint magic") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("resume reproduces the un-interrupted trajectory bit for bit") {
    Config cfg = toy_config();
    cfg.train.batch_size = 2;
    cfg.train.accum = 2;
    auto ds = synthetic_dataset<float>(cfg, 9, 4);

    // uninterrupted: 5 steps
    Trainer<float> full(cfg);
    full.set_dataset(ds);
    std::vector<double> full_losses;
    for (int i = 0; i < 5; ++i) full_losses.push_back(full.run_step().loss);

    // interrupted: 3 steps, checkpoint, restore, 2 more
    Trainer<float> first(cfg);
    first.set_dataset(ds);
    for (int i = 0; i < 3; ++i) first.run_step();
    const auto dir = temp_dir("mixtts_resume");
    const std::string path = (dir / "ck.mtck").string();
    first.save(path);

    Trainer<float> second(restore_checkpoint<float>(path));
    second.set_dataset(ds);
    REQUIRE(second.step() == 3);
    std::vector<double> resumed;
    for (int i = 0; i < 2; ++i) resumed.push_back(second.run_step().loss);
    REQUIRE(resumed[0] == full_losses[3]);
    REQUIRE(resumed[1] == full_losses[4]);

    auto pa = full.model().parameters();
    auto pb = second.model().parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i].second.values() == pb[i].second.values());
    fs::remove_all(dir);
}

TEST_CASE("gradient accumulation equals the concatenated batch") {
    Config cfg = toy_config();
    Rng rng(301);
    MixerTtsModel<double> model(cfg, rng);
    auto params = model.parameters();

    // two micro batches with identical shape profiles
    Rng data_rng(33);
    auto all = random_batch<double>(cfg, data_rng, 2, 5, 4);
    all[1].symbol_ids = all[0].symbol_ids;  // same N
    Rng mel_rng(37);
    all[1].mel = Tensor<double>::randn(all[0].mel.shape(), mel_rng);  // same T
    all[1].pitch_hz = all[0].pitch_hz;
    std::vector<TrainSample<double>> micro_a{all[0]};
    std::vector<TrainSample<double>> micro_b{all[1]};

    auto grads_of = [&](const std::vector<std::vector<TrainSample<double>>>& micros) {
        zero_grads(params);
        for (const auto& batch : micros) {
            Rng fw(5);
            Tape<double> tape;
            auto out = model.forward_train(&tape, batch, Mode::eval, fw);
            auto loss = model.total_loss(&tape, out, batch);
            tape.backward(loss.total);
        }
        std::vector<std::vector<double>> grads;
        const double inv = 1.0 / static_cast<double>(micros.size());
        for (auto& [name, p] : params) {
            auto g = p.has_grad() ? p.grad_view() : std::vector<double>(p.values().size(), 0.0);
            for (auto& v : g) v *= inv;
            grads.push_back(std::move(g));
        }
        return grads;
    };

    auto accumulated = grads_of({micro_a, micro_b});
    auto concatenated = grads_of({all});
    REQUIRE(accumulated.size() == concatenated.size());
    for (std::size_t i = 0; i < accumulated.size(); ++i)
        for (std::size_t j = 0; j < accumulated[i].size(); ++j)
            REQUIRE(accumulated[i][j] == Approx(concatenated[i][j]).margin(1e-6));
}

TEST_CASE("same seed gives byte-identical metrics") {
    Config cfg = toy_config();
    cfg.train.batch_size = 2;
    cfg.train.accum = 1;
    cfg.train.checkpoint_interval = 0;
    auto ds = synthetic_dataset<float>(cfg, 13, 3);

    const auto dir_a = temp_dir("mixtts_metrics_a");
    const auto dir_b = temp_dir("mixtts_metrics_b");
    {
        Trainer<float> t(cfg);
        t.set_dataset(ds);
        t.run(dir_a.string(), 4);
    }
    {
        Trainer<float> t(cfg);
        t.set_dataset(ds);
        t.run(dir_b.string(), 4);
    }
    const auto csv_a = slurp(dir_a / "metrics.csv");
    const auto csv_b = slurp(dir_b / "metrics.csv");
    REQUIRE(!csv_a.empty());
    REQUIRE(csv_a == csv_b);
    REQUIRE(csv_a.find("step,lr,loss,l_mel,l_aligner,l_durs,l_pitch") == 0);
    REQUIRE(fs::exists(dir_a / "checkpoint_last.mtck"));
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("a short run reduces the training loss on a tiny dataset") {
    Config cfg = toy_config();
    cfg.model.dropout = 0.05;
    cfg.train.batch_size = 2;
    cfg.train.accum = 1;
    cfg.train.base_lr = 0.05;
    cfg.train.warmup = 200;
    Trainer<float> trainer(cfg);
    trainer.set_dataset(synthetic_dataset<float>(cfg, 21, 2));
    double first = 0, last = 0;
    const int steps = 60;
    for (int i = 0; i < steps; ++i) {
        const auto info = trainer.run_step();
        if (i < 5) first += info.l_mel;
        if (i >= steps - 5) last += info.l_mel;
    }
    REQUIRE(last < first);
}

TEST_CASE("prepare_dataset extracts features from the bundled fixtures") {
    const auto dir = temp_dir("mixtts_prepare");
    auto fixture = write_fixture_dataset(dir.string());
    Config cfg = toy_config();
    auto ds = prepare_dataset<float>(cfg, fixture.manifest_path);
    REQUIRE(ds.samples.size() == 3);
    REQUIRE(ds.pitch_stats.mean > 100.0f);
    REQUIRE(ds.pitch_stats.mean < 350.0f);
    REQUIRE(ds.pitch_stats.stddev > 0.0f);
    for (const auto& s : ds.samples) {
        REQUIRE(static_cast<Index>(s.symbol_ids.size()) <= s.mel.dim(0));
        REQUIRE(static_cast<Index>(s.pitch_hz.size()) == s.mel.dim(0));
    }

    // a pitch file on the manifest overrides the estimator
    const Index frames = ds.samples[0].mel.dim(0);
    {
        std::ofstream pf(dir / "pitch_a.txt");
        for (Index i = 0; i < frames; ++i) pf << 123.0 << '\n';
    }
    {
        std::ofstream out(dir / "manifest2.txt");
        out << "tone_a|tone_a.wav|a steady tone here.|pitch_a.txt\n";
    }
    auto ds2 = prepare_dataset<float>(cfg, (dir / "manifest2.txt").string());
    REQUIRE(ds2.samples[0].pitch_hz[static_cast<std::size_t>(frames / 2)] == 123.0f);
    fs::remove_all(dir);
}

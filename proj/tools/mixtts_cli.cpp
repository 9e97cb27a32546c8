// Command-line surface: train, synthesize, align, gradcheck, bench, params,
// fixtures. Exit codes: 0 success, 2 usage/input, 3 data format, 4 numerical.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mixtts/checks.hpp"
#include "mixtts/checkpoint.hpp"
#include "mixtts/config.hpp"
#include "mixtts/fixtures.hpp"
#include "mixtts/model.hpp"
#include "mixtts/train.hpp"

namespace fs = std::filesystem;
using namespace mixtts;

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

Config build_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    Config cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    for (const auto& o : overrides) apply_config_override(cfg, o);
    cfg.validate();
    return cfg;
}

std::vector<int> tokenize_input(const std::string& text, const std::string& phoneme_file,
                                const Config& cfg) {
    if (!phoneme_file.empty()) return load_phoneme_file(phoneme_file, cfg.model.vocab_size);
    SymbolVocab vocab;
    auto seq = vocab.tokenize(text);
    if (seq.dropped > 0)
        std::fprintf(stderr, "warning: %lld unknown symbols dropped\n",
                     static_cast<long long>(seq.dropped));
    return seq.ids;
}

std::vector<int> lm_ids_for(const MixerTtsModel<float>& model, const std::string& text) {
    if (!model.extended()) return {};
    return lm_tokenize(text, model.lm_table()).ids;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& manifest, const std::string& out_dir, Index steps,
              std::int64_t seed, const std::string& resume) {
    if (!fs::exists(manifest)) throw ConfigError("manifest does not exist: " + manifest);
    Config cfg = build_config(config_path, overrides);
    if (steps > 0) cfg.train.steps = steps;
    if (seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed);

    std::unique_ptr<Trainer<float>> trainer;
    FrozenEmbeddingTable<float> table;
    const FrozenEmbeddingTable<float>* table_ptr = nullptr;
    if (!resume.empty()) {
        auto restored = restore_checkpoint<float>(resume);
        cfg = restored.cfg;
        if (steps > 0) cfg.train.steps = steps;
        trainer = std::make_unique<Trainer<float>>(std::move(restored));
        if (trainer->model().extended()) table = trainer->model().lm_table();
        if (trainer->model().extended()) table_ptr = &table;
    } else {
        if (cfg.model.extended) {
            table = load_embedding_table<float>(cfg.model.lm_table);
            table_ptr = &table;
        }
        trainer = std::make_unique<Trainer<float>>(cfg, table_ptr);
    }
    trainer->set_dataset(prepare_dataset<float>(cfg, manifest, table_ptr));
    std::printf("training: %zu utterances, %lld steps, batch %lld x accum %lld, seed %llu\n",
                trainer->dataset().samples.size(), static_cast<long long>(cfg.train.steps),
                static_cast<long long>(cfg.train.batch_size), static_cast<long long>(cfg.train.accum),
                static_cast<unsigned long long>(cfg.train.seed));
    trainer->run(out_dir, cfg.train.steps, [](const StepInfo& info) {
        if (info.step % 25 == 0 || info.step == 1)
            std::printf("step %5lld  lr %.5f  loss %.5f  mel %.5f  aligner %.5f\n",
                        static_cast<long long>(info.step), info.lr, info.loss, info.l_mel,
                        info.l_aligner);
    });
    std::printf("done: metrics and checkpoints under %s\n", out_dir.c_str());
    return 0;
}

int cmd_synthesize(const std::string& checkpoint, const std::string& text, const std::string& out,
                   double pace, const std::string& phoneme_file) {
    auto restored = restore_checkpoint<float>(checkpoint);
    const auto symbols = tokenize_input(text, phoneme_file, restored.cfg);
    const auto lm = lm_ids_for(restored.model, text);
    const double t0 = now_ms();
    auto result = restored.model.forward_infer(symbols, lm, pace);
    const double elapsed = now_ms() - t0;
    write_melf(out, result.mel);
    std::printf("synthesized %lld frames from %zu symbols in %.1f ms -> %s\n",
                static_cast<long long>(result.mel.dim(0)), symbols.size(), elapsed, out.c_str());
    return 0;
}

int cmd_align(const std::string& checkpoint, const std::string& audio, const std::string& text,
              const std::string& out) {
    auto restored = restore_checkpoint<float>(checkpoint);
    const Config& cfg = restored.cfg;
    const auto samples = read_wav<float>(audio, cfg.audio.sample_rate);
    const auto mel = mel_spectrogram(samples, cfg.audio);
    SymbolVocab vocab;
    const auto symbols = vocab.tokenize(text).ids;
    const auto lm = lm_ids_for(restored.model, text);
    auto lattice = restored.model.alignment_lattice(symbols, mel, lm);
    auto path = viterbi_path(lattice);
    auto durations = path.durations(lattice.n_tokens);

    const std::string dur_path = out + ".durations.txt";
    std::ofstream df(dur_path);
    if (!df) throw DataError("cannot write " + dur_path);
    for (Index d : durations) df << d << '\n';

    const std::string grid_path = out + ".path.txt";
    std::ofstream gf(grid_path);
    if (!gf) throw DataError("cannot write " + grid_path);
    for (Index t = 0; t < lattice.n_frames; ++t) {
        for (Index n = 0; n < lattice.n_tokens; ++n) {
            gf << (path.assignment[static_cast<std::size_t>(t)] == n ? 1 : 0);
            gf << (n + 1 < lattice.n_tokens ? ' ' : '\n');
        }
    }
    std::printf("aligned %lld frames to %lld tokens -> %s, %s\n",
                static_cast<long long>(lattice.n_frames), static_cast<long long>(lattice.n_tokens),
                dur_path.c_str(), grid_path.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed, int instances) {
    (void)instances;
    const double tol = 1e-4;
    bool all_pass = true;
    int count = 0;
    auto report_line = [&](const GradCheckReport& r, const std::string& mod) {
        const bool ok = r.pass(tol);
        all_pass = all_pass && ok;
        ++count;
        std::printf("%-10s %-22s max rel err %.3e over %d instances  [%s]\n", mod.c_str(),
                    r.name.c_str(), r.max_rel_err, r.instances, ok ? "ok" : "FAIL");
    };
    for (const auto& check : gradcheck_registry()) {
        if (module != "all" && module != check.module) continue;
        report_line(check.run(seed, 20), check.module);
    }
    if (module == "all" || module == "model") {
        report_line(gradcheck_full_graph(false, seed, 20), "model");
        report_line(gradcheck_full_graph(true, seed, 20), "model");
    }
    std::printf("%d checks, tolerance %.1e: %s\n", count, tol, all_pass ? "all passed" : "FAILURES");
    if (!all_pass) throw NumericalError("gradient check failure");
    return 0;
}

int cmd_bench(const std::string& checkpoint, const std::string& lengths_csv, int runs, int warmup,
              const std::string& out_csv, std::uint64_t seed) {
    auto restored = restore_checkpoint<float>(checkpoint);
    const Config& cfg = restored.cfg;
    std::vector<Index> lengths;
    std::stringstream ls(lengths_csv);
    std::string tok;
    while (std::getline(ls, tok, ','))
        if (!tok.empty()) lengths.push_back(static_cast<Index>(std::stoll(tok)));
    if (lengths.empty()) throw ConfigError("bench: no lengths given");

    std::ofstream csv;
    if (!out_csv.empty()) {
        csv.open(out_csv);
        if (!csv) throw DataError("cannot write " + out_csv);
        csv << "length,mean_ms,median_ms,frames,rtf\n";
    }
    std::printf("%8s %12s %12s %8s %10s\n", "length", "mean_ms", "median_ms", "frames", "rtf");
    for (Index len : lengths) {
        Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(len)));
        std::vector<int> symbols;
        for (Index i = 0; i < len; ++i)
            symbols.push_back(1 + static_cast<int>(rng.uniform_int(0, cfg.model.vocab_size - 2)));
        std::vector<int> lm;
        if (restored.model.extended())
            for (Index i = 0; i < std::max<Index>(1, len / 4); ++i)
                lm.push_back(static_cast<int>(rng.uniform_int(0, restored.model.lm_table().size() - 1)));

        Index frames = 0;
        std::vector<double> times;
        for (int r = 0; r < warmup + runs; ++r) {
            const double t0 = now_ms();
            auto result = restored.model.forward_infer(symbols, lm);
            const double elapsed = now_ms() - t0;
            frames = result.mel.dim(0);
            if (r >= warmup) times.push_back(elapsed);  // warmup runs excluded
        }
        std::sort(times.begin(), times.end());
        const double mean = std::accumulate(times.begin(), times.end(), 0.0) / times.size();
        const double median = times[times.size() / 2];
        const double audio_seconds = static_cast<double>(frames) * cfg.audio.hop_length /
                                     static_cast<double>(cfg.audio.sample_rate);
        const double rtf = audio_seconds / (mean / 1000.0);
        std::printf("%8lld %12.2f %12.2f %8lld %10.2f\n", static_cast<long long>(len), mean, median,
                    static_cast<long long>(frames), rtf);
        if (csv.is_open())
            csv << len << ',' << mean << ',' << median << ',' << frames << ',' << rtf << '\n';
    }
    return 0;
}

int cmd_params(const std::string& config_path, const std::vector<std::string>& overrides) {
    Config cfg = build_config(config_path, overrides);
    FrozenEmbeddingTable<float> table;
    const FrozenEmbeddingTable<float>* table_ptr = nullptr;
    if (cfg.model.extended) {
        table = load_embedding_table<float>(cfg.model.lm_table);
        table_ptr = &table;
    }
    Rng rng(0);
    MixerTtsModel<float> model(cfg, rng, table_ptr);
    std::map<std::string, Index> by_module;
    for (const auto& [name, p] : model.parameters()) {
        const auto dot = name.find('.');
        by_module[dot == std::string::npos ? name : name.substr(0, dot)] += p.numel();
    }
    Index total = 0;
    for (const auto& [module, count] : by_module) {
        std::printf("%-12s %12lld\n", module.c_str(), static_cast<long long>(count));
        total += count;
    }
    std::printf("%-12s %12lld (%.2fM)\n", "total", static_cast<long long>(total),
                static_cast<double>(total) / 1e6);
    return 0;
}

int cmd_fixtures(const std::string& out_dir) {
    auto ds = write_fixture_dataset(out_dir);
    std::printf("wrote %zu utterances\nmanifest: %s\nlm table: %s\n", ds.wav_paths.size(),
                ds.manifest_path.c_str(), ds.lm_table_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mixer-style non-autoregressive text-to-mel model"};
    app.require_subcommand(0, 1);

    bool dump_config = false;
    app.add_flag("--dump-config", dump_config, "print the full default configuration and exit");

    std::string config_path, manifest, out_dir = "runs", resume;
    std::vector<std::string> overrides;
    Index steps = 0;
    std::int64_t seed = -1;

    auto* train = app.add_subcommand("train", "train a model from a dataset manifest");
    train->add_option("--config", config_path, "config file");
    train->add_option("--manifest", manifest, "dataset manifest")->required();
    train->add_option("--out-dir", out_dir, "output directory for checkpoints and metrics");
    train->add_option("--steps", steps, "override train.steps");
    train->add_option("--seed", seed, "override train.seed");
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->add_option("--set", overrides, "config override section.key=value")->take_all();

    std::string checkpoint, text, out_file = "out.melf", phoneme_file;
    double pace = 1.0;
    auto* synth = app.add_subcommand("synthesize", "generate a mel spectrogram from text");
    synth->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    synth->add_option("--text", text, "input text");
    synth->add_option("--phoneme-file", phoneme_file, "pre-tokenized phoneme id file");
    synth->add_option("--out", out_file, "output mel file (MELF format)");
    synth->add_option("--pace", pace, "duration scaling factor");

    std::string audio, align_out = "alignment";
    auto* align = app.add_subcommand("align", "binarize the alignment between audio and text");
    align->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    align->add_option("--audio", audio, "input wav file")->required();
    align->add_option("--text", text, "transcript")->required();
    align->add_option("--out", align_out, "output prefix for durations and path files");

    std::string module = "all";
    std::uint64_t gc_seed = 7;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference verification at f64");
    gradcheck->add_option("--module", module, "all|numerics|aligner|model")
        ->check(CLI::IsMember({"all", "numerics", "aligner", "model"}));
    gradcheck->add_option("--seed", gc_seed, "random seed");

    std::string lengths = "128,256,512,1024", bench_csv;
    int runs = 10, warmup = 3;
    std::uint64_t bench_seed = 7;
    auto* bench = app.add_subcommand("bench", "measure single-utterance synthesis speed");
    bench->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    bench->add_option("--lengths", lengths, "comma-separated symbol counts");
    bench->add_option("--runs", runs, "timed runs per length");
    bench->add_option("--warmup", warmup, "untimed warmup runs per length");
    bench->add_option("--out", bench_csv, "also write results as CSV");
    bench->add_option("--seed", bench_seed, "random seed for generated inputs");

    auto* params = app.add_subcommand("params", "print trainable parameter counts");
    params->add_option("--config", config_path, "config file");
    params->add_option("--set", overrides, "config override section.key=value")->take_all();

    std::string fixture_dir = "fixtures";
    auto* fixtures = app.add_subcommand("fixtures", "write the bundled demo dataset");
    fixtures->add_option("--out-dir", fixture_dir, "target directory");

    try {
        app.parse(argc, argv);
        if (dump_config) {
            Config cfg;
            std::fputs(dump_config(cfg).c_str(), stdout);
            return 0;
        }
        if (train->parsed())
            return cmd_train(config_path, overrides, manifest, out_dir, steps, seed, resume);
        if (synth->parsed()) {
            if (text.empty() && phoneme_file.empty())
                throw ConfigError("synthesize needs --text or --phoneme-file");
            return cmd_synthesize(checkpoint, text, out_file, pace, phoneme_file);
        }
        if (align->parsed()) return cmd_align(checkpoint, audio, text, align_out);
        if (gradcheck->parsed()) return cmd_gradcheck(module, gc_seed, 20);
        if (bench->parsed()) return cmd_bench(checkpoint, lengths, runs, warmup, bench_csv, bench_seed);
        if (params->parsed()) return cmd_params(config_path, overrides);
        if (fixtures->parsed()) return cmd_fixtures(fixture_dir);
        std::fputs(app.help().c_str(), stderr);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        std::fputs(app.help().c_str(), stdout);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const Error& e) {  // config, shape, alignment
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

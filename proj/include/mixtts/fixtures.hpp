#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mixtts/audio.hpp"
#include "mixtts/lm.hpp"

// Deterministic bundled dataset: three short harmonic utterances with known
// pitch trajectories, a manifest, and a demo LM embedding table. Used by the
// overfit smoke runs, CLI examples, and tests.

namespace mixtts {

namespace fixture_detail {

// harmonic tone with a fade envelope; freq_fn gives Hz per sample
template <typename FreqFn>
std::vector<float> render_tone(double seconds, Index sample_rate, FreqFn freq_fn) {
    const Index n = static_cast<Index>(seconds * static_cast<double>(sample_rate));
    std::vector<float> out(static_cast<std::size_t>(n), 0.0f);
    const Index fade = sample_rate / 20;  // 50 ms
    double phase = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double f = freq_fn(static_cast<double>(i) / static_cast<double>(sample_rate));
        phase += 2.0 * M_PI * f / static_cast<double>(sample_rate);
        double v = std::sin(phase) + 0.5 * std::sin(2.0 * phase) + 0.25 * std::sin(3.0 * phase);
        double env = 0.28;
        if (i < fade) env *= static_cast<double>(i) / static_cast<double>(fade);
        if (i >= n - fade) env *= static_cast<double>(n - 1 - i) / static_cast<double>(fade);
        out[static_cast<std::size_t>(i)] = static_cast<float>(v * env);
    }
    return out;
}

}  // namespace fixture_detail

struct FixtureDataset {
    std::string manifest_path;
    std::string lm_table_path;
    std::vector<std::string> wav_paths;
};

inline FixtureDataset write_fixture_dataset(const std::string& dir, Index sample_rate = 22050) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    struct Spec {
        std::string id;
        std::string transcript;
        std::vector<float> samples;
    };
    std::vector<Spec> specs;
    specs.push_back({"tone_a", "a steady tone here.",
                     fixture_detail::render_tone(0.70, sample_rate, [](double) { return 220.0; })});
    specs.push_back({"sweep_b", "a rising pitch sweep.",
                     fixture_detail::render_tone(0.75, sample_rate, [](double t) {
                         return 150.0 + 200.0 * t / 0.75;
                     })});
    specs.push_back({"steps_c", "two tones, low then high.",
                     fixture_detail::render_tone(0.80, sample_rate, [](double t) {
                         return t < 0.4 ? 180.0 : 260.0;
                     })});

    FixtureDataset ds;
    ds.manifest_path = (fs::path(dir) / "manifest.txt").string();
    std::ofstream manifest(ds.manifest_path);
    if (!manifest) throw DataError("cannot write fixture manifest in " + dir);
    for (const auto& spec : specs) {
        const std::string wav = spec.id + ".wav";
        write_wav((fs::path(dir) / wav).string(), spec.samples, sample_rate);
        ds.wav_paths.push_back((fs::path(dir) / wav).string());
        manifest << spec.id << '|' << wav << '|' << spec.transcript << '\n';
    }
    manifest.close();

    ds.lm_table_path = (fs::path(dir) / "lm_table.txt").string();
    save_embedding_table(build_demo_lm_table<float>(32), ds.lm_table_path);
    return ds;
}

}  // namespace mixtts

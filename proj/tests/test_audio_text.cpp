#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mixtts/audio.hpp"
#include "mixtts/fixtures.hpp"
#include "mixtts/text.hpp"

using namespace mixtts;
using Catch::Approx;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

std::vector<float> sine(double hz, double seconds, Index sr, double amp = 0.3) {
    const Index n = static_cast<Index>(seconds * sr);
    std::vector<float> out(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i)
        out[static_cast<std::size_t>(i)] =
            static_cast<float>(amp * std::sin(2.0 * M_PI * hz * i / static_cast<double>(sr)));
    return out;
}

// test-local mel geometry, independent of the library's filterbank code
double oracle_hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double oracle_mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace

TEST_CASE("character tokenizer keeps punctuation and case-folds") {
    SymbolVocab vocab;
    auto seq = vocab.tokenize("Hi!");
    REQUIRE(seq.ids.size() == 3);
    REQUIRE(vocab.detokenize(seq.ids) == "hi!");

    auto spaced = vocab.tokenize("A  b");
    REQUIRE(spaced.ids.size() == 4);  // both spaces kept
    REQUIRE(vocab.detokenize(spaced.ids) == "a  b");

    REQUIRE_THROWS_AS(vocab.tokenize(""), DataError);

    // unknown characters are dropped and counted
    auto dropped = vocab.tokenize("a€b");
    REQUIRE(dropped.dropped > 0);
    REQUIRE(vocab.detokenize(dropped.ids) == "ab");
}

TEST_CASE("tokenize/detokenize round trip for in-vocab text") {
    SymbolVocab vocab;
    const std::string samples[] = {"hello world.", "it's 42, ok?", "a  b  c!", "(x: y; z\")"};
    for (const auto& s : samples) {
        auto seq = vocab.tokenize(s);
        REQUIRE(vocab.detokenize(seq.ids) == s);
        // stable under repeated lowercasing
        auto again = vocab.tokenize(vocab.detokenize(seq.ids));
        REQUIRE(again.ids == seq.ids);
    }
}

TEST_CASE("manifest parsing") {
    const auto path = temp_file("mixtts_manifest_test.txt");
    {
        std::ofstream out(path);
        out << "u1|a.wav|hello there.\n";
        out << "u2|b.wav|second line.|pitch.txt|phones.txt\n";
    }
    auto utts = load_manifest(path.string());
    REQUIRE(utts.size() == 2);
    REQUIRE(utts[0].id == "u1");
    REQUIRE(utts[0].pitch_path.empty());
    REQUIRE(utts[1].transcript == "second line.");
    REQUIRE_FALSE(utts[1].pitch_path.empty());
    REQUIRE_FALSE(utts[1].phoneme_path.empty());
    // relative paths resolve against the manifest directory
    REQUIRE(std::filesystem::path(utts[0].audio_path).parent_path() == path.parent_path());

    {
        std::ofstream out(path);
        out << "u1|a.wav|ok\n";
        out << "u2|b.wav\n";  // missing transcript
    }
    try {
        load_manifest(path.string());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }
    std::filesystem::remove(path);

    REQUIRE_THROWS_AS(load_manifest("/nonexistent/manifest.txt"), DataError);
}

TEST_CASE("pitch and phoneme file loaders") {
    const auto path = temp_file("mixtts_pitch_test.txt");
    {
        std::ofstream out(path);
        out << "0\n220.5\n0\n231\n";
    }
    auto pitch = load_pitch_file<float>(path.string());
    REQUIRE(pitch.size() == 4);
    REQUIRE(pitch[1] == Approx(220.5));

    const auto ph = temp_file("mixtts_phoneme_test.txt");
    {
        std::ofstream out(ph);
        out << "1 5 9 2\n";
    }
    REQUIRE(load_phoneme_file(ph.string(), 16) == std::vector<int>{1, 5, 9, 2});
    REQUIRE_THROWS_AS(load_phoneme_file(ph.string(), 8), DataError);
    std::filesystem::remove(path);
    std::filesystem::remove(ph);
}

TEST_CASE("wav io round trip and validation") {
    MelConfig cfg;
    auto tone = sine(220.0, 0.25, cfg.sample_rate);
    const auto path = temp_file("mixtts_wav_test.wav");
    write_wav(path.string(), tone, cfg.sample_rate);
    auto back = read_wav<float>(path.string(), cfg.sample_rate);
    REQUIRE(back.size() == tone.size());
    for (std::size_t i = 0; i < back.size(); i += 97)
        REQUIRE(back[i] == Approx(tone[i]).margin(2.0 / 32768.0));
    // declared rate must match
    REQUIRE_THROWS_AS(read_wav<float>(path.string(), 16000), DataError);
    std::filesystem::remove(path);
}

TEST_CASE("mel frame count follows the hop formula") {
    MelConfig cfg;
    Rng rng(91);
    for (int inst = 0; inst < 50; ++inst) {
        const Index len = 1 + static_cast<Index>(rng.uniform_int(0, 40000));
        std::vector<float> noise(static_cast<std::size_t>(len));
        for (auto& v : noise) v = static_cast<float>(rng.normal(0.0, 0.1));
        auto mel = mel_spectrogram(noise, cfg);
        const Index expect = (len + cfg.hop_length - 1) / cfg.hop_length;  // ceil(len/hop)
        REQUIRE(mel.dim(0) == expect);
        REQUIRE(mel.dim(1) == cfg.n_mels);
        auto f0 = estimate_f0(noise, cfg);
        REQUIRE(static_cast<Index>(f0.frame_f0.size()) == expect);
    }
    // shorter than one window -> a single padded frame
    std::vector<float> tiny(100, 0.01f);
    REQUIRE(mel_spectrogram(tiny, cfg).dim(0) == 1);
}

TEST_CASE("silence maps every bin to the log floor") {
    MelConfig cfg;
    std::vector<float> silence(static_cast<std::size_t>(cfg.sample_rate / 4), 0.0f);
    auto mel = mel_spectrogram(silence, cfg);
    for (Index i = 0; i < mel.numel(); ++i)
        REQUIRE(mel.at(i) == Approx(std::log(cfg.log_floor)).margin(1e-6));
}

TEST_CASE("a 440 Hz tone peaks in the correct mel bin") {
    MelConfig cfg;
    auto tone = sine(440.0, 0.4, cfg.sample_rate);
    auto mel = mel_spectrogram(tone, cfg);
    // average over interior frames, then take the argmax bin
    std::vector<double> avg(static_cast<std::size_t>(cfg.n_mels), 0.0);
    const Index t0 = 4, t1 = mel.dim(0) - 4;
    for (Index t = t0; t < t1; ++t)
        for (Index m = 0; m < cfg.n_mels; ++m) avg[static_cast<std::size_t>(m)] += mel.at(t, m);
    Index peak = 0;
    for (Index m = 1; m < cfg.n_mels; ++m)
        if (avg[static_cast<std::size_t>(m)] > avg[static_cast<std::size_t>(peak)]) peak = m;

    // expected bin from first-principles mel geometry: nearest filter center
    const double mel_lo = oracle_hz_to_mel(cfg.fmin), mel_hi = oracle_hz_to_mel(cfg.fmax);
    Index expect = 0;
    double best = 1e9;
    for (Index m = 0; m < cfg.n_mels; ++m) {
        const double center =
            oracle_mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / static_cast<double>(cfg.n_mels + 1));
        if (std::abs(center - 440.0) < best) {
            best = std::abs(center - 440.0);
            expect = m;
        }
    }
    REQUIRE(std::abs(peak - expect) <= 1);
    // argmax bin's center frequency is within one mel bin of 440 Hz
    const double peak_center = mel_bin_center_hz(cfg, peak);
    const double next_center = mel_bin_center_hz(cfg, std::min(peak + 1, cfg.n_mels - 1));
    REQUIRE(std::abs(peak_center - 440.0) <= std::abs(next_center - peak_center) + 1.0);
}

TEST_CASE("doubling the amplitude raises log-mel by log 2") {
    MelConfig cfg;
    auto quiet = sine(300.0, 0.3, cfg.sample_rate, 0.2);
    auto loud = sine(300.0, 0.3, cfg.sample_rate, 0.4);
    auto mel_q = mel_spectrogram(quiet, cfg);
    auto mel_l = mel_spectrogram(loud, cfg);
    const double floor_log = std::log(cfg.log_floor);
    Index checked = 0;
    for (Index i = 0; i < mel_q.numel(); ++i) {
        if (mel_q.at(i) > floor_log + 2.0) {  // away from the floor
            REQUIRE(mel_l.at(i) - mel_q.at(i) == Approx(std::log(2.0)).margin(1e-4));
            ++checked;
        }
    }
    REQUIRE(checked > 100);
}

TEST_CASE("f0 estimator recovers synthetic tones within three percent") {
    MelConfig cfg;
    for (double hz : {80.0, 120.0, 220.0, 320.0, 400.0}) {
        auto tone = sine(hz, 0.35, cfg.sample_rate);
        auto contour = estimate_f0(tone, cfg);
        const Index n = static_cast<Index>(contour.frame_f0.size());
        Index voiced = 0;
        for (Index t = 4; t < n - 4; ++t) {
            const double f = contour.frame_f0[static_cast<std::size_t>(t)];
            if (f > 0) {
                ++voiced;
                REQUIRE(f == Approx(hz).epsilon(0.03));
            }
        }
        REQUIRE(voiced >= (n - 8) * 9 / 10);  // nearly all interior frames voiced
    }
}

TEST_CASE("white noise is mostly unvoiced") {
    MelConfig cfg;
    Rng rng(92);
    std::vector<float> noise(static_cast<std::size_t>(cfg.sample_rate / 2));
    for (auto& v : noise) v = static_cast<float>(rng.normal(0.0, 0.25));
    auto contour = estimate_f0(noise, cfg);
    Index unvoiced = 0;
    for (float f : contour.frame_f0)
        if (f == 0.0f) ++unvoiced;
    REQUIRE(unvoiced * 2 > static_cast<Index>(contour.frame_f0.size()));
}

TEST_CASE("melf files round trip and reject bad magic") {
    Rng rng(93);
    Tensor<float> mel = Tensor<float>::randn({7, 5}, rng);
    const auto path = temp_file("mixtts_melf_test.melf");
    write_melf(path.string(), mel);
    auto back = read_melf<float>(path.string());
    REQUIRE(back.shape() == mel.shape());
    for (Index i = 0; i < mel.numel(); ++i) REQUIRE(back.at(i) == mel.at(i));

    {
        std::ofstream out(path, std::ios::binary);
        out << "JUNKJUNKJUNKJUNKJUNK";
    }
    REQUIRE_THROWS_AS(read_melf<float>(path.string()), DataError);
    std::filesystem::remove(path);
}

TEST_CASE("fixture dataset is loadable end to end") {
    const auto dir = temp_file("mixtts_fixture_test");
    auto ds = write_fixture_dataset(dir.string());
    auto utts = load_manifest(ds.manifest_path);
    REQUIRE(utts.size() == 3);
    MelConfig cfg;
    SymbolVocab vocab;
    for (const auto& u : utts) {
        auto samples = read_wav<float>(u.audio_path, cfg.sample_rate);
        auto mel = mel_spectrogram(samples, cfg);
        auto f0 = estimate_f0(samples, cfg);
        auto seq = vocab.tokenize(u.transcript);
        REQUIRE(static_cast<Index>(f0.frame_f0.size()) == mel.dim(0));
        REQUIRE(static_cast<Index>(seq.ids.size()) <= mel.dim(0));  // alignment feasible
        Index voiced = 0;
        for (float f : f0.frame_f0)
            if (f > 0) ++voiced;
        REQUIRE(voiced > mel.dim(0) / 2);  // tones are mostly voiced
    }
    auto table = load_embedding_table<float>(ds.lm_table_path);
    REQUIRE(table.size() > 50);
    std::filesystem::remove_all(dir);
}

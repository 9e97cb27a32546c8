#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mixtts/adaptors.hpp"
#include "mixtts/core/common.hpp"
#include "mixtts/core/tensor.hpp"

// Audio feature frontend: 16-bit mono PCM WAV in, log-mel spectrograms and
// autocorrelation F0 contours out, both on the same frame grid
// (frame count = ceil(samples / hop), window centered at t*hop).

namespace mixtts {

struct MelConfig {
    Index sample_rate = 22050;
    Index win_length = 1102;  // 50 ms
    Index hop_length = 275;   // 12.5 ms (nearest integer)
    Index n_fft = 2048;
    Index n_mels = 80;
    double fmin = 0.0;
    double fmax = 8000.0;
    double log_floor = 1e-5;
    // F0 estimator
    double f0_min = 65.0;
    double f0_max = 500.0;
    double voicing_threshold = 0.5;

    void validate() const {
        require_config(sample_rate > 0, "mel: sample_rate must be positive");
        require_config(hop_length > 0 && hop_length < win_length, "mel: need 0 < hop < win");
        require_config(n_fft >= win_length, "mel: n_fft must be >= win_length");
        require_config((n_fft & (n_fft - 1)) == 0, "mel: n_fft must be a power of two");
        require_config(n_mels > 0, "mel: n_mels must be positive");
        require_config(fmax > fmin && fmax <= sample_rate / 2.0, "mel: need fmin < fmax <= nyquist");
        require_config(log_floor > 0, "mel: log_floor must be positive");
        require_config(f0_min > 0 && f0_max > f0_min, "mel: need 0 < f0_min < f0_max");
    }

    Index frame_count(Index n_samples) const { return (n_samples + hop_length - 1) / hop_length; }
};

// ------------------------------------------------------------------ WAV I/O

template <typename T>
std::vector<T> read_wav(const std::string& path, Index expected_rate) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open wav: " + path);
    char riff[4], wave[4];
    std::uint32_t riff_size = 0;
    in.read(riff, 4);
    in.read(reinterpret_cast<char*>(&riff_size), 4);
    in.read(wave, 4);
    if (!in || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0)
        throw DataError("not a RIFF/WAVE file: " + path);

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::vector<T> samples;
    bool got_fmt = false, got_data = false;
    while (in && !(got_fmt && got_data)) {
        char tag[4];
        std::uint32_t size = 0;
        in.read(tag, 4);
        in.read(reinterpret_cast<char*>(&size), 4);
        if (!in) break;
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            std::vector<char> fmt(size);
            in.read(fmt.data(), size);
            if (size < 16) throw DataError("wav fmt chunk too small: " + path);
            std::memcpy(&format, fmt.data() + 0, 2);
            std::memcpy(&channels, fmt.data() + 2, 2);
            std::memcpy(&rate, fmt.data() + 4, 4);
            std::memcpy(&bits, fmt.data() + 14, 2);
            got_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!got_fmt) throw DataError("wav data before fmt chunk: " + path);
            if (format != 1 || bits != 16)
                throw DataError("wav must be 16-bit PCM: " + path);
            if (channels != 1) throw DataError("wav must be mono: " + path);
            const std::size_t count = size / 2;
            std::vector<std::int16_t> raw(count);
            in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * 2));
            samples.resize(count);
            for (std::size_t i = 0; i < count; ++i)
                samples[i] = static_cast<T>(raw[i]) / static_cast<T>(32768);
            got_data = true;
        } else {
            in.seekg(size + (size & 1), std::ios::cur);
        }
    }
    if (!got_fmt || !got_data) throw DataError("wav missing fmt or data chunk: " + path);
    if (static_cast<Index>(rate) != expected_rate)
        throw DataError("wav sample rate " + std::to_string(rate) + " does not match configured " +
                        std::to_string(expected_rate) + ": " + path);
    if (samples.empty()) throw DataError("wav holds no samples: " + path);
    return samples;
}

template <typename T>
void write_wav(const std::string& path, const std::vector<T>& samples, Index sample_rate) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write wav: " + path);
    const std::uint32_t data_size = static_cast<std::uint32_t>(samples.size() * 2);
    const std::uint32_t riff_size = 36 + data_size;
    const std::uint32_t rate = static_cast<std::uint32_t>(sample_rate);
    const std::uint32_t byte_rate = rate * 2;
    const std::uint16_t fmt_pcm = 1, channels = 1, block_align = 2, bits = 16;
    const std::uint32_t fmt_size = 16;
    out.write("RIFF", 4);
    out.write(reinterpret_cast<const char*>(&riff_size), 4);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    out.write(reinterpret_cast<const char*>(&fmt_size), 4);
    out.write(reinterpret_cast<const char*>(&fmt_pcm), 2);
    out.write(reinterpret_cast<const char*>(&channels), 2);
    out.write(reinterpret_cast<const char*>(&rate), 4);
    out.write(reinterpret_cast<const char*>(&byte_rate), 4);
    out.write(reinterpret_cast<const char*>(&block_align), 2);
    out.write(reinterpret_cast<const char*>(&bits), 2);
    out.write("data", 4);
    out.write(reinterpret_cast<const char*>(&data_size), 4);
    for (T s : samples) {
        const double clipped = std::max(-1.0, std::min(1.0, static_cast<double>(s)));
        const std::int16_t q = static_cast<std::int16_t>(std::lrint(clipped * 32767.0));
        out.write(reinterpret_cast<const char*>(&q), 2);
    }
}

// ------------------------------------------------------------------ STFT/mel

namespace audio_detail {

// in-place iterative radix-2 FFT
inline void fft(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const auto u = a[i + j];
                const auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// reflective index into [0, len)
inline Index reflect(Index i, Index len) {
    if (len == 1) return 0;
    while (i < 0 || i >= len) {
        if (i < 0) i = -i;
        if (i >= len) i = 2 * (len - 1) - i;
    }
    return i;
}

}  // namespace audio_detail

// Triangular filterbank [n_mels, n_fft/2+1] on the mel scale.
inline std::vector<std::vector<double>> mel_filterbank(const MelConfig& cfg) {
    const Index n_bins = cfg.n_fft / 2 + 1;
    const double mel_lo = audio_detail::hz_to_mel(cfg.fmin);
    const double mel_hi = audio_detail::hz_to_mel(cfg.fmax);
    std::vector<double> hz_points(static_cast<std::size_t>(cfg.n_mels) + 2);
    for (std::size_t i = 0; i < hz_points.size(); ++i)
        hz_points[i] = audio_detail::mel_to_hz(
            mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
    std::vector<std::vector<double>> bank(static_cast<std::size_t>(cfg.n_mels),
                                          std::vector<double>(static_cast<std::size_t>(n_bins), 0.0));
    for (Index m = 0; m < cfg.n_mels; ++m) {
        const double left = hz_points[static_cast<std::size_t>(m)];
        const double center = hz_points[static_cast<std::size_t>(m) + 1];
        const double right = hz_points[static_cast<std::size_t>(m) + 2];
        for (Index k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.n_fft);
            double w = 0.0;
            if (f > left && f < center)
                w = (f - left) / (center - left);
            else if (f >= center && f < right)
                w = (right - f) / (right - center);
            bank[static_cast<std::size_t>(m)][static_cast<std::size_t>(k)] = w;
        }
    }
    return bank;
}

inline double mel_bin_center_hz(const MelConfig& cfg, Index m) {
    const double mel_lo = audio_detail::hz_to_mel(cfg.fmin);
    const double mel_hi = audio_detail::hz_to_mel(cfg.fmax);
    return audio_detail::mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(m + 1) /
                                                static_cast<double>(cfg.n_mels + 1));
}

// Magnitude STFT (Hann window centered at t*hop with reflection padding)
// -> mel filterbank -> log with floor. Output [T, n_mels].
template <typename T>
Tensor<T> mel_spectrogram(const std::vector<T>& samples, const MelConfig& cfg) {
    cfg.validate();
    const Index n = static_cast<Index>(samples.size());
    require_shape(n > 0, "mel_spectrogram: empty signal");
    const Index n_frames = cfg.frame_count(n);
    const Index n_bins = cfg.n_fft / 2 + 1;
    const auto bank = mel_filterbank(cfg);

    // periodic Hann
    std::vector<double> window(static_cast<std::size_t>(cfg.win_length));
    for (Index i = 0; i < cfg.win_length; ++i)
        window[static_cast<std::size_t>(i)] =
            0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(cfg.win_length)));

    Tensor<T> out({n_frames, cfg.n_mels});
    std::vector<std::complex<double>> buf(static_cast<std::size_t>(cfg.n_fft));
    std::vector<double> mags(static_cast<std::size_t>(n_bins));
    const Index pad_left = (cfg.n_fft - cfg.win_length) / 2;
    for (Index t = 0; t < n_frames; ++t) {
        std::fill(buf.begin(), buf.end(), std::complex<double>(0.0));
        const Index start = t * cfg.hop_length - cfg.win_length / 2;
        for (Index i = 0; i < cfg.win_length; ++i) {
            const Index src = audio_detail::reflect(start + i, n);
            buf[static_cast<std::size_t>(pad_left + i)] =
                static_cast<double>(samples[static_cast<std::size_t>(src)]) *
                window[static_cast<std::size_t>(i)];
        }
        audio_detail::fft(buf);
        for (Index k = 0; k < n_bins; ++k) mags[static_cast<std::size_t>(k)] = std::abs(buf[static_cast<std::size_t>(k)]);
        for (Index m = 0; m < cfg.n_mels; ++m) {
            double acc = 0.0;
            const auto& row = bank[static_cast<std::size_t>(m)];
            for (Index k = 0; k < n_bins; ++k) acc += row[static_cast<std::size_t>(k)] * mags[static_cast<std::size_t>(k)];
            out.at(t, m) = static_cast<T>(std::log(std::max(acc, cfg.log_floor)));
        }
    }
    return out;
}

// Normalized-autocorrelation F0, one value per mel frame, 0 = unvoiced.
template <typename T>
PitchContour<T> estimate_f0(const std::vector<T>& samples, const MelConfig& cfg) {
    cfg.validate();
    const Index n = static_cast<Index>(samples.size());
    require_shape(n > 0, "estimate_f0: empty signal");
    const Index n_frames = cfg.frame_count(n);
    const Index lag_min = std::max<Index>(1, static_cast<Index>(std::floor(cfg.sample_rate / cfg.f0_max)));
    const Index lag_max = static_cast<Index>(std::ceil(cfg.sample_rate / cfg.f0_min));
    const Index wlen = cfg.win_length;

    PitchContour<T> contour;
    contour.frame_f0.assign(static_cast<std::size_t>(n_frames), T(0));
    std::vector<double> frame(static_cast<std::size_t>(wlen));
    std::vector<double> nac(static_cast<std::size_t>(lag_max) + 1, 0.0);
    for (Index t = 0; t < n_frames; ++t) {
        const Index start = t * cfg.hop_length - wlen / 2;
        double energy = 0.0;
        for (Index i = 0; i < wlen; ++i) {
            const Index src = start + i;
            const double v =
                (src >= 0 && src < n) ? static_cast<double>(samples[static_cast<std::size_t>(src)]) : 0.0;
            frame[static_cast<std::size_t>(i)] = v;
            energy += v * v;
        }
        if (energy / static_cast<double>(wlen) < 1e-8) continue;  // silence

        double best = 0.0;
        for (Index lag = lag_min; lag <= lag_max && lag < wlen; ++lag) {
            double num = 0.0, e0 = 0.0, e1 = 0.0;
            const Index count = wlen - lag;
            for (Index i = 0; i < count; ++i) {
                const double a = frame[static_cast<std::size_t>(i)];
                const double b = frame[static_cast<std::size_t>(i + lag)];
                num += a * b;
                e0 += a * a;
                e1 += b * b;
            }
            const double denom = std::sqrt(e0 * e1);
            nac[static_cast<std::size_t>(lag)] = denom > 0 ? num / denom : 0.0;
            best = std::max(best, nac[static_cast<std::size_t>(lag)]);
        }
        if (best < cfg.voicing_threshold) continue;

        // earliest local peak close to the global best avoids octave halving
        Index pick = 0;
        for (Index lag = lag_min; lag <= lag_max && lag < wlen; ++lag) {
            const double v = nac[static_cast<std::size_t>(lag)];
            const bool is_peak =
                (lag == lag_min || v >= nac[static_cast<std::size_t>(lag - 1)]) &&
                (lag == lag_max || lag + 1 >= wlen || v >= nac[static_cast<std::size_t>(lag + 1)]);
            if (is_peak && v >= 0.85 * best) {
                pick = lag;
                break;
            }
        }
        if (pick == 0) continue;

        // parabolic refinement over the neighboring lags
        double lag_refined = static_cast<double>(pick);
        if (pick > lag_min && pick + 1 <= lag_max && pick + 1 < wlen) {
            const double y1 = nac[static_cast<std::size_t>(pick - 1)];
            const double y2 = nac[static_cast<std::size_t>(pick)];
            const double y3 = nac[static_cast<std::size_t>(pick + 1)];
            const double denom = y1 - 2.0 * y2 + y3;
            if (std::abs(denom) > 1e-12) {
                const double delta = 0.5 * (y1 - y3) / denom;
                if (std::abs(delta) <= 1.0) lag_refined += delta;
            }
        }
        const double f0 = cfg.sample_rate / lag_refined;
        if (f0 >= cfg.f0_min && f0 <= cfg.f0_max)
            contour.frame_f0[static_cast<std::size_t>(t)] = static_cast<T>(f0);
    }
    return contour;
}

// ------------------------------------------------------------------ MELF file
// 16-byte header: magic "MELF", u32 T, u32 M, u32 reserved; then T*M
// little-endian f32, row-major.

template <typename T>
void write_melf(const std::string& path, const Tensor<T>& mel) {
    require_shape(mel.rank() == 2, "write_melf: expected [T,M], got " + shape_str(mel.shape()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write mel file: " + path);
    const std::uint32_t t = static_cast<std::uint32_t>(mel.dim(0));
    const std::uint32_t m = static_cast<std::uint32_t>(mel.dim(1));
    const std::uint32_t reserved = 0;
    out.write("MELF", 4);
    out.write(reinterpret_cast<const char*>(&t), 4);
    out.write(reinterpret_cast<const char*>(&m), 4);
    out.write(reinterpret_cast<const char*>(&reserved), 4);
    for (Index i = 0; i < mel.numel(); ++i) {
        const float v = static_cast<float>(mel.at(i));
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
}

template <typename T>
Tensor<T> read_melf(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open mel file: " + path);
    char magic[4];
    std::uint32_t t = 0, m = 0, reserved = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&t), 4);
    in.read(reinterpret_cast<char*>(&m), 4);
    in.read(reinterpret_cast<char*>(&reserved), 4);
    if (!in || std::memcmp(magic, "MELF", 4) != 0) throw DataError("bad mel file magic: " + path);
    Tensor<T> mel({static_cast<Index>(t), static_cast<Index>(m)});
    for (Index i = 0; i < mel.numel(); ++i) {
        float v;
        in.read(reinterpret_cast<char*>(&v), 4);
        if (!in) throw DataError("mel file truncated: " + path);
        mel.at(i) = static_cast<T>(v);
    }
    return mel;
}

}  // namespace mixtts

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Log-mel front end: linear resampling, Hann-windowed STFT with reflect
// padding, HTK-scale triangular filterbank, natural-log compression.

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "samt/errors.hpp"
#include "samt/tensor.hpp"

namespace samt {

struct AudioBuffer {
    std::vector<float> samples;
    double sample_rate = 16000;
};

struct FrontendConfig {
    double sample_rate = 16000;
    std::size_t n_fft = 2048;
    std::size_t hop = 320;
    double fmin = 20;
    double fmax = 7600;
    std::size_t n_mels = 512;
    double log_floor = 1e-5;
    bool area_normalize = true;

    double hop_seconds() const { return static_cast<double>(hop) / sample_rate; }
};

struct MelSpectrogram {
    Tensor<float> frames; // [T, n_mels]
    double hop = 0.02;

    std::size_t num_frames() const { return frames.rows(); }
};

inline AudioBuffer resample(const AudioBuffer& audio, double target_rate) {
    require_input(target_rate > 0 && audio.sample_rate > 0, "sample rates must be positive");
    if (audio.samples.empty()) return {{}, target_rate};
    if (audio.sample_rate == target_rate) return {audio.samples, target_rate};
    const std::size_t n_in = audio.samples.size();
    const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * target_rate / audio.sample_rate));
    AudioBuffer out{std::vector<float>(n_out), target_rate};
    const double step = audio.sample_rate / target_rate;
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = static_cast<double>(i) * step;
        const auto i0 = std::min(static_cast<std::size_t>(pos), n_in - 1);
        const std::size_t i1 = std::min(i0 + 1, n_in - 1);
        const double frac = std::min(pos - static_cast<double>(i0), 1.0);
        out.samples[i] = static_cast<float>((1.0 - frac) * audio.samples[i0] + frac * audio.samples[i1]);
    }
    return out;
}

/// In-place iterative radix-2 FFT. Length must be a power of two.
inline void fft(std::span<std::complex<double>> a) {
    const std::size_t n = a.size();
    require_contract(std::has_single_bit(n), "fft length must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(k));
                const auto u = a[i + k];
                const auto v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
            }
        }
    }
}

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    return w;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// [n_mels, n_fft/2 + 1] triangular filters on the HTK mel scale.
inline Tensor<double> mel_filterbank(const FrontendConfig& cfg) {
    const std::size_t n_bins = cfg.n_fft / 2 + 1;
    Tensor<double> fb = Tensor<double>::matrix(cfg.n_mels, n_bins);
    const double mel_lo = hz_to_mel(cfg.fmin);
    const double mel_hi = hz_to_mel(cfg.fmax);
    std::vector<double> edges(cfg.n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
        const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
        const double norm = cfg.area_normalize ? 2.0 / (hi - lo) : 1.0;
        for (std::size_t k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.n_fft);
            const double up = (f - lo) / (center - lo);
            const double down = (hi - f) / (hi - center);
            fb(m, k) = std::max(0.0, std::min(up, down)) * norm;
        }
    }
    return fb;
}

namespace detail {

/// Reflect index into [0, n) without repeating the edge sample.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

} // namespace detail

/// Power spectrum |FFT(window * frame)|^2 of the centered frame at `center`.
inline std::vector<double> power_spectrum_frame(std::span<const float> samples, std::ptrdiff_t center,
                                                std::span<const double> window) {
    const std::size_t n_fft = window.size();
    std::vector<std::complex<double>> buf(n_fft);
    const std::ptrdiff_t start = center - static_cast<std::ptrdiff_t>(n_fft / 2);
    for (std::size_t i = 0; i < n_fft; ++i) {
        double x = 0;
        if (!samples.empty()) x = samples[detail::reflect_index(start + static_cast<std::ptrdiff_t>(i), samples.size())];
        buf[i] = {x * window[i], 0.0};
    }
    fft(buf);
    std::vector<double> power(n_fft / 2 + 1);
    for (std::size_t k = 0; k < power.size(); ++k) power[k] = std::norm(buf[k]);
    return power;
}

inline MelSpectrogram mel_spectrogram(const AudioBuffer& audio, const FrontendConfig& cfg = {}) {
    require_input(audio.sample_rate == cfg.sample_rate,
                  "audio must be at " + std::to_string(cfg.sample_rate) + " Hz; resample first");
    require_input(std::all_of(audio.samples.begin(), audio.samples.end(), [](float v) { return std::isfinite(v); }),
                  "audio contains non-finite samples");
    const std::size_t n_frames = audio.samples.size() / cfg.hop + 1;
    const auto window = hann_window(cfg.n_fft);
    const auto fb = mel_filterbank(cfg);
    const std::size_t n_bins = cfg.n_fft / 2 + 1;

    MelSpectrogram out{Tensor<float>::matrix(n_frames, cfg.n_mels), cfg.hop_seconds()};
    for (std::size_t t = 0; t < n_frames; ++t) {
        const auto power =
            power_spectrum_frame(audio.samples, static_cast<std::ptrdiff_t>(t * cfg.hop), window);
        for (std::size_t m = 0; m < cfg.n_mels; ++m) {
            const double* f = fb.data() + m * n_bins;
            double e = 0;
            for (std::size_t k = 0; k < n_bins; ++k) e += f[k] * power[k];
            out.frames(t, m) = static_cast<float>(std::log(e + cfg.log_floor));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// WAV (RIFF, 16-bit PCM) and feature dumps

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16le(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

inline void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16le(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

inline std::string slurp_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require_input(static_cast<bool>(in), "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_binary(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    require_input(static_cast<bool>(out), "cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require_input(static_cast<bool>(out), "write failed: " + path);
}

} // namespace detail

/// Decodes 16-bit PCM WAV bytes; keeps the first channel.
inline AudioBuffer parse_wav(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    require_input(bytes.size() >= 12 && std::memcmp(p, "RIFF", 4) == 0 && std::memcmp(p + 8, "WAVE", 4) == 0,
                  "not a RIFF/WAVE file");
    std::size_t pos = 12;
    std::uint16_t channels = 0, bits = 0, format = 0;
    std::uint32_t rate = 0;
    bool have_fmt = false;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t size = detail::read_u32le(p + pos + 4);
        const std::size_t body = pos + 8;
        require_input(body + size <= bytes.size(), "truncated WAV chunk");
        if (std::memcmp(p + pos, "fmt ", 4) == 0) {
            require_input(size >= 16, "short fmt chunk");
            format = detail::read_u16le(p + body);
            channels = detail::read_u16le(p + body + 2);
            rate = detail::read_u32le(p + body + 4);
            bits = detail::read_u16le(p + body + 14);
            have_fmt = true;
        } else if (std::memcmp(p + pos, "data", 4) == 0) {
            require_input(have_fmt, "data chunk before fmt chunk");
            require_input(format == 1 && bits == 16, "only 16-bit PCM WAV is supported");
            require_input(channels >= 1 && rate > 0, "bad WAV format fields");
            const std::size_t frame_bytes = 2u * channels;
            const std::size_t n = size / frame_bytes;
            AudioBuffer audio{std::vector<float>(n), static_cast<double>(rate)};
            for (std::size_t i = 0; i < n; ++i) {
                const auto s = static_cast<std::int16_t>(detail::read_u16le(p + body + i * frame_bytes));
                audio.samples[i] = static_cast<float>(s) / 32768.0f;
            }
            return audio;
        }
        pos = body + size + (size & 1u);
    }
    throw InputError("WAV file has no data chunk");
}

inline AudioBuffer read_wav(const std::string& path) { return parse_wav(detail::slurp_binary(path)); }

inline std::string encode_wav(const AudioBuffer& audio) {
    std::string out = "RIFF";
    const auto data_bytes = static_cast<std::uint32_t>(audio.samples.size() * 2);
    detail::put_u32le(out, 36 + data_bytes);
    out += "WAVEfmt ";
    detail::put_u32le(out, 16);
    detail::put_u16le(out, 1);
    detail::put_u16le(out, 1);
    const auto rate = static_cast<std::uint32_t>(std::lround(audio.sample_rate));
    detail::put_u32le(out, rate);
    detail::put_u32le(out, rate * 2);
    detail::put_u16le(out, 2);
    detail::put_u16le(out, 16);
    out += "data";
    detail::put_u32le(out, data_bytes);
    for (float v : audio.samples) {
        const double clamped = std::clamp(static_cast<double>(v), -1.0, 32767.0 / 32768.0);
        detail::put_u16le(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clamped * 32768.0))));
    }
    return out;
}

inline void write_wav(const std::string& path, const AudioBuffer& audio) { detail::write_binary(path, encode_wav(audio)); }

/// Header (T, n_mels) as u32 LE followed by row-major f32 LE values.
inline std::string encode_features(const Tensor<float>& frames) {
    static_assert(std::endian::native == std::endian::little, "feature dump assumes a little-endian host");
    std::string out;
    detail::put_u32le(out, static_cast<std::uint32_t>(frames.rows()));
    detail::put_u32le(out, static_cast<std::uint32_t>(frames.cols()));
    out.append(reinterpret_cast<const char*>(frames.data()), frames.size() * sizeof(float));
    return out;
}

inline Tensor<float> parse_features(const std::string& bytes) {
    require_input(bytes.size() >= 8, "feature file too short");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t rows = detail::read_u32le(p), cols = detail::read_u32le(p + 4);
    require_input(bytes.size() == 8 + rows * cols * sizeof(float), "feature file size does not match header");
    Tensor<float> t = Tensor<float>::matrix(rows, cols);
    std::memcpy(t.data(), bytes.data() + 8, t.size() * sizeof(float));
    return t;
}

inline void write_features(const std::string& path, const Tensor<float>& frames) {
    detail::write_binary(path, encode_features(frames));
}

inline Tensor<float> read_features(const std::string& path) { return parse_features(detail::slurp_binary(path)); }

} // namespace samt

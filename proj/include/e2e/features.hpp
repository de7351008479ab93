#pragma once

#include <complex>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "e2e/rng.hpp"
#include "e2e/tensor.hpp"
#include "e2e/wav_io.hpp"

namespace e2e::feat {

using ad::Tensor;

enum class ArrayTag : std::uint8_t { distant = 0, close = 1 };

inline const char* tag_name(ArrayTag t) { return t == ArrayTag::distant ? "distant" : "close"; }
inline ArrayTag tag_from_name(const std::string& s) {
    if (s == "distant") return ArrayTag::distant;
    if (s == "close") return ArrayTag::close;
    throw Error("unknown array tag: " + s);
}

/// Per-utterance model input: T x dim row-major, dim = channels * feats-per-channel.
struct FeatureSequence {
    Tensor frames;  // (T, dim)
    double frame_shift_ms = 10.0;
    ArrayTag tag = ArrayTag::distant;

    int t() const { return frames.dim(0); }
    int dim() const { return frames.dim(1); }
};

// ---------------------------------------------------------------------------
// FFT / STFT
// ---------------------------------------------------------------------------

namespace detail {

/// In-place iterative radix-2 Cooley-Tukey. n must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw Error("fft: size must be a power of two");
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
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

inline int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

}  // namespace detail

enum class Window { hann, rect };

/// Short-time Fourier transform of one channel. Frames start at i*hop;
/// T = 1 + floor((len - frame_len)/hop). Frames shorter than the FFT size
/// are zero-padded to the next power of two, so the bin count is
/// next_pow2(frame_len)/2 + 1.
inline std::vector<std::vector<std::complex<double>>> stft(const std::vector<double>& x,
                                                           int frame_len, int hop,
                                                           Window window = Window::hann) {
    if (frame_len <= 0 || hop <= 0 || hop > frame_len)
        throw Error("stft: need 0 < hop <= frame_len");
    if (static_cast<std::int64_t>(x.size()) < frame_len)
        throw Error("stft: signal length " + std::to_string(x.size()) +
                    " shorter than one frame of " + std::to_string(frame_len));
    const int nfft = detail::next_pow2(frame_len);
    const int bins = nfft / 2 + 1;
    const int t = 1 + static_cast<int>((x.size() - static_cast<std::size_t>(frame_len)) / hop);

    std::vector<double> win(frame_len, 1.0);
    if (window == Window::hann)
        for (int i = 0; i < frame_len; ++i)
            win[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / (frame_len - 1));

    std::vector<std::vector<std::complex<double>>> out(t);
    std::vector<std::complex<double>> buf(nfft);
    for (int f = 0; f < t; ++f) {
        const std::size_t start = static_cast<std::size_t>(f) * hop;
        for (int i = 0; i < frame_len; ++i) buf[i] = x[start + i] * win[i];
        std::fill(buf.begin() + frame_len, buf.end(), std::complex<double>(0.0, 0.0));
        detail::fft(buf);
        out[f].assign(buf.begin(), buf.begin() + bins);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Log-mel filterbank
// ---------------------------------------------------------------------------

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filterbank over FFT bin center frequencies,
/// rows = n_mels, cols = bins.
inline Tensor mel_filterbank(int n_mels, int bins, int sample_rate, double fmin, double fmax) {
    if (n_mels <= 0 || n_mels > bins)
        throw Error("logmel: n_mels " + std::to_string(n_mels) + " exceeds " +
                    std::to_string(bins) + " FFT bins");
    const int nfft = 2 * (bins - 1);
    const double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
    std::vector<double> centers(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i)
        centers[i] = mel_to_hz(mlo + (mhi - mlo) * i / (n_mels + 1));
    Tensor fb({n_mels, bins});
    for (int m = 0; m < n_mels; ++m) {
        const double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
        for (int b = 0; b < bins; ++b) {
            const double f = static_cast<double>(b) * sample_rate / nfft;
            double w = 0.0;
            if (f > lo && f < mid)
                w = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                w = (hi - f) / (hi - mid);
            fb.at(m, b) = w;
        }
    }
    return fb;
}

constexpr double kLogmelFloor = 1e-10;

/// T x n_mels log filterbank energies from a complex spectrogram.
/// Power spectrum -> triangular filters -> log(max(E, 1e-10)).
inline Tensor logmel(const std::vector<std::vector<std::complex<double>>>& spec, int sample_rate,
                     int n_mels = 80, double fmin = 20.0, double fmax = -1.0) {
    if (spec.empty()) throw Error("logmel: empty spectrogram");
    if (fmax <= 0.0) fmax = sample_rate / 2.0;
    const int t = static_cast<int>(spec.size());
    const int bins = static_cast<int>(spec[0].size());
    const Tensor fb = mel_filterbank(n_mels, bins, sample_rate, fmin, fmax);
    Tensor out({t, n_mels});
    std::vector<double> power(bins);
    for (int f = 0; f < t; ++f) {
        for (int b = 0; b < bins; ++b) power[b] = std::norm(spec[f][b]);
        for (int m = 0; m < n_mels; ++m) {
            double e = 0.0;
            const double* w = fb.data() + static_cast<std::size_t>(m) * bins;
            for (int b = 0; b < bins; ++b) e += w[b] * power[b];
            out.at(f, m) = std::log(std::max(e, kLogmelFloor));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pitch (simplified normalized-autocorrelation estimator)
// ---------------------------------------------------------------------------

/// T x 3 features per logmel-aligned frame: {voicing in [0,1],
/// log-f0 clamped to [log 60, log 400], delta-log-f0 over +-2 frames}.
/// Unvoiced frames (voicing < 0.3) hold the previous f0.
inline Tensor pitch3(const std::vector<double>& x, int sample_rate, int frame_len, int hop) {
    if (static_cast<std::int64_t>(x.size()) < frame_len)
        throw Error("pitch3: signal shorter than one frame");
    const int t = 1 + static_cast<int>((x.size() - static_cast<std::size_t>(frame_len)) / hop);
    const int lag_min = std::max(2, static_cast<int>(sample_rate / 400.0));
    const int lag_max = std::min(frame_len - 1, static_cast<int>(sample_rate / 60.0));
    const double lf_lo = std::log(60.0), lf_hi = std::log(400.0);

    std::vector<double> voicing(t), logf0(t);
    double held = std::log(100.0);  // arbitrary in-range hold before first voiced frame
    for (int f = 0; f < t; ++f) {
        const double* s = x.data() + static_cast<std::size_t>(f) * hop;
        double best = -1.0;
        int best_lag = lag_min;
        std::vector<double> r(lag_max + 1, -1.0);
        for (int lag = lag_min; lag <= lag_max; ++lag) {
            double num = 0.0, e0 = 0.0, e1 = 0.0;
            const int n = frame_len - lag;
            for (int i = 0; i < n; ++i) {
                num += s[i] * s[i + lag];
                e0 += s[i] * s[i];
                e1 += s[i + lag] * s[i + lag];
            }
            const double den = std::sqrt(e0 * e1);
            r[lag] = den > 0.0 ? num / den : 0.0;
            if (r[lag] > best) {
                best = r[lag];
                best_lag = lag;
            }
        }
        // Octave guard: take the smallest lag whose peak is within 3% of the
        // global best, so multiples of the true period do not win.
        for (int lag = lag_min; lag < best_lag; ++lag)
            if (r[lag] >= 0.97 * best && (lag == lag_min || r[lag] >= r[lag - 1]) &&
                r[lag] >= r[lag + 1]) {
                best_lag = lag;
                break;
            }
        voicing[f] = std::clamp(best, 0.0, 1.0);
        if (voicing[f] >= 0.3) held = std::log(static_cast<double>(sample_rate) / best_lag);
        logf0[f] = std::clamp(held, lf_lo, lf_hi);
    }

    Tensor out({t, 3});
    for (int f = 0; f < t; ++f) {
        out.at(f, 0) = voicing[f];
        out.at(f, 1) = logf0[f];
        // regression delta over +-2 frames with clamped edges
        double num = 0.0;
        for (int k = 1; k <= 2; ++k) {
            const int hi = std::min(f + k, t - 1), lo = std::max(f - k, 0);
            num += k * (logf0[hi] - logf0[lo]);
        }
        out.at(f, 2) = num / 10.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Noise injection / SNR
// ---------------------------------------------------------------------------

/// Mean squared amplitude across all channels and samples.
inline double waveform_power(const Waveform& w) {
    double acc = 0.0;
    std::int64_t n = 0;
    for (const auto& ch : w.samples) {
        for (double x : ch) acc += x * x;
        n += static_cast<std::int64_t>(ch.size());
    }
    return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

/// Adds Gaussian white noise, independent per channel, at the requested
/// SNR relative to each channel's own power. The sampled noise is rescaled
/// to its exact target mean-square power, so the full-utterance measured
/// SNR equals snr_db up to rounding.
inline Waveform add_white_noise(const Waveform& w, double snr_db, std::uint64_t seed) {
    w.validate();
    if (!std::isfinite(snr_db)) throw Error("add_white_noise: snr_db must be finite");
    if (waveform_power(w) <= 0.0)
        throw Error("add_white_noise: silent input, SNR undefined");
    Rng rng(seed);
    Waveform out = w;
    const double ratio = std::pow(10.0, -snr_db / 10.0);
    for (auto& ch : out.samples) {
        double p = 0.0;
        for (double x : ch) p += x * x;
        p /= ch.empty() ? 1.0 : static_cast<double>(ch.size());
        std::vector<double> noise(ch.size());
        double ms = 0.0;
        for (double& n : noise) {
            n = rng.gaussian();
            ms += n * n;
        }
        ms /= noise.empty() ? 1.0 : static_cast<double>(noise.size());
        if (ms <= 0.0) continue;
        const double scale = std::sqrt(p * ratio / ms);
        for (std::size_t i = 0; i < ch.size(); ++i) ch[i] += scale * noise[i];
    }
    return out;
}

/// 10*log10(P_clean / P_(noisy-clean)); +inf when the signals are identical.
inline double measure_snr(const Waveform& clean, const Waveform& noisy) {
    if (clean.channels() != noisy.channels() || clean.length() != noisy.length())
        throw Error("measure_snr: shape mismatch");
    double pc = 0.0, pd = 0.0;
    for (int c = 0; c < clean.channels(); ++c)
        for (std::size_t i = 0; i < clean.samples[c].size(); ++i) {
            const double d = noisy.samples[c][i] - clean.samples[c][i];
            pc += clean.samples[c][i] * clean.samples[c][i];
            pd += d * d;
        }
    if (pd == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(pc / pd);
}

// ---------------------------------------------------------------------------
// Delay-and-sum
// ---------------------------------------------------------------------------

/// Mean over channels of delay-compensated signals:
/// y[i] = mean_c x_c[i - delay_c], zero outside the channel extent.
inline Waveform delay_and_sum(const Waveform& w, const std::vector<int>& delays) {
    w.validate();
    if (static_cast<int>(delays.size()) != w.channels())
        throw Error("delay_and_sum: need one delay per channel");
    const std::int64_t n = w.length();
    for (int d : delays)
        if (std::abs(static_cast<std::int64_t>(d)) >= n)
            throw Error("delay_and_sum: |delay| must be smaller than the channel length");
    Waveform out;
    out.sample_rate = w.sample_rate;
    out.samples.assign(1, std::vector<double>(n, 0.0));
    const double inv = 1.0 / w.channels();
    for (int c = 0; c < w.channels(); ++c) {
        const int d = delays[c];
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t j = i - d;
            if (j >= 0 && j < n) out.samples[0][i] += inv * w.samples[c][j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CMVN
// ---------------------------------------------------------------------------

constexpr double kCmvnEps = 1e-8;

/// Per-dimension mean/variance accumulator over a feature set.
struct CmvnStats {
    std::int64_t count = 0;
    std::vector<double> sum, sumsq;

    void add(const FeatureSequence& f) {
        if (sum.empty()) {
            sum.assign(f.dim(), 0.0);
            sumsq.assign(f.dim(), 0.0);
        }
        if (static_cast<int>(sum.size()) != f.dim())
            throw Error("cmvn: dimension mismatch " + std::to_string(sum.size()) + " vs " +
                        std::to_string(f.dim()));
        for (int t = 0; t < f.t(); ++t)
            for (int d = 0; d < f.dim(); ++d) {
                const double x = f.frames.at(t, d);
                sum[d] += x;
                sumsq[d] += x * x;
            }
        count += f.t();
    }
    void merge(const CmvnStats& o) {
        if (sum.empty()) {
            *this = o;
            return;
        }
        if (o.sum.empty()) return;
        if (o.sum.size() != sum.size()) throw Error("cmvn: merge dimension mismatch");
        for (std::size_t d = 0; d < sum.size(); ++d) {
            sum[d] += o.sum[d];
            sumsq[d] += o.sumsq[d];
        }
        count += o.count;
    }
    double mean(int d) const { return sum[d] / static_cast<double>(count); }
    double variance(int d) const {
        const double m = mean(d);
        return std::max(0.0, sumsq[d] / static_cast<double>(count) - m * m);
    }
};

/// (x - mean) / sqrt(var + 1e-8) per dimension.
inline FeatureSequence cmvn_apply(const FeatureSequence& f, const CmvnStats& s) {
    if (s.count < 1 || static_cast<int>(s.sum.size()) != f.dim())
        throw Error("cmvn_apply: stats dimension " + std::to_string(s.sum.size()) +
                    " vs features " + std::to_string(f.dim()));
    FeatureSequence out = f;
    for (int d = 0; d < f.dim(); ++d) {
        const double m = s.mean(d);
        const double inv = 1.0 / std::sqrt(s.variance(d) + kCmvnEps);
        for (int t = 0; t < f.t(); ++t) out.frames.at(t, d) = (f.frames.at(t, d) - m) * inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full extraction pipeline
// ---------------------------------------------------------------------------

struct FeatureConfig {
    int frame_len = 400;  // 25 ms at 16 kHz
    int hop = 160;        // 10 ms
    int n_mels = 80;
    double fmin = 20.0;
    bool pitch = false;  // 3 extra dims per channel when on
    int feats_per_channel() const { return n_mels + (pitch ? 3 : 0); }
};

/// Stacks per-channel log-mel (+ optional pitch) horizontally:
/// dim = channels * feats_per_channel, channel-major columns.
inline FeatureSequence extract_features(const Waveform& w, ArrayTag tag,
                                        const FeatureConfig& cfg = {}) {
    w.validate();
    const int ch = w.channels();
    const int per = cfg.feats_per_channel();
    std::vector<Tensor> mel(ch), pit(ch);
    int t = -1;
    for (int c = 0; c < ch; ++c) {
        mel[c] = logmel(stft(w.samples[c], cfg.frame_len, cfg.hop, Window::hann), w.sample_rate,
                        cfg.n_mels, cfg.fmin);
        if (cfg.pitch) pit[c] = pitch3(w.samples[c], w.sample_rate, cfg.frame_len, cfg.hop);
        if (t < 0) t = mel[c].dim(0);
    }
    FeatureSequence out;
    out.tag = tag;
    out.frame_shift_ms = 1000.0 * cfg.hop / w.sample_rate;
    out.frames = Tensor({t, ch * per});
    for (int f = 0; f < t; ++f)
        for (int c = 0; c < ch; ++c) {
            for (int m = 0; m < cfg.n_mels; ++m) out.frames.at(f, c * per + m) = mel[c].at(f, m);
            if (cfg.pitch)
                for (int k = 0; k < 3; ++k)
                    out.frames.at(f, c * per + cfg.n_mels + k) = pit[c].at(f, k);
        }
    return out;
}

}  // namespace e2e::feat

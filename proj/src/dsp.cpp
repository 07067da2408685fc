#include "m2m/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include "m2m/common.hpp"

namespace m2m {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMelFloor = 1e-6;

// --- FFT -------------------------------------------------------------------

// Iterative radix-2 Cooley-Tukey; n must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                std::complex<double> u = a[i + k];
                std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

const std::vector<double>& hann_window() {
    static const std::vector<double> w = [] {
        std::vector<double> v(kWindowSize);
        for (int i = 0; i < kWindowSize; ++i) {
            v[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / kWindowSize));
        }
        return v;
    }();
    return w;
}

// Reflection without edge duplication: index -k maps to k.
inline std::size_t reflect_index(long long idx, long long n) {
    while (idx < 0 || idx >= n) {
        if (idx < 0) idx = -idx;
        if (idx >= n) idx = 2 * (n - 1) - idx;
    }
    return static_cast<std::size_t>(idx);
}

// --- Mel filterbank ----------------------------------------------------------

double hz_to_mel(double hz) {
    constexpr double f_sp = 200.0 / 3.0;
    constexpr double min_log_hz = 1000.0;
    const double logstep = std::log(6.4) / 27.0;
    if (hz < min_log_hz) return hz / f_sp;
    return min_log_hz / f_sp + std::log(hz / min_log_hz) / logstep;
}

double mel_to_hz(double mel) {
    constexpr double f_sp = 200.0 / 3.0;
    constexpr double min_log_mel = 15.0;
    const double logstep = std::log(6.4) / 27.0;
    if (mel < min_log_mel) return mel * f_sp;
    return 1000.0 * std::exp(logstep * (mel - min_log_mel));
}

struct MelFilter {
    int first_bin = 0;
    std::vector<double> weights;  // contiguous support
};

struct MelBank {
    std::vector<MelFilter> filters;
    std::vector<double> centers_hz;
};

const MelBank& mel_bank() {
    static const MelBank bank = [] {
        const double fmax = kSampleRate / 2.0;
        const double mel_max = hz_to_mel(fmax);
        std::vector<double> edges(kMelBands + 2);
        for (int k = 0; k < kMelBands + 2; ++k) {
            edges[k] = mel_to_hz(mel_max * k / (kMelBands + 1));
        }
        MelBank b;
        b.filters.resize(kMelBands);
        b.centers_hz.resize(kMelBands);
        const double bin_hz = static_cast<double>(kSampleRate) / kWindowSize;
        for (int m = 0; m < kMelBands; ++m) {
            const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
            b.centers_hz[m] = mid;
            const double norm = 2.0 / (hi - lo);  // equal-area filters
            MelFilter f;
            f.first_bin = -1;
            for (int k = 0; k < kSpectrumBins; ++k) {
                const double hz = k * bin_hz;
                double w = 0.0;
                if (hz > lo && hz < hi) {
                    w = hz <= mid ? (hz - lo) / (mid - lo)
                                  : (hi - hz) / (hi - mid);
                }
                if (w > 0.0) {
                    if (f.first_bin < 0) f.first_bin = k;
                    f.weights.push_back(w * norm);
                } else if (f.first_bin >= 0) {
                    break;  // support is contiguous
                }
            }
            if (f.first_bin < 0) f.first_bin = 0;
            b.filters[m] = std::move(f);
        }
        return b;
    }();
    return bank;
}

// --- Key profiles ------------------------------------------------------------

// Krumhansl-Kessler probe-tone ratings.
constexpr double kMajorProfile[12] = {6.35, 2.23, 3.48, 2.33, 4.38, 4.09,
                                      2.52, 5.19, 2.39, 3.66, 2.29, 2.88};
constexpr double kMinorProfile[12] = {6.33, 2.68, 3.52, 5.38, 2.60, 3.53,
                                      2.54, 4.75, 3.98, 2.69, 3.34, 3.17};

double pearson12(const double* x, const double* y) {
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < 12; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= 12.0;
    my /= 12.0;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (int i = 0; i < 12; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx < 1e-15 || syy < 1e-15) {
        throw DataError("undefined key: chroma has no variance");
    }
    return sxy / std::sqrt(sxx * syy);
}

// --- Tempo helpers -----------------------------------------------------------

// Frames per beat at the analysis hop: (60 * sr / hop) / bpm.
constexpr double kFramesPerMinute = 60.0 * kSampleRate / kHopSize;
constexpr double kMinBpm = 60.0;
constexpr double kMaxBpm = 200.0;

std::vector<double> onset_envelope(const MelSpectrogram& mel) {
    std::vector<double> oe(mel.frames, 0.0);
    for (int t = 1; t < mel.frames; ++t) {
        double acc = 0.0;
        const float* cur = &mel.values[static_cast<std::size_t>(t) * mel.bands];
        const float* prev = cur - mel.bands;
        for (int b = 0; b < mel.bands; ++b) {
            const double d = static_cast<double>(cur[b]) - prev[b];
            if (d > 0.0) acc += d;
        }
        oe[t] = acc;
    }
    return oe;
}

}  // namespace

Spectrogram stft(const AudioClip& clip) {
    const auto n = static_cast<long long>(clip.samples.size());
    if (n < kWindowSize) {
        throw DataError("stft: clip shorter than one window (" +
                        std::to_string(n) + " < " +
                        std::to_string(kWindowSize) + " samples)");
    }
    Spectrogram out;
    out.sample_rate = clip.sample_rate;
    out.frames = static_cast<int>(n / kHopSize);  // drop trailing partial hop
    out.magnitudes.resize(static_cast<std::size_t>(out.frames) *
                          kSpectrumBins);

    const auto& win = hann_window();
    std::vector<std::complex<double>> buf(kWindowSize);
    for (int f = 0; f < out.frames; ++f) {
        const long long center = static_cast<long long>(f) * kHopSize;
        for (int i = 0; i < kWindowSize; ++i) {
            const long long idx = center - kWindowSize / 2 + i;
            buf[i] = clip.samples[reflect_index(idx, n)] * win[i];
        }
        fft_inplace(buf);
        double* row = &out.magnitudes[static_cast<std::size_t>(f) *
                                      kSpectrumBins];
        for (int k = 0; k < kSpectrumBins; ++k) row[k] = std::abs(buf[k]);
    }
    return out;
}

MelSpectrogram mel_spectrogram(const Spectrogram& spec) {
    const MelBank& bank = mel_bank();
    MelSpectrogram out;
    out.frames = spec.frames;
    out.values.resize(static_cast<std::size_t>(spec.frames) * kMelBands);

    std::vector<double> power(kSpectrumBins);
    for (int f = 0; f < spec.frames; ++f) {
        const double* row =
            &spec.magnitudes[static_cast<std::size_t>(f) * spec.bins];
        for (int k = 0; k < kSpectrumBins; ++k) power[k] = row[k] * row[k];
        float* dst = &out.values[static_cast<std::size_t>(f) * kMelBands];
        for (int m = 0; m < kMelBands; ++m) {
            const MelFilter& flt = bank.filters[m];
            double e = 0.0;
            for (std::size_t j = 0; j < flt.weights.size(); ++j) {
                e += flt.weights[j] * power[flt.first_bin + j];
            }
            dst[m] = static_cast<float>(std::log(e + kMelFloor));
        }
    }
    return out;
}

Chromagram chromagram(const Spectrogram& spec) {
    Chromagram out;
    out.frames = spec.frames;
    out.values.assign(static_cast<std::size_t>(spec.frames) * 12, 0.0);

    // Pitch class per bin is frame-independent; build the map once.
    std::vector<int> bin_pc(kSpectrumBins, -1);
    const double bin_hz = static_cast<double>(spec.sample_rate) / spec.window;
    for (int k = 1; k < kSpectrumBins; ++k) {
        const double hz = k * bin_hz;
        if (hz < 55.0) continue;
        const double midi = 69.0 + 12.0 * std::log2(hz / 440.0);
        const long long note = std::llround(midi);
        bin_pc[k] = static_cast<int>(((note % 12) + 12) % 12);
    }

    for (int f = 0; f < spec.frames; ++f) {
        const double* row =
            &spec.magnitudes[static_cast<std::size_t>(f) * spec.bins];
        double* dst = &out.values[static_cast<std::size_t>(f) * 12];
        for (int k = 1; k < kSpectrumBins; ++k) {
            if (bin_pc[k] >= 0) dst[bin_pc[k]] += row[k] * row[k];
        }
    }
    return out;
}

const double* key_profile(KeyMode mode) {
    return mode == KeyMode::major ? kMajorProfile : kMinorProfile;
}

KeyEstimate estimate_key(const Chromagram& chroma) {
    if (chroma.frames < 1) throw DataError("estimate_key: empty chromagram");
    double avg[12] = {0.0};
    for (int f = 0; f < chroma.frames; ++f) {
        for (int pc = 0; pc < 12; ++pc) {
            avg[pc] += chroma.at(f, pc);
        }
    }
    for (double& v : avg) v /= chroma.frames;

    KeyEstimate best;
    best.score = -2.0;
    for (int mode = 0; mode < 2; ++mode) {
        const double* profile =
            key_profile(mode == 0 ? KeyMode::major : KeyMode::minor);
        for (int tonic = 0; tonic < 12; ++tonic) {
            double rotated[12];
            for (int pc = 0; pc < 12; ++pc) {
                rotated[pc] = profile[(pc - tonic + 12) % 12];
            }
            const double r = pearson12(avg, rotated);
            if (r > best.score) {
                best.tonic = tonic;
                best.mode = mode == 0 ? KeyMode::major : KeyMode::minor;
                best.score = r;
            }
        }
    }
    return best;
}

VoiceActivity detect_voiced_frames(const AudioClip& clip, double threshold) {
    const auto n = static_cast<long long>(clip.samples.size());
    if (n < kWindowSize) {
        throw DataError("detect_voiced_frames: clip shorter than one frame");
    }
    const int frames = static_cast<int>(1 + (n - kWindowSize) / kHopSize);
    std::vector<double> level(frames);
    for (int f = 0; f < frames; ++f) {
        const double* s = clip.samples.data() +
                          static_cast<std::size_t>(f) * kHopSize;
        double acc = 0.0;
        for (int i = 0; i < kWindowSize; ++i) acc += s[i] * s[i];
        level[f] = std::sqrt(acc / kWindowSize);
    }

    std::vector<double> sorted(level);
    std::sort(sorted.begin(), sorted.end());
    const auto rank = static_cast<std::size_t>(
        std::ceil(0.95 * frames) - 1);  // nearest-rank percentile
    const double gate = threshold * sorted[std::min<std::size_t>(
                                        rank, sorted.size() - 1)];

    VoiceActivity va;
    va.voiced.resize(frames);
    int count = 0;
    for (int f = 0; f < frames; ++f) {
        va.voiced[f] = level[f] > gate ? 1 : 0;
        count += va.voiced[f];
    }
    va.voiced_ratio = static_cast<double>(count) / frames;
    return va;
}

BeatGrid estimate_tempo_and_beats(const AudioClip& clip) {
    if (clip.duration() < 5.0) {
        throw DataError("estimate_tempo_and_beats: need at least 5 s, got " +
                        std::to_string(clip.duration()) + " s");
    }
    const MelSpectrogram mel = mel_spectrogram(stft(clip));
    std::vector<double> oe = onset_envelope(mel);
    const int T = static_cast<int>(oe.size());

    double peak = 0.0, mean = 0.0;
    for (double v : oe) {
        peak = std::max(peak, v);
        mean += v;
    }
    mean /= T;
    if (peak < 1e-9) {
        throw DataError("estimate_tempo_and_beats: no onsets detected");
    }
    double var = 0.0;
    for (double v : oe) var += (v - mean) * (v - mean);
    const double scale = 1.0 / (std::sqrt(var / T) + 1e-12);
    for (double& v : oe) v *= scale;

    // --- Tempo: autocorrelation, prior, parabolic refinement ---
    const int lag_min = static_cast<int>(std::ceil(kFramesPerMinute / kMaxBpm));
    const int lag_max = std::min(
        static_cast<int>(std::floor(kFramesPerMinute / kMinBpm)), T - 2);
    if (lag_max <= lag_min) {
        throw DataError("estimate_tempo_and_beats: clip too short");
    }
    std::vector<double> weighted(lag_max + 2, 0.0);
    auto acorr = [&](int lag) {
        double acc = 0.0;
        for (int t = 0; t + lag < T; ++t) acc += oe[t] * oe[t + lag];
        return acc / (T - lag);
    };
    auto prior = [](double bpm) {
        const double z = std::log2(bpm / 120.0);
        return std::exp(-0.5 * z * z);  // sigma = 1 octave
    };
    int best_lag = lag_min;
    double best_w = -1.0;
    for (int lag = lag_min - 1; lag <= lag_max + 1; ++lag) {
        if (lag < 1 || lag >= T - 1) continue;
        weighted[lag] = acorr(lag) * prior(kFramesPerMinute / lag);
        if (lag >= lag_min && lag <= lag_max && weighted[lag] > best_w) {
            best_w = weighted[lag];
            best_lag = lag;
        }
    }
    double refined = best_lag;
    if (best_lag > 1 && best_lag + 1 < static_cast<int>(weighted.size())) {
        const double a = weighted[best_lag - 1];
        const double b = weighted[best_lag];
        const double c = weighted[best_lag + 1];
        const double denom = a - 2.0 * b + c;
        if (std::abs(denom) > 1e-12) {
            double delta = 0.5 * (a - c) / denom;
            delta = std::clamp(delta, -0.5, 0.5);
            refined += delta;
        }
    }
    double tempo = kFramesPerMinute / refined;
    tempo = std::clamp(tempo, kMinBpm, kMaxBpm);

    // --- Beats: dynamic programming against the estimated period ---
    const double period = kFramesPerMinute / tempo;
    const double tightness = 100.0;
    std::vector<double> score(T);
    std::vector<int> backlink(T, -1);
    for (int t = 0; t < T; ++t) {
        const int lo = t - static_cast<int>(std::lround(2.0 * period));
        const int hi = t - static_cast<int>(std::lround(0.5 * period));
        double best = 0.0;
        int from = -1;
        for (int tau = std::max(0, lo); tau <= hi; ++tau) {
            const double gap = std::log(static_cast<double>(t - tau) / period);
            const double cand = score[tau] - tightness * gap * gap;
            if (cand > best) {
                best = cand;
                from = tau;
            }
        }
        score[t] = oe[t] + best;
        backlink[t] = from;
    }

    int end = T - 1;
    const int tail = std::max(
        0, T - static_cast<int>(std::lround(1.5 * period)));
    for (int t = tail; t < T; ++t) {
        if (score[t] > score[end]) end = t;
    }
    std::vector<double> beats;
    for (int t = end; t >= 0; t = backlink[t]) {
        beats.push_back(static_cast<double>(t) * kHopSize / clip.sample_rate);
        if (backlink[t] < 0) break;
    }
    std::reverse(beats.begin(), beats.end());

    BeatGrid grid;
    grid.tempo_bpm = tempo;
    grid.beat_times = std::move(beats);
    return grid;
}

std::vector<double> mel_center_frequencies() { return mel_bank().centers_hz; }

}  // namespace m2m

#pragma once

#include <cstdint>
#include <vector>

#include "m2m/audio.hpp"

namespace m2m {

// Fixed analysis geometry: 1024-sample Hann window, 512-sample hop, centered
// frames with reflection padding. A 3 s clip at 22050 Hz yields 129 frames.
inline constexpr int kWindowSize = 1024;
inline constexpr int kHopSize = 512;
inline constexpr int kSpectrumBins = kWindowSize / 2 + 1;
inline constexpr int kMelBands = 128;

struct Spectrogram {
    std::vector<double> magnitudes;  // frames x bins, row-major
    int frames = 0;
    int bins = kSpectrumBins;
    int window = kWindowSize;
    int hop = kHopSize;
    int sample_rate = kSampleRate;

    double mag(int frame, int bin) const {
        return magnitudes[static_cast<std::size_t>(frame) * bins + bin];
    }
};

struct MelSpectrogram {
    std::vector<float> values;  // frames x bands, row-major; ln(energy + 1e-6)
    int frames = 0;
    int bands = kMelBands;

    float at(int frame, int band) const {
        return values[static_cast<std::size_t>(frame) * bands + band];
    }
};

struct Chromagram {
    std::vector<double> values;  // frames x 12, pitch class C=0 .. B=11
    int frames = 0;

    double at(int frame, int pc) const {
        return values[static_cast<std::size_t>(frame) * 12 + pc];
    }
};

enum class KeyMode : std::uint8_t { major = 0, minor = 1 };

struct KeyEstimate {
    int tonic = 0;  // pitch class, C=0
    KeyMode mode = KeyMode::major;
    double score = 0.0;  // Pearson correlation of the winning profile

    bool operator==(const KeyEstimate& o) const {
        return tonic == o.tonic && mode == o.mode;
    }
};

struct BeatGrid {
    double tempo_bpm = 0.0;
    std::vector<double> beat_times;  // seconds, strictly ascending
};

struct VoiceActivity {
    std::vector<std::uint8_t> voiced;  // one flag per 1024/512 frame
    double voiced_ratio = 0.0;
};

// Magnitude STFT. The clip must cover at least one window; the frame count is
// floor(len / hop), so a trailing partial hop is dropped.
Spectrogram stft(const AudioClip& clip);

// 128-band log mel spectrogram of the power spectrum. Filters are triangular
// on the Slaney mel scale over 0..11025 Hz and area-normalized; output is
// ln(energy + 1e-6), so silence floors at ln(1e-6).
MelSpectrogram mel_spectrogram(const Spectrogram& spec);

// Folds spectral energy (squared magnitudes) into 12 pitch classes using
// A4 = 440 Hz. Bins below 55 Hz carry no usable pitch and are ignored.
// Rows are left unnormalized so silent frames stay all-zero.
Chromagram chromagram(const Spectrogram& spec);

// Krumhansl-Schmuckler key finding: Pearson correlation of the time-averaged
// chroma against all 24 rotations of the major/minor probe-tone profiles.
// Throws DataError when the average chroma has no variance (e.g. silence).
KeyEstimate estimate_key(const Chromagram& chroma);

// Onset-autocorrelation tempo estimation (60-200 BPM, log-normal prior
// centered at 120 BPM, parabolic peak refinement) followed by dynamic-
// programming beat alignment. Needs at least 5 s of audio; throws DataError
// on silence ("no onsets").
BeatGrid estimate_tempo_and_beats(const AudioClip& clip);

// Energy gate: a frame is voiced when its RMS exceeds `threshold` times the
// 95th-percentile frame RMS, so the gate is invariant to overall gain.
VoiceActivity detect_voiced_frames(const AudioClip& clip,
                                   double threshold = 0.1);

// Mel filter center frequencies in Hz, exposed for tests and diagnostics.
std::vector<double> mel_center_frequencies();

const double* key_profile(KeyMode mode);  // 12 probe-tone weights

}  // namespace m2m

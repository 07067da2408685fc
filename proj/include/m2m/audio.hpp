#pragma once

#include <string>
#include <vector>

namespace m2m {

// All processing runs at a fixed internal rate.
inline constexpr int kSampleRate = 22050;

struct AudioClip {
    std::vector<double> samples;  // mono, nominally in [-1, 1]
    int sample_rate = kSampleRate;

    double duration() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

enum class WavFormat { pcm16, float32 };

// Reads a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
// Multi-channel input is downmixed by averaging; anything not at 22050 Hz is
// resampled (linear interpolation: cheap, and adequate for the few-kHz
// content handled here). Int16 samples are scaled by 1/32768.
// Throws DataError on missing files, malformed containers, or encodings
// outside the two supported ones (the error names the encoding found).
AudioClip load_wav(const std::string& path);

// Writes a mono WAV at the clip's sample rate. pcm16 rounds x * 32768 and
// clamps to int16 range (mirroring the read scaling); float32 stores the
// samples verbatim.
void save_wav(const AudioClip& clip, const std::string& path,
              WavFormat format = WavFormat::pcm16);

// Copies [start_s, start_s + duration_s) into a new clip. The slice must lie
// fully inside the source; sample indices are rounded half-up.
AudioClip extract_segment(const AudioClip& clip, double start_s,
                          double duration_s);

// Root mean square. Empty input has no meaningful level and throws.
double rms(const std::vector<double>& samples);
inline double rms(const AudioClip& clip) { return rms(clip.samples); }

// Linear-interpolation resampler used by load_wav; exposed for tests.
std::vector<double> resample_linear(const std::vector<double>& in,
                                    int in_rate, int out_rate);

}  // namespace m2m

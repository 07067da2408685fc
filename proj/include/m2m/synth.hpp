#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2m/audio.hpp"
#include "m2m/dsp.hpp"
#include "m2m/manifest.hpp"

namespace m2m {

// A synthetic voice identity. Timbre comes from the formant triple, rolloff,
// and brightness knee; phrasing identity from vibrato and register. Identity
// never lives in the melody, so singer and song content stay decorrelated.
struct SingerProfile {
    int seed = 0;
    double formants_hz[3] = {0, 0, 0};  // strictly increasing, in [200,4000]
    double bandwidths_hz[3] = {0, 0, 0};
    double rolloff_db_per_oct = -9.0;
    double brightness_hz = 4000.0;  // exponential high-frequency knee
    double vibrato_rate_hz = 5.0;   // 4..8
    double vibrato_depth_cents = 30.0;
    int pitch_base_midi = 72;
};

struct BackgroundProfile {
    double tempo_bpm = 120.0;  // 60..200
    KeyEstimate key;
    std::uint64_t seed = 0;  // instrumentation variant
};

// One sung note on the beat grid. Times are in beats, quantized to quarter
// beats; pitch must stay within an octave of the singer's base note.
struct MelodyNote {
    int midi = 72;
    double start_beats = 0.0;
    double dur_beats = 1.0;
    bool accented = false;  // lands on an integer beat
};

// Deterministic profile for a seed. Profiles are drawn sequentially with
// rejection so any two distinct seeds are at least 50 Hz apart in formant
// space (L2 over the triple).
SingerProfile gen_singer(int seed);

// Random diatonic melody covering `total_beats`: phrases of held tonic-triad
// tones and quicker passing tones, separated by short rests, cadencing to
// the tonic. Dwell time tracks the tonal hierarchy so rendered audio
// correlates with the probe-tone profile of `key`.
std::vector<MelodyNote> make_melody(std::uint64_t seed, const KeyEstimate& key,
                                    int pitch_base_midi, double total_beats);

// Renders a melody as one vocal line: harmonic source with per-profile
// rolloff, shaped by three formant resonances, with vibrato on every note.
// Notes must be quantized to quarter beats and stay within ±12 semitones of
// the profile's base pitch. Output is duration_s at 22050 Hz, mono; rests
// between phrases stay silent so voice-activity gating has work to do.
AudioClip render_vocal(const SingerProfile& profile,
                       const std::vector<MelodyNote>& melody,
                       double tempo_bpm, const KeyEstimate& key,
                       double duration_s);

// Renders an accompaniment bed: kick + snare on every beat at the profile
// tempo and a sustained tonic-triad pad that pins the profile key. The kick
// sits at 50 Hz, below the chromagram's 55 Hz cutoff, so it cannot vote on
// the key. Requires duration >= 5 s so tempo is recoverable from the output.
AudioClip render_background(const BackgroundProfile& profile,
                            double duration_s);

struct CorpusOptions {
    double vocal_seconds = 11.0;
    double background_seconds = 14.0;
    int backgrounds_per_combo = 2;  // variants per (tempo, key) pair
    double test_fraction = 1.0 / 3.0;
    int threads = 1;
};

// Builds a corpus on disk: one WAV per vocal track plus a background pool
// covering every (tempo, key) combination the vocals use, and a JSONL
// manifest listing all of it. Tempo/key per track are the assigned synthesis
// values. Singer splits are disjoint: the last round(n * test_fraction)
// singer seeds form the test split. Identical seeds give byte-identical
// manifests and WAVs regardless of thread count.
CorpusManifest build_corpus(int n_singers, int tracks_per_singer,
                            std::uint64_t seed, const std::string& out_dir,
                            const CorpusOptions& options = {});

}  // namespace m2m

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2m/audio.hpp"
#include "m2m/dsp.hpp"
#include "m2m/manifest.hpp"

namespace m2m {

// All mixing operates on fixed 3 s segments: 129 analysis frames, the unit
// the embedding network consumes.
inline constexpr double kSegmentSeconds = 3.0;
inline constexpr int kSegmentSamples = 66150;  // 3 s at 22050 Hz
inline constexpr double kMinVoicedRatio = 0.7;

// A 3 s slice of a track, analyzed in place: the key is estimated locally on
// the segment while the tempo is the track-level estimate. singer_id and
// voiced_ratio are populated for vocal segments only.
struct SegmentDescriptor {
    std::string track_id;
    std::string singer_id;
    double start = 0.0;  // seconds into the track
    double duration = kSegmentSeconds;
    KeyEstimate key;
    double track_tempo = 0.0;
    double voiced_ratio = 0.0;
};

// One validated (vocal, background) pairing. mix_offset is the beat-aligned
// start inside the background track and equals background.start; the gains
// are the linear scales that realize target_snr_db for these two segments.
struct MashupRecipe {
    SegmentDescriptor vocal;
    SegmentDescriptor background;
    double mix_offset = 0.0;
    double vocal_gain = 1.0;
    double background_gain = 1.0;
    double target_snr_db = 0.0;
};

struct MashupConfig {
    double tempo_tolerance_bpm = 2.0;
    int pairs_per_vocal_segment = 2;
    std::uint64_t seed = 0;
    int threads = 1;
};

struct MashupManifest {
    std::vector<MashupRecipe> recipes;
    std::string config_hash;  // hex64 over parameters + pool identities
    std::uint64_t seed = 0;
    double tempo_tolerance_bpm = 2.0;
    int pairs_per_vocal_segment = 0;
};

// True iff the tempos agree within the tolerance and the keys match exactly
// (same tonic and same mode; relative or parallel keys do not count).
bool check_mashability(const SegmentDescriptor& vocal,
                       const SegmentDescriptor& background,
                       double tempo_tolerance_bpm);

// vocal + scaled background, where the background scale makes
// 20*log10(rms(vocal)/rms(scaled background)) = snr_db. The sum is
// peak-normalized to 0.95 only if it exceeds full scale. Clips must have
// equal lengths; a silent stem makes the SNR undefined and throws DataError.
AudioClip mix_at_snr(const AudioClip& vocal, const AudioClip& background,
                     double snr_db);

// Beat time nearest to desired_start; equidistant ties resolve to the
// earlier beat. Throws DataError on an empty grid.
double align_to_beat(const BeatGrid& grid, double desired_start);

// Builds the mashup dataset: every vocal track is cut into consecutive 3 s
// segments, segments with voiced_ratio >= 0.7 are paired with randomly drawn
// beat-aligned background segments that pass check_mashability, and each
// accepted pair becomes a recipe at 0 dB target SNR. All tempos and keys
// come from fresh audio analysis, never from the corpus manifest fields.
// Throws DataError when more than half of the qualifying vocal segments find
// no mashable background within the per-segment draw budget.
MashupManifest generate_dataset(const CorpusManifest& vocals,
                                const CorpusManifest& backgrounds,
                                const MashupConfig& config);

// Extracts both segments from full-track audio and mixes them at the
// recipe's target SNR. The result is always exactly kSegmentSamples long.
AudioClip render_recipe(const MashupRecipe& recipe,
                        const AudioClip& vocal_track,
                        const AudioClip& background_track);

// Line-delimited JSON: a header line carrying config hash and seed, then one
// recipe per line. Writing re-checks the voiced_ratio >= 0.7 invariant.
MashupManifest read_mashup_manifest(const std::string& path);
void write_mashup_manifest(const MashupManifest& manifest,
                           const std::string& path);

// Consecutive 3 s segments of a vocal track with local key, voice activity,
// and the given track-level tempo filled in. Includes segments below the
// voiced_ratio threshold so callers can do their own gating.
std::vector<SegmentDescriptor> analyze_vocal_segments(const AudioClip& clip,
                                                      const TrackRecord& track,
                                                      double track_tempo);

}  // namespace m2m

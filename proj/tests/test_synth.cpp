// Synthetic corpus checks. Rendered audio has to hold up under the same
// analysis the rest of the pipeline applies: assigned keys and tempos must
// be recoverable from the waveform, voices must be separable by timbre, and
// everything must be bit-reproducible from seeds.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "m2m/common.hpp"
#include "m2m/dsp.hpp"
#include "m2m/manifest.hpp"
#include "m2m/synth.hpp"

using namespace m2m;
namespace fs = std::filesystem;

namespace {

const KeyEstimate kCorpusKeys[6] = {
    {0, KeyMode::major, 0.0},  {7, KeyMode::major, 0.0},
    {2, KeyMode::major, 0.0},  {9, KeyMode::minor, 0.0},
    {4, KeyMode::minor, 0.0},  {11, KeyMode::minor, 0.0},
};

// Major keys and their relative minors share a scale, which is the one
// confusion a profile-correlation key finder can legitimately make.
bool same_scale(const KeyEstimate& a, const KeyEstimate& b) {
    if (a == b) return true;
    if (a.mode == KeyMode::major && b.mode == KeyMode::minor) {
        return (a.tonic + 9) % 12 == b.tonic;
    }
    if (a.mode == KeyMode::minor && b.mode == KeyMode::major) {
        return (b.tonic + 9) % 12 == a.tonic;
    }
    return false;
}

KeyEstimate key_of(const AudioClip& clip) {
    return estimate_key(chromagram(stft(clip)));
}

// Random melody + render, the way the corpus builder produces tracks.
AudioClip sing(int singer_seed, double tempo_bpm, const KeyEstimate& key,
               double duration_s, std::uint64_t melody_seed) {
    const auto profile = gen_singer(singer_seed);
    const auto melody = make_melody(melody_seed, key, profile.pitch_base_midi,
                                    duration_s * tempo_bpm / 60.0);
    return render_vocal(profile, melody, tempo_bpm, key, duration_s);
}

BackgroundProfile bg_profile(double tempo, const KeyEstimate& key,
                             std::uint64_t seed) {
    BackgroundProfile p;
    p.tempo_bpm = tempo;
    p.key = key;
    p.seed = seed;
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// Leave-one-out nearest-centroid accuracy on mean log-mel features over
// sung frames, for one group of singers. This is the ground-truth
// identifiability bar the corpus must clear for downstream learning.
int centroid_accuracy(const std::vector<int>& singer_seeds, int clips_each) {
    std::vector<std::array<double, kMelBands>> feats;
    std::vector<int> labels;
    for (std::size_t si = 0; si < singer_seeds.size(); ++si) {
        for (int c = 0; c < clips_each; ++c) {
            const auto clip =
                sing(singer_seeds[si], 120.0, {7, KeyMode::major, 0.0}, 6.0,
                     derive_seed(31, "sep",
                                 std::uint64_t(singer_seeds[si]) * 16 + c));
            const auto mel = mel_spectrogram(stft(clip));
            // Average over sung frames only; rests are all-floor rows that
            // would dilute the timbre signature. Silence floors at
            // ln(1e-6) (about -13.8), sung frames sit far above it.
            std::array<double, kMelBands> f{};
            int used = 0;
            for (int fr = 0; fr < mel.frames; ++fr) {
                double row_mean = 0.0;
                for (int b = 0; b < kMelBands; ++b) {
                    row_mean += mel.at(fr, b);
                }
                row_mean /= kMelBands;
                if (row_mean < -12.0) continue;
                for (int b = 0; b < kMelBands; ++b) {
                    f[b] += mel.at(fr, b);
                }
                ++used;
            }
            REQUIRE(used > 0);
            for (auto& x : f) x /= used;
            feats.push_back(f);
            labels.push_back(static_cast<int>(si));
        }
    }
    int correct = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        double best = 1e300;
        int best_label = -1;
        for (std::size_t s = 0; s < singer_seeds.size(); ++s) {
            std::array<double, kMelBands> centroid{};
            int count = 0;
            for (std::size_t j = 0; j < feats.size(); ++j) {
                if (j == i || labels[j] != static_cast<int>(s)) continue;
                for (int b = 0; b < kMelBands; ++b) {
                    centroid[b] += feats[j][b];
                }
                ++count;
            }
            double dist = 0.0;
            for (int b = 0; b < kMelBands; ++b) {
                const double d = feats[i][b] - centroid[b] / count;
                dist += d * d;
            }
            if (dist < best) {
                best = dist;
                best_label = static_cast<int>(s);
            }
        }
        if (best_label == labels[i]) ++correct;
    }
    return correct;
}

}  // namespace

TEST_CASE("singer profiles are deterministic and well separated") {
    const auto a = gen_singer(7);
    const auto b = gen_singer(7);
    CHECK(a.formants_hz[0] == b.formants_hz[0]);
    CHECK(a.formants_hz[1] == b.formants_hz[1]);
    CHECK(a.formants_hz[2] == b.formants_hz[2]);
    CHECK(a.vibrato_rate_hz == b.vibrato_rate_hz);
    CHECK(a.pitch_base_midi == b.pitch_base_midi);

    std::vector<SingerProfile> profiles;
    for (int i = 0; i < 100; ++i) profiles.push_back(gen_singer(i));
    for (int i = 0; i < 100; ++i) {
        const auto& p = profiles[i];
        CHECK(p.seed == i);
        CHECK(p.formants_hz[0] >= 200.0);
        CHECK(p.formants_hz[0] < p.formants_hz[1]);
        CHECK(p.formants_hz[1] < p.formants_hz[2]);
        CHECK(p.formants_hz[2] <= 4000.0);
        CHECK(p.vibrato_rate_hz >= 4.0);
        CHECK(p.vibrato_rate_hz <= 8.0);
        CHECK(p.vibrato_depth_cents > 0.0);
        CHECK(p.brightness_hz >= 2000.0);
        CHECK(p.pitch_base_midi >= 60);
        CHECK(p.pitch_base_midi <= 82);
        for (int j = 0; j < i; ++j) {
            double d2 = 0.0;
            for (int k = 0; k < 3; ++k) {
                const double d =
                    p.formants_hz[k] - profiles[j].formants_hz[k];
                d2 += d * d;
            }
            CHECK(std::sqrt(d2) >= 50.0);
        }
    }
    CHECK_THROWS_AS((void)gen_singer(-1), ConfigError);
}

TEST_CASE("melodies are quantized, in range, and diatonic") {
    for (int k = 0; k < 6; ++k) {
        const auto profile = gen_singer(k);
        const auto melody =
            make_melody(derive_seed(3, "melprops", k), kCorpusKeys[k],
                        profile.pitch_base_midi, 24.0);
        REQUIRE(melody.size() > 4);
        static const int kMajor[7] = {0, 2, 4, 5, 7, 9, 11};
        static const int kMinor[7] = {0, 2, 3, 5, 7, 8, 10};
        const int* degrees =
            kCorpusKeys[k].mode == KeyMode::major ? kMajor : kMinor;
        double prev_end = 0.0;
        for (const auto& n : melody) {
            CHECK(std::abs(n.midi - profile.pitch_base_midi) <= 12);
            CHECK(std::abs(n.start_beats * 4 -
                           std::round(n.start_beats * 4)) < 1e-9);
            CHECK(std::abs(n.dur_beats * 4 -
                           std::round(n.dur_beats * 4)) < 1e-9);
            CHECK(n.start_beats >= prev_end - 1e-9);  // monophonic
            prev_end = n.start_beats + n.dur_beats;
            const int pc_rel =
                ((n.midi - kCorpusKeys[k].tonic) % 12 + 12) % 12;
            bool diatonic = false;
            for (int d = 0; d < 7; ++d) diatonic |= degrees[d] == pc_rel;
            CHECK(diatonic);
        }
        CHECK(prev_end <= 24.0 + 1e-9);
    }
}

TEST_CASE("vocal rendering is deterministic in the melody and bounded") {
    const auto p = gen_singer(2);
    const KeyEstimate key{7, KeyMode::major, 0.0};
    const auto melody = make_melody(41, key, p.pitch_base_midi, 16.0);
    const auto a = render_vocal(p, melody, 120.0, key, 8.0);
    const auto b = render_vocal(p, melody, 120.0, key, 8.0);
    const auto c = render_vocal(
        p, make_melody(42, key, p.pitch_base_midi, 16.0), 120.0, key, 8.0);
    REQUIRE(a.samples.size() == std::size_t(8 * kSampleRate));
    CHECK(a.sample_rate == kSampleRate);
    CHECK(a.samples == b.samples);
    CHECK(a.samples != c.samples);

    double peak = 0.0;
    for (double s : a.samples) peak = std::max(peak, std::abs(s));
    CHECK(peak > 0.05);  // actually sings
    CHECK(peak <= 1.0);  // no PCM clipping

    CHECK_THROWS_AS((void)render_vocal(p, melody, 240.0, key, 8.0),
                    ConfigError);
    CHECK_THROWS_AS((void)render_vocal(p, melody, 120.0, key, 0.0),
                    ConfigError);

    // A note outside the octave around the base pitch is rejected.
    std::vector<MelodyNote> wild = melody;
    wild[0].midi = p.pitch_base_midi + 13;
    CHECK_THROWS_AS((void)render_vocal(p, wild, 120.0, key, 8.0),
                    ConfigError);
    // Off-grid timing is rejected.
    std::vector<MelodyNote> offgrid = melody;
    offgrid[0].start_beats += 0.1;
    CHECK_THROWS_AS((void)render_vocal(p, offgrid, 120.0, key, 8.0),
                    ConfigError);
}

TEST_CASE("vocal lines leave rests but stay mostly voiced") {
    const auto clip = sing(4, 120.0, {0, KeyMode::major, 0.0}, 12.0, 7);
    const auto vad = detect_voiced_frames(clip);
    CHECK(vad.voiced_ratio >= 0.5);
    CHECK(vad.voiced_ratio <= 0.98);  // phrase rests exist
}

TEST_CASE("rendered vocals land in their assigned key") {
    int exact = 0;
    int in_scale = 0;
    int total = 0;
    for (int k = 0; k < 6; ++k) {
        for (int singer = 0; singer < 4; ++singer) {
            const auto clip =
                sing(singer, 120.0, kCorpusKeys[k], 10.0,
                     derive_seed(11, "keycheck",
                                 std::uint64_t(k) * 8 + singer));
            const auto est = key_of(clip);
            ++total;
            if (est == kCorpusKeys[k]) ++exact;
            if (same_scale(est, kCorpusKeys[k])) ++in_scale;
        }
    }
    CHECK(total == 24);
    CHECK(exact >= 22);     // >= 90% requested-key recovery
    CHECK(in_scale >= 23);  // near-always the right scale
}

TEST_CASE("rendered vocals follow the beat grid tempo") {
    int close = 0;
    int total = 0;
    const double tempos[3] = {90.0, 120.0, 150.0};
    for (int t = 0; t < 3; ++t) {
        for (int r = 0; r < 4; ++r) {
            const auto clip =
                sing(r, tempos[t], {0, KeyMode::major, 0.0}, 12.0,
                     derive_seed(23, "tempocheck",
                                 std::uint64_t(t) * 8 + r));
            const auto grid = estimate_tempo_and_beats(clip);
            ++total;
            if (std::abs(grid.tempo_bpm - tempos[t]) <= 2.0) ++close;
        }
    }
    CHECK(total == 12);
    CHECK(close >= 8);
}

TEST_CASE("backgrounds carry their assigned tempo") {
    const double tempos[3] = {90.0, 120.0, 150.0};
    for (int t = 0; t < 3; ++t) {
        for (int v = 0; v < 3; ++v) {
            const auto clip = render_background(
                bg_profile(tempos[t], kCorpusKeys[v],
                           derive_seed(5, "bgtempo",
                                       std::uint64_t(t) * 8 + v)),
                14.0);
            const auto grid = estimate_tempo_and_beats(clip);
            CAPTURE(tempos[t]);
            CAPTURE(v);
            CHECK(std::abs(grid.tempo_bpm - tempos[t]) <= 2.0);
        }
    }
}

TEST_CASE("backgrounds carry their assigned key") {
    int exact = 0;
    for (int k = 0; k < 6; ++k) {
        for (int v = 0; v < 3; ++v) {
            const auto clip = render_background(
                bg_profile(120.0, kCorpusKeys[k],
                           derive_seed(9, "bgkey",
                                       std::uint64_t(k) * 8 + v)),
                14.0);
            if (key_of(clip) == kCorpusKeys[k]) ++exact;
        }
    }
    CHECK(exact >= 17);  // >= 90% of 18
}

TEST_CASE("background rendering is seeded and exact-length") {
    const auto a = render_background(bg_profile(120.0, kCorpusKeys[0], 3),
                                     14.0);
    const auto b = render_background(bg_profile(120.0, kCorpusKeys[0], 3),
                                     14.0);
    const auto c = render_background(bg_profile(120.0, kCorpusKeys[0], 4),
                                     14.0);
    REQUIRE(a.samples.size() == std::size_t(14 * kSampleRate));
    CHECK(a.samples == b.samples);
    CHECK(a.samples != c.samples);
    double peak = 0.0;
    for (double s : a.samples) peak = std::max(peak, std::abs(s));
    CHECK(peak <= 1.0);
    CHECK(peak > 0.05);
    CHECK_THROWS_AS(
        (void)render_background(bg_profile(120.0, kCorpusKeys[0], 3), 4.0),
        ConfigError);
}

TEST_CASE("average mel timbre separates singers") {
    // 80% bar from the corpus identifiability requirement, checked on two
    // disjoint singer groups so it cannot hinge on one lucky draw.
    CHECK(centroid_accuracy({0, 1, 2, 3, 4}, 4) >= 16);
    CHECK(centroid_accuracy({5, 6, 7, 8, 9}, 4) >= 16);
}

TEST_CASE("build_corpus lays out tracks, splits, and a stable manifest") {
    const auto dir_a =
        (fs::temp_directory_path() / "tmp_test_synth" / "corpus_a").string();
    const auto dir_b =
        (fs::temp_directory_path() / "tmp_test_synth" / "corpus_b").string();
    fs::remove_all(fs::path(dir_a).parent_path());

    CorpusOptions opt;
    opt.vocal_seconds = 8.0;
    opt.background_seconds = 10.0;
    opt.backgrounds_per_combo = 1;
    const auto m = build_corpus(5, 3, 77, dir_a, opt);

    const auto vocals = m.select(TrackRole::vocal);
    const auto bgs = m.select(TrackRole::background);
    CHECK(vocals.size() == 15);
    CHECK(bgs.size() == 18);  // 3 tempos x 6 keys x 1 variant

    // Split by singer: round(5/3) = 2 test singers, disjoint from train.
    std::set<std::string> train_singers, test_singers;
    for (const auto* t : m.select(TrackRole::vocal, Split::train)) {
        train_singers.insert(t->singer_id);
    }
    for (const auto* t : m.select(TrackRole::vocal, Split::test)) {
        test_singers.insert(t->singer_id);
    }
    CHECK(train_singers.size() == 3);
    CHECK(test_singers.size() == 2);
    for (const auto& s : test_singers) {
        CHECK(train_singers.count(s) == 0);
    }

    // Every path resolves to a readable WAV of the assigned length, and
    // every vocal track is mostly voiced frames.
    for (const auto& t : m.tracks) {
        const auto clip = load_wav(m.resolve(t));
        const double want = t.role == TrackRole::vocal ? 8.0 : 10.0;
        CHECK(clip.samples.size() == std::size_t(want * kSampleRate));
        if (t.role == TrackRole::vocal) {
            CHECK(detect_voiced_frames(clip).voiced_ratio >= 0.5);
        }
    }

    // The manifest on disk reloads to the same records.
    const auto reread =
        read_corpus_manifest((fs::path(dir_a) / "manifest.jsonl").string());
    REQUIRE(reread.tracks.size() == m.tracks.size());
    for (std::size_t i = 0; i < m.tracks.size(); ++i) {
        CHECK(reread.tracks[i].track_id == m.tracks[i].track_id);
        CHECK(reread.tracks[i].split == m.tracks[i].split);
    }

    // A second build from the same seed is byte-identical, manifest and
    // audio both, and path-relative so the directory name cannot leak in.
    const auto m2 = build_corpus(5, 3, 77, dir_b, opt);
    CHECK(slurp(fs::path(dir_a) / "manifest.jsonl") ==
          slurp(fs::path(dir_b) / "manifest.jsonl"));
    CHECK(slurp(fs::path(dir_a) / m.tracks[0].path) ==
          slurp(fs::path(dir_b) / m2.tracks[0].path));
    CHECK(slurp(fs::path(dir_a) / m.tracks.back().path) ==
          slurp(fs::path(dir_b) / m2.tracks.back().path));

    CHECK_THROWS_AS((void)build_corpus(1, 3, 77, dir_a, opt), ConfigError);
    CorpusOptions bad = opt;
    bad.vocal_seconds = 2.0;
    CHECK_THROWS_AS((void)build_corpus(5, 3, 77, dir_a, bad), ConfigError);
}

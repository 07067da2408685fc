#include "m2m/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <vector>

#include "m2m/common.hpp"

namespace m2m {

namespace fs = std::filesystem;

namespace {

constexpr double kTau = 2.0 * 3.14159265358979323846;

double midi_to_hz(double midi) {
    return 440.0 * std::pow(2.0, (midi - 69.0) / 12.0);
}

// --- Singer profiles ---------------------------------------------------------

SingerProfile draw_profile(int seed, Rng& rng) {
    SingerProfile p;
    p.seed = seed;
    p.formants_hz[0] = rng.next_real(260.0, 880.0);
    p.formants_hz[1] = rng.next_real(950.0, 2350.0);
    p.formants_hz[2] = rng.next_real(2450.0, 3750.0);
    for (int j = 0; j < 3; ++j) {
        p.bandwidths_hz[j] = rng.next_real(60.0, 180.0);
    }
    p.rolloff_db_per_oct = rng.next_real(-12.0, -7.0);
    p.brightness_hz = rng.next_real(2200.0, 6500.0);
    p.vibrato_rate_hz = rng.next_real(4.0, 8.0);
    p.vibrato_depth_cents = rng.next_real(15.0, 45.0);
    // Soprano register. Fundamentals stay high enough that the chromagram's
    // bin-to-pitch-class rounding holds across the singable range.
    p.pitch_base_midi = rng.next_int(67, 78);
    return p;
}

// Full-triple separation is the published guarantee; the F2/F3 subspace
// separation is stricter because in this register fundamentals sit above
// F1, leaving the upper formants to carry most of the audible identity.
bool far_enough(const SingerProfile& a, const SingerProfile& b) {
    double full = 0.0;
    for (int j = 0; j < 3; ++j) {
        const double d = a.formants_hz[j] - b.formants_hz[j];
        full += d * d;
    }
    const double d2 = a.formants_hz[1] - b.formants_hz[1];
    const double d3 = a.formants_hz[2] - b.formants_hz[2];
    return full >= 50.0 * 50.0 && d2 * d2 + d3 * d3 >= 100.0 * 100.0;
}

std::vector<SingerProfile>& profile_cache() {
    static std::vector<SingerProfile> cache;
    return cache;
}

std::mutex& profile_mutex() {
    static std::mutex mu;
    return mu;
}

// --- Melody ------------------------------------------------------------------

const int kMajorDegrees[7] = {0, 2, 4, 5, 7, 9, 11};
const int kMinorDegrees[7] = {0, 2, 3, 5, 7, 8, 10};

// Scale position p counts diatonic steps up from the tonic; p = 7 is the
// tonic an octave up.
int scale_midi(int p, int base_midi, KeyMode mode) {
    const int* degrees = mode == KeyMode::major ? kMajorDegrees : kMinorDegrees;
    const int degree = ((p % 7) + 7) % 7;
    const int octave = (p - degree) / 7;
    return base_midi + 12 * octave + degrees[degree];
}

// Scale positions that land on tonic-triad pitch classes within [0, 7].
inline bool is_triad_position(int p) {
    return p == 0 || p == 2 || p == 4 || p == 7;
}

}  // namespace

SingerProfile gen_singer(int seed) {
    if (seed < 0) throw ConfigError("gen_singer: seed must be >= 0");
    std::lock_guard<std::mutex> lock(profile_mutex());
    auto& cache = profile_cache();
    while (static_cast<int>(cache.size()) <= seed) {
        const int i = static_cast<int>(cache.size());
        Rng rng(derive_seed(0x53494e47u, "singer-profile", i));
        SingerProfile candidate;
        for (int attempt = 0;; ++attempt) {
            candidate = draw_profile(i, rng);
            bool ok = true;
            for (const auto& other : cache) {
                if (!far_enough(candidate, other)) {
                    ok = false;
                    break;
                }
            }
            if (ok) break;
            if (attempt > 20000) {
                throw NumericError(
                    "gen_singer: formant space exhausted at seed " +
                    std::to_string(i));
            }
        }
        cache.push_back(candidate);
    }
    return cache[seed];
}

std::vector<MelodyNote> make_melody(std::uint64_t seed,
                                    const KeyEstimate& key,
                                    int pitch_base_midi, double total_beats) {
    if (total_beats < 2.0) {
        throw ConfigError("make_melody: need at least 2 beats");
    }
    Rng rng(seed);
    // Tonic nearest the singer's base note; individual notes fold back into
    // the octave around the base so the ±12 semitone range always holds.
    int base_midi = pitch_base_midi + key.tonic - (pitch_base_midi % 12);
    if (base_midi - pitch_base_midi > 6) base_midi -= 12;
    if (pitch_base_midi - base_midi > 6) base_midi += 12;

    std::vector<MelodyNote> notes;
    const auto push = [&](int p, double start, double dur) {
        MelodyNote n;
        n.midi = scale_midi(p, base_midi, key.mode);
        while (n.midi > pitch_base_midi + 12) n.midi -= 12;
        while (n.midi < pitch_base_midi - 12) n.midi += 12;
        n.start_beats = start;
        n.dur_beats = dur;
        n.accented = std::abs(start - std::round(start)) < 1e-9;
        notes.push_back(n);
    };

    // Weighted walk: most moves resolve toward the tonic or the nearest
    // lower triad tone, the rest are neighbor motion.
    const auto step = [&](int p) {
        const std::uint64_t r = rng.next_below(10);
        if (r < 2) {
            p = p >= 4 ? 7 : 0;  // jump home
        } else if (r < 5) {
            while (!is_triad_position(p)) --p;  // resolve downward
        } else if (r < 8) {
            p += rng.next_below(2) == 0 ? -1 : 1;
        } else {
            p += rng.next_below(2) == 0 ? -2 : 2;
        }
        return std::clamp(p, 0, 7);
    };

    // Rhythm is built from whole beats: a beat is one quarter note or a
    // pair of eighths, and phrases, cadences, and rests are whole numbers
    // of beats. Every beat inside a phrase then carries a note onset, so
    // the onset autocorrelation peaks at the one-beat lag instead of the
    // off-beat periods that dotted rhythms would introduce.
    int beat = 0;
    const int last_start = static_cast<int>(total_beats) - 2;
    while (beat <= last_start) {
        // Phrase of a few beats, then a short breath. Dwell time has to
        // favor tonic, then fifth and third, for the rendered line to
        // correlate with the probe-tone profile of the key, so each phrase
        // ends on a sustained tonic and the walk keeps resolving home.
        const int phrase_len =
            std::min(rng.next_int(4, 6), last_start - beat + 2);
        const int cadence_len =
            std::min(rng.next_below(2) == 0 ? 1 : 2, phrase_len - 1);
        const int walk_len = phrase_len - cadence_len;
        const std::uint64_t open = rng.next_below(4);
        int p = open < 2 ? 0 : (open == 2 ? 2 : 4);
        for (int ph = 0; ph < walk_len; ++ph) {
            if (is_triad_position(p) && rng.next_below(4) < 3) {
                push(p, beat + ph, 1.0);  // held chord tone
            } else {
                push(p, beat + ph, 0.5);  // eighth pair with passing tone
                p = step(p);
                push(p, beat + ph + 0.5, 0.5);
            }
            p = step(p);
        }
        push(p >= 4 ? 7 : 0, beat + walk_len, cadence_len);  // cadence home
        beat += phrase_len + (rng.next_below(2) == 0 ? 1 : 2);
    }
    return notes;
}

namespace {

// --- Waveform helpers ----------------------------------------------------------

constexpr int kTableSize = 2048;

// One period of a fixed harmonic stack; playback at fractional phase
// reproduces the stack exactly for any fundamental.
std::vector<double> harmonic_table(const std::vector<double>& amps) {
    std::vector<double> table(kTableSize + 1, 0.0);
    for (std::size_t h = 0; h < amps.size(); ++h) {
        if (amps[h] == 0.0) continue;
        for (int i = 0; i < kTableSize; ++i) {
            table[i] += amps[h] *
                        std::sin(kTau * double(h + 1) * i / kTableSize);
        }
    }
    table[kTableSize] = table[0];  // wrap guard for interpolation
    return table;
}

inline double table_read(const std::vector<double>& table, double phase01) {
    const double x = (phase01 - std::floor(phase01)) * kTableSize;
    const int i = static_cast<int>(x);
    const double frac = x - i;
    return table[i] * (1.0 - frac) + table[i + 1] * frac;
}

double formant_gain(const SingerProfile& p, double hz) {
    double g = 0.08;  // floor between resonances
    for (int j = 0; j < 3; ++j) {
        const double z = (hz - p.formants_hz[j]) / p.bandwidths_hz[j];
        g += 1.0 / (1.0 + z * z);
    }
    return g;
}

bool on_quarter_grid(double beats) {
    return std::abs(beats * 4.0 - std::round(beats * 4.0)) < 1e-6;
}

}  // namespace

AudioClip render_vocal(const SingerProfile& profile,
                       const std::vector<MelodyNote>& melody,
                       double tempo_bpm, const KeyEstimate& key,
                       double duration_s) {
    if (tempo_bpm < 60.0 || tempo_bpm > 200.0) {
        throw ConfigError("render_vocal: tempo outside 60..200 BPM");
    }
    if (duration_s <= 0.0) {
        throw ConfigError("render_vocal: non-positive duration");
    }
    (void)key;  // pitches are explicit; the key is carried by the melody
    for (const MelodyNote& note : melody) {
        if (std::abs(note.midi - profile.pitch_base_midi) > 12) {
            throw ConfigError(
                "render_vocal: melody note " + std::to_string(note.midi) +
                " outside +-12 semitones of base " +
                std::to_string(profile.pitch_base_midi));
        }
        if (!on_quarter_grid(note.start_beats) ||
            !on_quarter_grid(note.dur_beats) || note.dur_beats <= 0.0) {
            throw ConfigError(
                "render_vocal: melody must be quantized to quarter beats");
        }
    }

    const auto n = static_cast<std::size_t>(
        std::llround(duration_s * kSampleRate));
    AudioClip clip;
    clip.samples.assign(n, 0.0);
    const double beat_s = 60.0 / tempo_bpm;

    for (const MelodyNote& note : melody) {
        const double f0 = midi_to_hz(note.midi);
        const int max_h = std::min<int>(36, static_cast<int>(9000.0 / f0));
        std::vector<double> amps(static_cast<std::size_t>(max_h), 0.0);
        double total = 0.0;
        for (int h = 1; h <= max_h; ++h) {
            const double roll = std::pow(
                10.0, profile.rolloff_db_per_oct * std::log2(double(h)) /
                          20.0);
            const double knee = std::exp(-h * f0 / profile.brightness_hz);
            amps[h - 1] = roll * knee * formant_gain(profile, h * f0);
            total += std::abs(amps[h - 1]);
        }
        for (double& a : amps) a /= total;  // bounds the waveform by 1
        const auto table = harmonic_table(amps);

        const auto start = static_cast<std::size_t>(
            std::llround(note.start_beats * beat_s * kSampleRate));
        const auto len = static_cast<std::size_t>(
            std::llround(note.dur_beats * beat_s * kSampleRate));
        const auto attack = static_cast<std::size_t>(0.015 * kSampleRate);
        const auto release = static_cast<std::size_t>(0.025 * kSampleRate);
        // Beat-aligned notes are sung noticeably louder; the contrast is
        // what lets tempo estimation recover the beat grid from a voice.
        const double amp = note.accented ? 0.30 : 0.20;

        double phase = 0.0;
        for (std::size_t i = 0; i < len && start + i < n; ++i) {
            const double t = double(i) / kSampleRate;
            const double vib =
                std::pow(2.0, profile.vibrato_depth_cents *
                                  std::sin(kTau * profile.vibrato_rate_hz *
                                           t) /
                                  1200.0);
            phase += f0 * vib / kSampleRate;
            double env = 1.0;
            if (i < attack) env = double(i) / double(attack);
            if (len - i < release) {
                env = std::min(env, double(len - i) / double(release));
            }
            clip.samples[start + i] += amp * env * table_read(table, phase);
        }
    }
    return clip;
}

AudioClip render_background(const BackgroundProfile& profile,
                            double duration_s) {
    if (profile.tempo_bpm < 60.0 || profile.tempo_bpm > 200.0) {
        throw ConfigError("render_background: tempo outside 60..200 BPM");
    }
    if (duration_s < 5.0) {
        throw ConfigError("render_background: duration must be >= 5 s");
    }
    const auto n = static_cast<std::size_t>(
        std::llround(duration_s * kSampleRate));
    AudioClip clip;
    clip.samples.assign(n, 0.0);
    Rng rng(profile.seed);

    // --- Pad: sustained tonic triad. Octave 5 keeps every chord tone above
    // ~500 Hz, where FFT bins are finer than a semitone and fold onto the
    // correct pitch class; lower registers alias into neighboring classes.
    const int third = profile.key.mode == KeyMode::major ? 4 : 3;
    const int root_midi = 72 + profile.key.tonic;
    const int chord[4] = {root_midi, root_midi + third, root_midi + 7,
                          root_midi + 12};
    const double detune[4] = {0.0, rng.next_real(-3.0, 3.0),
                              rng.next_real(-3.0, 3.0),
                              rng.next_real(-3.0, 3.0)};
    for (int v = 0; v < 4; ++v) {
        const double f0 = midi_to_hz(chord[v] + detune[v] / 100.0);
        std::vector<double> amps;
        for (int h = 1; h <= 8; ++h) amps.push_back(1.0 / (h * h));
        const auto table = harmonic_table(amps);
        const double amp = 0.04;
        for (std::size_t i = 0; i < n; ++i) {
            const double phase = f0 * double(i) / kSampleRate;
            double env = 1.0;
            if (i < 2048) env = double(i) / 2048.0;
            if (n - i < 2048) env = std::min(env, double(n - i) / 2048.0);
            clip.samples[i] += amp * env * table_read(table, phase);
        }
    }

    // --- Drums: identical kick + snare hit on every beat. The one-beat
    // period keeps the tempo estimate away from half-tempo subharmonics.
    const double beat_s = 60.0 / profile.tempo_bpm;
    const auto kick_len = static_cast<std::size_t>(0.15 * kSampleRate);
    const auto snare_len = static_cast<std::size_t>(0.07 * kSampleRate);
    for (double t = 0.0; t < duration_s - 0.05; t += beat_s) {
        const auto start = static_cast<std::size_t>(
            std::llround(t * kSampleRate));
        // Kick: 50 Hz thump, below the chromagram's 55 Hz cutoff so it
        // never votes on the key.
        for (std::size_t i = 0; i < kick_len && start + i < n; ++i) {
            const double ts = double(i) / kSampleRate;
            clip.samples[start + i] += 0.35 * std::exp(-ts / 0.04) *
                                       std::sin(kTau * 50.0 * ts);
        }
        // Snare: broadband noise burst; flat across pitch classes, so the
        // key profile correlation is unaffected.
        for (std::size_t i = 0; i < snare_len && start + i < n; ++i) {
            const double ts = double(i) / kSampleRate;
            clip.samples[start + i] +=
                0.22 * std::exp(-ts / 0.02) * rng.next_real(-1.0, 1.0);
        }
    }
    return clip;
}

CorpusManifest build_corpus(int n_singers, int tracks_per_singer,
                            std::uint64_t seed, const std::string& out_dir,
                            const CorpusOptions& options) {
    if (n_singers < 2 || tracks_per_singer < 1) {
        throw ConfigError("build_corpus: need >= 2 singers and >= 1 track");
    }
    if (options.vocal_seconds < 5.0 || options.background_seconds < 5.0) {
        throw ConfigError("build_corpus: tracks must be at least 5 s");
    }

    const double tempos[3] = {90.0, 120.0, 150.0};
    const KeyEstimate keys[6] = {
        {0, KeyMode::major, 0.0},  {7, KeyMode::major, 0.0},
        {2, KeyMode::major, 0.0},  {9, KeyMode::minor, 0.0},
        {4, KeyMode::minor, 0.0},  {11, KeyMode::minor, 0.0},
    };

    const int n_test = std::max(
        1, static_cast<int>(std::llround(n_singers * options.test_fraction)));
    if (n_test >= n_singers) {
        throw ConfigError("build_corpus: test fraction leaves no train split");
    }

    fs::create_directories(fs::path(out_dir) / "wav");

    CorpusManifest manifest;
    manifest.dir = out_dir;

    struct Job {
        TrackRecord record;
        std::uint64_t render_seed = 0;
        int singer_seed = -1;  // -1 for backgrounds
    };
    std::vector<Job> jobs;

    char buf[64];
    for (int s = 0; s < n_singers; ++s) {
        for (int t = 0; t < tracks_per_singer; ++t) {
            Rng pick(derive_seed(seed, "combo",
                                 std::uint64_t(s) * 1000 + t));
            Job job;
            job.singer_seed = s;
            job.render_seed = derive_seed(seed, "melody",
                                          std::uint64_t(s) * 1000 + t);
            std::snprintf(buf, sizeof buf, "s%03d_t%02d", s, t);
            job.record.track_id = buf;
            std::snprintf(buf, sizeof buf, "s%03d", s);
            job.record.singer_id = buf;
            job.record.role = TrackRole::vocal;
            job.record.path = "wav/" + job.record.track_id + ".wav";
            job.record.tempo_bpm = tempos[pick.next_below(3)];
            job.record.key = keys[pick.next_below(6)];
            job.record.split =
                s >= n_singers - n_test ? Split::test : Split::train;
            jobs.push_back(std::move(job));
        }
    }
    int combo_index = 0;
    for (const double tempo : tempos) {
        for (const KeyEstimate& key : keys) {
            for (int v = 0; v < options.backgrounds_per_combo; ++v) {
                Job job;
                job.render_seed =
                    derive_seed(seed, "background",
                                std::uint64_t(combo_index) * 64 + v);
                std::snprintf(buf, sizeof buf, "bg_%03d_%02d%s_%d",
                              static_cast<int>(tempo), key.tonic,
                              key.mode == KeyMode::major ? "maj" : "min", v);
                job.record.track_id = buf;
                job.record.role = TrackRole::background;
                job.record.path = "wav/" + job.record.track_id + ".wav";
                job.record.tempo_bpm = tempo;
                job.record.key = key;
                job.record.split = Split::train;  // shared pool
                jobs.push_back(std::move(job));
            }
            ++combo_index;
        }
    }

    // Profiles are built serially (their construction is order-dependent);
    // track rendering is pure per job, so it can fan out.
    std::vector<SingerProfile> profiles;
    for (int s = 0; s < n_singers; ++s) profiles.push_back(gen_singer(s));

    parallel_for(jobs.size(), options.threads, [&](std::size_t i) {
        const Job& job = jobs[i];
        AudioClip clip;
        if (job.singer_seed >= 0) {
            const auto& profile = profiles[job.singer_seed];
            const double beats =
                options.vocal_seconds * job.record.tempo_bpm / 60.0;
            const auto melody =
                make_melody(job.render_seed, job.record.key,
                            profile.pitch_base_midi, beats);
            clip = render_vocal(profile, melody, job.record.tempo_bpm,
                                job.record.key, options.vocal_seconds);
        } else {
            BackgroundProfile bg;
            bg.tempo_bpm = job.record.tempo_bpm;
            bg.key = job.record.key;
            bg.seed = job.render_seed;
            clip = render_background(bg, options.background_seconds);
        }
        save_wav(clip, (fs::path(out_dir) / job.record.path).string(),
                 WavFormat::pcm16);
    });

    for (const Job& job : jobs) manifest.tracks.push_back(job.record);
    write_corpus_manifest(manifest,
                          (fs::path(out_dir) / "manifest.jsonl").string());
    return manifest;
}

}  // namespace m2m

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "m2m/audio.hpp"
#include "m2m/common.hpp"
#include "m2m/dsp.hpp"
#include "m2m/manifest.hpp"
#include "m2m/mashup.hpp"
#include "m2m/synth.hpp"

namespace fs = std::filesystem;
using namespace m2m;

namespace {

SegmentDescriptor desc(double tempo, int tonic, KeyMode mode) {
    SegmentDescriptor d;
    d.track_tempo = tempo;
    d.key.tonic = tonic;
    d.key.mode = mode;
    return d;
}

AudioClip sine(double freq, double amp, int n) {
    AudioClip c;
    c.samples.resize(n);
    for (int i = 0; i < n; ++i) {
        c.samples[i] =
            amp * std::sin(2.0 * 3.14159265358979323846 * freq * i / 22050.0);
    }
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

// One small corpus plus one generated mashup set, shared by every case that
// needs real audio; built on first use.
struct Fixture {
    fs::path dir;
    CorpusManifest corpus;
    MashupConfig config;
    MashupManifest mash;
};

const Fixture& fixture() {
    static const Fixture fix = [] {
        Fixture f;
        f.dir = fs::temp_directory_path() / "m2m_mashup_fixture";
        fs::remove_all(f.dir);
        f.corpus = build_corpus(3, 2, 77, f.dir.string());
        f.config.seed = 5;
        f.config.pairs_per_vocal_segment = 2;
        f.mash = generate_dataset(f.corpus, f.corpus, f.config);
        return f;
    }();
    return fix;
}

}  // namespace

TEST_CASE("check_mashability requires close tempo and exact key") {
    const double tol = 2.0;
    CHECK(check_mashability(desc(120, 0, KeyMode::major),
                            desc(120, 0, KeyMode::major), tol));
    CHECK(check_mashability(desc(120, 0, KeyMode::major),
                            desc(122, 0, KeyMode::major), tol));
    // Relative keys share a scale but are still rejected.
    CHECK_FALSE(check_mashability(desc(120, 0, KeyMode::major),
                                  desc(120, 9, KeyMode::minor), tol));
    // Parallel keys share a tonic but not a mode.
    CHECK_FALSE(check_mashability(desc(120, 0, KeyMode::major),
                                  desc(120, 0, KeyMode::minor), tol));
    CHECK_FALSE(check_mashability(desc(120, 0, KeyMode::major),
                                  desc(123, 0, KeyMode::major), tol));
    CHECK(check_mashability(desc(90, 7, KeyMode::minor),
                            desc(88, 7, KeyMode::minor), tol));
    CHECK_FALSE(check_mashability(desc(90, 7, KeyMode::minor),
                                  desc(90, 8, KeyMode::minor), tol));
}

TEST_CASE("align_to_beat snaps to the nearest beat, ties to the earlier") {
    BeatGrid grid;
    grid.beat_times = {0.5, 1.0, 1.5};
    CHECK(align_to_beat(grid, 1.1) == doctest::Approx(1.0));
    CHECK(align_to_beat(grid, 1.0) == doctest::Approx(1.0));
    CHECK(align_to_beat(grid, 0.75) == doctest::Approx(0.5));  // equidistant
    CHECK(align_to_beat(grid, 1.25) == doctest::Approx(1.0));  // equidistant
    CHECK(align_to_beat(grid, 0.0) == doctest::Approx(0.5));
    CHECK(align_to_beat(grid, 9.0) == doctest::Approx(1.5));
    BeatGrid empty;
    CHECK_THROWS_AS(align_to_beat(empty, 1.0), DataError);
}

TEST_CASE("mix_at_snr realizes the requested balance") {
    AudioClip v = sine(440.0, 0.30, 22050);
    AudioClip b = sine(313.0, 0.11, 22050);

    SUBCASE("0 dB equalizes RMS") {
        AudioClip out = mix_at_snr(v, b, 0.0);
        // Reconstruct the scaled background as out - vocal (no normalization
        // occurred: peak below 1).
        std::vector<double> scaled(out.samples.size());
        for (std::size_t i = 0; i < scaled.size(); ++i) {
            scaled[i] = out.samples[i] - v.samples[i];
        }
        CHECK(rms(scaled) == doctest::Approx(rms(v)).epsilon(1e-6));
    }
    SUBCASE("+20 dB puts the background 10x below the vocal") {
        AudioClip out = mix_at_snr(v, b, 20.0);
        std::vector<double> scaled(out.samples.size());
        for (std::size_t i = 0; i < scaled.size(); ++i) {
            scaled[i] = out.samples[i] - v.samples[i];
        }
        CHECK(rms(scaled) == doctest::Approx(rms(v) / 10.0).epsilon(1e-6));
    }
    SUBCASE("identical stems at 0 dB double the waveform") {
        AudioClip out = mix_at_snr(v, v, 0.0);
        for (std::size_t i = 0; i < out.samples.size(); ++i) {
            REQUIRE(out.samples[i] ==
                    doctest::Approx(2.0 * v.samples[i]).epsilon(1e-12));
        }
    }
    SUBCASE("sums above full scale are normalized to 0.95 peak") {
        AudioClip loud_v = sine(440.0, 0.9, 22050);
        AudioClip loud_b = sine(440.0, 0.9, 22050);  // in phase: sum peaks 1.8
        AudioClip out = mix_at_snr(loud_v, loud_b, 0.0);
        double peak = 0.0;
        for (double x : out.samples) peak = std::max(peak, std::abs(x));
        CHECK(peak == doctest::Approx(0.95).epsilon(1e-9));
    }
    SUBCASE("a quiet sum is left untouched") {
        AudioClip out = mix_at_snr(v, b, 0.0);
        double peak = 0.0;
        for (double x : out.samples) peak = std::max(peak, std::abs(x));
        CHECK(peak < 1.0);
        CHECK(peak > 0.3);  // not rescaled down
    }
    SUBCASE("silent stems have no defined SNR") {
        AudioClip silent;
        silent.samples.assign(22050, 0.0);
        CHECK_THROWS_WITH_AS(mix_at_snr(silent, b, 0.0),
                             doctest::Contains("undefined SNR"), DataError);
        CHECK_THROWS_WITH_AS(mix_at_snr(v, silent, 0.0),
                             doctest::Contains("undefined SNR"), DataError);
    }
    SUBCASE("length mismatch is a config error") {
        AudioClip shorter = sine(440.0, 0.3, 22049);
        CHECK_THROWS_AS(mix_at_snr(v, shorter, 0.0), ConfigError);
    }
}

TEST_CASE("generate_dataset yields verified, reproducible recipes") {
    const Fixture& f = fixture();
    const MashupManifest& m = f.mash;
    REQUIRE(!m.recipes.empty());
    CHECK(m.seed == 5);
    CHECK(m.pairs_per_vocal_segment == 2);
    CHECK(m.config_hash.size() == 16);

    SUBCASE("every recipe respects the declared invariants") {
        for (const MashupRecipe& r : m.recipes) {
            CHECK(r.vocal.voiced_ratio >= 0.7);
            CHECK(r.vocal.duration == doctest::Approx(3.0));
            CHECK(r.background.duration == doctest::Approx(3.0));
            CHECK(r.vocal_gain > 0.0);
            CHECK(r.background_gain > 0.0);
            CHECK(r.target_snr_db == 0.0);
            CHECK(r.mix_offset == doctest::Approx(r.background.start));
            CHECK(!r.vocal.singer_id.empty());
            CHECK(r.background.singer_id.empty());
            CHECK(check_mashability(r.vocal, r.background,
                                    f.config.tempo_tolerance_bpm));
        }
    }

    SUBCASE("recipes survive re-analysis from raw audio") {
        std::map<std::string, AudioClip> clips;
        std::map<std::string, BeatGrid> grids;
        auto track_audio = [&](const std::string& id) -> const AudioClip& {
            auto it = clips.find(id);
            if (it == clips.end()) {
                it = clips
                         .emplace(id, load_wav(f.corpus.resolve(
                                          f.corpus.find(id))))
                         .first;
            }
            return it->second;
        };
        auto track_grid = [&](const std::string& id) -> const BeatGrid& {
            auto it = grids.find(id);
            if (it == grids.end()) {
                it = grids.emplace(id, estimate_tempo_and_beats(
                                           track_audio(id)))
                         .first;
            }
            return it->second;
        };
        const std::size_t n_check = std::min<std::size_t>(8, m.recipes.size());
        for (std::size_t i = 0; i < n_check; ++i) {
            const MashupRecipe& r = m.recipes[i];
            const AudioClip& vtrack = track_audio(r.vocal.track_id);
            const AudioClip& btrack = track_audio(r.background.track_id);
            AudioClip vseg = extract_segment(vtrack, r.vocal.start, 3.0);
            AudioClip bseg = extract_segment(btrack, r.mix_offset, 3.0);

            // Stored analysis matches a fresh one.
            CHECK(detect_voiced_frames(vseg).voiced_ratio ==
                  doctest::Approx(r.vocal.voiced_ratio));
            CHECK(estimate_key(chromagram(stft(vseg))) == r.vocal.key);
            CHECK(estimate_key(chromagram(stft(bseg))) == r.background.key);
            CHECK(track_grid(r.vocal.track_id).tempo_bpm ==
                  doctest::Approx(r.vocal.track_tempo));
            const BeatGrid& bgrid = track_grid(r.background.track_id);
            CHECK(bgrid.tempo_bpm == doctest::Approx(r.background.track_tempo));

            // The mix offset sits on a freshly estimated beat (half a hop).
            double nearest = align_to_beat(bgrid, r.mix_offset);
            CHECK(std::abs(nearest - r.mix_offset) <= 0.0116);

            // The stored gains realize the target SNR on the scaled stems.
            std::vector<double> sv(vseg.samples), sb(bseg.samples);
            for (double& x : sv) x *= r.vocal_gain;
            for (double& x : sb) x *= r.background_gain;
            double snr = 20.0 * std::log10(rms(sv) / rms(sb));
            CHECK(std::abs(snr - r.target_snr_db) <= 0.1);

            AudioClip mix = render_recipe(r, vtrack, btrack);
            CHECK(mix.samples.size() == 66150);
            AudioClip again = render_recipe(r, vtrack, btrack);
            CHECK(mix.samples == again.samples);
        }
    }

    SUBCASE("same inputs and seed reproduce the manifest byte for byte") {
        MashupManifest second = generate_dataset(f.corpus, f.corpus, f.config);
        fs::path a = f.dir / "mash_a.jsonl";
        fs::path b = f.dir / "mash_b.jsonl";
        write_mashup_manifest(m, a.string());
        write_mashup_manifest(second, b.string());
        CHECK(slurp(a) == slurp(b));
    }

    SUBCASE("a different seed draws different pairings") {
        MashupConfig other = f.config;
        other.seed = 6;
        MashupManifest second = generate_dataset(f.corpus, f.corpus, other);
        CHECK(second.config_hash != m.config_hash);
        bool differs = second.recipes.size() != m.recipes.size();
        for (std::size_t i = 0;
             !differs && i < second.recipes.size() && i < m.recipes.size();
             ++i) {
            differs = second.recipes[i].background.track_id !=
                          m.recipes[i].background.track_id ||
                      second.recipes[i].mix_offset != m.recipes[i].mix_offset;
        }
        CHECK(differs);
    }

    SUBCASE("vocal tracks meet multiple distinct backgrounds") {
        std::map<std::string, std::set<std::string>> by_vocal;
        std::set<std::string> all_bgs;
        for (const MashupRecipe& r : m.recipes) {
            by_vocal[r.vocal.track_id].insert(r.background.track_id);
            all_bgs.insert(r.background.track_id);
        }
        CHECK(all_bgs.size() >= 2);
        std::size_t best = 0;
        for (const auto& [id, bgs] : by_vocal) best = std::max(best, bgs.size());
        CHECK(best >= 2);
    }
}

TEST_CASE("generate_dataset rejects pools that cannot pair") {
    const Fixture& f = fixture();

    SUBCASE("tempo-disjoint pools advise a tolerance change") {
        // Keep vocals at one synthesis tempo and backgrounds at another at
        // least 30 BPM away; no pair can pass a 2 BPM tolerance.
        const auto vocal_recs = f.corpus.select(TrackRole::vocal);
        const double vocal_tempo = vocal_recs.front()->tempo_bpm;
        const double bg_tempo = vocal_tempo == 150.0 ? 90.0 : 150.0;
        CorpusManifest vocals_only;
        vocals_only.dir = f.corpus.dir;
        CorpusManifest bgs_only;
        bgs_only.dir = f.corpus.dir;
        for (const TrackRecord& t : f.corpus.tracks) {
            if (t.role == TrackRole::vocal && t.tempo_bpm == vocal_tempo) {
                vocals_only.tracks.push_back(t);
            }
            if (t.role == TrackRole::background && t.tempo_bpm == bg_tempo) {
                bgs_only.tracks.push_back(t);
            }
        }
        REQUIRE(!vocals_only.tracks.empty());
        REQUIRE(!bgs_only.tracks.empty());
        CHECK_THROWS_WITH_AS(
            generate_dataset(vocals_only, bgs_only, f.config),
            doctest::Contains("tolerance"), DataError);
    }

    SUBCASE("empty pools are rejected up front") {
        CorpusManifest empty;
        empty.dir = f.corpus.dir;
        CHECK_THROWS_AS(generate_dataset(empty, f.corpus, f.config),
                        DataError);
        CHECK_THROWS_AS(generate_dataset(f.corpus, empty, f.config),
                        DataError);
    }

    SUBCASE("bad parameters are config errors") {
        MashupConfig bad = f.config;
        bad.pairs_per_vocal_segment = 0;
        CHECK_THROWS_AS(generate_dataset(f.corpus, f.corpus, bad),
                        ConfigError);
        bad = f.config;
        bad.tempo_tolerance_bpm = -1.0;
        CHECK_THROWS_AS(generate_dataset(f.corpus, f.corpus, bad),
                        ConfigError);
    }
}

TEST_CASE("render_recipe propagates silent-stem errors") {
    const Fixture& f = fixture();
    const MashupRecipe& r = f.mash.recipes.front();
    AudioClip vtrack = load_wav(f.corpus.resolve(f.corpus.find(
        r.vocal.track_id)));
    AudioClip btrack = load_wav(f.corpus.resolve(f.corpus.find(
        r.background.track_id)));
    AudioClip silent;
    silent.samples.assign(btrack.samples.size(), 0.0);
    CHECK_THROWS_WITH_AS(render_recipe(r, vtrack, silent),
                         doctest::Contains("undefined SNR"), DataError);
}

TEST_CASE("scaling a background changes no mashability decisions") {
    const Fixture& f = fixture();
    const auto bgs = f.corpus.select(TrackRole::background);
    AudioClip original = load_wav(f.corpus.resolve(*bgs.front()));
    AudioClip scaled = original;
    for (double& x : scaled.samples) x *= 0.5;

    BeatGrid g1 = estimate_tempo_and_beats(original);
    BeatGrid g2 = estimate_tempo_and_beats(scaled);
    CHECK(std::abs(g1.tempo_bpm - g2.tempo_bpm) <= 0.5);

    for (int i = 0; i < 3 && i < static_cast<int>(g1.beat_times.size()); ++i) {
        double start = g1.beat_times[i];
        if (start + 3.0 > original.duration()) break;
        AudioClip s1 = extract_segment(original, start, 3.0);
        AudioClip s2 = extract_segment(scaled, start, 3.0);
        CHECK(estimate_key(chromagram(stft(s1))) ==
              estimate_key(chromagram(stft(s2))));
    }
}

TEST_CASE("mashup manifests round-trip through JSONL") {
    const Fixture& f = fixture();
    fs::path path = f.dir / "roundtrip.jsonl";
    write_mashup_manifest(f.mash, path.string());

    SUBCASE("the header carries provenance") {
        std::ifstream in(path);
        std::string first;
        REQUIRE(std::getline(in, first));
        CHECK(first.find("config_hash") != std::string::npos);
        CHECK(first.find(f.mash.config_hash) != std::string::npos);
        CHECK(first.find("\"seed\":5") != std::string::npos);
    }

    SUBCASE("reading restores every field") {
        MashupManifest back = read_mashup_manifest(path.string());
        CHECK(back.config_hash == f.mash.config_hash);
        CHECK(back.seed == f.mash.seed);
        CHECK(back.tempo_tolerance_bpm ==
              doctest::Approx(f.mash.tempo_tolerance_bpm));
        CHECK(back.pairs_per_vocal_segment == f.mash.pairs_per_vocal_segment);
        REQUIRE(back.recipes.size() == f.mash.recipes.size());
        for (std::size_t i = 0; i < back.recipes.size(); ++i) {
            const MashupRecipe& a = back.recipes[i];
            const MashupRecipe& b = f.mash.recipes[i];
            CHECK(a.vocal.track_id == b.vocal.track_id);
            CHECK(a.vocal.singer_id == b.vocal.singer_id);
            CHECK(a.vocal.start == b.vocal.start);
            CHECK(a.vocal.key == b.vocal.key);
            CHECK(a.vocal.track_tempo == b.vocal.track_tempo);
            CHECK(a.vocal.voiced_ratio == b.vocal.voiced_ratio);
            CHECK(a.background.track_id == b.background.track_id);
            CHECK(a.background.start == b.background.start);
            CHECK(a.background.key == b.background.key);
            CHECK(a.mix_offset == b.mix_offset);
            CHECK(a.vocal_gain == b.vocal_gain);
            CHECK(a.background_gain == b.background_gain);
            CHECK(a.target_snr_db == b.target_snr_db);
        }
    }

    SUBCASE("rewriting a reread manifest is byte-identical") {
        MashupManifest back = read_mashup_manifest(path.string());
        fs::path again = f.dir / "roundtrip2.jsonl";
        write_mashup_manifest(back, again.string());
        CHECK(slurp(path) == slurp(again));
    }

    SUBCASE("a headerless file is rejected") {
        fs::path bad = f.dir / "headerless.jsonl";
        std::ofstream out(bad);
        out << "{\"mix_offset\":1.0}\n";
        out.close();
        CHECK_THROWS_AS(read_mashup_manifest(bad.string()), DataError);
        fs::path empty = f.dir / "empty.jsonl";
        std::ofstream(empty).close();
        CHECK_THROWS_WITH_AS(read_mashup_manifest(empty.string()),
                             doctest::Contains("header"), DataError);
    }

    SUBCASE("malformed lines name the file and line") {
        fs::path bad = f.dir / "badline.jsonl";
        {
            std::ofstream out(bad);
            out << "{\"config_hash\":\"deadbeefdeadbeef\",\"seed\":1}\n";
            out << "not json\n";
        }
        const std::string where = bad.string() + ":2";
        CHECK_THROWS_WITH_AS(read_mashup_manifest(bad.string()),
                             doctest::Contains(where.c_str()), DataError);
    }

    SUBCASE("the writer enforces the voiced-ratio floor") {
        MashupManifest low = f.mash;
        low.recipes.resize(1);
        low.recipes[0].vocal.voiced_ratio = 0.5;
        fs::path p = f.dir / "low.jsonl";
        CHECK_THROWS_AS(write_mashup_manifest(low, p.string()), ConfigError);
    }
}

TEST_CASE("analyze_vocal_segments cuts consecutive analyzed slices") {
    const Fixture& f = fixture();
    const auto vocals = f.corpus.select(TrackRole::vocal);
    const TrackRecord& rec = *vocals.front();
    AudioClip clip = load_wav(f.corpus.resolve(rec));
    BeatGrid grid = estimate_tempo_and_beats(clip);
    auto segs = analyze_vocal_segments(clip, rec, grid.tempo_bpm);
    // 11 s of audio holds three full 3 s segments.
    CHECK(segs.size() == 3);
    for (std::size_t i = 0; i < segs.size(); ++i) {
        CHECK(segs[i].start == doctest::Approx(3.0 * static_cast<double>(i)));
        CHECK(segs[i].track_id == rec.track_id);
        CHECK(segs[i].singer_id == rec.singer_id);
        CHECK(segs[i].track_tempo == doctest::Approx(grid.tempo_bpm));
        CHECK(segs[i].voiced_ratio >= 0.0);
        CHECK(segs[i].voiced_ratio <= 1.0);
    }
}

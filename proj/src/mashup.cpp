#include "m2m/mashup.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_map>
#include <utility>

#include "json.hpp"
#include "m2m/common.hpp"

namespace m2m {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

long long start_sample(double start_s) {
    return std::llround(start_s * kSampleRate);
}

bool segment_fits(const AudioClip& clip, double start_s) {
    const long long s = start_sample(start_s);
    return s >= 0 &&
           s + kSegmentSamples <= static_cast<long long>(clip.samples.size());
}

// Per-segment side data the public descriptors do not carry.
struct AnalyzedSegment {
    SegmentDescriptor desc;
    double rms = 0.0;
    bool key_ok = false;
};

AnalyzedSegment analyze_segment(const AudioClip& clip, double start_s) {
    AnalyzedSegment out;
    const AudioClip seg = extract_segment(clip, start_s, kSegmentSeconds);
    out.desc.start = start_s;
    out.desc.duration = kSegmentSeconds;
    out.desc.voiced_ratio = detect_voiced_frames(seg).voiced_ratio;
    out.rms = rms(seg);
    try {
        out.desc.key = estimate_key(chromagram(stft(seg)));
        out.key_ok = true;
    } catch (const DataError&) {
        out.key_ok = false;  // silent or flat segment carries no key
    }
    return out;
}

struct VocalAnalysis {
    const TrackRecord* rec = nullptr;
    std::vector<AnalyzedSegment> segments;
};

struct BackgroundAnalysis {
    const TrackRecord* rec = nullptr;
    BeatGrid grid;
    double duration_s = 0.0;
    std::vector<AnalyzedSegment> segments;  // one per qualifying beat start
    std::unordered_map<long long, int> by_start_sample;
};

VocalAnalysis analyze_vocal_track(const CorpusManifest& manifest,
                                  const TrackRecord& rec) {
    VocalAnalysis out;
    out.rec = &rec;
    const AudioClip clip = load_wav(manifest.resolve(rec));
    const BeatGrid grid = estimate_tempo_and_beats(clip);
    for (double start = 0.0; segment_fits(clip, start);
         start += kSegmentSeconds) {
        AnalyzedSegment seg = analyze_segment(clip, start);
        seg.desc.track_id = rec.track_id;
        seg.desc.singer_id = rec.singer_id;
        seg.desc.track_tempo = grid.tempo_bpm;
        out.segments.push_back(std::move(seg));
    }
    return out;
}

BackgroundAnalysis analyze_background_track(const CorpusManifest& manifest,
                                            const TrackRecord& rec) {
    BackgroundAnalysis out;
    out.rec = &rec;
    const AudioClip clip = load_wav(manifest.resolve(rec));
    out.duration_s = clip.duration();
    out.grid = estimate_tempo_and_beats(clip);
    for (double beat : out.grid.beat_times) {
        if (!segment_fits(clip, beat)) continue;
        AnalyzedSegment seg = analyze_segment(clip, beat);
        if (!seg.key_ok) continue;
        seg.desc.track_id = rec.track_id;
        seg.desc.singer_id.clear();
        seg.desc.voiced_ratio = 0.0;
        seg.desc.track_tempo = out.grid.tempo_bpm;
        out.by_start_sample[start_sample(beat)] =
            static_cast<int>(out.segments.size());
        out.segments.push_back(std::move(seg));
    }
    return out;
}

std::string mashup_config_hash(const std::vector<const TrackRecord*>& vocals,
                               const std::vector<const TrackRecord*>& bgs,
                               const MashupConfig& config) {
    // Identity comes from parameters and track ids, never from filesystem
    // paths, so the hash survives moving a corpus directory.
    char params[128];
    std::snprintf(params, sizeof params, "mashup|tol=%.6f|pairs=%d|seed=%llu",
                  config.tempo_tolerance_bpm, config.pairs_per_vocal_segment,
                  static_cast<unsigned long long>(config.seed));
    std::uint64_t h = fnv1a64(params);
    for (const TrackRecord* t : vocals) {
        h = fnv1a64(t->track_id, h);
        h = fnv1a64("|v|", h);
    }
    for (const TrackRecord* t : bgs) {
        h = fnv1a64(t->track_id, h);
        h = fnv1a64("|b|", h);
    }
    return hex64(h);
}

json descriptor_to_json(const SegmentDescriptor& d, bool vocal) {
    json j;
    j["track_id"] = d.track_id;
    if (vocal) {
        j["singer_id"] = d.singer_id;
        j["voiced_ratio"] = d.voiced_ratio;
    }
    j["start"] = d.start;
    j["duration"] = d.duration;
    j["key_tonic"] = d.key.tonic;
    j["key_mode"] = key_mode_name(d.key.mode);
    j["track_tempo"] = d.track_tempo;
    return j;
}

SegmentDescriptor descriptor_from_json(const json& j, const std::string& ctx) {
    SegmentDescriptor d;
    d.track_id = j.at("track_id").get<std::string>();
    d.singer_id = j.value("singer_id", std::string());
    d.start = j.at("start").get<double>();
    d.duration = j.at("duration").get<double>();
    d.key.tonic = j.at("key_tonic").get<int>();
    d.key.mode = parse_key_mode(j.at("key_mode").get<std::string>(), ctx);
    d.track_tempo = j.at("track_tempo").get<double>();
    d.voiced_ratio = j.value("voiced_ratio", 0.0);
    if (d.key.tonic < 0 || d.key.tonic > 11) {
        throw DataError("key tonic out of range at " + ctx);
    }
    return d;
}

}  // namespace

bool check_mashability(const SegmentDescriptor& vocal,
                       const SegmentDescriptor& background,
                       double tempo_tolerance_bpm) {
    return std::abs(vocal.track_tempo - background.track_tempo) <=
               tempo_tolerance_bpm &&
           vocal.key.tonic == background.key.tonic &&
           vocal.key.mode == background.key.mode;
}

AudioClip mix_at_snr(const AudioClip& vocal, const AudioClip& background,
                     double snr_db) {
    if (vocal.samples.size() != background.samples.size()) {
        throw ConfigError("mix_at_snr: stem lengths differ (" +
                          std::to_string(vocal.samples.size()) + " vs " +
                          std::to_string(background.samples.size()) + ")");
    }
    if (vocal.samples.empty()) throw ConfigError("mix_at_snr: empty stems");
    const double vocal_rms = rms(vocal);
    const double background_rms = rms(background);
    if (vocal_rms <= 0.0 || background_rms <= 0.0) {
        throw DataError("mix_at_snr: undefined SNR, one stem is silent");
    }
    const double scale =
        vocal_rms / (background_rms * std::pow(10.0, snr_db / 20.0));
    AudioClip out;
    out.sample_rate = vocal.sample_rate;
    out.samples.resize(vocal.samples.size());
    double peak = 0.0;
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
        out.samples[i] = vocal.samples[i] + scale * background.samples[i];
        peak = std::max(peak, std::abs(out.samples[i]));
    }
    if (peak > 1.0) {
        const double norm = 0.95 / peak;
        for (double& x : out.samples) x *= norm;
    }
    return out;
}

double align_to_beat(const BeatGrid& grid, double desired_start) {
    if (grid.beat_times.empty()) {
        throw DataError("align_to_beat: empty beat grid");
    }
    double best = grid.beat_times.front();
    for (double t : grid.beat_times) {
        // Strict improvement only: equidistant ties keep the earlier beat.
        if (std::abs(t - desired_start) < std::abs(best - desired_start)) {
            best = t;
        }
    }
    return best;
}

MashupManifest generate_dataset(const CorpusManifest& vocals,
                                const CorpusManifest& backgrounds,
                                const MashupConfig& config) {
    if (config.pairs_per_vocal_segment < 1) {
        throw ConfigError("mashup: pairs_per_vocal_segment must be >= 1");
    }
    if (config.tempo_tolerance_bpm < 0.0) {
        throw ConfigError("mashup: tempo tolerance must be >= 0");
    }
    const auto vocal_recs = vocals.select(TrackRole::vocal);
    const auto bg_recs = backgrounds.select(TrackRole::background);
    if (vocal_recs.empty()) throw DataError("mashup: vocal pool is empty");
    if (bg_recs.empty()) throw DataError("mashup: background pool is empty");

    std::vector<VocalAnalysis> vocal_analyses(vocal_recs.size());
    parallel_for(vocal_recs.size(), config.threads, [&](std::size_t i) {
        vocal_analyses[i] = analyze_vocal_track(vocals, *vocal_recs[i]);
    });
    std::vector<BackgroundAnalysis> bg_analyses(bg_recs.size());
    parallel_for(bg_recs.size(), config.threads, [&](std::size_t i) {
        bg_analyses[i] = analyze_background_track(backgrounds, *bg_recs[i]);
    });

    MashupManifest manifest;
    manifest.seed = config.seed;
    manifest.tempo_tolerance_bpm = config.tempo_tolerance_bpm;
    manifest.pairs_per_vocal_segment = config.pairs_per_vocal_segment;
    manifest.config_hash = mashup_config_hash(vocal_recs, bg_recs, config);

    constexpr int kDrawBudget = 100;
    // After this many fruitless draws a segment stops insisting on
    // backgrounds its track has not used yet.
    constexpr int kDiversityBudget = kDrawBudget / 2;
    int qualifying = 0;
    int failures = 0;
    for (const VocalAnalysis& va : vocal_analyses) {
        std::set<std::string> used_backgrounds;  // per vocal track
        for (std::size_t si = 0; si < va.segments.size(); ++si) {
            const AnalyzedSegment& vseg = va.segments[si];
            if (!vseg.key_ok || vseg.desc.voiced_ratio < kMinVoicedRatio) {
                continue;
            }
            ++qualifying;
            Rng rng(derive_seed(config.seed, va.rec->track_id, si));
            std::set<std::pair<std::string, long long>> taken;
            int accepted = 0;
            for (int draw = 1;
                 draw <= kDrawBudget &&
                 accepted < config.pairs_per_vocal_segment;
                 ++draw) {
                const BackgroundAnalysis& bg =
                    bg_analyses[rng.next_below(bg_analyses.size())];
                if (bg.segments.empty()) continue;
                const double span = bg.duration_s - kSegmentSeconds;
                if (span < 0.0) continue;
                // Desired start on a 0.5 s grid, then snapped to a beat.
                const double desired =
                    0.5 * static_cast<double>(rng.next_below(
                              static_cast<std::uint64_t>(span / 0.5) + 1));
                const double aligned = align_to_beat(bg.grid, desired);
                const auto it = bg.by_start_sample.find(start_sample(aligned));
                if (it == bg.by_start_sample.end()) continue;  // beat too late
                const AnalyzedSegment& bseg = bg.segments[it->second];
                if (!check_mashability(vseg.desc, bseg.desc,
                                       config.tempo_tolerance_bpm)) {
                    continue;
                }
                const auto key =
                    std::make_pair(bg.rec->track_id, start_sample(aligned));
                if (taken.count(key)) continue;
                if (used_backgrounds.count(bg.rec->track_id) &&
                    draw <= kDiversityBudget) {
                    continue;  // prefer a background this track has not met
                }
                if (bseg.rms <= 0.0 || vseg.rms <= 0.0) continue;
                MashupRecipe r;
                r.vocal = vseg.desc;
                r.background = bseg.desc;
                r.mix_offset = bseg.desc.start;
                r.target_snr_db = 0.0;
                r.vocal_gain = 1.0;
                r.background_gain =
                    vseg.rms /
                    (bseg.rms * std::pow(10.0, r.target_snr_db / 20.0));
                manifest.recipes.push_back(std::move(r));
                taken.insert(key);
                used_backgrounds.insert(bg.rec->track_id);
                ++accepted;
            }
            if (accepted == 0) ++failures;
        }
    }
    if (qualifying == 0) {
        throw DataError(
            "mashup: no vocal segments reach voiced_ratio >= 0.7; nothing to "
            "mix");
    }
    if (failures * 2 > qualifying) {
        throw DataError(
            "mashup: no mashable background found for " +
            std::to_string(failures) + " of " + std::to_string(qualifying) +
            " vocal segments; consider raising the tempo tolerance or "
            "widening the background pool");
    }
    return manifest;
}

AudioClip render_recipe(const MashupRecipe& recipe,
                        const AudioClip& vocal_track,
                        const AudioClip& background_track) {
    const AudioClip vseg =
        extract_segment(vocal_track, recipe.vocal.start, kSegmentSeconds);
    const AudioClip bseg =
        extract_segment(background_track, recipe.mix_offset, kSegmentSeconds);
    return mix_at_snr(vseg, bseg, recipe.target_snr_db);
}

MashupManifest read_mashup_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open mashup manifest: " + path);
    MashupManifest m;
    std::string line;
    int lineno = 0;
    bool have_header = false;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string ctx = path + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("malformed mashup line at " + ctx + ": " +
                            e.what());
        }
        try {
            if (!have_header) {
                m.config_hash = j.at("config_hash").get<std::string>();
                m.seed = j.at("seed").get<std::uint64_t>();
                m.tempo_tolerance_bpm = j.value("tempo_tolerance_bpm", 2.0);
                m.pairs_per_vocal_segment =
                    j.value("pairs_per_vocal_segment", 0);
                have_header = true;
                continue;
            }
            MashupRecipe r;
            r.vocal = descriptor_from_json(j.at("vocal"), ctx);
            r.background = descriptor_from_json(j.at("background"), ctx);
            r.mix_offset = j.at("mix_offset").get<double>();
            r.vocal_gain = j.at("vocal_gain").get<double>();
            r.background_gain = j.at("background_gain").get<double>();
            r.target_snr_db = j.at("target_snr_db").get<double>();
            if (r.vocal_gain <= 0.0 || r.background_gain <= 0.0) {
                throw DataError("non-positive gain at " + ctx);
            }
            m.recipes.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw DataError("missing mashup field at " + ctx + ": " +
                            e.what());
        }
    }
    if (!have_header) {
        throw DataError("mashup manifest has no header line: " + path);
    }
    return m;
}

void write_mashup_manifest(const MashupManifest& manifest,
                           const std::string& path) {
    for (std::size_t i = 0; i < manifest.recipes.size(); ++i) {
        const MashupRecipe& r = manifest.recipes[i];
        if (r.vocal.voiced_ratio < kMinVoicedRatio) {
            throw ConfigError("mashup recipe " + std::to_string(i) +
                              ": vocal segment voiced_ratio " +
                              std::to_string(r.vocal.voiced_ratio) +
                              " is below the 0.7 floor");
        }
        if (r.vocal_gain <= 0.0 || r.background_gain <= 0.0) {
            throw ConfigError("mashup recipe " + std::to_string(i) +
                              ": gains must be positive");
        }
    }
    fs::path dir = fs::path(path).parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write mashup manifest: " + path);
    json header;
    header["config_hash"] = manifest.config_hash;
    header["kind"] = "mashups";
    header["pairs_per_vocal_segment"] = manifest.pairs_per_vocal_segment;
    header["seed"] = manifest.seed;
    header["tempo_tolerance_bpm"] = manifest.tempo_tolerance_bpm;
    f << header.dump() << "\n";
    for (const MashupRecipe& r : manifest.recipes) {
        json j;
        j["vocal"] = descriptor_to_json(r.vocal, true);
        j["background"] = descriptor_to_json(r.background, false);
        j["mix_offset"] = r.mix_offset;
        j["vocal_gain"] = r.vocal_gain;
        j["background_gain"] = r.background_gain;
        j["target_snr_db"] = r.target_snr_db;
        f << j.dump() << "\n";
    }
    if (!f) throw DataError("short write to mashup manifest: " + path);
}

std::vector<SegmentDescriptor> analyze_vocal_segments(const AudioClip& clip,
                                                      const TrackRecord& track,
                                                      double track_tempo) {
    std::vector<SegmentDescriptor> out;
    for (double start = 0.0; segment_fits(clip, start);
         start += kSegmentSeconds) {
        AnalyzedSegment seg = analyze_segment(clip, start);
        if (!seg.key_ok) continue;
        seg.desc.track_id = track.track_id;
        seg.desc.singer_id = track.singer_id;
        seg.desc.track_tempo = track_tempo;
        out.push_back(std::move(seg.desc));
    }
    return out;
}

}  // namespace m2m

#include "m2m/manifest.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "m2m/common.hpp"

namespace m2m {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* role_name(TrackRole role) {
    return role == TrackRole::vocal ? "vocal" : "background";
}

TrackRole parse_role(const std::string& s, const std::string& ctx) {
    if (s == "vocal") return TrackRole::vocal;
    if (s == "background") return TrackRole::background;
    throw DataError("bad track role '" + s + "' in " + ctx);
}

Split parse_split(const std::string& s, const std::string& ctx) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw DataError("bad split '" + s + "' in " + ctx);
}

}  // namespace

KeyMode parse_key_mode(const std::string& s, const std::string& context) {
    if (s == "major") return KeyMode::major;
    if (s == "minor") return KeyMode::minor;
    throw DataError("bad key mode '" + s + "' in " + context);
}

const char* key_mode_name(KeyMode mode) {
    return mode == KeyMode::major ? "major" : "minor";
}

const char* split_name(Split split) {
    return split == Split::train ? "train" : "test";
}

std::string key_name(const KeyEstimate& key) {
    static const char* names[12] = {"C",  "C#", "D",  "D#", "E",  "F",
                                    "F#", "G",  "G#", "A",  "A#", "B"};
    return std::string(names[key.tonic % 12]) + " " + key_mode_name(key.mode);
}

std::string CorpusManifest::resolve(const TrackRecord& t) const {
    fs::path p(t.path);
    if (p.is_absolute()) return t.path;
    return (fs::path(dir) / p).string();
}

const TrackRecord& CorpusManifest::find(const std::string& track_id) const {
    for (const auto& t : tracks) {
        if (t.track_id == track_id) return t;
    }
    throw DataError("track not found in manifest: " + track_id);
}

std::vector<const TrackRecord*> CorpusManifest::select(TrackRole role) const {
    std::vector<const TrackRecord*> out;
    for (const auto& t : tracks) {
        if (t.role == role) out.push_back(&t);
    }
    return out;
}

std::vector<const TrackRecord*> CorpusManifest::select(TrackRole role,
                                                       Split split) const {
    std::vector<const TrackRecord*> out;
    for (const auto& t : tracks) {
        if (t.role == role && t.split == split) out.push_back(&t);
    }
    return out;
}

CorpusManifest read_corpus_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open corpus manifest: " + path);
    CorpusManifest m;
    m.dir = fs::path(path).parent_path().string();
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string ctx = path + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("malformed manifest line at " + ctx + ": " +
                            e.what());
        }
        try {
            TrackRecord t;
            t.track_id = j.at("track_id").get<std::string>();
            t.singer_id = j.value("singer_id", std::string());
            t.role = parse_role(j.at("role").get<std::string>(), ctx);
            t.path = j.at("path").get<std::string>();
            t.tempo_bpm = j.at("tempo_bpm").get<double>();
            t.key.tonic = j.at("key_tonic").get<int>();
            t.key.mode =
                parse_key_mode(j.at("key_mode").get<std::string>(), ctx);
            t.split = parse_split(j.at("split").get<std::string>(), ctx);
            if (t.key.tonic < 0 || t.key.tonic > 11) {
                throw DataError("key tonic out of range at " + ctx);
            }
            m.tracks.push_back(std::move(t));
        } catch (const json::exception& e) {
            throw DataError("missing manifest field at " + ctx + ": " +
                            e.what());
        }
    }
    if (m.tracks.empty()) {
        throw DataError("corpus manifest has no tracks: " + path);
    }
    return m;
}

void write_corpus_manifest(const CorpusManifest& manifest,
                           const std::string& path) {
    fs::path dir = fs::path(path).parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write corpus manifest: " + path);
    for (const auto& t : manifest.tracks) {
        json j;
        j["track_id"] = t.track_id;
        if (!t.singer_id.empty()) j["singer_id"] = t.singer_id;
        j["role"] = role_name(t.role);
        j["path"] = t.path;
        j["tempo_bpm"] = t.tempo_bpm;
        j["key_tonic"] = t.key.tonic;
        j["key_mode"] = key_mode_name(t.key.mode);
        j["split"] = split_name(t.split);
        f << j.dump() << "\n";
    }
    if (!f) throw DataError("short write to corpus manifest: " + path);
}

}  // namespace m2m

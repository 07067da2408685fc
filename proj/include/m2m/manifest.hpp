#pragma once

#include <string>
#include <vector>

#include "m2m/dsp.hpp"

namespace m2m {

enum class TrackRole { vocal, background };
enum class Split { train, test };

struct TrackRecord {
    std::string track_id;
    std::string singer_id;  // empty for backgrounds
    TrackRole role = TrackRole::vocal;
    std::string path;  // relative to the manifest's directory
    double tempo_bpm = 0.0;
    KeyEstimate key;  // assigned at synthesis time; score unused
    Split split = Split::train;
};

// A corpus manifest is line-delimited JSON, one track per line. Paths inside
// are relative to the manifest file so a corpus directory can be moved or
// compared byte-for-byte across locations.
struct CorpusManifest {
    std::vector<TrackRecord> tracks;
    std::string dir;  // directory of the manifest file, for path resolution

    std::string resolve(const TrackRecord& t) const;
    const TrackRecord& find(const std::string& track_id) const;
    std::vector<const TrackRecord*> select(TrackRole role) const;
    std::vector<const TrackRecord*> select(TrackRole role, Split split) const;
};

CorpusManifest read_corpus_manifest(const std::string& path);
void write_corpus_manifest(const CorpusManifest& manifest,
                           const std::string& path);

const char* key_mode_name(KeyMode mode);
const char* split_name(Split split);
std::string key_name(const KeyEstimate& key);  // e.g. "C major"

// Inverse of key_mode_name; `context` names the offending location in the
// DataError message.
KeyMode parse_key_mode(const std::string& s, const std::string& context);

}  // namespace m2m

#include "m2m/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "m2m/common.hpp"

namespace m2m {

namespace {

constexpr std::uint16_t kFmtPcm = 1;
constexpr std::uint16_t kFmtFloat = 3;
constexpr std::uint16_t kFmtExtensible = 0xfffe;

const char* format_name(std::uint16_t tag) {
    switch (tag) {
        case kFmtPcm: return "PCM";
        case kFmtFloat: return "IEEE float";
        case 2: return "ADPCM";
        case 6: return "A-law";
        case 7: return "mu-law";
        default: return "unknown";
    }
}

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) |
           static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 |
           static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

AudioClip load_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open WAV file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || bytes.compare(0, 4, "RIFF") != 0 ||
        bytes.compare(8, 4, "WAVE") != 0) {
        throw DataError("not a RIFF/WAVE file: " + path);
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

    std::uint16_t fmt_tag = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::size_t data_off = 0, data_len = 0;
    bool have_fmt = false;

    // Walk chunks; only fmt and data matter.
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        std::string id = bytes.substr(pos, 4);
        std::uint32_t len = read_u32(p + pos + 4);
        std::size_t body = pos + 8;
        if (body + len > bytes.size()) {
            throw DataError("truncated WAV chunk '" + id + "' in " + path);
        }
        if (id == "fmt ") {
            if (len < 16) throw DataError("malformed fmt chunk in " + path);
            fmt_tag = read_u16(p + body);
            channels = read_u16(p + body + 2);
            rate = read_u32(p + body + 4);
            bits = read_u16(p + body + 14);
            if (fmt_tag == kFmtExtensible && len >= 40) {
                fmt_tag = read_u16(p + body + 24);  // first bytes of SubFormat
            }
            have_fmt = true;
        } else if (id == "data") {
            data_off = body;
            data_len = len;
        }
        pos = body + len + (len & 1);  // chunks are word-aligned
    }
    if (!have_fmt || data_off == 0) {
        throw DataError("WAV file missing fmt or data chunk: " + path);
    }
    if (channels == 0 || rate == 0) {
        throw DataError("WAV file declares zero channels or rate: " + path);
    }

    const bool pcm16 = fmt_tag == kFmtPcm && bits == 16;
    const bool f32 = fmt_tag == kFmtFloat && bits == 32;
    if (!pcm16 && !f32) {
        throw DataError("unsupported WAV encoding in " + path + ": " +
                        format_name(fmt_tag) + " at " + std::to_string(bits) +
                        " bits (need 16-bit PCM or 32-bit float)");
    }

    const std::size_t bytes_per = pcm16 ? 2 : 4;
    const std::size_t frame_bytes = bytes_per * channels;
    const std::size_t n_frames = data_len / frame_bytes;

    std::vector<double> mono(n_frames, 0.0);
    for (std::size_t i = 0; i < n_frames; ++i) {
        double acc = 0.0;
        for (std::uint16_t c = 0; c < channels; ++c) {
            const unsigned char* s = p + data_off + i * frame_bytes +
                                     c * bytes_per;
            if (pcm16) {
                std::int16_t v = static_cast<std::int16_t>(read_u16(s));
                acc += v / 32768.0;
            } else {
                float v;
                std::uint32_t raw = read_u32(s);
                std::memcpy(&v, &raw, 4);
                acc += v;
            }
        }
        mono[i] = acc / channels;
    }

    AudioClip clip;
    clip.sample_rate = kSampleRate;
    if (static_cast<int>(rate) == kSampleRate) {
        clip.samples = std::move(mono);
    } else {
        clip.samples = resample_linear(mono, static_cast<int>(rate),
                                       kSampleRate);
    }
    return clip;
}

void save_wav(const AudioClip& clip, const std::string& path,
              WavFormat format) {
    const std::size_t n = clip.samples.size();
    const std::uint16_t bits = format == WavFormat::pcm16 ? 16 : 32;
    const std::uint32_t data_len =
        static_cast<std::uint32_t>(n * (bits / 8));

    std::string out;
    out.reserve(44 + data_len);
    out += "RIFF";
    put_u32(out, 36 + data_len);
    out += "WAVEfmt ";
    put_u32(out, 16);
    put_u16(out, format == WavFormat::pcm16 ? kFmtPcm : kFmtFloat);
    put_u16(out, 1);  // mono
    put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
    put_u32(out, static_cast<std::uint32_t>(clip.sample_rate * (bits / 8)));
    put_u16(out, static_cast<std::uint16_t>(bits / 8));
    put_u16(out, bits);
    out += "data";
    put_u32(out, data_len);

    if (format == WavFormat::pcm16) {
        for (double x : clip.samples) {
            long v = std::lround(x * 32768.0);  // mirror of the read scaling
            if (v > 32767) v = 32767;
            if (v < -32768) v = -32768;
            put_u16(out, static_cast<std::uint16_t>(
                             static_cast<std::int16_t>(v)));
        }
    } else {
        for (double x : clip.samples) {
            float v = static_cast<float>(x);
            std::uint32_t raw;
            std::memcpy(&raw, &v, 4);
            put_u32(out, raw);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write WAV file: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("short write to WAV file: " + path);
}

AudioClip extract_segment(const AudioClip& clip, double start_s,
                          double duration_s) {
    if (duration_s <= 0.0) {
        throw DataError("extract_segment: non-positive duration");
    }
    const auto start = static_cast<long long>(
        std::llround(start_s * clip.sample_rate));
    const auto len = static_cast<long long>(
        std::llround(duration_s * clip.sample_rate));
    const auto total = static_cast<long long>(clip.samples.size());
    if (start < 0 || start + len > total) {
        throw DataError("extract_segment: slice [" + std::to_string(start_s) +
                        ", " + std::to_string(start_s + duration_s) +
                        ") s outside clip of " +
                        std::to_string(clip.duration()) + " s");
    }
    AudioClip out;
    out.sample_rate = clip.sample_rate;
    out.samples.assign(clip.samples.begin() + start,
                       clip.samples.begin() + start + len);
    return out;
}

double rms(const std::vector<double>& samples) {
    if (samples.empty()) throw DataError("rms: empty input");
    double acc = 0.0;
    for (double x : samples) acc += x * x;
    return std::sqrt(acc / static_cast<double>(samples.size()));
}

std::vector<double> resample_linear(const std::vector<double>& in,
                                    int in_rate, int out_rate) {
    if (in_rate <= 0 || out_rate <= 0) {
        throw DataError("resample_linear: rates must be positive");
    }
    if (in.empty() || in_rate == out_rate) return in;
    const auto out_len = static_cast<std::size_t>(std::llround(
        static_cast<double>(in.size()) * out_rate / in_rate));
    std::vector<double> out(out_len);
    const double step = static_cast<double>(in_rate) / out_rate;
    for (std::size_t i = 0; i < out_len; ++i) {
        double t = i * step;
        auto i0 = static_cast<std::size_t>(t);
        if (i0 >= in.size() - 1) {
            out[i] = in.back();
            continue;
        }
        double frac = t - static_cast<double>(i0);
        out[i] = in[i0] * (1.0 - frac) + in[i0 + 1] * frac;
    }
    return out;
}

}  // namespace m2m

#pragma once

// On-disk sequences: a directory with manifest.json and one little-endian
// binary file per frame. Datasets are directories of sequence directories.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "json.hpp"
#include "mfseg/lfe.hpp"

namespace mfseg::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr int kSequenceFormatVersion = 1;

enum class SequenceErrorCode { kIo, kVersionMismatch, kChecksum, kTruncated, kMissingFrame, kMalformed };

inline const char* to_string(SequenceErrorCode c) {
    switch (c) {
        case SequenceErrorCode::kIo: return "io";
        case SequenceErrorCode::kVersionMismatch: return "version_mismatch";
        case SequenceErrorCode::kChecksum: return "checksum";
        case SequenceErrorCode::kTruncated: return "truncated";
        case SequenceErrorCode::kMissingFrame: return "missing_frame";
        case SequenceErrorCode::kMalformed: return "malformed";
    }
    return "unknown";
}

class SequenceError : public std::runtime_error {
public:
    SequenceError(SequenceErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
    SequenceErrorCode code() const { return code_; }

private:
    SequenceErrorCode code_;
};

struct Sequence {
    std::vector<RawPointCloud> frames;
    std::size_t num_classes = 0;
    std::vector<std::string> class_names;
    double voxel_size_hint = 0.2;
    double frame_period = 0.1;

    bool operator==(const Sequence&) const = default;
};

inline std::string frame_filename(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%04zu.bin", i);
    return buf;
}

inline std::uint32_t crc32_of(const std::vector<char>& bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for very large frames.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), n);
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace detail {

template <typename T>
void put(std::vector<char>& out, const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    Reader(const std::vector<char>& b, const std::string& name) : b_(b), name_(name) {}
    template <typename T>
    T get() {
        if (pos_ + sizeof(T) > b_.size())
            throw SequenceError(SequenceErrorCode::kTruncated, name_ + " ends early at byte " + std::to_string(pos_));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::size_t remaining() const { return b_.size() - pos_; }

private:
    const std::vector<char>& b_;
    std::string name_;
    std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw SequenceError(SequenceErrorCode::kIo, "cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw SequenceError(SequenceErrorCode::kIo, "cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw SequenceError(SequenceErrorCode::kIo, "short write to " + p.string());
}

}  // namespace detail

/// u32 N | N x (f32 x, y, z, intensity) | N x f32 timestamp | N x u16 label | 12 x f64 pose (3x4 row-major).
inline std::vector<char> encode_frame(const RawPointCloud& f) {
    const std::size_t n = f.size();
    if (n > 0xFFFFFFFFu) throw std::length_error("frame too large for the sequence format");
    std::vector<char> out;
    out.reserve(4 + n * 22 + 96);
    detail::put(out, static_cast<std::uint32_t>(n));
    for (std::size_t i = 0; i < n; ++i) {
        detail::put(out, f.coords[i].x());
        detail::put(out, f.coords[i].y());
        detail::put(out, f.coords[i].z());
        detail::put(out, f.intensity[i]);
    }
    for (float t : f.timestamp) detail::put(out, t);
    for (std::size_t i = 0; i < n; ++i) detail::put(out, f.labeled() ? f.labels[i] : kUnlabeled);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) detail::put(out, f.pose.rotation(r, c));
        detail::put(out, f.pose.translation(r));
    }
    return out;
}

/// Frames whose points are all unlabeled decode with an empty label vector.
inline RawPointCloud decode_frame(const std::vector<char>& bytes, const std::string& name) {
    detail::Reader rd(bytes, name);
    const std::uint32_t n = rd.get<std::uint32_t>();
    const std::size_t expected = static_cast<std::size_t>(n) * 22 + 96;
    if (rd.remaining() < expected)
        throw SequenceError(SequenceErrorCode::kTruncated, name + " holds " + std::to_string(rd.remaining()) +
                                                               " payload bytes, header implies " + std::to_string(expected));
    if (rd.remaining() > expected) throw SequenceError(SequenceErrorCode::kMalformed, name + " has trailing bytes");
    RawPointCloud f;
    f.coords.resize(n);
    f.intensity.resize(n);
    f.timestamp.resize(n);
    f.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float x = rd.get<float>(), y = rd.get<float>(), z = rd.get<float>();
        f.coords[i] = {x, y, z};
        f.intensity[i] = rd.get<float>();
    }
    for (auto& t : f.timestamp) t = rd.get<float>();
    for (auto& l : f.labels) l = rd.get<std::uint16_t>();
    if (std::all_of(f.labels.begin(), f.labels.end(), [](auto l) { return l == kUnlabeled; })) f.labels.clear();
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) f.pose.rotation(r, c) = rd.get<double>();
        f.pose.translation(r) = rd.get<double>();
    }
    return f;
}

inline void write_sequence(const Sequence& seq, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json files = nlohmann::json::array();
    for (std::size_t i = 0; i < seq.frames.size(); ++i) {
        const auto bytes = encode_frame(seq.frames[i]);
        detail::write_file(dir / frame_filename(i), bytes);
        files.push_back({{"name", frame_filename(i)}, {"crc32", crc32_of(bytes)}});
    }
    std::vector<double> capture_times;
    for (const auto& f : seq.frames) capture_times.push_back(f.capture_time);
    const nlohmann::json manifest{
        {"format_version", kSequenceFormatVersion},
        {"num_frames", seq.frames.size()},
        {"num_classes", seq.num_classes},
        {"class_names", seq.class_names},
        {"voxel_hints", {{"lfe_voxel_size", seq.voxel_size_hint}}},
        {"frame_period", seq.frame_period},
        {"capture_times", capture_times},
        {"files", files},
    };
    std::ofstream out(dir / "manifest.json");
    if (!out) throw SequenceError(SequenceErrorCode::kIo, "cannot write manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

inline Sequence read_sequence(const std::filesystem::path& dir) {
    const auto mpath = dir / "manifest.json";
    if (!std::filesystem::exists(mpath)) throw SequenceError(SequenceErrorCode::kIo, "no manifest in " + dir.string());
    const auto raw = detail::read_file(mpath);
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(raw.begin(), raw.end());
    } catch (const nlohmann::json::exception& e) {
        throw SequenceError(SequenceErrorCode::kMalformed, "manifest: " + std::string(e.what()));
    }
    try {
        const int version = m.at("format_version").get<int>();
        if (version != kSequenceFormatVersion)
            throw SequenceError(SequenceErrorCode::kVersionMismatch,
                                "format_version " + std::to_string(version) + ", reader supports " +
                                    std::to_string(kSequenceFormatVersion));
        Sequence seq;
        seq.num_classes = m.at("num_classes").get<std::size_t>();
        seq.class_names = m.at("class_names").get<std::vector<std::string>>();
        seq.voxel_size_hint = m.at("voxel_hints").value("lfe_voxel_size", 0.2);
        seq.frame_period = m.value("frame_period", 0.1);
        const auto n = m.at("num_frames").get<std::size_t>();
        const auto& files = m.at("files");
        const auto times = m.value("capture_times", std::vector<double>{});
        if (files.size() != n || (!times.empty() && times.size() != n))
            throw SequenceError(SequenceErrorCode::kMalformed, "manifest frame count disagrees with its file list");
        for (std::size_t i = 0; i < n; ++i) {
            const auto name = files[i].at("name").get<std::string>();
            const auto path = dir / name;
            if (!std::filesystem::exists(path)) throw SequenceError(SequenceErrorCode::kMissingFrame, path.string());
            const auto bytes = detail::read_file(path);
            // Structural check first so a short file reports truncation, not a checksum error.
            if (bytes.size() < 4 + 96) throw SequenceError(SequenceErrorCode::kTruncated, name + " is too short");
            std::uint32_t count;
            std::memcpy(&count, bytes.data(), 4);
            if (bytes.size() < 4 + static_cast<std::size_t>(count) * 22 + 96)
                throw SequenceError(SequenceErrorCode::kTruncated, name + " is shorter than its point count implies");
            if (crc32_of(bytes) != files[i].at("crc32").get<std::uint32_t>())
                throw SequenceError(SequenceErrorCode::kChecksum, name + " does not match its manifest checksum");
            RawPointCloud f = decode_frame(bytes, name);
            f.capture_time = times.empty() ? static_cast<double>(i) * seq.frame_period : times[i];
            f.validate(seq.num_classes);
            seq.frames.push_back(std::move(f));
        }
        return seq;
    } catch (const nlohmann::json::exception& e) {
        throw SequenceError(SequenceErrorCode::kMalformed, "manifest: " + std::string(e.what()));
    } catch (const std::invalid_argument& e) {
        throw SequenceError(SequenceErrorCode::kMalformed, e.what());
    }
}

/// A dataset directory holds seq_0000/, seq_0001/, ... (or is itself a sequence).
inline std::vector<std::filesystem::path> list_sequences(const std::filesystem::path& root) {
    if (std::filesystem::exists(root / "manifest.json")) return {root};
    if (!std::filesystem::is_directory(root)) throw SequenceError(SequenceErrorCode::kIo, "not a directory: " + root.string());
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.json")) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw SequenceError(SequenceErrorCode::kIo, "no sequences under " + root.string());
    return out;
}

inline std::vector<Sequence> read_dataset(const std::filesystem::path& root) {
    std::vector<Sequence> out;
    for (const auto& p : list_sequences(root)) out.push_back(read_sequence(p));
    return out;
}

inline std::string sequence_dirname(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "seq_%04zu", i);
    return buf;
}

inline void write_dataset(const std::vector<Sequence>& seqs, const std::filesystem::path& root) {
    for (std::size_t i = 0; i < seqs.size(); ++i) write_sequence(seqs[i], root / sequence_dirname(i));
}

}  // namespace mfseg::io

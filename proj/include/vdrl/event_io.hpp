#pragma once

#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "codec.hpp"

namespace vdrl {

/// Raised when a serialized artifact (event file, checkpoint) is malformed.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when a serialized artifact has an unsupported version tag.
struct VersionError : FormatError {
    explicit VersionError(const std::string& msg) : FormatError(msg) {}
};

namespace io {

inline void put_u8(std::ostream& os, std::uint8_t v) {
    os.put(static_cast<char>(v));
}
inline void put_u16(std::ostream& os, std::uint16_t v) {
    os.put(static_cast<char>(v & 0xff));
    os.put(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_i8(std::ostream& os, std::int8_t v) {
    os.put(static_cast<char>(v));
}
inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(os, bits);
}

inline std::uint8_t get_u8(std::istream& is) {
    int ch = is.get();
    if (ch == std::char_traits<char>::eof()) throw FormatError("unexpected end of stream");
    return static_cast<std::uint8_t>(ch);
}
inline std::uint16_t get_u16(std::istream& is) {
    std::uint16_t lo = get_u8(is);
    std::uint16_t hi = get_u8(is);
    return static_cast<std::uint16_t>(lo | (hi << 8));
}
inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(get_u8(is)) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(get_u8(is)) << (8 * i);
    return v;
}
inline std::int8_t get_i8(std::istream& is) {
    return static_cast<std::int8_t>(get_u8(is));
}
inline double get_f64(std::istream& is) {
    std::uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

}  // namespace io

// Interleaved event stream container format, version 1:
//   magic "VDRL" | version u8 | num_channels u8 | k u8 | reserved u8 |
//   max_run_length u16 | base_rate_hz u32 | event_count u32 |
//   event_count x { value i8, length u16 }
// All integers little-endian.
inline constexpr char kEventMagic[4] = {'V', 'D', 'R', 'L'};
inline constexpr std::uint8_t kEventVersion = 1;

inline void write_events(std::ostream& os, const EventSequence& seq) {
    if (seq.num_channels == 0 || seq.num_channels > 255)
        throw std::invalid_argument("write_events: num_channels out of range");
    if (seq.k < 1 || seq.k > 127)
        throw std::invalid_argument("write_events: k out of range for i8 values");
    if (seq.max_run_length < 1 || seq.max_run_length > 65535)
        throw std::invalid_argument("write_events: max_run_length out of range");
    if (seq.base_rate_hz <= 0 ||
        seq.base_rate_hz != static_cast<double>(static_cast<std::uint32_t>(seq.base_rate_hz)))
        throw std::invalid_argument("write_events: base rate must be a positive integer Hz");

    os.write(kEventMagic, 4);
    io::put_u8(os, kEventVersion);
    io::put_u8(os, static_cast<std::uint8_t>(seq.num_channels));
    io::put_u8(os, static_cast<std::uint8_t>(seq.k));
    io::put_u8(os, 0);
    io::put_u16(os, static_cast<std::uint16_t>(seq.max_run_length));
    io::put_u32(os, static_cast<std::uint32_t>(seq.base_rate_hz));
    io::put_u32(os, static_cast<std::uint32_t>(seq.events.size()));
    for (const Run& r : seq.events) {
        if (r.value < -seq.k || r.value > seq.k)
            throw std::invalid_argument("write_events: event value outside [-k, k]");
        if (r.length < 1 || r.length > seq.max_run_length)
            throw std::invalid_argument("write_events: event length outside [1, max_run_length]");
        io::put_i8(os, static_cast<std::int8_t>(r.value));
        io::put_u16(os, static_cast<std::uint16_t>(r.length));
    }
}

inline EventSequence read_events(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kEventMagic, 4) != 0)
        throw FormatError("event stream: bad magic");
    std::uint8_t version = io::get_u8(is);
    if (version != kEventVersion)
        throw VersionError("event stream: unsupported version " + std::to_string(version));

    EventSequence seq;
    seq.num_channels = io::get_u8(is);
    seq.k = io::get_u8(is);
    io::get_u8(is);  // reserved
    seq.max_run_length = io::get_u16(is);
    seq.base_rate_hz = static_cast<double>(io::get_u32(is));
    std::uint32_t count = io::get_u32(is);

    if (seq.num_channels == 0) throw FormatError("event stream: zero channels");
    if (seq.k < 1) throw FormatError("event stream: k must be >= 1");
    if (seq.max_run_length < 1) throw FormatError("event stream: max_run_length must be >= 1");
    if (seq.base_rate_hz <= 0) throw FormatError("event stream: base rate must be positive");

    seq.events.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Run r;
        r.value = io::get_i8(is);
        r.length = io::get_u16(is);
        if (r.value < -seq.k || r.value > seq.k)
            throw FormatError("event stream: value outside [-k, k]");
        if (r.length < 1 || r.length > seq.max_run_length)
            throw FormatError("event stream: length outside [1, max_run_length]");
        seq.events.push_back(r);
    }
    return seq;
}

inline void save_events(const std::filesystem::path& path, const EventSequence& seq) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    write_events(os, seq);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline EventSequence load_events(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
    return read_events(is);
}

// Dense grids exchange as CSV: one row per time step, num_channels integer
// columns. Level range and grid rate travel out of band.
inline void write_dense_csv(std::ostream& os, const DenseCodes& codes) {
    codes.validate();
    for (std::size_t t = 0; t < codes.num_steps; ++t) {
        for (std::size_t c = 0; c < codes.num_channels; ++c) {
            if (c) os.put(',');
            os << codes.at(t, c);
        }
        os.put('\n');
    }
}

inline DenseCodes read_dense_csv(std::istream& is, int k, double base_rate_hz) {
    std::vector<int> levels;
    std::size_t num_channels = 0;
    std::string line;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ++row;
        std::size_t cols = 0;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            std::size_t pos = 0;
            int v;
            try {
                v = std::stoi(cell, &pos);
            } catch (const std::exception&) {
                throw FormatError("dense csv: bad integer at row " + std::to_string(row));
            }
            while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
            if (pos != cell.size())
                throw FormatError("dense csv: bad integer at row " + std::to_string(row));
            levels.push_back(v);
            ++cols;
        }
        if (num_channels == 0) {
            num_channels = cols;
        } else if (cols != num_channels) {
            throw FormatError("dense csv: ragged row " + std::to_string(row));
        }
    }
    if (num_channels == 0) throw FormatError("dense csv: no rows");

    DenseCodes codes(levels.size() / num_channels, num_channels, k, base_rate_hz);
    codes.levels = std::move(levels);
    codes.validate();
    return codes;
}

inline void save_dense_csv(const std::filesystem::path& path, const DenseCodes& codes) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    write_dense_csv(os, codes);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline DenseCodes load_dense_csv(const std::filesystem::path& path, int k, double base_rate_hz) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
    return read_dense_csv(is, k, base_rate_hz);
}

}  // namespace vdrl

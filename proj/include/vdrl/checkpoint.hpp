#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "event_io.hpp"
#include "rate_controller.hpp"
#include "tensor.hpp"

namespace vdrl {

inline constexpr char kCheckpointMagic[4] = {'V', 'D', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kCheckpointKindSlowAe = 1;
inline constexpr std::uint8_t kCheckpointKindRlt = 2;

/// Full training snapshot: parameters, optimizer moments, Polyak shadows,
/// controller state, step count, seed, and the config the run was built from.
struct Checkpoint {
    std::uint8_t kind = 0;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    ControllerState controller;
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> adam_m;
    std::vector<std::pair<std::string, Tensor>> adam_v;
    std::vector<std::pair<std::string, Tensor>> polyak;
};

namespace detail {

inline void write_tensor_section(std::ostream& os,
                                 const std::vector<std::pair<std::string, Tensor>>& section) {
    io::put_u32(os, static_cast<std::uint32_t>(section.size()));
    for (const auto& [name, tensor] : section) {
        if (name.size() > 65535) throw std::invalid_argument("checkpoint: name too long");
        io::put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::put_u8(os, static_cast<std::uint8_t>(tensor.rank()));
        for (std::size_t d : tensor.shape) io::put_u32(os, static_cast<std::uint32_t>(d));
        for (double v : tensor.data) io::put_f64(os, v);
    }
}

inline std::vector<std::pair<std::string, Tensor>> read_tensor_section(std::istream& is) {
    std::uint32_t count = io::get_u32(is);
    std::vector<std::pair<std::string, Tensor>> section;
    section.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t name_len = io::get_u16(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (is.gcount() != name_len) throw FormatError("checkpoint: truncated name");
        std::uint8_t rank = io::get_u8(is);
        std::vector<std::size_t> shape(rank);
        for (std::uint8_t d = 0; d < rank; ++d) shape[d] = io::get_u32(is);
        Tensor t(shape);
        for (double& v : t.data) v = io::get_f64(is);
        section.emplace_back(std::move(name), std::move(t));
    }
    return section;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    os.write(kCheckpointMagic, 4);
    io::put_u8(os, kCheckpointVersion);
    io::put_u8(os, ckpt.kind);
    io::put_u64(os, ckpt.step);
    io::put_u64(os, ckpt.seed);
    io::put_f64(os, ckpt.controller.lambda);
    io::put_f64(os, ckpt.controller.target_rate_hz);
    io::put_f64(os, ckpt.controller.epsilon);
    io::put_f64(os, ckpt.controller.delta);
    io::put_f64(os, ckpt.controller.lambda_min);
    io::put_f64(os, ckpt.controller.lambda_max);
    io::put_u32(os, static_cast<std::uint32_t>(ckpt.config_text.size()));
    os.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
    detail::write_tensor_section(os, ckpt.params);
    detail::write_tensor_section(os, ckpt.adam_m);
    detail::write_tensor_section(os, ckpt.adam_v);
    detail::write_tensor_section(os, ckpt.polyak);
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic");
    std::uint8_t version = io::get_u8(is);
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.kind = io::get_u8(is);
    ckpt.step = io::get_u64(is);
    ckpt.seed = io::get_u64(is);
    ckpt.controller.lambda = io::get_f64(is);
    ckpt.controller.target_rate_hz = io::get_f64(is);
    ckpt.controller.epsilon = io::get_f64(is);
    ckpt.controller.delta = io::get_f64(is);
    ckpt.controller.lambda_min = io::get_f64(is);
    ckpt.controller.lambda_max = io::get_f64(is);
    std::uint32_t cfg_len = io::get_u32(is);
    ckpt.config_text.resize(cfg_len);
    is.read(ckpt.config_text.data(), cfg_len);
    if (is.gcount() != static_cast<std::streamsize>(cfg_len))
        throw FormatError("checkpoint: truncated config");
    ckpt.params = detail::read_tensor_section(is);
    ckpt.adam_m = detail::read_tensor_section(is);
    ckpt.adam_v = detail::read_tensor_section(is);
    ckpt.polyak = detail::read_tensor_section(is);
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    write_checkpoint(os, ckpt);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
    return read_checkpoint(is);
}

}  // namespace vdrl

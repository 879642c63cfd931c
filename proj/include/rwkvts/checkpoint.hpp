#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "rwkvts/data_io.hpp"
#include "rwkvts/error.hpp"
#include "rwkvts/model.hpp"
#include "rwkvts/run_config.hpp"

namespace rwkvts {

// File layout:
//
//   RWKVTSCKPT <0x01> \n
//   format_version 1
//   payload_precision f32
//   config.<key> <value>            (one per RunConfig key)
//   scaler <mean0> <std0> ...       (optional)
//   tensor <name> <rows> <cols> <precision> <offset>
//   ...
//   payload_bytes <n>
//   crc32 <hex>
//   end
//   <n bytes of little-endian tensor data>

inline constexpr char kCheckpointMagic[] = "RWKVTSCKPT";
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
    RunConfig config;
    Precision payload_precision = Precision::f32;
    ModelParams<double> params;
    std::optional<Standardizer> scaler;  // global z-scoring applied before windowing
};

namespace detail {

inline std::uint32_t crc32_of(const std::string& bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

template <class U>
void append_le(std::string& out, U v) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    Bits b = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((b >> (8 * i)) & 0xffu));
}

template <class U>
U read_le(const char* p) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    Bits b = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) b |= static_cast<Bits>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<U>(b);
}

}  // namespace detail

template <std::floating_point T>
std::string serialize_checkpoint(const ModelParams<T>& params, const RunConfig& config, Precision payload,
                                 const std::optional<Standardizer>& scaler = std::nullopt) {
    check_param_shapes(params, config.model);
    std::string data;
    std::ostringstream head;
    head << kCheckpointMagic << static_cast<char>(kCheckpointVersion) << '\n';
    head << "format_version " << static_cast<int>(kCheckpointVersion) << '\n';
    head << "payload_precision " << to_string(payload) << '\n';
    for (const auto& [k, v] : config_entries(config)) head << "config." << k << ' ' << v << '\n';
    if (scaler) {
        head << "scaler";
        for (std::size_t c = 0; c < scaler->mean.size(); ++c) {
            head << ' ' << detail::format_double(scaler->mean[c]) << ' ' << detail::format_double(scaler->std[c]);
        }
        head << '\n';
    }
    for (const auto& [name, m] : named_tensors(params)) {
        head << "tensor " << name << ' ' << m->rows() << ' ' << m->cols() << ' ' << to_string(payload) << ' '
             << data.size() << '\n';
        for (const T x : m->values()) {
            if (payload == Precision::f32) {
                detail::append_le(data, static_cast<float>(x));
            } else {
                detail::append_le(data, static_cast<double>(x));
            }
        }
    }
    head << "payload_bytes " << data.size() << '\n';
    char crc[16];
    std::snprintf(crc, sizeof crc, "%08x", detail::crc32_of(data));
    head << "crc32 " << crc << '\n';
    head << "end\n";
    return head.str() + data;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source = "<checkpoint>") {
    auto fail = [&](const std::string& msg) { return DataError(source + ": " + msg); };
    const std::string magic = std::string(kCheckpointMagic) + static_cast<char>(kCheckpointVersion) + '\n';
    if (bytes.compare(0, std::strlen(kCheckpointMagic), kCheckpointMagic) != 0) throw fail("not a checkpoint file");
    if (bytes.size() < magic.size() || bytes.compare(0, magic.size(), magic) != 0) {
        throw fail("unsupported checkpoint version");
    }
    std::size_t pos = magic.size();
    Checkpoint ck;
    struct Entry {
        std::size_t rows, cols, offset;
    };
    std::map<std::string, Entry> tensors;
    std::set<std::string> config_keys;
    std::size_t payload_bytes = 0;
    bool have_payload = false, have_crc = false, have_precision = false;
    std::uint32_t crc = 0;
    while (true) {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw fail("truncated header");
        const std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        if (line == "end") break;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "format_version") {
            int v = 0;
            ls >> v;
            if (v != kCheckpointVersion) throw fail("unsupported format_version " + std::to_string(v));
        } else if (tag == "payload_precision") {
            std::string p;
            ls >> p;
            try {
                ck.payload_precision = parse_precision(p);
            } catch (const ConfigError& e) {
                throw fail(e.what());
            }
            have_precision = true;
        } else if (tag.rfind("config.", 0) == 0) {
            const std::string key = tag.substr(7);
            if (!config_keys.insert(key).second) throw fail("duplicate config key " + key);
            const std::string value = line.size() > tag.size() ? line.substr(tag.size() + 1) : std::string();
            try {
                set_config_value(ck.config, key, value);
            } catch (const ConfigError& e) {
                throw fail(e.what());
            }
        } else if (tag == "scaler") {
            if (ck.scaler) throw fail("scaler appears twice");
            Standardizer sc;
            std::string a, b;
            while (ls >> a) {
                double mu = 0, sd = 0;
                if (!(ls >> b) || !detail::parse_double(a, mu) || !detail::parse_double(b, sd) || !(sd > 0)) {
                    throw fail("malformed scaler line");
                }
                sc.mean.push_back(mu);
                sc.std.push_back(sd);
            }
            ck.scaler = std::move(sc);
        } else if (tag == "tensor") {
            std::string name, prec;
            Entry e{};
            if (!(ls >> name >> e.rows >> e.cols >> prec >> e.offset)) throw fail("malformed tensor line '" + line + "'");
            if (!have_precision || prec != to_string(ck.payload_precision)) {
                throw fail("tensor " + name + " precision " + prec + " does not match the payload precision");
            }
            if (!tensors.emplace(name, e).second) throw fail("tensor " + name + " appears twice");
        } else if (tag == "payload_bytes") {
            if (!(ls >> payload_bytes)) throw fail("malformed payload_bytes");
            have_payload = true;
        } else if (tag == "crc32") {
            std::string hex;
            ls >> hex;
            try {
                crc = static_cast<std::uint32_t>(std::stoul(hex, nullptr, 16));
            } catch (const std::exception&) {
                throw fail("malformed crc32");
            }
            have_crc = true;
        } else {
            throw fail("unknown header line '" + line + "'");
        }
    }
    if (!have_payload || !have_crc || !have_precision) throw fail("incomplete header");
    const std::string data = bytes.substr(pos);
    if (data.size() != payload_bytes) {
        throw fail("payload is " + std::to_string(data.size()) + " bytes, header says " + std::to_string(payload_bytes));
    }
    if (detail::crc32_of(data) != crc) throw fail("checksum mismatch");
    try {
        ck.config.validate();
        ck.params = zero_params<double>(ck.config.model);
    } catch (const ConfigError& e) {
        throw fail(std::string("stored configuration is invalid: ") + e.what());
    }
    const std::size_t width = ck.payload_precision == Precision::f32 ? 4 : 8;
    std::size_t matched = 0;
    for (auto& [name, m] : named_tensors(ck.params)) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) throw fail("missing tensor " + name);
        const Entry& e = it->second;
        if (e.rows != m->rows() || e.cols != m->cols()) {
            throw fail("tensor " + name + " has shape " + std::to_string(e.rows) + "x" + std::to_string(e.cols) +
                       ", configuration expects " + m->shape());
        }
        if (e.offset + m->size() * width > data.size()) throw fail("tensor " + name + " runs past the payload");
        const char* p = data.data() + e.offset;
        for (std::size_t i = 0; i < m->size(); ++i) {
            (*m)[i] = width == 4 ? static_cast<double>(detail::read_le<float>(p + 4 * i)) : detail::read_le<double>(p + 8 * i);
        }
        ++matched;
    }
    if (matched != tensors.size()) throw fail("checkpoint holds tensors the configuration does not define");
    return ck;
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read error on '" + path + "'");
    return ss.str();
}

/// Writes to a sibling temporary file and renames it into place, so a failure
/// never leaves a partial checkpoint at path.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("write error on '" + tmp + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move checkpoint into '" + path + "'");
    }
}

template <std::floating_point T>
void save_checkpoint(const std::string& path, const ModelParams<T>& params, const RunConfig& config,
                     Precision payload = Precision::f32, const std::optional<Standardizer>& scaler = std::nullopt) {
    write_file_atomic(path, serialize_checkpoint(params, config, payload, scaler));
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file_bytes(path), path); }

}  // namespace rwkvts

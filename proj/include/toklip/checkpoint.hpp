#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "toklip/nn.hpp"

namespace toklip {

// CRC-32 (IEEE), table-driven.
inline uint32_t crc32(const void* data, size_t n, uint32_t crc = 0) {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t i = 0; i < 256; i++) {
            uint32_t c = i;
            for (int k = 0; k < 8; k++) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    crc = ~crc;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return ~crc;
}

// Checkpoint file: "TKLP" magic, u32 format version, u64 config hash, u32
// tensor count, then per tensor: u16 name length + name, u8 dtype code, u8
// rank, u32 dims, little-endian payload, u32 CRC of the payload. Loading
// verifies magic, version, config hash and every checksum.
namespace ckpt {

constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f.good()) throw NumericError("checkpoint: truncated file");
    return v;
}

template <class S>
constexpr uint8_t dtype_code() {
    return sizeof(S) == 4 ? 0 : 1;
}

}  // namespace ckpt

template <class S>
void save_checkpoint(const std::string& path, uint64_t config_hash, const ParamSet<S>& params) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "checkpoint: cannot open for writing: " + path);
    f.write("TKLP", 4);
    ckpt::write_pod<uint32_t>(f, ckpt::kVersion);
    ckpt::write_pod<uint64_t>(f, config_hash);
    ckpt::write_pod<uint32_t>(f, static_cast<uint32_t>(params.items.size()));
    for (const auto& [name, p] : params.items) {
        ckpt::write_pod<uint16_t>(f, static_cast<uint16_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        ckpt::write_pod<uint8_t>(f, ckpt::dtype_code<S>());
        ckpt::write_pod<uint8_t>(f, static_cast<uint8_t>(p->shape.size()));
        for (int d : p->shape) ckpt::write_pod<uint32_t>(f, static_cast<uint32_t>(d));
        size_t bytes = p->v.size() * sizeof(S);
        f.write(reinterpret_cast<const char*>(p->v.data()), static_cast<std::streamsize>(bytes));
        ckpt::write_pod<uint32_t>(f, crc32(p->v.data(), bytes));
    }
    require(f.good(), "checkpoint: write failed: " + path);
}

// Loads into an existing parameter set by name; every parameter must be
// present with a matching shape.
template <class S>
void load_checkpoint(const std::string& path, uint64_t expected_config_hash, ParamSet<S>& params) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "checkpoint: cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    require(f.good() && std::memcmp(magic, "TKLP", 4) == 0, "checkpoint: bad magic in " + path);
    uint32_t version = ckpt::read_pod<uint32_t>(f);
    require(version == ckpt::kVersion, "checkpoint: unsupported format version");
    uint64_t hash = ckpt::read_pod<uint64_t>(f);
    require(hash == expected_config_hash, "checkpoint: config hash mismatch");
    uint32_t count = ckpt::read_pod<uint32_t>(f);
    require(count == params.items.size(), "checkpoint: tensor count mismatch");

    std::vector<bool> filled(params.items.size(), false);
    for (uint32_t i = 0; i < count; i++) {
        uint16_t name_len = ckpt::read_pod<uint16_t>(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        uint8_t dtype = ckpt::read_pod<uint8_t>(f);
        require(dtype == ckpt::dtype_code<S>(), "checkpoint: dtype mismatch for " + name);
        uint8_t rank = ckpt::read_pod<uint8_t>(f);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(ckpt::read_pod<uint32_t>(f));

        size_t idx = params.items.size();
        for (size_t j = 0; j < params.items.size(); j++) {
            if (params.items[j].first == name) {
                idx = j;
                break;
            }
        }
        require(idx < params.items.size(), "checkpoint: unknown tensor " + name);
        require(!filled[idx], "checkpoint: duplicate tensor " + name);
        auto& p = params.items[idx].second;
        require(p->shape == shape, "checkpoint: shape mismatch for " + name);
        size_t bytes = p->v.size() * sizeof(S);
        f.read(reinterpret_cast<char*>(p->v.data()), static_cast<std::streamsize>(bytes));
        if (!f.good()) throw NumericError("checkpoint: truncated payload for " + name);
        uint32_t stored_crc = ckpt::read_pod<uint32_t>(f);
        if (crc32(p->v.data(), bytes) != stored_crc)
            throw NumericError("checkpoint: checksum failure for " + name);
        filled[idx] = true;
    }
}

}  // namespace toklip

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hspec/common.hpp"

// Checkpoint container: magic "HSPC", version u32, header length u64,
// UTF-8 JSON header (config + ordered tensor records with name, shape,
// dtype, byte offset, crc32), then raw little-endian f32 payloads, each
// 64-byte aligned.

namespace hspec {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace ckpt {

constexpr uint32_t kVersion = 1;
constexpr char kMagic[4] = {'H', 'S', 'P', 'C'};
constexpr size_t kAlign = 64;

inline uint32_t crc32(const uint8_t* data, size_t n) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

}  // namespace ckpt

struct Checkpoint {
    nlohmann::json meta;
    std::vector<ckpt::NamedTensor> tensors;  // header order

    const ckpt::NamedTensor& find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw IoError("checkpoint: missing tensor " + name);
    }
    bool has(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return true;
        return false;
    }
};

inline void save_checkpoint_file(const std::string& path, const nlohmann::json& meta,
                                 const std::vector<ckpt::NamedTensor>& tensors) {
    using nlohmann::json;
    // Lay out payload offsets first; header length depends on the digits in
    // the offsets, so fix a generous header region after serializing once
    // with placeholder offsets, then re-serialize with the real ones.
    json records = json::array();
    for (const auto& t : tensors)
        records.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", 0},
                           {"crc32", 0}});
    json header = {{"config", meta}, {"tensors", records}};

    auto payload_base = [&](size_t header_len) {
        size_t off = 4 + 4 + 8 + header_len;
        return (off + ckpt::kAlign - 1) / ckpt::kAlign * ckpt::kAlign;
    };
    // Two passes are enough: offsets only grow, and the second serialization
    // uses final-width numbers.
    size_t header_len = header.dump().size();
    for (int pass = 0; pass < 2; ++pass) {
        size_t off = payload_base(header_len);
        for (size_t i = 0; i < tensors.size(); ++i) {
            const auto& t = tensors[i];
            header["tensors"][i]["offset"] = off;
            header["tensors"][i]["crc32"] =
                ckpt::crc32(reinterpret_cast<const uint8_t*>(t.data.data()),
                            t.data.size() * sizeof(float));
            off = (off + t.data.size() * sizeof(float) + ckpt::kAlign - 1) / ckpt::kAlign *
                  ckpt::kAlign;
        }
        header_len = header.dump().size();
    }
    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot open for write: " + path);
    f.write(ckpt::kMagic, 4);
    uint32_t ver = ckpt::kVersion;
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&ver), 4);
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), std::streamsize(hs.size()));
    size_t pos = 4 + 4 + 8 + hs.size();
    auto pad_to = [&](size_t target) {
        static const char zeros[ckpt::kAlign] = {};
        while (pos < target) {
            size_t n = std::min(target - pos, ckpt::kAlign);
            f.write(zeros, std::streamsize(n));
            pos += n;
        }
    };
    for (size_t i = 0; i < tensors.size(); ++i) {
        pad_to(header["tensors"][i]["offset"].get<size_t>());
        const auto& t = tensors[i];
        f.write(reinterpret_cast<const char*>(t.data.data()),
                std::streamsize(t.data.size() * sizeof(float)));
        pos += t.data.size() * sizeof(float);
    }
    if (!f) throw IoError("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open: " + path);
    char magic[4];
    uint32_t ver = 0;
    uint64_t hlen = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&ver), 4);
    f.read(reinterpret_cast<char*>(&hlen), 8);
    if (!f || std::memcmp(magic, ckpt::kMagic, 4) != 0)
        throw IoError("checkpoint: bad magic: " + path);
    if (ver != ckpt::kVersion) throw IoError("checkpoint: unsupported version");
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    if (!f) throw IoError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
        throw IoError(std::string("checkpoint: header parse failure: ") + e.what());
    }
    Checkpoint out;
    out.meta = header.value("config", nlohmann::json::object());
    for (const auto& rec : header.at("tensors")) {
        ckpt::NamedTensor t;
        t.name = rec.at("name").get<std::string>();
        t.shape = rec.at("shape").get<std::vector<int>>();
        if (rec.at("dtype").get<std::string>() != "f32")
            throw IoError("checkpoint: unsupported dtype for " + t.name);
        size_t numel = 1;
        for (int d : t.shape) numel *= size_t(d);
        t.data.resize(numel);
        f.seekg(std::streamoff(rec.at("offset").get<uint64_t>()));
        f.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(numel * sizeof(float)));
        if (!f) throw IoError("checkpoint: truncated payload for " + t.name);
        const uint32_t want = rec.at("crc32").get<uint32_t>();
        const uint32_t got =
            ckpt::crc32(reinterpret_cast<const uint8_t*>(t.data.data()), numel * sizeof(float));
        if (want != got) throw IoError("checkpoint: checksum mismatch for " + t.name);
        out.tensors.push_back(std::move(t));
    }
    return out;
}

}  // namespace hspec

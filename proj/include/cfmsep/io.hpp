#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace cfmsep {

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NamedTensor {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> data;
};

// Self-describing binary container shared by datasets ("CFMSEPDS") and
// checkpoints ("CFMSEPCK"): magic, u16 version, u32 JSON-header length, JSON
// header with a tensor index (name, shape, byte offset), then a little-endian
// f32 payload. Round-trips are bit-exact.
struct Container {
    uint16_t version = 0;
    nlohmann::json meta;
    std::vector<NamedTensor> tensors;
    std::unordered_map<std::string, size_t> index;

    bool has(const std::string& name) const { return index.count(name) != 0; }
    const NamedTensor& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw IoError("container: missing tensor '" + name + "'");
        return tensors[it->second];
    }
};

void write_container(const std::filesystem::path& path, const char magic[9], uint16_t version,
                     const nlohmann::json& meta, const std::vector<NamedTensor>& tensors);

Container read_container(const std::filesystem::path& path, const char magic[9]);

// FNV-1a over the whole file, as a hex string.
std::string file_hash_hex(const std::filesystem::path& path);
uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 1469598103934665603ull);

}  // namespace cfmsep

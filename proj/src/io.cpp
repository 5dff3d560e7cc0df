#include "cfmsep/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

namespace cfmsep {

void write_container(const std::filesystem::path& path, const char magic[9], uint16_t version,
                     const nlohmann::json& meta, const std::vector<NamedTensor>& tensors) {
    nlohmann::json header;
    header["meta"] = meta;
    nlohmann::json idx = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& t : tensors) {
        idx.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.data.size() * sizeof(float);
    }
    header["tensors"] = idx;
    const std::string hstr = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(magic, 8);
    const uint16_t v = version;
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    const uint32_t hlen = static_cast<uint32_t>(hstr.size());
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hstr.data(), hstr.size());
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    if (!out) throw IoError("short write: " + path.string());
}

Container read_container(const std::filesystem::path& path, const char magic[9]) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    char m[8];
    in.read(m, 8);
    if (!in || std::memcmp(m, magic, 8) != 0)
        throw IoError("bad magic in " + path.string() + " (expected " + std::string(magic, 8) + ")");
    uint16_t version = 0;
    uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in) throw IoError("truncated header in " + path.string());
    if (version != 1)
        throw IoError("unsupported version " + std::to_string(version) + " in " + path.string());
    std::string hstr(hlen, '\0');
    in.read(hstr.data(), hlen);
    if (!in) throw IoError("truncated header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hstr);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt header in " + path.string() + ": " + e.what());
    }

    Container c;
    c.version = version;
    c.meta = header.value("meta", nlohmann::json::object());
    const auto payload_start = in.tellg();
    in.seekg(0, std::ios::end);
    const uint64_t payload_bytes = static_cast<uint64_t>(in.tellg() - payload_start);

    for (const auto& e : header.at("tensors")) {
        NamedTensor t;
        t.name = e.at("name").get<std::string>();
        t.shape = e.at("shape").get<std::vector<int64_t>>();
        const uint64_t offset = e.at("offset").get<uint64_t>();
        int64_t numel = 1;
        for (int64_t d : t.shape) numel *= d;
        if (offset + numel * sizeof(float) > payload_bytes)
            throw IoError("truncated payload in " + path.string() + " at tensor '" + t.name + "'");
        t.data.resize(numel);
        in.seekg(payload_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(t.data.data()), numel * sizeof(float));
        if (!in) throw IoError("truncated payload in " + path.string());
        c.index[t.name] = c.tensors.size();
        c.tensors.push_back(std::move(t));
    }
    return c;
}

uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string file_hash_hex(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    uint64_t h = 1469598103934665603ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a_bytes(buf, static_cast<size_t>(in.gcount()), h);
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

}  // namespace cfmsep

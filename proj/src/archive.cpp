#include "tsattr/archive.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace tsattr {

using nlohmann::json;

void Archive::put(const std::string& name, Tensor t) {
    for (auto& e : entries)
        if (e.first == name) {
            e.second = std::move(t);
            return;
        }
    entries.emplace_back(name, std::move(t));
}

bool Archive::has(const std::string& name) const {
    for (const auto& e : entries)
        if (e.first == name) return true;
    return false;
}

const Tensor& Archive::get(const std::string& name) const {
    for (const auto& e : entries)
        if (e.first == name) return e.second;
    throw std::out_of_range("archive: no tensor named " + name);
}

static void put_u64_le(std::string& out, uint64_t x) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

static void put_f64_le(std::string& out, double d) {
    uint64_t x;
    std::memcpy(&x, &d, 8);
    put_u64_le(out, x);
}

static uint64_t get_u64_le(const unsigned char* p) {
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(p[i]) << (8 * i);
    return x;
}

void Archive::save(const std::string& path) const {
    json header;
    header["tensors"] = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : entries) {
        header["tensors"].push_back({{"name", name},
                                     {"shape", t.shape},
                                     {"dtype", "f64"},
                                     {"byte_offset", offset}});
        offset += static_cast<uint64_t>(t.numel()) * 8;
    }
    std::string hs = header.dump();
    std::string blob;
    blob.reserve(8 + hs.size() + offset);
    put_u64_le(blob, hs.size());
    blob += hs;
    for (const auto& [name, t] : entries)
        for (double d : t.v) put_f64_le(blob, d);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("archive: cannot open for write: " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("archive: write failed: " + path);
}

Archive Archive::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("archive: cannot open: " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (blob.size() < 8) throw std::runtime_error("archive: truncated file: " + path);
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    uint64_t hlen = get_u64_le(p);
    if (8 + hlen > blob.size()) throw std::runtime_error("archive: corrupt header length: " + path);
    json header = json::parse(blob.substr(8, hlen));
    const char* payload = blob.data() + 8 + hlen;
    size_t payload_size = blob.size() - 8 - hlen;

    Archive a;
    for (const auto& e : header.at("tensors")) {
        std::string name = e.at("name");
        if (e.at("dtype") != "f64") throw std::runtime_error("archive: unsupported dtype in " + path);
        std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
        uint64_t off = e.at("byte_offset");
        int64_t n = Tensor::numel_of(shape);
        if (off + static_cast<uint64_t>(n) * 8 > payload_size)
            throw std::runtime_error("archive: payload out of range for tensor " + name);
        Tensor t(shape);
        for (int64_t i = 0; i < n; ++i) {
            uint64_t x = get_u64_le(reinterpret_cast<const unsigned char*>(payload) + off + 8 * i);
            double d;
            std::memcpy(&d, &x, 8);
            t.v[static_cast<size_t>(i)] = d;
        }
        a.put(name, std::move(t));
    }
    return a;
}

}  // namespace tsattr

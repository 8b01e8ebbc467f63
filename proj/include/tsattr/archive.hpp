#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsattr/tensor.hpp"

namespace tsattr {

// Tensor archive: u64 little-endian header length, JSON header
// {"tensors":[{name, shape, dtype:"f64", byte_offset}]}, then the
// little-endian f64 payloads at the stated offsets (relative to payload
// start). Used for checkpoints, datasets and attribution files.
struct Archive {
    // insertion-ordered
    std::vector<std::pair<std::string, Tensor>> entries;

    void put(const std::string& name, Tensor t);
    bool has(const std::string& name) const;
    const Tensor& get(const std::string& name) const;

    void save(const std::string& path) const;
    static Archive load(const std::string& path);
};

}  // namespace tsattr

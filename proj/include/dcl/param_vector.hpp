#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcl/common.hpp"

namespace dcl {

/// One named block inside a flat parameter array.
struct LayerEntry {
    std::string name;
    size_t offset = 0;
    std::vector<size_t> shape;

    size_t size() const {
        size_t s = 1;
        for (size_t d : shape) s *= d;
        return s;
    }
};

using LayerMap = std::vector<LayerEntry>;

/// Flat 32-bit float parameter array plus the map of named layer blocks.
/// Blocks are disjoint, ordered by offset, and cover the whole array.
struct ParamVector {
    std::vector<float> values;
    LayerMap layout;

    size_t size() const { return values.size(); }

    bool layout_consistent() const {
        size_t expect = 0;
        for (const auto& e : layout) {
            if (e.offset != expect) return false;
            expect += e.size();
        }
        return expect == values.size();
    }
};

inline void append_u32_le(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline uint32_t read_u32_le(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline void append_f32_le(std::vector<uint8_t>& out, float f) {
    uint32_t bits;
    static_assert(sizeof(bits) == sizeof(f));
    std::memcpy(&bits, &f, sizeof(bits));
    append_u32_le(out, bits);
}

inline float read_f32_le(const uint8_t* p) {
    uint32_t bits = read_u32_le(p);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
}

/// Wire form: u32 count, then count little-endian 32-bit floats.
inline std::vector<uint8_t> serialize_params(const ParamVector& pv) {
    std::vector<uint8_t> out;
    out.reserve(4 + 4 * pv.values.size());
    append_u32_le(out, static_cast<uint32_t>(pv.values.size()));
    for (float f : pv.values) append_f32_le(out, f);
    return out;
}

inline std::vector<float> deserialize_params(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 4) throw std::invalid_argument("parameter blob truncated");
    uint32_t n = read_u32_le(bytes.data());
    if (bytes.size() != 4 + 4ull * n) throw std::invalid_argument("parameter blob length mismatch");
    std::vector<float> vals(n);
    for (uint32_t i = 0; i < n; ++i) vals[i] = read_f32_le(bytes.data() + 4 + 4ull * i);
    return vals;
}

} // namespace dcl

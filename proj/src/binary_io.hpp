#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

// Little-endian encoding helpers shared by the dataset and checkpoint formats.
namespace tdm::io {

template <typename T>
T to_little_endian(T value) {
    if constexpr (std::endian::native == std::endian::little) {
        return value;
    } else {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        std::memcpy(&value, bytes, sizeof(T));
        return value;
    }
}

template <typename T>
void append_le(std::string& out, T value) {
    value = to_little_endian(value);
    out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(const char* bytes) {
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return to_little_endian(value);
}

inline void append_f32(std::string& out, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
    } else {
        for (float v : values) append_le(out, v);
    }
}

inline std::vector<float> read_f32(const char* bytes, std::size_t count) {
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = read_le<float>(bytes + i * sizeof(float));
    return out;
}

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace tdm::io

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "rng.hpp"

namespace dfml {

// All artifact writes go through a temp file plus rename, so a crashed run
// never leaves a half-written artifact behind.
inline void atomic_write(const std::string& path, const std::string& contents) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(bool(f), "atomic_write: cannot open " + tmp);
        f.write(contents.data(), std::streamsize(contents.size()));
        require(bool(f), "atomic_write: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(bool(f), "read_file: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline uint64_t checksum_bytes(const void* data, size_t n) {
    return fnv1a64(std::string_view(static_cast<const char*>(data), n));
}

inline std::string checksum_hex(const std::vector<float>& v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  (unsigned long long)checksum_bytes(v.data(), v.size() * sizeof(float)));
    return buf;
}

// Weight blob: raw little-endian float32 in canonical parameter order.
inline void write_blob(const std::string& path, const std::vector<float>& v) {
    atomic_write(path, std::string(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float)));
}

inline std::vector<float> read_blob(const std::string& path) {
    std::string raw = read_file(path);
    require(raw.size() % sizeof(float) == 0, "read_blob: size not a multiple of 4: " + path);
    std::vector<float> v(raw.size() / sizeof(float));
    std::memcpy(v.data(), raw.data(), raw.size());
    return v;
}

inline std::string csv_escape_free(const std::string& s) {
    require(s.find(',') == std::string::npos && s.find('\n') == std::string::npos,
            "csv: field contains separator: " + s);
    return s;
}

inline std::string to_csv(const std::vector<std::string>& header, const std::vector<Vec>& rows) {
    std::ostringstream ss;
    ss.precision(17);
    for (size_t i = 0; i < header.size(); ++i) ss << (i ? "," : "") << csv_escape_free(header[i]);
    ss << "\n";
    for (const auto& r : rows) {
        require(r.size() == header.size(), "csv: row width mismatch");
        for (size_t i = 0; i < r.size(); ++i) ss << (i ? "," : "") << r[i];
        ss << "\n";
    }
    return ss.str();
}

}  // namespace dfml

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace snows {

using index_t = std::int64_t;
using Shape = std::vector<index_t>;

// Error taxonomy. The CLI maps these onto exit codes:
// validation (dimension/value/config) -> 2, numerical -> 3, I/O -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ValueError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline index_t shape_numel(const Shape& s) {
    index_t n = 1;
    for (index_t d : s) n *= d;
    return n;
}

// FNV-1a 64-bit, used for manifest hashes and RNG sub-stream derivation.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Log levels, controlled by the SNOWS_LOG env var (error|warn|info|debug).
enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel& log_level_storage() {
    static LogLevel lvl = [] {
        const char* e = std::getenv("SNOWS_LOG");
        if (!e) return LogLevel::warn;
        std::string v(e);
        if (v == "error") return LogLevel::error;
        if (v == "info") return LogLevel::info;
        if (v == "debug") return LogLevel::debug;
        return LogLevel::warn;
    }();
    return lvl;
}

inline LogLevel log_level() { return log_level_storage(); }

inline void log_message(LogLevel lvl, const std::string& msg) {
    if (lvl > log_level()) return;
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::fprintf(stderr, "[snows:%s] %s\n", names[static_cast<int>(lvl)], msg.c_str());
}

}  // namespace snows

#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cmm {

// Error taxonomy. Everything user-facing derives from cmm::error so the CLI
// can catch one type and print the message.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration or dimension mismatch detected before any work runs.
struct config_error : error {
    using error::error;
};

// Input data violates an invariant (bad book row, non-monotone timestamps...).
struct data_error : error {
    using error::error;
};

// Malformed text that cannot be parsed; message carries the line/row number.
struct parse_error : error {
    using error::error;
};

// API misuse (consumed tape reuse, missing precondition at a call site).
struct usage_error : error {
    using error::error;
};

// A pipeline command was invoked before its upstream artifact exists; the
// message names the producing command.
struct dependency_error : error {
    using error::error;
};

// ---------------------------------------------------------------------------

inline constexpr uint64_t kFnvOffset = 1469598103934665603ULL;
inline constexpr uint64_t kFnvPrime = 1099511628211ULL;

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// Locale-free shortest round-trip formatting for doubles; used everywhere a
// number lands in a text artifact so reruns are byte-identical.
inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw error("format_double: to_chars failed");
    return std::string(buf, ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw parse_error("invalid number '" + std::string(s) + "' in " + context);
    return v;
}

inline int64_t parse_int(std::string_view s, const std::string& context) {
    int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw parse_error("invalid integer '" + std::string(s) + "' in " + context);
    return v;
}

}  // namespace cmm

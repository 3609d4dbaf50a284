#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "cmm/common.hpp"
#include "cmm/net.hpp"

namespace cmm::ckpt {

// Checkpoint container: fixed magic + format version, then named sections,
// each length-prefixed. All integers and doubles are serialized explicitly
// little-endian, so files are portable and byte-stable across runs.
//
// The model section holds the full architecture description followed by
// per-module flat parameter arrays and a trailing FNV-1a checksum.

inline constexpr char kMagic[8] = {'C', 'M', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kFormatVersion = 1;

class Writer {
public:
    void u8(uint8_t v) { buf_.push_back(v); }

    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }

    void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }

    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }

    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }

    void doubles(const std::vector<double>& v) {
        u64(v.size());
        for (double x : v) f64(x);
    }

    std::vector<uint8_t> take() { return std::move(buf_); }
    const std::vector<uint8_t>& bytes() const { return buf_; }

private:
    std::vector<uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(const std::vector<uint8_t>& buf) : buf_(buf) {}

    uint8_t u8() {
        need(1);
        return buf_[pos_++];
    }

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_++]) << (8 * i);
        return v;
    }

    int32_t i32() { return static_cast<int32_t>(u32()); }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf_[pos_++]) << (8 * i);
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::vector<double> doubles() {
        const uint64_t n = u64();
        need(n * 8);
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }

    bool done() const { return pos_ == buf_.size(); }
    size_t pos() const { return pos_; }

private:
    void need(size_t n) {
        if (pos_ + n > buf_.size()) throw parse_error("checkpoint: truncated section");
    }

    const std::vector<uint8_t>& buf_;
    size_t pos_ = 0;
};

using Sections = std::vector<std::pair<std::string, std::vector<uint8_t>>>;

inline void save(const std::filesystem::path& path, const Sections& sections) {
    Writer w;
    for (char c : kMagic) w.u8(static_cast<uint8_t>(c));
    w.u32(kFormatVersion);
    w.u32(static_cast<uint32_t>(sections.size()));
    for (const auto& [name, payload] : sections) {
        w.str(name);
        w.u64(payload.size());
        for (uint8_t b : payload) w.u8(b);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open checkpoint for writing: " + path.string());
    const auto& bytes = w.bytes();
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw data_error("checkpoint write failed: " + path.string());
}

inline Sections load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw dependency_error("checkpoint not found: " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(bytes);
    for (char c : kMagic)
        if (r.u8() != static_cast<uint8_t>(c)) throw parse_error("checkpoint: bad magic in " + path.string());
    const uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw parse_error("checkpoint: unsupported format version " + std::to_string(version));
    const uint32_t n = r.u32();
    Sections out;
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = r.str();
        const uint64_t len = r.u64();
        std::vector<uint8_t> payload(len);
        for (auto& b : payload) b = r.u8();
        out.emplace_back(std::move(name), std::move(payload));
    }
    return out;
}

inline const std::vector<uint8_t>& section(const Sections& s, const std::string& name) {
    for (const auto& [n, payload] : s)
        if (n == name) return payload;
    throw parse_error("checkpoint: missing section '" + name + "'");
}

// ---------------------------------------------------------------------------
// LayeredModel encoding
// ---------------------------------------------------------------------------

inline std::vector<uint8_t> encode_model(const net::LayeredModel& m) {
    Writer w;
    w.u32(static_cast<uint32_t>(m.input_width));
    w.u32(static_cast<uint32_t>(m.feature_dim));
    w.u32(static_cast<uint32_t>(m.seq_len));
    w.u32(static_cast<uint32_t>(m.layer_count));
    w.u8(m.has_embedding ? 1 : 0);
    w.i32(m.emb_w);
    w.i32(m.emb_b);
    w.i32(m.emb_pos);
    w.u32(static_cast<uint32_t>(m.blocks.size()));
    for (const auto& b : m.blocks) {
        w.u8(static_cast<uint8_t>(b.kind));
        w.u8(static_cast<uint8_t>(b.act));
        w.i32(b.in_dim);
        w.i32(b.out_dim);
        w.i32(b.hidden);
        w.i32(b.col_begin);
        w.u32(static_cast<uint32_t>(b.params.size()));
        for (int p : b.params) w.i32(p);
    }
    w.u32(static_cast<uint32_t>(m.heads.size()));
    for (const auto& h : m.heads) {
        w.str(h.name);
        w.i32(h.tap);
        w.i32(h.w);
        w.i32(h.b);
    }
    w.u32(static_cast<uint32_t>(m.modules.size()));
    for (const auto& mod : m.modules) {
        w.str(mod.name);
        w.u32(static_cast<uint32_t>(mod.params.size()));
        for (int p : mod.params) w.i32(p);
    }
    w.u32(static_cast<uint32_t>(m.params.size()));
    for (const auto& p : m.params) {
        w.i32(p.rows);
        w.i32(p.cols);
    }
    for (const auto& p : m.params) {
        if (!p.all_finite()) throw data_error("encode_model: non-finite parameter");
        for (double x : p.v) w.f64(x);
    }
    w.u64(fnv1a64(w.bytes().data(), w.bytes().size()));
    return w.take();
}

inline net::LayeredModel decode_model(const std::vector<uint8_t>& payload) {
    Reader r(payload);
    net::LayeredModel m;
    m.input_width = static_cast<int>(r.u32());
    m.feature_dim = static_cast<int>(r.u32());
    m.seq_len = static_cast<int>(r.u32());
    m.layer_count = static_cast<int>(r.u32());
    m.has_embedding = r.u8() != 0;
    m.emb_w = r.i32();
    m.emb_b = r.i32();
    m.emb_pos = r.i32();
    const uint32_t nb = r.u32();
    for (uint32_t i = 0; i < nb; ++i) {
        net::BlockDesc b;
        b.kind = static_cast<net::BlockKind>(r.u8());
        b.act = static_cast<net::Act>(r.u8());
        b.in_dim = r.i32();
        b.out_dim = r.i32();
        b.hidden = r.i32();
        b.col_begin = r.i32();
        const uint32_t np = r.u32();
        for (uint32_t j = 0; j < np; ++j) b.params.push_back(r.i32());
        m.blocks.push_back(std::move(b));
    }
    const uint32_t nh = r.u32();
    for (uint32_t i = 0; i < nh; ++i) {
        net::HeadDesc h;
        h.name = r.str();
        h.tap = r.i32();
        h.w = r.i32();
        h.b = r.i32();
        m.heads.push_back(std::move(h));
    }
    const uint32_t nm = r.u32();
    for (uint32_t i = 0; i < nm; ++i) {
        net::ModuleDesc mod;
        mod.name = r.str();
        const uint32_t np = r.u32();
        for (uint32_t j = 0; j < np; ++j) mod.params.push_back(r.i32());
        m.modules.push_back(std::move(mod));
    }
    const uint32_t npar = r.u32();
    std::vector<std::pair<int, int>> shapes;
    for (uint32_t i = 0; i < npar; ++i) {
        const int rows = r.i32();
        const int cols = r.i32();
        shapes.emplace_back(rows, cols);
    }
    const size_t payload_end_before_params = r.pos();
    (void)payload_end_before_params;
    for (auto [rows, cols] : shapes) {
        Tensor2 t(rows, cols);
        for (auto& x : t.v) x = r.f64();
        m.params.push_back(std::move(t));
    }
    const size_t hashed = r.pos();
    const uint64_t stored = r.u64();
    if (fnv1a64(payload.data(), hashed) != stored)
        throw parse_error("checkpoint: model section checksum mismatch");
    return m;
}

}  // namespace cmm::ckpt

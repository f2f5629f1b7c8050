#pragma once

// File formats and small serialization helpers. All binary formats are
// little-endian; loaders refuse byte-swapped hosts rather than guessing.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "flowcal/tensor.hpp"

namespace flowcal {

namespace detail {
inline bool host_is_little_endian() {
    const uint32_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}
inline void require_little_endian() {
    if (!host_is_little_endian())
        throw IoError("binary formats are little-endian; big-endian hosts are unsupported");
}
} // namespace detail

// ---- byte buffers ----------------------------------------------------------

struct ByteWriter {
    std::vector<uint8_t> bytes;

    void raw(const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void magic(const char m[5]) { raw(m, 4); }
    void f64s(const Tensor& t) { raw(t.data(), static_cast<size_t>(t.numel()) * 8); }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
};

struct ByteReader {
    const std::vector<uint8_t>& bytes;
    size_t at = 0;

    explicit ByteReader(const std::vector<uint8_t>& b) : bytes(b) {}

    void raw(void* p, size_t n) {
        if (at + n > bytes.size()) throw IoError("truncated file: wanted " + std::to_string(n) +
                                                 " bytes at offset " + std::to_string(at));
        std::memcpy(p, bytes.data() + at, n);
        at += n;
    }
    uint32_t u32() {
        uint32_t v;
        raw(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        raw(&v, 8);
        return v;
    }
    double f64() {
        double v;
        raw(&v, 8);
        return v;
    }
    void expect_magic(const char m[5], const std::string& what) {
        char got[4];
        raw(got, 4);
        if (std::memcmp(got, m, 4) != 0) throw IoError("corrupt " + what + ": bad magic bytes");
    }
    std::string str() {
        const uint64_t n = u64();
        if (at + n > bytes.size()) throw IoError("truncated file: bad string length");
        std::string s(reinterpret_cast<const char*>(bytes.data() + at), n);
        at += n;
        return s;
    }
    void done(const std::string& what) {
        if (at != bytes.size()) throw IoError("corrupt " + what + ": trailing bytes");
    }
};

// ---- filesystem ------------------------------------------------------------

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline void write_text_file(const std::string& path, const std::string& text) {
    write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

inline std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    f.seekg(0, std::ios::end);
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw IoError("read failed: " + path);
    return bytes;
}

// ---- hashing (FNV-1a 64) ---------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ULL) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string hash_bytes_hex(const std::vector<uint8_t>& b) {
    return hash_hex(fnv1a64(b.data(), b.size()));
}

inline std::string hash_tensor_hex(const Tensor& t) {
    uint64_t h = fnv1a64(t.shape().data(), t.shape().size() * sizeof(int64_t));
    h = fnv1a64(t.data(), static_cast<size_t>(t.numel()) * 8, h);
    return hash_hex(h);
}

inline std::string hash_string_hex(const std::string& s) {
    return hash_hex(fnv1a64(s.data(), s.size()));
}

// ---- raw tensor format -----------------------------------------------------
//
// "FTEN", u32 version, u32 rank, u64 extents..., f64 data (row-major).

inline std::vector<uint8_t> tensor_to_bytes(const Tensor& t) {
    detail::require_little_endian();
    ByteWriter w;
    w.magic("FTEN");
    w.u32(1);
    w.u32(static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) w.u64(static_cast<uint64_t>(d));
    w.f64s(t);
    return std::move(w.bytes);
}

inline Tensor tensor_from_bytes(const std::vector<uint8_t>& bytes) {
    detail::require_little_endian();
    ByteReader r(bytes);
    r.expect_magic("FTEN", "tensor file");
    const uint32_t version = r.u32();
    if (version != 1) throw IoError("tensor file: unsupported version " + std::to_string(version));
    const uint32_t rank = r.u32();
    if (rank > 8) throw IoError("tensor file: implausible rank " + std::to_string(rank));
    Shape shape;
    for (uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(r.u64()));
    Tensor t(shape);
    r.raw(t.data(), static_cast<size_t>(t.numel()) * 8);
    r.done("tensor file");
    return t;
}

inline void write_tensor(const std::string& path, const Tensor& t) {
    write_file(path, tensor_to_bytes(t));
}

inline Tensor read_tensor(const std::string& path) { return tensor_from_bytes(read_file(path)); }

// ---- 16-bit PGM (P5) -------------------------------------------------------
//
// Values are affinely mapped from [min, max] to [0, 65535]; the caller is
// expected to record min/max in a sidecar. Samples are big-endian per the
// PGM specification.

struct PgmScale {
    double min = 0.0;
    double max = 0.0;
};

inline PgmScale write_pgm16(const std::string& path, const Tensor& img) {
    if (img.rank() != 2) throw ValidationError("write_pgm16: image must be rank-2");
    PgmScale sc;
    sc.min = img[0];
    sc.max = img[0];
    for (int64_t i = 0; i < img.numel(); ++i) {
        sc.min = std::min(sc.min, img[i]);
        sc.max = std::max(sc.max, img[i]);
    }
    const double span = (sc.max > sc.min) ? (sc.max - sc.min) : 1.0;
    std::ostringstream head;
    head << "P5\n" << img.dim(1) << " " << img.dim(0) << "\n65535\n";
    std::vector<uint8_t> bytes(head.str().begin(), head.str().end());
    for (int64_t i = 0; i < img.numel(); ++i) {
        const double u = (img[i] - sc.min) / span;
        const uint16_t q = static_cast<uint16_t>(std::lround(u * 65535.0));
        bytes.push_back(static_cast<uint8_t>(q >> 8));
        bytes.push_back(static_cast<uint8_t>(q & 0xFF));
    }
    write_file(path, bytes);
    return sc;
}

// ---- CSV -------------------------------------------------------------------

class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : cols_(header.size()) {
        row(header);
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != cols_)
            throw ValidationError("csv: row has " + std::to_string(cells.size()) + " cells, expected " +
                                  std::to_string(cols_));
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

    static std::string num(double v) {
        std::ostringstream os;
        os << std::setprecision(17) << v;
        return os.str();
    }

    std::string str() const { return out_.str(); }
    void save(const std::string& path) const { write_text_file(path, out_.str()); }

private:
    size_t cols_;
    std::ostringstream out_;
};

} // namespace flowcal

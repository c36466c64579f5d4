// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 TailForge Contributors
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tailforge {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operand shapes do not conform to an operation's shape rule.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent configuration; carries the offending field path.
class ConfigError : public Error {
public:
    ConfigError(std::string field, const std::string& msg)
        : Error(field + ": " + msg), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

/// File-format or filesystem failure.
class IoError : public Error {
public:
    using Error::Error;
};

/// Non-finite value where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Shapes and dense tensors
// ---------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline void require_shape(bool ok, const std::string& op, const Shape& a, const Shape& b) {
    if (!ok)
        throw ShapeError(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// Plain dense value tensor (no gradient); the persistent storage type for
/// parameters, datasets and batches.
struct TensorValue {
    Shape shape;
    std::vector<double> data;

    TensorValue() = default;
    explicit TensorValue(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(numel(shape), fill) {}
    TensorValue(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape))
            throw ShapeError("TensorValue: " + std::to_string(data.size()) +
                             " values for shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

inline bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Deterministic random numbers
//
// Every randomized component draws through this wrapper so that runs are
// reproducible from their seed alone. The double transforms are hand-rolled
// because std::uniform_real_distribution is implementation-defined.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (cached spare).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so log() is safe.
        double u1 = static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;
        double u2 = uniform();
        double m = std::sqrt(-2.0 * std::log(u1));
        spare_ = m * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return m * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform index in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), std::size_t{0});
        shuffle(p);
        return p;
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Little-endian binary IO
// ---------------------------------------------------------------------------

namespace io {

inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.put(static_cast<char>(v));
}

inline void write_u16(std::ostream& os, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    os.write(b, 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void write_f32(std::ostream& os, float v) {
    write_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_f64(std::ostream& os, double v) {
    auto u = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
    int c = is.get();
    if (c == EOF) throw IoError(std::string("truncated file reading ") + what);
    return static_cast<std::uint8_t>(c);
}

inline std::uint16_t read_u16(std::istream& is, const char* what) {
    std::uint16_t v = read_u8(is, what);
    v |= static_cast<std::uint16_t>(read_u8(is, what)) << 8;
    return v;
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(read_u8(is, what)) << (8 * i);
    return v;
}

inline float read_f32(std::istream& is, const char* what) {
    return std::bit_cast<float>(read_u32(is, what));
}

inline double read_f64(std::istream& is, const char* what) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(read_u8(is, what)) << (8 * i);
    return std::bit_cast<double>(v);
}

} // namespace io

} // namespace tailforge

#pragma once

// SRT tensor files: "SRT1" | u8 dtype (1 = f32, 2 = u8) | u8 ndim (1..4) |
// ndim x u32 LE dims | C-order LE payload. Nothing else is allowed in the file.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "srpl/error.hpp"
#include "srpl/image.hpp"
#include "srpl/pgm.hpp"

namespace srpl {

enum class DType : std::uint8_t { f32 = 1, u8 = 2 };

/// Dense C-order tensor, the unit of exchange with external processes.
struct Tensor {
    DType dtype = DType::f32;
    std::vector<std::uint32_t> dims;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline constexpr std::size_t kMaxTensorElements = std::size_t{1} << 31;

inline std::string encode_srt(const Tensor& t) {
    if (t.dims.empty() || t.dims.size() > 4) throw FormatError("SRT: ndim must be 1..4");
    const std::size_t n = t.element_count();
    const std::size_t stored = t.dtype == DType::f32 ? t.f32.size() : t.u8.size();
    if (stored != n) throw ShapeError("SRT: payload length does not match dims");

    std::string out = "SRT1";
    out.push_back(static_cast<char>(t.dtype));
    out.push_back(static_cast<char>(t.dims.size()));
    auto put_u32 = [&out](std::uint32_t v) {
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
    };
    for (auto d : t.dims) put_u32(d);
    if (t.dtype == DType::f32) {
        out.reserve(out.size() + 4 * n);
        for (float v : t.f32) put_u32(std::bit_cast<std::uint32_t>(v));
    } else {
        out.append(reinterpret_cast<const char*>(t.u8.data()), t.u8.size());
    }
    return out;
}

inline Tensor decode_srt(const std::vector<char>& buf) {
    auto byte = [&buf](std::size_t i) { return static_cast<std::uint8_t>(buf[i]); };
    if (buf.size() < 6 || std::memcmp(buf.data(), "SRT1", 4) != 0) throw FormatError("SRT: bad magic");
    Tensor t;
    const auto code = byte(4);
    if (code != 1 && code != 2) throw FormatError("SRT: unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<DType>(code);
    const std::size_t ndim = byte(5);
    if (ndim < 1 || ndim > 4) throw FormatError("SRT: ndim must be 1..4");
    std::size_t pos = 6;
    if (buf.size() < pos + 4 * ndim) throw FormatError("SRT: truncated header");
    auto get_u32 = [&](std::size_t at) {
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(byte(at + b)) << (8 * b);
        return v;
    };
    std::size_t n = 1;
    for (std::size_t d = 0; d < ndim; ++d, pos += 4) {
        const auto dim = get_u32(pos);
        t.dims.push_back(dim);
        if (dim != 0 && n > kMaxTensorElements / dim) throw FormatError("SRT: dims overflow");
        n *= dim;
    }
    const std::size_t width = t.dtype == DType::f32 ? 4 : 1;
    if (buf.size() - pos != n * width) {
        throw FormatError("SRT: payload is " + std::to_string(buf.size() - pos) + " bytes, expected " +
                          std::to_string(n * width));
    }
    if (t.dtype == DType::f32) {
        t.f32.resize(n);
        for (std::size_t i = 0; i < n; ++i) t.f32[i] = std::bit_cast<float>(get_u32(pos + 4 * i));
    } else {
        t.u8.assign(reinterpret_cast<const std::uint8_t*>(buf.data()) + pos,
                    reinterpret_cast<const std::uint8_t*>(buf.data()) + buf.size());
    }
    return t;
}

inline Tensor load_srt(const std::filesystem::path& path) { return decode_srt(detail::read_file(path)); }

inline void save_srt(const Tensor& t, const std::filesystem::path& path) {
    detail::write_file(path, encode_srt(t));
}

// Conversions between rasters and tensors.

inline Tensor to_tensor(const GrayImage& img) {
    return {DType::f32,
            {static_cast<std::uint32_t>(img.height()), static_cast<std::uint32_t>(img.width())},
            {img.data().begin(), img.data().end()},
            {}};
}

inline Tensor to_tensor(const RgbImage& img) {
    Tensor t{DType::f32,
             {3u, static_cast<std::uint32_t>(img.height()), static_cast<std::uint32_t>(img.width())},
             {},
             {}};
    for (int c = 0; c < 3; ++c) {
        const auto d = img.channel(c).data();
        t.f32.insert(t.f32.end(), d.begin(), d.end());
    }
    return t;
}

inline Tensor to_tensor(const ProbMap& p) {
    return {DType::f32,
            {static_cast<std::uint32_t>(p.num_classes()), static_cast<std::uint32_t>(p.height()),
             static_cast<std::uint32_t>(p.width())},
            {p.data().begin(), p.data().end()},
            {}};
}

inline Tensor to_tensor(const LabelMask& m) {
    return {DType::u8,
            {static_cast<std::uint32_t>(m.height()), static_cast<std::uint32_t>(m.width())},
            {},
            {m.data().begin(), m.data().end()}};
}

namespace detail {

inline void expect(const Tensor& t, DType dtype, std::size_t ndim, const char* what) {
    if (t.dtype != dtype || t.dims.size() != ndim) {
        throw ShapeError(std::string("tensor is not a valid ") + what);
    }
    for (auto d : t.dims) {
        if (d == 0 || d > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
            throw ShapeError(std::string("tensor dims out of range for ") + what);
        }
    }
}

}  // namespace detail

inline GrayImage gray_from_tensor(const Tensor& t) {
    detail::expect(t, DType::f32, 2, "GrayImage (H,W) f32");
    return GrayImage(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]), t.f32);
}

inline RgbImage rgb_from_tensor(const Tensor& t) {
    detail::expect(t, DType::f32, 3, "RgbImage (3,H,W) f32");
    if (t.dims[0] != 3) throw ShapeError("RgbImage tensor must have 3 channels");
    const int h = static_cast<int>(t.dims[1]);
    const int w = static_cast<int>(t.dims[2]);
    const std::size_t n = static_cast<std::size_t>(w) * h;
    auto channel = [&](int c) {
        return GrayImage(w, h, std::vector<float>(t.f32.begin() + c * n, t.f32.begin() + (c + 1) * n));
    };
    return RgbImage(channel(0), channel(1), channel(2));
}

inline ProbMap probmap_from_tensor(const Tensor& t) {
    detail::expect(t, DType::f32, 3, "ProbMap (C,H,W) f32");
    return ProbMap(static_cast<int>(t.dims[2]), static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]),
                   t.f32);
}

inline LabelMask mask_from_tensor(const Tensor& t, int num_classes = 2) {
    detail::expect(t, DType::u8, 2, "LabelMask (H,W) u8");
    return LabelMask(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]), t.u8, num_classes);
}

}  // namespace srpl

#pragma once

// Binary 8-bit PGM ("P5", maxval 255) reader and writer.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "srpl/error.hpp"
#include "srpl/image.hpp"

namespace srpl {

namespace detail {

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string pgm_token(const std::vector<char>& buf, std::size_t& pos) {
    while (pos < buf.size()) {
        const char ch = buf[pos];
        if (ch == '#') {
            while (pos < buf.size() && buf[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(ch))) {
            ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) tok += buf[pos++];
    if (tok.empty()) throw FormatError("PGM: truncated header");
    return tok;
}

inline int pgm_int(const std::string& tok) {
    if (tok.empty() || tok.size() > 9) throw FormatError("PGM: bad header field '" + tok + "'");
    for (char ch : tok) {
        if (!std::isdigit(static_cast<unsigned char>(ch))) throw FormatError("PGM: bad header field '" + tok + "'");
    }
    return std::stoi(tok);
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + path.string());
}

}  // namespace detail

inline GrayImage decode_pgm(const std::vector<char>& buf) {
    std::size_t pos = 0;
    if (detail::pgm_token(buf, pos) != "P5") throw FormatError("PGM: missing P5 magic");
    const int width = detail::pgm_int(detail::pgm_token(buf, pos));
    const int height = detail::pgm_int(detail::pgm_token(buf, pos));
    const int maxval = detail::pgm_int(detail::pgm_token(buf, pos));
    if (width < 1 || height < 1) throw FormatError("PGM: non-positive dimensions");
    if (maxval != 255) throw UnsupportedFormat("PGM: maxval " + std::to_string(maxval) + " (only 255 supported)");
    if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
        throw FormatError("PGM: missing separator before payload");
    }
    ++pos;
    const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    if (buf.size() - pos != n) throw FormatError("PGM: payload size mismatch");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        data[i] = static_cast<float>(static_cast<unsigned char>(buf[pos + i]) / 255.0);
    }
    return GrayImage(width, height, std::move(data));
}

inline std::string encode_pgm(const GrayImage& img) {
    std::string out = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
    out.reserve(out.size() + img.size());
    for (float v : img.data()) out.push_back(static_cast<char>(quantize_value(v, 256)));
    return out;
}

inline GrayImage load_pgm(const std::filesystem::path& path) { return decode_pgm(detail::read_file(path)); }

inline void save_pgm(const GrayImage& img, const std::filesystem::path& path) {
    detail::write_file(path, encode_pgm(img));
}

}  // namespace srpl

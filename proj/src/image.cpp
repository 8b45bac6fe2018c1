#include "pban/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "pban/errors.hpp"

namespace pban {

namespace {

constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::string printable_magic(std::span<const std::uint8_t> bytes) {
    std::string out;
    for (std::size_t i = 0; i < std::min<std::size_t>(4, bytes.size()); ++i) {
        const unsigned char c = bytes[i];
        if (std::isprint(c)) {
            out += char(c);
        } else {
            static const char* hex = "0123456789abcdef";
            out += "\\x";
            out += hex[c >> 4];
            out += hex[c & 15];
        }
    }
    return out;
}

ImageRGB from_interleaved(Index width, Index height, const std::uint8_t* rgb) {
    ImageRGB img{width, height, TensorF({3, height, width})};
    const Index plane = width * height;
    for (Index i = 0; i < plane; ++i) {
        for (Index c = 0; c < 3; ++c) img.pixels[c * plane + i] = float(rgb[3 * i + c]) / 255.0f;
    }
    return img;
}

ImageRGB decode_png(std::span<const std::uint8_t> bytes) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw DecodeError("png: " + msg);
    }
    // RGBA output keeps the colour channels unpremultiplied; alpha is discarded below.
    image.format = PNG_FORMAT_RGBA;
    std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw DecodeError("png: " + msg);
    }
    const Index w = image.width, h = image.height;
    std::vector<std::uint8_t> rgb(std::size_t(3 * w * h));
    for (Index i = 0; i < w * h; ++i) {
        for (Index c = 0; c < 3; ++c) rgb[3 * i + c] = rgba[4 * i + c];
    }
    return from_interleaved(w, h, rgb.data());
}

// Header token of a PPM file; skips whitespace and '#' comments.
std::string ppm_token(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(bytes[pos])) {
            ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') tok += char(bytes[pos++]);
    if (tok.empty()) throw DecodeError("ppm: truncated header");
    return tok;
}

Index ppm_number(std::span<const std::uint8_t> bytes, std::size_t& pos, const char* what) {
    const std::string tok = ppm_token(bytes, pos);
    if (!std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; }) || tok.size() > 9) {
        throw DecodeError(std::string("ppm: bad ") + what + " '" + tok + "'");
    }
    return std::stoll(tok);
}

ImageRGB decode_ppm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 2;
    const Index w = ppm_number(bytes, pos, "width");
    const Index h = ppm_number(bytes, pos, "height");
    const Index maxval = ppm_number(bytes, pos, "maxval");
    if (w < 1 || h < 1) throw DecodeError("ppm: empty image");
    if (maxval != 255) throw FormatError("ppm: maxval " + std::to_string(maxval) + " unsupported (need 255)");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DecodeError("ppm: truncated header");
    ++pos;
    const std::size_t need = std::size_t(3 * w * h);
    if (bytes.size() - pos < need) {
        throw DecodeError("ppm: truncated pixel data (" + std::to_string(bytes.size() - pos) + " of " +
                          std::to_string(need) + " bytes)");
    }
    return from_interleaved(w, h, bytes.data() + pos);
}

}  // namespace

ImageRGB decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 8 && std::equal(std::begin(kPngSignature), std::end(kPngSignature), bytes.begin())) {
        return decode_png(bytes);
    }
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
    throw FormatError("unrecognised image magic '" + printable_magic(bytes) + "'");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("cannot read '" + path.string() + "'");
    return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("cannot write '" + path.string() + "'");
}

ImageRGB read_image(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode_image(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const DecodeError& e) {
        throw DecodeError(path.string() + ": " + e.what());
    }
}

std::vector<std::uint8_t> encode_png_gray(Index width, Index height, std::span<const std::uint8_t> pixels) {
    if (width < 1 || height < 1 || Index(pixels.size()) != width * height) {
        throw DimensionError("encode_png_gray: " + std::to_string(pixels.size()) + " pixels for " +
                             std::to_string(width) + "x" + std::to_string(height));
    }
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = png_uint_32(width);
    image.height = png_uint_32(height);
    image.format = PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
        throw IoError(std::string("png encode: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
        throw IoError(std::string("png encode: ") + image.message);
    }
    out.resize(size);
    return out;
}

std::vector<TensorF> extract_patches(const ImageRGB& img, Index size) {
    if (size < 1) throw ParameterError("patch size must be >= 1, got " + std::to_string(size));
    const Index rows = img.height / size, cols = img.width / size;
    std::vector<TensorF> patches;
    patches.reserve(std::size_t(rows * cols));
    for (Index r = 0; r < rows; ++r) {
        for (Index q = 0; q < cols; ++q) {
            TensorF p({3, size, size});
            for (Index c = 0; c < 3; ++c)
                for (Index y = 0; y < size; ++y)
                    for (Index x = 0; x < size; ++x)
                        p[(c * size + y) * size + x] =
                            img.pixels[(c * img.height + r * size + y) * img.width + q * size + x];
            patches.push_back(std::move(p));
        }
    }
    return patches;
}

}  // namespace pban

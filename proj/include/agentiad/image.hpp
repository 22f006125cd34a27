// SPDX-License-Identifier: Apache-2.0
#pragma once

// 8-bit raster I/O (PNG read/write, JPEG read) plus the hashing and data-URL
// helpers used for replay and endpoint payloads.

#include <cctype>
#include <csetjmp>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <jpeglib.h>
#include <openssl/evp.h>
#include <png.h>

#include "errors.hpp"

namespace agentiad {

/// Interleaved 8-bit raster. channels is 1 (gray), 2 (gray+alpha), 3 (RGB) or 4 (RGBA).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

    [[nodiscard]] bool empty() const noexcept { return width <= 0 || height <= 0; }
    [[nodiscard]] std::size_t stride() const noexcept { return static_cast<std::size_t>(width) * channels; }

    std::uint8_t* at(int x, int y) noexcept { return pixels.data() + y * stride() + static_cast<std::size_t>(x) * channels; }
    [[nodiscard]] const std::uint8_t* at(int x, int y) const noexcept {
        return pixels.data() + y * stride() + static_cast<std::size_t>(x) * channels;
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Copy of the half-open pixel rectangle [x0, x1) x [y0, y1).
inline Image crop_pixels(const Image& src, int x0, int y0, int x1, int y1) {
    if (x0 < 0 || y0 < 0 || x1 > src.width || y1 > src.height || x0 >= x1 || y0 >= y1) {
        throw ContractViolation("crop rectangle outside image bounds");
    }
    Image out(x1 - x0, y1 - y0, src.channels);
    for (int y = y0; y < y1; ++y) {
        const auto* row = src.at(x0, y);
        std::copy(row, row + out.stride(), out.at(0, y - y0));
    }
    return out;
}

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Image decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        throw LoadError("invalid PNG " + name + ": " + img.message);
    }
    img.format &= (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_ALPHA);
    const int channels = PNG_IMAGE_PIXEL_CHANNELS(img.format);
    Image out(static_cast<int>(img.width), static_cast<int>(img.height), channels);
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw LoadError("invalid PNG " + name + ": " + msg);
    }
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

inline Image decode_jpeg(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    Image out;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw LoadError("invalid JPEG " + name + ": " + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    if (cinfo.jpeg_color_space != JCS_GRAYSCALE) cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    out.width = static_cast<int>(cinfo.output_width);
    out.height = static_cast<int>(cinfo.output_height);
    out.channels = cinfo.output_components;
    out.pixels.resize(out.stride() * out.height);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out.pixels.data() + cinfo.output_scanline * out.stride();
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

} // namespace detail

/// Decodes a PNG or JPEG file, detected by signature. 16-bit PNGs are reduced to 8 bits.
inline Image read_image(const std::filesystem::path& path) {
    const auto bytes = detail::read_bytes(path);
    if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return detail::decode_png(bytes, path.string());
    if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
        return detail::decode_jpeg(bytes, path.string());
    }
    throw LoadError("unsupported image format: " + path.string());
}

inline std::vector<std::uint8_t> encode_png(const Image& image) {
    if (image.empty() || image.channels < 1 || image.channels > 4) throw ContractViolation("cannot encode empty image");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    static constexpr png_uint_32 formats[] = {PNG_FORMAT_GRAY, PNG_FORMAT_GA, PNG_FORMAT_RGB, PNG_FORMAT_RGBA};
    img.format = formats[image.channels - 1];
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(img, size, 0, image.pixels.data(), 0, nullptr)) {
        throw LoadError(std::string("PNG encode failed: ") + img.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
        throw LoadError(std::string("PNG encode failed: ") + img.message);
    }
    out.resize(size);
    return out;
}

inline void write_png(const std::filesystem::path& path, const Image& image) {
    const auto bytes = encode_png(image);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr)) {
        throw std::runtime_error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xF]);
    }
    return out;
}

inline std::string sha256_file(const std::filesystem::path& path) {
    const auto bytes = detail::read_bytes(path);
    return sha256_hex({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::string mime_type_for(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    return "image/png";
}

/// `data:<mime>;base64,...` URL for inline image content items.
inline std::string image_data_url(const std::filesystem::path& path) {
    return "data:" + mime_type_for(path) + ";base64," + base64_encode(detail::read_bytes(path));
}

} // namespace agentiad

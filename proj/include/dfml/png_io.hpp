#pragma once

#include <png.h>

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace dfml {

inline uint8_t to_byte(double v) {
    double s = v * 255.0 + 0.5;
    if (s < 0.0) s = 0.0;
    if (s > 255.0) s = 255.0;
    return uint8_t(s);
}

// Writes one image (values in [0,1]) as 8-bit gray or RGB.
inline void write_png(const std::string& path, const TensorF& img, int b = 0) {
    require(img.c == 1 || img.c == 3, "write_png: need 1 or 3 channels");
    require(b >= 0 && b < img.n, "write_png: batch index out of range");
    png_image im{};
    im.version = PNG_IMAGE_VERSION;
    im.width = png_uint_32(img.w);
    im.height = png_uint_32(img.h);
    im.format = img.c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<uint8_t> buf(size_t(img.h) * img.w * img.c);
    size_t k = 0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < img.c; ++c) buf[k++] = to_byte(img.at(b, y, x, c));
    if (!png_image_write_to_file(&im, path.c_str(), 0, buf.data(), 0, nullptr))
        throw ValidationError("write_png: " + path + ": " + im.message);
}

// Tiles a batch into one image with a 1 px separator grid.
inline void save_image_grid(const std::string& path, const TensorF& batch, int cols = 6) {
    require(batch.n >= 1 && cols >= 1, "save_image_grid: empty input");
    int rows = (batch.n + cols - 1) / cols;
    TensorF sheet(1, rows * (batch.h + 1) + 1, cols * (batch.w + 1) + 1, batch.c);
    for (int b = 0; b < batch.n; ++b) {
        int oy = 1 + (b / cols) * (batch.h + 1), ox = 1 + (b % cols) * (batch.w + 1);
        for (int y = 0; y < batch.h; ++y)
            for (int x = 0; x < batch.w; ++x)
                for (int c = 0; c < batch.c; ++c) sheet.at(0, oy + y, ox + x, c) = batch.at(b, y, x, c);
    }
    write_png(path, sheet);
}

// Reads any PNG as RGB floats in [0,1], shape 1xHxWx3.
inline TensorF read_png(const std::string& path) {
    png_image im{};
    im.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&im, path.c_str()))
        throw ValidationError("read_png: " + path + ": " + im.message);
    im.format = PNG_FORMAT_RGB;
    std::vector<uint8_t> buf(PNG_IMAGE_SIZE(im));
    if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr))
        throw ValidationError("read_png: " + path + ": " + im.message);
    TensorF out(uninit, 1, int(im.height), int(im.width), 3);
    for (size_t i = 0; i < out.size(); ++i) out.v[i] = float(buf[i] / 255.0);
    return out;
}

}  // namespace dfml

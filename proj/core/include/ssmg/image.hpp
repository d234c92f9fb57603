#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmg/tensor.hpp"

namespace ssmg {

// 8-bit RGB image, row-major, tightly packed.
struct ImageU8 {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> rgb;  // h*w*3

    ImageU8() = default;
    ImageU8(int h_, int w_) : h(h_), w(w_), rgb(static_cast<size_t>(h_) * w_ * 3, 0) {}

    uint8_t* px(int i, int j) { return &rgb[(static_cast<size_t>(i) * w + j) * 3]; }
    const uint8_t* px(int i, int j) const { return &rgb[(static_cast<size_t>(i) * w + j) * 3]; }

    bool operator==(const ImageU8& o) const { return h == o.h && w == o.w && rgb == o.rgb; }
};

// PNG I/O (8-bit RGB only). Throws IoError on failure.
void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

// [-1,1] float CHW tensor <-> u8 image.
Tensor image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const Tensor& t);

}  // namespace ssmg

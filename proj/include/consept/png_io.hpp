#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "consept/tensor.hpp"

namespace consept::data {

// Minimal 8-bit RGB PNG codec (zlib deflate). Lossless round trips are part
// of the corpus contract, so images are quantized to bytes before writing.
void write_png_rgb(const std::string& path, int w, int h, const std::vector<uint8_t>& rgb);
std::vector<uint8_t> read_png_rgb(const std::string& path, int& w, int& h);

// [3,H,W] double tensor in [0,1] <-> interleaved RGB bytes
std::vector<uint8_t> tensor_to_rgb(const nn::Tensor& image);
nn::Tensor rgb_to_tensor(const std::vector<uint8_t>& rgb, int w, int h);

}  // namespace consept::data

#pragma once

// Binary PPM (P6) and PGM (P5) output, 8 bits per sample.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dr1mask/tensor.hpp"

namespace dr1mask {

/// Encodes a (1, 3, H, W) image with values in [0, 1]; out-of-range values are clamped.
std::string encode_ppm(const TensorF& rgb);
/// Encodes an H*W map with values in [0, 1].
std::string encode_pgm(const std::vector<float>& gray, Index h, Index w);

/// Deterministic color for a panoptic segment id: stuff ids get muted tones, thing ids bright ones.
std::array<std::uint8_t, 3> segment_color(std::int32_t id, Index n_stuff);
std::string encode_label_ppm(const std::vector<std::int32_t>& labels, Index h, Index w, Index n_stuff);

void write_ppm(const std::string& path, const TensorF& rgb);
void write_pgm(const std::string& path, const std::vector<float>& gray, Index h, Index w);

}  // namespace dr1mask

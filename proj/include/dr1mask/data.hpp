#pragma once

// Deterministic synthetic panoptic scenes: horizontal stuff bands with smooth color
// gradients, overlaid with flat-colored circles, rectangles and triangles (one thing class per
// shape). Later shapes occlude earlier ones and masks record only visible pixels.

#include <cstdint>
#include <string>
#include <vector>

#include "dr1mask/ops.hpp"
#include "dr1mask/tensor.hpp"

namespace dr1mask {

/// Integer pixel box; (x1, y1) exclusive.
struct PixelBox {
  std::int32_t x0 = 0;
  std::int32_t y0 = 0;
  std::int32_t x1 = 0;
  std::int32_t y1 = 0;

  Box to_box() const { return Box{double(x0), double(y0), double(x1), double(y1)}; }
  std::int32_t max_side() const { return std::max(x1 - x0, y1 - y0); }
  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

enum class ThingShape : std::int32_t { kCircle = 0, kRectangle = 1, kTriangle = 2 };

struct Instance {
  std::int32_t thing_class = 0;
  PixelBox box;
  std::vector<std::uint8_t> mask;  // H*W, 1 where the instance is visible
  friend bool operator==(const Instance&, const Instance&) = default;
};

struct Scene {
  static constexpr std::uint8_t kThingPixel = 255;

  TensorF image;                        // (1, 3, H, W) in [0, 1]
  Index h = 0;
  Index w = 0;
  std::vector<std::uint8_t> stuff_map;  // stuff class id, or kThingPixel under an instance
  std::vector<Instance> instances;
  std::int32_t dropped = 0;             // instances abandoned after bounded placement retries

  friend bool operator==(const Scene&, const Scene&) = default;
};

struct DatasetSpec {
  std::uint64_t seed = 1;
  Index count = 16;
  Index height = 64;
  Index width = 64;
  Index n_stuff_classes = 3;
  Index n_thing_classes = 3;
  Index min_instances = 1;
  Index max_instances = 3;
  double min_size_fraction = 0.25;  // thing max side as a fraction of the shorter image side
  double max_size_fraction = 0.5;
};

/// Scene i depends only on (spec, i).
Scene generate_scene(const DatasetSpec& spec, Index index);
std::vector<Scene> generate(const DatasetSpec& spec);

/// Rasterizes one shape at the given box; exposed for the circle-area property.
std::vector<std::uint8_t> rasterize(ThingShape shape, const PixelBox& box, bool flip, Index h, Index w);

/// Every pixel belongs to exactly one stuff class or exactly one instance.
bool panoptic_complete(const Scene& s);

/// Per-pixel panoptic label: stuff id, or n_stuff + instance index.
std::vector<std::int32_t> panoptic_labels(const Scene& s, Index n_stuff);
/// Per-pixel semantic label: stuff id, or n_stuff + thing class.
std::vector<std::int32_t> semantic_labels(const Scene& s, Index n_stuff);

double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

std::string encode_scene(const Scene& s);
Scene decode_scene(std::string_view bytes);
void save_scene(const std::string& path, const Scene& s);
Scene load_scene(const std::string& path);

/// Writes scene_00000.bin ... plus dataset.txt; returns the number of scenes written.
Index save_dataset(const std::string& dir, const DatasetSpec& spec, const std::vector<Scene>& scenes);
std::vector<Scene> load_dataset(const std::string& dir);

std::string instance_metadata(const Scene& s);

}  // namespace dr1mask

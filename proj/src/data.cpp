#include "dr1mask/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>

#include "dr1mask/serialize.hpp"

namespace dr1mask {

namespace {

constexpr std::uint32_t kSceneVersion = 1;
constexpr char kSceneMagic[4] = {'D', 'R', '1', 'S'};
constexpr int kPlacementRetries = 50;
constexpr double kMinVisibleFraction = 0.6;

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb o{0, 0, 0};
  switch (static_cast<int>(hp) % 6) {
    case 0: o = {c, x, 0}; break;
    case 1: o = {x, c, 0}; break;
    case 2: o = {0, c, x}; break;
    case 3: o = {0, x, c}; break;
    case 4: o = {x, 0, c}; break;
    default: o = {c, 0, x}; break;
  }
  const double m = v - c;
  return {o.r + m, o.g + m, o.b + m};
}

// Muted, fixed per-class colors; the golden-ratio hue walk keeps neighbours apart.
Rgb stuff_color(Index cls) {
  const double hue = std::fmod(0.07 + 0.618033988749895 * double(cls), 1.0);
  const double value = 0.35 + 0.15 * double(cls % 3);
  return hsv(hue, 0.35, value);
}

std::uint64_t scene_seed(std::uint64_t seed, Index index) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index),
                    std::uint32_t(std::uint64_t(index) >> 32), 0x5eedu};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t(words[0]) << 32) | words[1];
}

std::optional<PixelBox> tight_box(const std::vector<std::uint8_t>& mask, Index h, Index w) {
  Index x0 = w, y0 = h, x1 = -1, y1 = -1;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      if (!mask[y * w + x]) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) return std::nullopt;
  return PixelBox{std::int32_t(x0), std::int32_t(y0), std::int32_t(x1 + 1), std::int32_t(y1 + 1)};
}

Index area(const std::vector<std::uint8_t>& m) {
  return static_cast<Index>(std::count(m.begin(), m.end(), std::uint8_t(1)));
}

void write_rle_binary(ByteWriter& out, const std::vector<std::uint8_t>& mask) {
  // Alternating run lengths starting with a (possibly empty) run of zeros.
  std::vector<std::uint32_t> runs;
  std::uint8_t cur = 0;
  std::uint32_t len = 0;
  for (std::uint8_t v : mask) {
    if (v != cur) {
      runs.push_back(len);
      cur = v;
      len = 0;
    }
    ++len;
  }
  runs.push_back(len);
  out.u32(static_cast<std::uint32_t>(runs.size()));
  for (auto r : runs) out.u32(r);
}

std::vector<std::uint8_t> read_rle_binary(ByteReader& in, Index total) {
  const std::size_t at = in.offset();
  const std::uint32_t n = in.u32();
  if (std::size_t(n) * 4 > in.remaining()) throw ParseError("mask run count " + std::to_string(n) + " overruns data", at);
  std::vector<std::uint8_t> mask;
  mask.reserve(static_cast<std::size_t>(total));
  std::uint8_t cur = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t run_at = in.offset();
    const std::uint32_t len = in.u32();
    if (Index(mask.size()) + Index(len) > total) throw ParseError("mask runs exceed image size", run_at);
    mask.insert(mask.end(), len, cur);
    cur ^= 1;
  }
  if (Index(mask.size()) != total) throw ParseError("mask runs cover " + std::to_string(mask.size()) + " of " + std::to_string(total) + " pixels", at);
  return mask;
}

void write_rle_labels(ByteWriter& out, const std::vector<std::uint8_t>& labels) {
  std::vector<std::pair<std::uint8_t, std::uint32_t>> runs;
  for (std::uint8_t v : labels) {
    if (!runs.empty() && runs.back().first == v) {
      ++runs.back().second;
    } else {
      runs.emplace_back(v, 1);
    }
  }
  out.u32(static_cast<std::uint32_t>(runs.size()));
  for (const auto& [v, n] : runs) {
    out.u8(v);
    out.u32(n);
  }
}

std::vector<std::uint8_t> read_rle_labels(ByteReader& in, Index total) {
  const std::size_t at = in.offset();
  const std::uint32_t n = in.u32();
  if (std::size_t(n) * 5 > in.remaining()) throw ParseError("label run count " + std::to_string(n) + " overruns data", at);
  std::vector<std::uint8_t> labels;
  labels.reserve(static_cast<std::size_t>(total));
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t run_at = in.offset();
    const std::uint8_t v = in.u8();
    const std::uint32_t len = in.u32();
    if (Index(labels.size()) + Index(len) > total) throw ParseError("label runs exceed image size", run_at);
    labels.insert(labels.end(), len, v);
  }
  if (Index(labels.size()) != total) throw ParseError("label runs cover " + std::to_string(labels.size()) + " of " + std::to_string(total) + " pixels", at);
  return labels;
}

}  // namespace

std::vector<std::uint8_t> rasterize(ThingShape shape, const PixelBox& box, bool flip, Index h, Index w) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(h * w), 0);
  const double cx = 0.5 * (box.x0 + box.x1);
  const double cy = 0.5 * (box.y0 + box.y1);
  const double rx = 0.5 * (box.x1 - box.x0);
  const double ry = 0.5 * (box.y1 - box.y0);
  const Index ylo = std::max<Index>(0, box.y0), yhi = std::min<Index>(h, box.y1);
  const Index xlo = std::max<Index>(0, box.x0), xhi = std::min<Index>(w, box.x1);
  for (Index y = ylo; y < yhi; ++y) {
    for (Index x = xlo; x < xhi; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      switch (shape) {
        case ThingShape::kRectangle:
          inside = true;
          break;
        case ThingShape::kCircle: {
          const double dx = (px - cx) / rx, dy = (py - cy) / ry;
          inside = dx * dx + dy * dy <= 1.0;
          break;
        }
        case ThingShape::kTriangle: {
          // Isosceles: apex at the top edge center (or bottom when flipped), base on the opposite edge.
          double t = (py - box.y0) / (box.y1 - box.y0);
          if (flip) t = 1.0 - t;
          inside = std::abs(px - cx) <= rx * t;
          break;
        }
      }
      if (inside) m[y * w + x] = 1;
    }
  }
  return m;
}

Scene generate_scene(const DatasetSpec& spec, Index index) {
  if (spec.height < 8 || spec.width < 8) throw InvalidArgument("scene extents must be at least 8x8");
  if (spec.n_stuff_classes < 1 || spec.n_stuff_classes > 254) throw InvalidArgument("n_stuff_classes must be in [1, 254]");
  if (spec.n_thing_classes < 1 || spec.n_thing_classes > 3) throw InvalidArgument("n_thing_classes must be in [1, 3]");
  if (spec.min_instances < 0 || spec.max_instances < spec.min_instances) throw InvalidArgument("instance range is empty");

  std::mt19937_64 rng(scene_seed(spec.seed, index));
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto integer = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };

  const Index H = spec.height, W = spec.width;
  Scene s;
  s.h = H;
  s.w = W;
  s.image = TensorF(Shape{1, 3, H, W});
  s.stuff_map.assign(static_cast<std::size_t>(H * W), 0);

  // Stuff bands: random cut rows, adjacent bands get distinct classes when possible.
  const Index max_bands = std::min<Index>(4, std::max<Index>(1, H / 8));
  const Index bands = spec.n_stuff_classes == 1 ? 1 : integer(std::min<Index>(2, max_bands), max_bands);
  std::vector<Index> cuts{0};
  for (Index b = 1; b < bands; ++b) cuts.push_back(integer(1, H - 1));
  cuts.push_back(H);
  std::sort(cuts.begin(), cuts.end());
  std::vector<Index> band_class;
  for (Index b = 0; b < bands; ++b) {
    Index cls = integer(0, spec.n_stuff_classes - 1);
    if (b > 0 && spec.n_stuff_classes > 1) {
      while (cls == band_class.back()) cls = integer(0, spec.n_stuff_classes - 1);
    }
    band_class.push_back(cls);
  }
  const double tilt = uniform(-0.12, 0.12);
  for (Index b = 0; b < bands; ++b) {
    const Rgb base = stuff_color(band_class[b]);
    for (Index y = cuts[b]; y < cuts[b + 1]; ++y) {
      for (Index x = 0; x < W; ++x) {
        const double g = 1.0 + tilt * (2.0 * x / double(W - 1) - 1.0) + 0.05 * (double(y - cuts[b]) / double(H));
        s.image(0, 0, y, x) = static_cast<float>(std::clamp(base.r * g, 0.0, 1.0));
        s.image(0, 1, y, x) = static_cast<float>(std::clamp(base.g * g, 0.0, 1.0));
        s.image(0, 2, y, x) = static_cast<float>(std::clamp(base.b * g, 0.0, 1.0));
        s.stuff_map[y * W + x] = static_cast<std::uint8_t>(band_class[b]);
      }
    }
  }

  // Things: painter's algorithm with bounded overlap. A candidate is rejected if any earlier
  // instance would keep less than 60% of its own area or lose its box-center pixel.
  struct Placed {
    std::int32_t cls;
    Rgb color;
    std::vector<std::uint8_t> full;
    std::vector<std::uint8_t> visible;
  };
  std::vector<Placed> placed;
  const Index want = integer(spec.min_instances, spec.max_instances);
  const double short_side = double(std::min(H, W));
  const Index side_lo = std::max<Index>(4, Index(std::lround(spec.min_size_fraction * short_side)));
  const Index side_hi = std::max<Index>(side_lo, Index(std::lround(spec.max_size_fraction * short_side)));
  auto center_owned = [&](const std::vector<std::uint8_t>& vis) {
    const auto b = tight_box(vis, H, W);
    if (!b) return false;
    const Index cx = (b->x0 + b->x1) / 2, cy = (b->y0 + b->y1) / 2;
    return vis[cy * W + cx] == 1;
  };
  for (Index i = 0; i < want; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementRetries && !ok; ++attempt) {
      const auto cls = static_cast<std::int32_t>(integer(0, spec.n_thing_classes - 1));
      const auto shape = static_cast<ThingShape>(cls);
      const Index bw = integer(side_lo, std::min(side_hi, W));
      const Index bh = shape == ThingShape::kCircle ? bw : integer(side_lo, std::min(side_hi, H));
      const Index x0 = integer(0, W - bw), y0 = integer(0, H - bh);
      const bool flip = integer(0, 1) == 1;
      const Rgb color = hsv(uniform(0.0, 1.0), uniform(0.75, 1.0), uniform(0.8, 1.0));
      PixelBox box{std::int32_t(x0), std::int32_t(y0), std::int32_t(x0 + bw), std::int32_t(y0 + bh)};
      auto full = rasterize(shape, box, flip, H, W);
      if (!center_owned(full)) continue;
      bool fits = true;
      std::vector<std::vector<std::uint8_t>> next;
      for (const auto& p : placed) {
        auto vis = p.visible;
        for (std::size_t k = 0; k < vis.size(); ++k) vis[k] &= std::uint8_t(full[k] ^ 1);
        if (double(area(vis)) < kMinVisibleFraction * double(area(p.full)) || !center_owned(vis)) {
          fits = false;
          break;
        }
        next.push_back(std::move(vis));
      }
      if (!fits) continue;
      for (std::size_t k = 0; k < placed.size(); ++k) placed[k].visible = std::move(next[k]);
      auto vis = full;
      placed.push_back({cls, color, std::move(full), std::move(vis)});
      ok = true;
    }
    if (!ok) ++s.dropped;
  }

  for (const auto& p : placed) {
    for (Index k = 0; k < H * W; ++k) {
      if (!p.full[k]) continue;
      // Later shapes paint over earlier ones.
      const Index y = k / W, x = k % W;
      s.image(0, 0, y, x) = static_cast<float>(p.color.r);
      s.image(0, 1, y, x) = static_cast<float>(p.color.g);
      s.image(0, 2, y, x) = static_cast<float>(p.color.b);
      s.stuff_map[k] = Scene::kThingPixel;
    }
  }
  for (const auto& p : placed) {
    Instance inst;
    inst.thing_class = p.cls;
    inst.box = *tight_box(p.visible, H, W);
    inst.mask = p.visible;
    s.instances.push_back(std::move(inst));
  }
  return s;
}

std::vector<Scene> generate(const DatasetSpec& spec) {
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(std::max<Index>(0, spec.count)));
  for (Index i = 0; i < spec.count; ++i) out.push_back(generate_scene(spec, i));
  return out;
}

bool panoptic_complete(const Scene& s) {
  const Index n = s.h * s.w;
  if (Index(s.stuff_map.size()) != n) return false;
  for (const auto& inst : s.instances) {
    if (Index(inst.mask.size()) != n) return false;
  }
  for (Index k = 0; k < n; ++k) {
    int owners = 0;
    for (const auto& inst : s.instances) owners += inst.mask[k] ? 1 : 0;
    const bool stuff = s.stuff_map[k] != Scene::kThingPixel;
    if (stuff ? owners != 0 : owners != 1) return false;
  }
  return true;
}

std::vector<std::int32_t> panoptic_labels(const Scene& s, Index n_stuff) {
  std::vector<std::int32_t> out(s.stuff_map.begin(), s.stuff_map.end());
  for (std::size_t i = 0; i < s.instances.size(); ++i) {
    const auto& m = s.instances[i].mask;
    for (std::size_t k = 0; k < m.size(); ++k) {
      if (m[k]) out[k] = static_cast<std::int32_t>(n_stuff + Index(i));
    }
  }
  return out;
}

std::vector<std::int32_t> semantic_labels(const Scene& s, Index n_stuff) {
  std::vector<std::int32_t> out(s.stuff_map.begin(), s.stuff_map.end());
  for (const auto& inst : s.instances) {
    for (std::size_t k = 0; k < inst.mask.size(); ++k) {
      if (inst.mask[k]) out[k] = static_cast<std::int32_t>(n_stuff + inst.thing_class);
    }
  }
  return out;
}

double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) {
    throw InvalidArgument("iou: mask sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const bool x = a[k] != 0, y = b[k] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

std::string instance_metadata(const Scene& s) {
  std::ostringstream os;
  os << "# id class x0 y0 x1 y1 score\n";
  for (std::size_t i = 0; i < s.instances.size(); ++i) {
    const auto& in = s.instances[i];
    os << i << ' ' << in.thing_class << ' ' << in.box.x0 << ' ' << in.box.y0 << ' ' << in.box.x1 << ' ' << in.box.y1
       << " 1\n";
  }
  return os.str();
}

std::string encode_scene(const Scene& s) {
  ByteWriter w;
  w.bytes(kSceneMagic, 4);
  w.u32(kSceneVersion);
  w.u32(static_cast<std::uint32_t>(s.h));
  w.u32(static_cast<std::uint32_t>(s.w));
  write_tensor(w, "image", s.image);
  write_rle_labels(w, s.stuff_map);
  w.u32(static_cast<std::uint32_t>(s.instances.size()));
  for (const auto& in : s.instances) {
    w.i32(in.thing_class);
    w.i32(in.box.x0);
    w.i32(in.box.y0);
    w.i32(in.box.x1);
    w.i32(in.box.y1);
    write_rle_binary(w, in.mask);
  }
  w.i32(s.dropped);
  w.str(instance_metadata(s));
  return w.take();
}

Scene decode_scene(std::string_view bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kSceneMagic)) throw ParseError("not a scene file (bad magic)", 0);
  const std::uint32_t version = r.u32();
  if (version != kSceneVersion) throw ParseError("unsupported scene version " + std::to_string(version), 4);
  Scene s;
  s.h = r.u32();
  s.w = r.u32();
  const Index n = s.h * s.w;
  const std::size_t image_at = r.offset();
  auto image = read_tensor<float>(r);
  if (image.tensor.shape() != Shape{1, 3, s.h, s.w}) {
    throw ParseError("image shape " + image.tensor.shape().str() + " does not match " + std::to_string(s.h) + "x" +
                         std::to_string(s.w),
                     image_at);
  }
  s.image = std::move(image.tensor);
  s.stuff_map = read_rle_labels(r, n);
  const std::size_t count_at = r.offset();
  const std::uint32_t count = r.u32();
  if (std::size_t(count) * 24 > r.remaining()) throw ParseError("instance count " + std::to_string(count) + " overruns data", count_at);
  for (std::uint32_t i = 0; i < count; ++i) {
    Instance in;
    in.thing_class = r.i32();
    in.box.x0 = r.i32();
    in.box.y0 = r.i32();
    in.box.x1 = r.i32();
    in.box.y1 = r.i32();
    in.mask = read_rle_binary(r, n);
    s.instances.push_back(std::move(in));
  }
  s.dropped = r.i32();
  r.str();  // metadata is derived from the instances
  if (!r.at_end()) throw ParseError("trailing bytes after scene record", r.offset());
  return s;
}

void save_scene(const std::string& path, const Scene& s) { write_file(path, encode_scene(s)); }

Scene load_scene(const std::string& path) { return decode_scene(read_file(path)); }

namespace {

std::string scene_name(Index i) {
  std::ostringstream os;
  os << "scene_" << std::setw(5) << std::setfill('0') << i << ".bin";
  return os.str();
}

}  // namespace

Index save_dataset(const std::string& dir, const DatasetSpec& spec, const std::vector<Scene>& scenes) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  std::ostringstream idx;
  idx << "seed=" << spec.seed << "\ncount=" << scenes.size() << "\nheight=" << spec.height << "\nwidth=" << spec.width
      << "\nn_stuff_classes=" << spec.n_stuff_classes << "\nn_thing_classes=" << spec.n_thing_classes
      << "\nmin_instances=" << spec.min_instances << "\nmax_instances=" << spec.max_instances << "\n";
  Index dropped = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    save_scene((std::filesystem::path(dir) / scene_name(Index(i))).string(), scenes[i]);
    dropped += scenes[i].dropped;
  }
  idx << "dropped_instances=" << dropped << "\n";
  write_file((std::filesystem::path(dir) / "dataset.txt").string(), idx.str());
  return Index(scenes.size());
}

std::vector<Scene> load_dataset(const std::string& dir) {
  const std::string index = read_file((std::filesystem::path(dir) / "dataset.txt").string());
  Index count = -1;
  std::istringstream in(index);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("count=", 0) == 0) count = std::stoll(line.substr(6));
  }
  if (count < 0) throw IoError(dir + "/dataset.txt has no count line");
  std::vector<Scene> out;
  for (Index i = 0; i < count; ++i) out.push_back(load_scene((std::filesystem::path(dir) / scene_name(i)).string()));
  return out;
}

}  // namespace dr1mask

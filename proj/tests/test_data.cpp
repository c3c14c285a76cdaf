#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dr1mask/data.hpp"
#include "dr1mask/image_io.hpp"
#include "dr1mask/serialize.hpp"

using namespace dr1mask;

namespace {

DatasetSpec small_spec(std::uint64_t seed) {
  DatasetSpec s;
  s.seed = seed;
  s.count = 8;
  s.height = 64;
  s.width = 48;
  s.min_instances = 0;
  s.max_instances = 4;
  return s;
}

// Oracle: tight box recomputed by scanning the mask.
PixelBox scan_box(const std::vector<std::uint8_t>& m, Index h, Index w) {
  PixelBox b{std::int32_t(w), std::int32_t(h), -1, -1};
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      if (m[y * w + x]) {
        b.x0 = std::min<std::int32_t>(b.x0, std::int32_t(x));
        b.y0 = std::min<std::int32_t>(b.y0, std::int32_t(y));
        b.x1 = std::max<std::int32_t>(b.x1, std::int32_t(x + 1));
        b.y1 = std::max<std::int32_t>(b.y1, std::int32_t(y + 1));
      }
  return b;
}

}  // namespace

TEST_CASE("zero-instance scenes are pure stuff") {
  DatasetSpec spec = small_spec(3);
  spec.max_instances = 0;
  for (const Scene& s : generate(spec)) {
    CHECK(s.instances.empty());
    CHECK(panoptic_complete(s));
    for (auto v : s.stuff_map) CHECK(v < spec.n_stuff_classes);
  }
}

TEST_CASE("generated scenes are panoptically complete with tight boxes") {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    for (const Scene& s : generate(small_spec(seed))) {
      REQUIRE(panoptic_complete(s));
      for (const auto& inst : s.instances) {
        CHECK(inst.box == scan_box(inst.mask, s.h, s.w));
        CHECK(inst.thing_class >= 0);
        CHECK(inst.thing_class < 3);
      }
      for (float v : s.image.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
    }
  }
}

TEST_CASE("instances keep their box-center pixel") {
  for (const Scene& s : generate(small_spec(11))) {
    for (const auto& inst : s.instances) {
      const Index cx = (inst.box.x0 + inst.box.x1) / 2, cy = (inst.box.y0 + inst.box.y1) / 2;
      CHECK(inst.mask[cy * s.w + cx] == 1);
    }
  }
}

TEST_CASE("circle mask area is within 5% of pi r^2") {
  for (int r = 8; r <= 30; ++r) {
    const Index n = 2 * r + 10;
    const PixelBox box{5, 5, 5 + 2 * r, 5 + 2 * r};
    const auto m = rasterize(ThingShape::kCircle, box, false, n, n);
    const double a = double(std::count(m.begin(), m.end(), 1));
    const double expect = M_PI * r * r;
    CHECK(std::abs(a - expect) <= 0.05 * expect);
  }
}

TEST_CASE("triangle and rectangle rasterization") {
  const PixelBox box{2, 2, 12, 8};
  const auto rect = rasterize(ThingShape::kRectangle, box, false, 10, 14);
  CHECK(std::count(rect.begin(), rect.end(), 1) == 60);
  const auto up = rasterize(ThingShape::kTriangle, box, false, 10, 14);
  const auto down = rasterize(ThingShape::kTriangle, box, true, 10, 14);
  CHECK(std::count(up.begin(), up.end(), 1) == std::count(down.begin(), down.end(), 1));
  // Apex up: the bottom row is wider than the top row.
  auto row = [](const std::vector<std::uint8_t>& m, Index y) { return std::count(m.begin() + y * 14, m.begin() + (y + 1) * 14, 1); };
  CHECK(row(up, 7) > row(up, 2));
  CHECK(row(down, 2) > row(down, 7));
}

TEST_CASE("generation is deterministic and seed-sensitive") {
  const auto a = generate(small_spec(5));
  const auto b = generate(small_spec(5));
  const auto c = generate(small_spec(6));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(encode_scene(a[i]) == encode_scene(b[i]));
  CHECK(encode_scene(a[0]) != encode_scene(c[0]));
  // Scene i does not depend on how many scenes are requested.
  DatasetSpec longer = small_spec(5);
  longer.count = 12;
  CHECK(encode_scene(generate(longer)[7]) == encode_scene(a[7]));
}

TEST_CASE("scene encoding round-trips bit-exactly") {
  for (const Scene& s : generate(small_spec(9))) {
    const Scene back = decode_scene(encode_scene(s));
    CHECK(back == s);
  }
  Scene empty = generate_scene([] { auto s = small_spec(1); s.max_instances = 0; return s; }(), 0);
  CHECK(decode_scene(encode_scene(empty)) == empty);
}

TEST_CASE("truncated and corrupted scene files raise parse errors") {
  const std::string bytes = encode_scene(generate_scene(small_spec(2), 1));
  for (std::size_t cut : {std::size_t(0), std::size_t(3), std::size_t(10), bytes.size() / 2, bytes.size() - 1}) {
    try {
      decode_scene(std::string_view(bytes).substr(0, cut));
      FAIL("expected ParseError at cut " << cut);
    } catch (const ParseError& e) {
      CHECK(e.offset() <= cut);
    }
  }
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_scene(bad), ParseError);
  CHECK_THROWS_AS(decode_scene(bytes + "x"), ParseError);
}

TEST_CASE("dataset directory round-trips") {
  const auto dir = (std::filesystem::temp_directory_path() / "dr1mask_test_dataset").string();
  std::filesystem::remove_all(dir);
  const DatasetSpec spec = small_spec(4);
  const auto scenes = generate(spec);
  CHECK(save_dataset(dir, spec, scenes) == spec.count);
  const auto back = load_dataset(dir);
  REQUIRE(back.size() == scenes.size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == scenes[i]);
  CHECK_THROWS_AS(load_scene(dir + "/missing.bin"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("iou arithmetic") {
  std::vector<std::uint8_t> a(100, 0), b(100, 0), e(100, 0);
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 4; ++x) a[y * 10 + x] = 1;
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(e, e) == 1.0);
  for (Index y = 5; y < 9; ++y)
    for (Index x = 5; x < 9; ++x) b[y * 10 + x] = 1;
  CHECK(iou(a, b) == 0.0);
  // Two 4x4 squares offset by half their width: 8 / (16 + 16 - 8).
  std::fill(b.begin(), b.end(), 0);
  for (Index y = 0; y < 4; ++y)
    for (Index x = 2; x < 6; ++x) b[y * 10 + x] = 1;
  CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(a, b) == iou(b, a));
  CHECK_THROWS_AS(iou(a, std::vector<std::uint8_t>(99)), InvalidArgument);
}

TEST_CASE("label maps cover stuff and things") {
  const Scene s = generate_scene(small_spec(7), 2);
  const auto pan = panoptic_labels(s, 3);
  const auto sem = semantic_labels(s, 3);
  for (std::size_t k = 0; k < pan.size(); ++k) {
    CHECK(pan[k] >= 0);
    CHECK(pan[k] < 3 + Index(s.instances.size()));
    CHECK(sem[k] < 6);
    CHECK((pan[k] < 3) == (sem[k] < 3));
  }
}

TEST_CASE("pnm encoders") {
  TensorF img(Shape{1, 3, 2, 3}, 0.5f);
  img(0, 0, 0, 0) = 2.0f;
  const std::string ppm = encode_ppm(img);
  CHECK(ppm.rfind("P6\n3 2\n255\n", 0) == 0);
  CHECK(ppm.size() == 11 + 18);
  CHECK(static_cast<unsigned char>(ppm[11]) == 255);
  CHECK(static_cast<unsigned char>(ppm[12]) == 128);
  const std::string pgm = encode_pgm({0.0f, 1.0f}, 1, 2);
  CHECK(pgm == std::string("P5\n2 1\n255\n") + char(0) + char(255));
  CHECK_THROWS_AS(encode_pgm({0.0f}, 1, 2), InvalidArgument);
  CHECK(segment_color(3, 3) != segment_color(4, 3));
}

#include <doctest.h>

#include "dr1mask/config.hpp"

using namespace dr1mask;

TEST_CASE("config defaults parse from an empty file") {
  const Config c = parse_config("");
  CHECK(c.basis_width == 32);
  CHECK(c.head_kind == HeadKind::kVector);
  CHECK(c.embedding_width() == 32);
  CHECK(c.panoptic_enabled());
}

TEST_CASE("config ignores comments and whitespace") {
  const Config c = parse_config("# model\n  basis_width = 8   # narrow\n\nhead_kind=factored\n");
  CHECK(c.basis_width == 8);
  CHECK(c.head_kind == HeadKind::kFactored);
  CHECK(c.embedding_width() == 8 * 4 + 16);
  CHECK_FALSE(c.panoptic_enabled());
}

TEST_CASE("config unknown key is rejected with its line number") {
  try {
    parse_config("basis_width=8\n\nbasis_widht=9\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("basis_widht") != std::string::npos);
  }
}

TEST_CASE("config malformed values are rejected") {
  CHECK_THROWS_AS(parse_config("lr=fast\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("basis_width=3.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("stuff_bias=maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("no equals sign\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("upsample_mode=cubic\n"), ConfigError);
  try {
    parse_config("seed=1\nlr=\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).find("lr") != std::string::npos);
  }
}

TEST_CASE("config emb_dim must match the head kind") {
  CHECK_NOTHROW(parse_config("basis_width=16\nhead_kind=full\nemb_dim=848\n"));
  CHECK_THROWS_AS(parse_config("basis_width=16\nhead_kind=full\nemb_dim=64\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("n_thing_classes=4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("momentum=1\n"), ConfigError);
}

TEST_CASE("config text round-trips") {
  Config c;
  c.basis_width = 12;
  c.head_kind = HeadKind::kFull;
  c.upsample_mode = UpsampleMode::kBilinear;
  c.knockout = Knockout::kBOnly;
  c.stuff_bias = true;
  c.seed = 0xdeadbeefcafeULL;
  c.lr = 0.1 / 3.0;
  c.grad_clip = 5.0;
  c.emit_stride = 8;
  const Config back = parse_config(to_text(c));
  CHECK(to_text(back) == to_text(c));
  CHECK(back.lr == c.lr);
  CHECK(back.seed == c.seed);
  CHECK(back.knockout == Knockout::kBOnly);
}

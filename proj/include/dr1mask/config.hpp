#pragma once

// Line-oriented key=value configuration. Blank lines and '#' comments are ignored; unknown
// keys and malformed values are rejected with their line number.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "dr1mask/heads.hpp"
#include "dr1mask/pyramid.hpp"

namespace dr1mask {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

struct Config {
  // model
  Index basis_width = 32;
  Index emb_dim = 0;  // 0 derives the width from head_kind
  HeadKind head_kind = HeadKind::kVector;
  Index crop_size = 28;
  Index divisibility = 4;
  int emit_stride = 4;
  UpsampleMode upsample_mode = UpsampleMode::kNearest;
  Index tower_depth = 4;
  Index tower_width = 64;
  Index stem_width = 16;
  Knockout knockout = Knockout::kNone;
  bool stuff_bias = false;
  Index level_base = 64;  // level 3 owns boxes with max side < level_base; each level doubles it

  // data
  Index n_stuff_classes = 3;
  Index n_thing_classes = 3;
  Index scene_size = 64;
  Index scene_count = 200;
  Index min_instances = 1;
  Index max_instances = 3;

  // optimization
  std::uint64_t seed = 1;
  double lr = 0.02;
  double momentum = 0.9;
  Index iterations = 2000;
  double mask_weight = 1.0;
  double panoptic_weight = 1.0;
  double aux_weight = 0.3;
  double grad_clip = 5.0;  // global-norm clip, 0 disables

  /// Embedding width actually used by the model.
  Index embedding_width() const { return emb_dim > 0 ? emb_dim : embedding_dim(head_kind, basis_width); }
  /// Panoptic thing channels are only built for the vector head.
  bool panoptic_enabled() const { return head_kind == HeadKind::kVector && panoptic_weight > 0; }

  void validate() const;
};

Config parse_config(const std::string& text);
Config load_config(const std::string& path);
/// Canonical text form; parse_config(to_text(c)) reproduces c.
std::string to_text(const Config& c);

}  // namespace dr1mask

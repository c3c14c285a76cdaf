#include "dr1mask/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dr1mask/serialize.hpp"

namespace dr1mask {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& v, int line, const std::string& key) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("invalid value '" + v + "' for " + key, line);
  return out;
}

double parse_real(const std::string& v, int line, const std::string& key) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError("invalid value '" + v + "' for " + key, line);
  return out;
}

bool parse_bool(const std::string& v, int line, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("invalid boolean '" + v + "' for " + key, line);
}

HeadKind parse_head(const std::string& v, int line) {
  if (v == "vector") return HeadKind::kVector;
  if (v == "full") return HeadKind::kFull;
  if (v == "factored") return HeadKind::kFactored;
  throw ConfigError("head_kind must be vector|full|factored, got '" + v + "'", line);
}

UpsampleMode parse_upsample(const std::string& v, int line) {
  if (v == "nearest") return UpsampleMode::kNearest;
  if (v == "bilinear") return UpsampleMode::kBilinear;
  throw ConfigError("upsample_mode must be nearest|bilinear, got '" + v + "'", line);
}

Knockout parse_knockout(const std::string& v, int line) {
  if (v == "none") return Knockout::kNone;
  if (v == "a_only") return Knockout::kAOnly;
  if (v == "b_only") return Knockout::kBOnly;
  if (v == "both") return Knockout::kBoth;
  throw ConfigError("knockout must be none|a_only|b_only|both, got '" + v + "'", line);
}

const char* knockout_name(Knockout k) {
  switch (k) {
    case Knockout::kNone: return "none";
    case Knockout::kAOnly: return "a_only";
    case Knockout::kBOnly: return "b_only";
    case Knockout::kBoth: return "both";
  }
  return "none";
}

using Setter = std::function<void(Config&, const std::string&, int)>;

const std::map<std::string, Setter>& setters() {
  auto index = [](Index Config::*field, const char* key) {
    return Setter([field, key](Config& c, const std::string& v, int line) {
      c.*field = parse_number<Index>(v, line, key);
    });
  };
  auto real = [](double Config::*field, const char* key) {
    return Setter([field, key](Config& c, const std::string& v, int line) {
      c.*field = parse_real(v, line, key);
    });
  };
  static const std::map<std::string, Setter> table = {
      {"basis_width", index(&Config::basis_width, "basis_width")},
      {"emb_dim", index(&Config::emb_dim, "emb_dim")},
      {"head_kind", [](Config& c, const std::string& v, int l) { c.head_kind = parse_head(v, l); }},
      {"crop_size", index(&Config::crop_size, "crop_size")},
      {"level_base", index(&Config::level_base, "level_base")},
      {"divisibility", index(&Config::divisibility, "divisibility")},
      {"emit_stride", [](Config& c, const std::string& v, int l) { c.emit_stride = parse_number<int>(v, l, "emit_stride"); }},
      {"upsample_mode", [](Config& c, const std::string& v, int l) { c.upsample_mode = parse_upsample(v, l); }},
      {"tower_depth", index(&Config::tower_depth, "tower_depth")},
      {"tower_width", index(&Config::tower_width, "tower_width")},
      {"stem_width", index(&Config::stem_width, "stem_width")},
      {"knockout", [](Config& c, const std::string& v, int l) { c.knockout = parse_knockout(v, l); }},
      {"stuff_bias", [](Config& c, const std::string& v, int l) { c.stuff_bias = parse_bool(v, l, "stuff_bias"); }},
      {"n_stuff_classes", index(&Config::n_stuff_classes, "n_stuff_classes")},
      {"n_thing_classes", index(&Config::n_thing_classes, "n_thing_classes")},
      {"scene_size", index(&Config::scene_size, "scene_size")},
      {"scene_count", index(&Config::scene_count, "scene_count")},
      {"min_instances", index(&Config::min_instances, "min_instances")},
      {"max_instances", index(&Config::max_instances, "max_instances")},
      {"seed", [](Config& c, const std::string& v, int l) { c.seed = parse_number<std::uint64_t>(v, l, "seed"); }},
      {"lr", real(&Config::lr, "lr")},
      {"momentum", real(&Config::momentum, "momentum")},
      {"iterations", index(&Config::iterations, "iterations")},
      {"mask_weight", real(&Config::mask_weight, "mask_weight")},
      {"panoptic_weight", real(&Config::panoptic_weight, "panoptic_weight")},
      {"aux_weight", real(&Config::aux_weight, "aux_weight")},
      {"grad_clip", real(&Config::grad_clip, "grad_clip")},
  };
  return table;
}

std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void Config::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what, 0);
  };
  require(basis_width > 0, "basis_width must be positive");
  require(crop_size > 0, "crop_size must be positive");
  require(level_base > 0, "level_base must be positive");
  require(divisibility >= 1, "divisibility must be >= 1");
  require(emit_stride == 4 || emit_stride == 8, "emit_stride must be 4 or 8");
  require(emit_stride == 8 || divisibility % 4 == 0, "emit_stride 4 needs divisibility to be a multiple of 4");
  require(tower_depth >= 0, "tower_depth must be >= 0");
  require(tower_width > 0 && stem_width > 0, "tower_width and stem_width must be positive");
  require(n_stuff_classes >= 1, "n_stuff_classes must be >= 1");
  require(n_thing_classes >= 1 && n_thing_classes <= 3, "n_thing_classes must be in [1, 3] (one per shape)");
  require(scene_size >= 16, "scene_size must be >= 16");
  require(scene_count >= 0, "scene_count must be >= 0");
  require(min_instances >= 0 && max_instances >= min_instances, "instance range is empty");
  require(iterations >= 0, "iterations must be >= 0");
  require(lr >= 0 && momentum >= 0 && momentum < 1, "lr must be >= 0 and momentum in [0, 1)");
  require(emb_dim == 0 || emb_dim == embedding_dim(head_kind, basis_width),
          "emb_dim " + std::to_string(emb_dim) + " does not match head_kind " + head_kind_name(head_kind) +
              " (expected " + std::to_string(embedding_dim(head_kind, basis_width)) + ")");
}

Config parse_config(const std::string& text) {
  Config c;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = raw;
    if (const auto hash = s.find('#'); hash != std::string::npos) s.resize(hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + s + "'", line);
    const std::string key = trim(std::string_view(s).substr(0, eq));
    const std::string value = trim(std::string_view(s).substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown key '" + key + "'", line);
    it->second(c, value, line);
  }
  c.validate();
  return c;
}

Config load_config(const std::string& path) { return parse_config(read_file(path)); }

std::string to_text(const Config& c) {
  std::ostringstream os;
  os << "basis_width=" << c.basis_width << "\n"
     << "emb_dim=" << c.emb_dim << "\n"
     << "head_kind=" << head_kind_name(c.head_kind) << "\n"
     << "crop_size=" << c.crop_size << "\n"
     << "level_base=" << c.level_base << "\n"
     << "divisibility=" << c.divisibility << "\n"
     << "emit_stride=" << c.emit_stride << "\n"
     << "upsample_mode=" << (c.upsample_mode == UpsampleMode::kNearest ? "nearest" : "bilinear") << "\n"
     << "tower_depth=" << c.tower_depth << "\n"
     << "tower_width=" << c.tower_width << "\n"
     << "stem_width=" << c.stem_width << "\n"
     << "knockout=" << knockout_name(c.knockout) << "\n"
     << "stuff_bias=" << (c.stuff_bias ? "true" : "false") << "\n"
     << "n_stuff_classes=" << c.n_stuff_classes << "\n"
     << "n_thing_classes=" << c.n_thing_classes << "\n"
     << "scene_size=" << c.scene_size << "\n"
     << "scene_count=" << c.scene_count << "\n"
     << "min_instances=" << c.min_instances << "\n"
     << "max_instances=" << c.max_instances << "\n"
     << "seed=" << c.seed << "\n"
     << "lr=" << format_real(c.lr) << "\n"
     << "momentum=" << format_real(c.momentum) << "\n"
     << "iterations=" << c.iterations << "\n"
     << "mask_weight=" << format_real(c.mask_weight) << "\n"
     << "panoptic_weight=" << format_real(c.panoptic_weight) << "\n"
     << "aux_weight=" << format_real(c.aux_weight) << "\n"
     << "grad_clip=" << format_real(c.grad_clip) << "\n";
  return os.str();
}

}  // namespace dr1mask

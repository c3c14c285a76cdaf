#include "dr1mask/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dr1mask {

bool GradcheckReport::pass() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.pass; });
}

double GradcheckReport::worst() const {
  double w = 0;
  for (const auto& g : groups) w = std::max(w, g.max_relative_error);
  return w;
}

std::string GradcheckReport::str() const {
  std::ostringstream os;
  os.precision(3);
  for (const auto& g : groups) {
    os << (g.pass ? "  ok   " : "  FAIL ") << g.name << "  max_rel=" << std::scientific << g.max_relative_error
       << std::defaultfloat << "  entries=" << g.checked << "\n";
  }
  return os.str();
}

GradcheckReport gradcheck(const Params<double>& params, const LossBuilder& loss, const GradcheckOptions& opt) {
  GradcheckReport report;
  report.tolerance = opt.tolerance;

  Tape<double> t;
  const VarMap vars = put_params(t, params, true);
  const Var root = loss(t, vars);
  if (t.value(root).size() != 1) throw InvalidArgument("gradcheck: loss must be a scalar");
  t.backward(root);

  auto eval = [&](const Params<double>& p) {
    Tape<double> tp;
    const VarMap v = put_params(tp, p, false);
    return tp.value(loss(tp, v))[0];
  };

  Params<double> probe = params;
  for (const auto& [name, value] : params) {
    const TensorD analytic = t.grad(vars.at(name));
    GroupCheck g;
    g.name = name;
    const Index n = value.size();
    const Index count = opt.max_entries_per_group > 0 ? std::min(n, opt.max_entries_per_group) : n;
    for (Index j = 0; j < count; ++j) {
      const Index i = count == n ? j : (j * n) / count;
      auto& x = probe.at(name)[i];
      const double orig = x;
      const double h = opt.step * std::max(1.0, std::abs(orig));
      x = orig + h;
      const double up = eval(probe);
      x = orig - h;
      const double down = eval(probe);
      x = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[i];
      const double den = std::max(std::abs(a), std::abs(numeric));
      // Both sides below the floor: a frozen path, compared absolutely.
      const double err = den < opt.absolute_floor ? std::abs(a - numeric) : std::abs(a - numeric) / den;
      g.max_relative_error = std::max(g.max_relative_error, err);
      ++g.checked;
    }
    g.pass = g.max_relative_error <= opt.tolerance;
    report.groups.push_back(std::move(g));
  }
  return report;
}

Config tiny_gradcheck_config(HeadKind head) {
  Config c;
  c.basis_width = 4;
  c.head_kind = head;
  c.crop_size = 6;
  c.tower_depth = 1;
  c.tower_width = 4;
  c.stem_width = 2;
  c.n_stuff_classes = 2;
  c.n_thing_classes = 1;
  c.scene_size = 16;
  c.stuff_bias = head == HeadKind::kVector;
  c.validate();
  return c;
}

Scene tiny_gradcheck_scene(const Config& c) {
  DatasetSpec spec;
  spec.seed = 7;
  spec.height = spec.width = c.scene_size;
  spec.n_stuff_classes = c.n_stuff_classes;
  spec.n_thing_classes = c.n_thing_classes;
  spec.min_instances = spec.max_instances = 1;
  spec.min_size_fraction = 0.4;
  spec.max_size_fraction = 0.6;
  return generate_scene(spec, 0);
}

Params<double> tiny_gradcheck_params(const Config& c, std::uint64_t seed) {
  Params<double> p = init_params<double>(c, seed);
  // Nonzero biases keep ReLU inputs away from exact ties with zero.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  for (auto& [name, t] : p) {
    if (name.size() > 2 && name.compare(name.size() - 2, 2, "/b") == 0) {
      for (auto& v : t.data()) v += jitter(rng);
    }
  }
  if (c.stuff_bias) {
    for (auto& v : p.at("heads/stuff_bias").data()) v = jitter(rng);
  }
  return p;
}

GradcheckReport end_to_end_gradcheck(HeadKind head, const GradcheckOptions& opt, bool corrupt) {
  const Config c = tiny_gradcheck_config(head);
  const Scene scene = tiny_gradcheck_scene(c);
  const Params<double> params = tiny_gradcheck_params(c, 11);
  const LossBuilder loss = [&](Tape<double>& t, const VarMap& v) {
    const Var total = scene_loss(t, c, v, scene).total;
    return corrupt ? ad::corrupt_backward(t, total) : total;
  };
  return gradcheck(params, loss, opt);
}

}  // namespace dr1mask

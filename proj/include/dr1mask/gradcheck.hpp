#pragma once

// Central-difference gradient checking of tape-built scalar losses in double precision.

#include <functional>
#include <string>
#include <vector>

#include "dr1mask/model.hpp"

namespace dr1mask {

struct GroupCheck {
  std::string name;
  double max_relative_error = 0;
  Index checked = 0;
  bool pass = true;
};

struct GradcheckReport {
  double tolerance = 0;
  std::vector<GroupCheck> groups;

  bool pass() const;
  double worst() const;
  std::string str() const;
};

/// Builds a scalar (1, 1, 1, 1) loss from parameter vars.
using LossBuilder = std::function<Var(Tape<double>&, const VarMap&)>;

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;             // relative step: h = step·max(1, |θ|)
  double absolute_floor = 1e-8;   // entries where both sides are below this compare absolutely
  Index max_entries_per_group = 0;  // 0 checks every entry; otherwise an evenly spaced subset
};

GradcheckReport gradcheck(const Params<double>& params, const LossBuilder& loss, const GradcheckOptions& opt = {});

namespace ad {

/// Identity in value whose backward negates the gradient; used to prove gradcheck catches errors.
template <typename Scalar>
Var corrupt_backward(Tape<Scalar>& t, Var x) {
  return t.record(t.value(x), {x}, [x](Tape<Scalar>& tp, const Tensor<Scalar>& g) {
    tp.accumulate(x, dr1mask::scale(g, Scalar(-1)));
  });
}

}  // namespace ad

/// Tiny end-to-end configuration: C_b = 4, 16x16 input, one instance.
Config tiny_gradcheck_config(HeadKind head);
/// Scene and double-precision parameters for the tiny end-to-end check.
Scene tiny_gradcheck_scene(const Config& c);
Params<double> tiny_gradcheck_params(const Config& c, std::uint64_t seed);

GradcheckReport end_to_end_gradcheck(HeadKind head, const GradcheckOptions& opt, bool corrupt = false);

}  // namespace dr1mask

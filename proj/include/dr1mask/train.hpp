#pragma once

// Optimizer, checkpoints, the training loop and held-out evaluation.

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dr1mask/config.hpp"
#include "dr1mask/data.hpp"
#include "dr1mask/model.hpp"

namespace dr1mask {

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(const std::string& param, Index index)
      : std::runtime_error("non-finite gradient in parameter '" + param + "' at element " + std::to_string(index)),
        param_(param) {}
  const std::string& param() const { return param_; }

 private:
  std::string param_;
};

/// Dataset generated from the config's data keys and seed.
DatasetSpec dataset_spec(const Config& c);

struct LossReport {
  double mask_loss = 0;
  double panoptic_loss = 0;
  double aux_semantic_loss = 0;
  double total = 0;
};

/// v <- momentum·v + g; p <- p - lr·v. Gradients are checked for finiteness before any update.
template <typename Scalar>
void sgd_step(Params<Scalar>& params, const Params<Scalar>& grads, Params<Scalar>& velocity, double lr,
              double momentum) {
  for (const auto& [name, g] : grads) {
    for (Index i = 0; i < g.size(); ++i) {
      if (!std::isfinite(double(g[i]))) throw NonFiniteGradient(name, i);
    }
  }
  for (auto& [name, p] : params) {
    const auto git = grads.find(name);
    if (git == grads.end()) continue;
    auto vit = velocity.find(name);
    if (vit == velocity.end()) vit = velocity.emplace(name, Tensor<Scalar>(p.shape())).first;
    vit->second.array() = Scalar(momentum) * vit->second.array() + git->second.array();
    p.array() -= Scalar(lr) * vit->second.array();
  }
}

/// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
template <typename Scalar>
double clip_global_norm(Params<Scalar>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads) sq += g.array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar k = Scalar(max_norm / norm);
    for (auto& [name, g] : grads) g.array() *= k;
  }
  return norm;
}

struct Checkpoint {
  Config config;
  Index iteration = 0;  // number of completed SGD steps
  Params<float> params;
  Params<float> velocity;
};

Checkpoint initial_checkpoint(const Config& config);
std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

struct TraceRow {
  Index iteration = 0;
  LossReport loss;
  double mean_iou = 0;
};

std::string trace_csv(const std::vector<TraceRow>& rows);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TraceRow> trace;
  bool diverged = false;
  std::string message;
};

using TrainProgress = std::function<void(const TraceRow&)>;

/// Runs SGD from `start` (or a fresh initialization) until config.iterations steps are done.
/// Iteration i trains on scene i mod count. On a non-finite loss or gradient the loop stops and
/// returns the last good state with diverged set.
TrainResult train_loop(const Config& config, const std::vector<Scene>& scenes, const Checkpoint* start = nullptr,
                       const TrainProgress& progress = {});

/// One forward/backward pass; gradients are returned for every parameter.
LossReport loss_and_gradients(const Config& config, const Params<float>& params, const Scene& scene,
                              Params<float>* grads, double* mean_iou = nullptr);

struct EvalReport {
  double mean_iou = 0;        // crop-space instance-mask IoU, averaged over instances
  double pixel_accuracy = 0;  // panoptic label accuracy at input resolution (NaN without panoptic)
  Index instances = 0;
  Index pixels = 0;
};

EvalReport evaluate(const Checkpoint& c, const std::vector<Scene>& scenes);

struct InferenceOutput {
  PanopticMaps panoptic;                 // at input resolution; empty without the panoptic head
  std::vector<std::vector<float>> masks; // per instance, sigmoid probabilities pasted at input resolution
  Index h = 0;
  Index w = 0;
};

InferenceOutput infer(const Checkpoint& c, const Scene& scene);

}  // namespace dr1mask

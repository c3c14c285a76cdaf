#include "dr1mask/train.hpp"

#include <cstdio>
#include <limits>
#include <sstream>

#include "dr1mask/serialize.hpp"

namespace dr1mask {

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'R', '1', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
const std::string kVelocityPrefix = "velocity/";
const std::string kIterationKey = "iteration=";

bool finite(const LossReport& r) {
  return std::isfinite(r.mask_loss) && std::isfinite(r.panoptic_loss) && std::isfinite(r.aux_semantic_loss) &&
         std::isfinite(r.total);
}

}  // namespace

DatasetSpec dataset_spec(const Config& c) {
  DatasetSpec s;
  s.seed = c.seed;
  s.count = c.scene_count;
  s.height = s.width = c.scene_size;
  s.n_stuff_classes = c.n_stuff_classes;
  s.n_thing_classes = c.n_thing_classes;
  s.min_instances = c.min_instances;
  s.max_instances = c.max_instances;
  return s;
}

Checkpoint initial_checkpoint(const Config& config) {
  Checkpoint c;
  c.config = config;
  c.params = init_params<float>(config, config.seed);
  return c;
}

std::string encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.params.size() + c.velocity.size()));
  for (const auto& [name, t] : c.params) write_tensor(w, name, t);
  for (const auto& [name, t] : c.velocity) write_tensor(w, kVelocityPrefix + name, t);
  w.str(to_text(c.config) + kIterationKey + std::to_string(c.iteration) + "\n");
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw ParseError("not a checkpoint (bad magic)", 0);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  const std::uint32_t count = r.u32();
  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    auto nt = read_tensor<float>(r);
    auto& dest = nt.name.rfind(kVelocityPrefix, 0) == 0 ? c.velocity : c.params;
    std::string key = &dest == &c.velocity ? nt.name.substr(kVelocityPrefix.size()) : nt.name;
    if (dest.count(key)) throw ParseError("duplicate tensor '" + nt.name + "'", at);
    dest.emplace(std::move(key), std::move(nt.tensor));
  }
  const std::size_t echo_at = r.offset();
  const std::string echo = r.str();
  if (!r.at_end()) throw ParseError("trailing bytes after checkpoint", r.offset());
  const auto pos = echo.rfind(kIterationKey);
  if (pos == std::string::npos) throw ParseError("config echo has no iteration line", echo_at);
  try {
    c.config = parse_config(echo.substr(0, pos));
    c.iteration = std::stoll(echo.substr(pos + kIterationKey.size()));
  } catch (const std::exception& e) {
    throw ParseError(std::string("bad config echo: ") + e.what(), echo_at);
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string out = "iteration,mask_loss,panoptic_loss,aux_loss,total,mean_iou\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.iteration),
                  r.loss.mask_loss, r.loss.panoptic_loss, r.loss.aux_semantic_loss, r.loss.total, r.mean_iou);
    out += buf;
  }
  return out;
}

LossReport loss_and_gradients(const Config& config, const Params<float>& params, const Scene& scene,
                              Params<float>* grads, double* mean_iou) {
  Tape<float> t;
  const VarMap vars = put_params(t, params, grads != nullptr);
  const auto loss = scene_loss(t, config, vars, scene);
  LossReport r;
  r.mask_loss = t.value(loss.mask)[0];
  r.panoptic_loss = t.value(loss.panoptic)[0];
  r.aux_semantic_loss = t.value(loss.aux)[0];
  r.total = t.value(loss.total)[0];
  if (mean_iou) *mean_iou = loss.mean_iou;
  if (grads) {
    t.backward(loss.total);
    grads->clear();
    for (const auto& [name, v] : vars) grads->emplace(name, t.grad(v));
  }
  return r;
}

TrainResult train_loop(const Config& config, const std::vector<Scene>& scenes, const Checkpoint* start,
                       const TrainProgress& progress) {
  if (scenes.empty() && config.iterations > 0) throw InvalidArgument("train_loop: no scenes");
  TrainResult out;
  out.checkpoint = start ? *start : initial_checkpoint(config);
  out.checkpoint.config = config;
  Checkpoint& ck = out.checkpoint;
  Params<float> grads;
  while (ck.iteration < config.iterations) {
    const Index it = ck.iteration;
    const Scene& scene = scenes[static_cast<std::size_t>(it % Index(scenes.size()))];
    TraceRow row;
    row.iteration = it;
    row.loss = loss_and_gradients(config, ck.params, scene, &grads, &row.mean_iou);
    if (!finite(row.loss)) {
      out.diverged = true;
      out.message = "non-finite loss at iteration " + std::to_string(it);
      return out;
    }
    clip_global_norm(grads, config.grad_clip);
    try {
      Params<float> next = ck.params;
      Params<float> vel = ck.velocity;
      sgd_step(next, grads, vel, config.lr, config.momentum);
      ck.params = std::move(next);
      ck.velocity = std::move(vel);
    } catch (const NonFiniteGradient& e) {
      out.diverged = true;
      out.message = std::string(e.what()) + " at iteration " + std::to_string(it);
      return out;
    }
    ck.iteration = it + 1;
    out.trace.push_back(row);
    if (progress) progress(row);
  }
  return out;
}

namespace {

struct SceneEval {
  std::vector<double> ious;
  Index correct = 0;
  Index pixels = 0;
};

SceneEval evaluate_scene(const Config& c, const Params<float>& params, const Scene& scene, InferenceOutput* inf) {
  Tape<float> t;
  const VarMap v = put_params(t, params, false);
  const ForwardVars fw = forward(t, c, v, scene.image);
  SceneEval ev;
  std::vector<Var> things;
  if (inf) {
    inf->h = scene.h;
    inf->w = scene.w;
  }
  for (const auto& inst : scene.instances) {
    const Box box = inst.box.to_box();
    const auto es = instance_embeddings(t, fw, box);
    const Var e = es.size() == 1 ? es.front() : ad::mean_embedding(t, es);
    const TensorF logits = t.value(instance_mask_logits(t, c, v, fw, e, box));
    const TensorF target = mask_target<float>(inst, scene.h, scene.w, c.crop_size);
    std::vector<std::uint8_t> pred(std::size_t(logits.size())), gt(pred.size());
    for (Index k = 0; k < logits.size(); ++k) {
      pred[std::size_t(k)] = logits[k] >= 0.0f;
      gt[std::size_t(k)] = target[k] > 0.5f;
    }
    ev.ious.push_back(iou(pred, gt));
    if (c.panoptic_enabled()) things.push_back(e);
    if (inf) {
      const Index bh = inst.box.y1 - inst.box.y0, bw = inst.box.x1 - inst.box.x0;
      const TensorF prob = resize_bilinear(sigmoid(logits), bh, bw);
      std::vector<float> full(std::size_t(scene.h * scene.w), 0.0f);
      for (Index y = 0; y < bh; ++y)
        for (Index x = 0; x < bw; ++x) full[std::size_t((inst.box.y0 + y) * scene.w + inst.box.x0 + x)] = prob(0, 0, y, x);
      inf->masks.push_back(std::move(full));
    }
  }
  if (c.panoptic_enabled()) {
    const TensorF logits = t.value(panoptic_logits_image(t, c, v, fw, things));
    const PanopticMaps maps = panoptic_decode(logits, c.n_stuff_classes);
    const auto labels = panoptic_labels(scene, c.n_stuff_classes);
    for (std::size_t k = 0; k < labels.size(); ++k) ev.correct += maps.channel[k] == labels[k] ? 1 : 0;
    ev.pixels = Index(labels.size());
    if (inf) inf->panoptic = maps;
  }
  return ev;
}

}  // namespace

EvalReport evaluate(const Checkpoint& ck, const std::vector<Scene>& scenes) {
  EvalReport r;
  double iou_sum = 0;
  Index correct = 0;
  for (const auto& s : scenes) {
    const auto ev = evaluate_scene(ck.config, ck.params, s, nullptr);
    for (double v : ev.ious) iou_sum += v;
    r.instances += Index(ev.ious.size());
    correct += ev.correct;
    r.pixels += ev.pixels;
  }
  r.mean_iou = r.instances ? iou_sum / double(r.instances) : std::numeric_limits<double>::quiet_NaN();
  r.pixel_accuracy = r.pixels ? double(correct) / double(r.pixels) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

InferenceOutput infer(const Checkpoint& ck, const Scene& scene) {
  InferenceOutput out;
  evaluate_scene(ck.config, ck.params, scene, &out);
  return out;
}

}  // namespace dr1mask

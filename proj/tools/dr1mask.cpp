// dr1mask command-line entry point.

#include <CLI11.hpp>

#include <Eigen/Core>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "dr1mask/bench.hpp"
#include "dr1mask/check.hpp"
#include "dr1mask/image_io.hpp"
#include "dr1mask/serialize.hpp"
#include "dr1mask/train.hpp"

namespace fs = std::filesystem;
using namespace dr1mask;

namespace {

enum Exit { kOk = 0, kVerification = 1, kUsage = 2, kIo = 3 };

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out = ".";
};

Config load(const Globals& g) {
  Config c = g.config_path.empty() ? Config{} : load_config(g.config_path);
  if (g.seed) c.seed = *g.seed;
  c.validate();
  return c;
}

// Prefixes decode errors with the file they came from.
template <typename F>
auto from_file(const std::string& path, F&& load) {
  try {
    return load(path);
  } catch (const ParseError& e) {
    throw IoError(path + ": " + e.what());
  }
}

std::string out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out);
  return (fs::path(g.out) / name).string();
}

int cmd_check(const std::vector<std::string>& only, bool corrupt, bool full, const Globals& g) {
  CheckOptions opt;
  opt.only = only;
  opt.corrupt_backward = corrupt;
  opt.gradcheck_entries = full ? 0 : opt.gradcheck_entries;
  opt.seed = g.seed.value_or(0);
  const auto suites = run_checks(opt);
  std::cout << format_check_table(suites);
  bool ok = true;
  for (const auto& s : suites) ok = ok && s.pass();
  std::cout << (ok ? "all checks passed\n" : "CHECK FAILED\n");
  return ok ? kOk : kVerification;
}

int cmd_gen(const Globals& g) {
  const Config c = load(g);
  const DatasetSpec spec = dataset_spec(c);
  const auto scenes = generate(spec);
  save_dataset(g.out, spec, scenes);
  Index dropped = 0;
  for (const auto& s : scenes) dropped += s.dropped;
  std::cout << "wrote " << scenes.size() << " scenes to " << g.out << " (" << dropped << " instances dropped)\n";
  return kOk;
}

int cmd_train(const std::string& data, const std::string& resume, bool quiet, const Globals& g) {
  const Config c = load(g);
  const auto scenes = data.empty() ? generate(dataset_spec(c)) : from_file(data, load_dataset);
  std::optional<Checkpoint> start;
  if (!resume.empty()) start = from_file(resume, load_checkpoint);
  const Index every = std::max<Index>(1, c.iterations / 20);
  const auto r = train_loop(c, scenes, start ? &*start : nullptr, [&](const TraceRow& row) {
    if (!quiet && (row.iteration % every == 0 || row.iteration + 1 == c.iterations)) {
      std::fprintf(stderr, "iter %6lld  total %.4f  mask %.4f  panoptic %.4f  aux %.4f\n",
                   static_cast<long long>(row.iteration), row.loss.total, row.loss.mask_loss, row.loss.panoptic_loss,
                   row.loss.aux_semantic_loss);
    }
  });
  save_checkpoint(out_path(g, "checkpoint.bin"), r.checkpoint);
  write_file(out_path(g, "metrics.csv"), trace_csv(r.trace));
  std::cout << "checkpoint at iteration " << r.checkpoint.iteration << " written to " << g.out << "\n";
  if (r.diverged) {
    std::cerr << "training diverged: " << r.message << "\n";
    return kVerification;
  }
  return kOk;
}

int cmd_infer(const std::string& ckpt, const std::string& scene_path, const Globals& g) {
  const Checkpoint c = from_file(ckpt, load_checkpoint);
  const Scene scene = from_file(scene_path, load_scene);
  const auto out = infer(c, scene);
  const std::string meta = instance_metadata(scene);
  write_file(out_path(g, "instances.txt"), meta);
  for (std::size_t i = 0; i < out.masks.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "instance_%03zu.pgm", i);
    write_pgm(out_path(g, name), out.masks[i], out.h, out.w);
  }
  if (!out.panoptic.channel.empty()) {
    write_file(out_path(g, "panoptic.ppm"), encode_label_ppm(out.panoptic.channel, out.h, out.w, c.config.n_stuff_classes));
  } else {
    std::cerr << "note: head_kind=" << head_kind_name(c.config.head_kind) << " has no panoptic head; only masks written\n";
  }
  std::cout << "wrote " << out.masks.size() << " instance masks to " << g.out << "\n";
  return kOk;
}

int cmd_bench(const std::vector<Index>& channels, const std::vector<Index>& kernels, const std::vector<Index>& sizes,
              int reps, bool markdown, const Globals& g) {
  std::vector<BenchCase> grid;
  for (Index c : channels)
    for (Index k : kernels)
      for (Index s : sizes) {
        BenchCase b;
        b.channels = c;
        b.kernel = k;
        b.h = b.w = s;
        b.repetitions = reps;
        b.seed = g.seed.value_or(0);
        grid.push_back(b);
      }
  const auto rows = run_bench(grid);
  const std::string csv = report_csv(rows);
  write_file(out_path(g, "bench.csv"), csv);
  std::cout << (markdown ? report_markdown(rows) : csv);
  for (const auto& r : rows) {
    if (!r.gate_passed) {
      std::cerr << "correctness gate failed for C=" << r.spec.channels << " k=" << r.spec.kernel << "\n";
      return kVerification;
    }
  }
  return kOk;
}

int cmd_params(const Globals& g) {
  const Config c = load(g);
  std::printf("basis_width=%lld\n", static_cast<long long>(c.basis_width));
  std::printf("%-9s %12s %12s %8s %16s %10s\n", "head", "attention", "projection", "shared", "per_instance", "emb_dim");
  for (auto k : {HeadKind::kVector, HeadKind::kFull, HeadKind::kFactored}) {
    const auto p = count_params(k, c.basis_width);
    std::printf("%-9s %12lld %12lld %8lld %16lld %10lld\n", head_kind_name(k), static_cast<long long>(p.per_instance_attention),
                static_cast<long long>(p.per_instance_projection), static_cast<long long>(p.shared),
                static_cast<long long>(p.per_instance_total()), static_cast<long long>(embedding_dim(k, c.basis_width)));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic rank-1 convolution masking toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--seed", g.seed, "overrides the config seed");
  app.add_option("--threads", g.threads, "Eigen worker threads (default 1)")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");

  auto* check = app.add_subcommand("check", "run the verification suites");
  std::vector<std::string> only;
  bool corrupt = false, full = false;
  check->add_option("--only", only, "suite names")->check(CLI::IsMember(check_suite_names()));
  check->add_flag("--full-gradcheck", full, "check every entry of every parameter group end to end");
  check->add_flag("--corrupt-backward", corrupt)->group("");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset into --out");

  auto* train = app.add_subcommand("train", "train and write checkpoint.bin and metrics.csv into --out");
  std::string data, resume;
  bool quiet = false;
  train->add_option("--data", data, "dataset directory (default: generate from the config)");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_flag("--quiet", quiet, "no progress lines");

  auto* inf = app.add_subcommand("infer", "write panoptic.ppm, instance masks and instances.txt into --out");
  std::string ckpt, scene;
  inf->add_option("--checkpoint", ckpt)->required();
  inf->add_option("--scene", scene, "scene file written by gen-data")->required();

  auto* bench = app.add_subcommand("bench", "time static, fast and naive DR1Conv; writes bench.csv into --out");
  std::vector<Index> channels{1, 8, 32}, kernels{1, 3}, sizes{16, 64};
  int reps = 5;
  bool markdown = false;
  bench->add_option("--channels", channels)->delimiter(',');
  bench->add_option("--kernels", kernels)->delimiter(',');
  bench->add_option("--sizes", sizes)->delimiter(',');
  bench->add_option("--repetitions", reps)->check(CLI::Range(3, 1000));
  bench->add_flag("--markdown", markdown, "print a markdown table instead of CSV");

  auto* params = app.add_subcommand("params", "print per-instance parameter counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (g.threads > 1) {
    std::cerr << "warning: --threads " << g.threads << " allows nondeterministic reductions; bitwise replay is not guaranteed\n";
  }
  Eigen::setNbThreads(g.threads);

  try {
    if (check->parsed()) return cmd_check(only, corrupt, full, g);
    if (gen->parsed()) return cmd_gen(g);
    if (train->parsed()) return cmd_train(data, resume, quiet, g);
    if (inf->parsed()) return cmd_infer(ckpt, scene, g);
    if (bench->parsed()) return cmd_bench(channels, kernels, sizes, reps, markdown, g);
    if (params->parsed()) return cmd_params(g);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << (g.config_path.empty() ? "" : g.config_path + ": ") << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

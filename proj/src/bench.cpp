#include "dr1mask/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>

namespace dr1mask {

namespace {

constexpr double kMinSampleMs = 1.0;

double relative_error(const TensorF& a, const TensorF& b) {
  double diff = 0, scale = 0;
  for (Index i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(double(a[i]) - double(b[i])));
    scale = std::max(scale, std::abs(double(b[i])));
  }
  return diff / std::max(scale, 1e-30);
}

template <typename F>
double elapsed_ms(F&& f, int loops) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < loops; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / loops;
}

template <typename F>
double median_ms(F&& f, const BenchCase& c, int& loops) {
  for (int i = 0; i < c.warmup; ++i) f();
  loops = 1;
  while (elapsed_ms(f, loops) * loops < kMinSampleMs && loops < (1 << 20)) loops *= 2;
  std::vector<double> s;
  for (int r = 0; r < c.repetitions; ++r) s.push_back(elapsed_ms(f, loops));
  std::sort(s.begin(), s.end());
  return s[s.size() / 2];
}

// Keeps results observable so the optimizer cannot drop a timed call.
volatile float g_sink = 0;

}  // namespace

BenchRow run_bench_case(const BenchCase& c) {
  if (c.channels < 1 || c.h < 1 || c.w < 1 || c.kernel < 1 || c.kernel % 2 == 0) {
    throw InvalidArgument("bench: channels, extents must be positive and the kernel odd");
  }
  if (c.repetitions < 3) throw InvalidArgument("bench: repetitions must be at least 3");
  std::mt19937_64 rng(c.seed);
  const Shape s{1, c.channels, c.h, c.w};
  const TensorF x = TensorF::uniform(s, rng);
  const DynamicFactors<float> f{TensorF::uniform(s, rng, 0.5f, 1.5f), TensorF::uniform(s, rng, 0.5f, 1.5f)};
  const DynamicFactors<float> ones{TensorF::ones(s), TensorF::ones(s)};
  const DR1ConvLayer<float> layer{
      {TensorF::uniform(Shape{c.channels, c.channels, c.kernel, c.kernel}, rng), TensorF::uniform(Shape{1, c.channels, 1, 1}, rng)}};

  BenchRow row;
  row.spec = c;
  row.flops = flops_dr1conv(c.channels, c.h, c.w, c.kernel, c.kernel);
  const TensorF fast = dr1conv_forward(x, f, layer);
  const TensorF naive = dr1conv_materialized(x, f, layer);
  const TensorF stat = conv2d(x, layer.kernel);
  row.gate_error = std::max(relative_error(fast, naive), relative_error(dr1conv_forward(x, ones, layer), stat));
  row.gate_passed = row.gate_error <= kBenchGateTolerance;
  if (!row.gate_passed) return row;

  int loops = 1;
  row.static_ms = median_ms([&] { g_sink = conv2d(x, layer.kernel)[0]; }, c, loops);
  row.inner_loops = loops;
  row.fast_ms = median_ms([&] { g_sink = dr1conv_forward(x, f, layer)[0]; }, c, loops);
  row.inner_loops = std::max(row.inner_loops, loops);
  row.naive_ms = median_ms([&] { g_sink = dr1conv_materialized(x, f, layer)[0]; }, c, loops);
  row.inner_loops = std::max(row.inner_loops, loops);
  row.naive_over_fast = row.fast_ms > 0 ? row.naive_ms / row.fast_ms : 0;
  return row;
}

std::vector<BenchRow> run_bench(const std::vector<BenchCase>& grid) {
  std::vector<BenchRow> rows;
  for (const auto& c : grid) rows.push_back(run_bench_case(c));
  return rows;
}

namespace {

std::vector<std::string> cells(const BenchRow& r) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  return {std::to_string(r.spec.channels), std::to_string(r.spec.kernel), std::to_string(r.spec.h),
          std::to_string(r.spec.w),        num(r.static_ms),             num(r.fast_ms),
          num(r.naive_ms),                 std::to_string(r.flops.fast), std::to_string(r.flops.naive),
          num(r.naive_over_fast)};
}

const std::vector<std::string> kColumns{"channels", "kernel",   "h",           "w",           "static_ms",
                                        "fast_ms",  "naive_ms", "fast_flops", "naive_flops", "naive_over_fast"};

}  // namespace

std::string report_csv(const std::vector<BenchRow>& rows) {
  std::string out;
  for (std::size_t i = 0; i < kColumns.size(); ++i) out += (i ? "," : "") + kColumns[i];
  out += "\n";
  for (const auto& r : rows) {
    const auto c = cells(r);
    for (std::size_t i = 0; i < c.size(); ++i) out += (i ? "," : "") + c[i];
    out += "\n";
  }
  return out;
}

std::string report_markdown(const std::vector<BenchRow>& rows) {
  std::string out = "|";
  for (const auto& c : kColumns) out += " " + c + " |";
  out += " notes |\n|";
  for (std::size_t i = 0; i <= kColumns.size(); ++i) out += " --- |";
  out += "\n";
  for (const auto& r : rows) {
    out += "|";
    for (const auto& c : cells(r)) out += " " + c + " |";
    std::string note;
    if (!r.gate_passed) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "gate failed (%.3g)", r.gate_error);
      note = buf;
    } else if (r.inner_loops > 1) {
      note = "auto-scaled x" + std::to_string(r.inner_loops);
    }
    out += " " + note + " |\n";
  }
  return out;
}

}  // namespace dr1mask

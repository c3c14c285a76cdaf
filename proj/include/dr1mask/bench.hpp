#pragma once

// Timing harness for static convolution, the fast DR1Conv path and the naive per-position path.

#include <string>
#include <vector>

#include "dr1mask/dr1conv.hpp"

namespace dr1mask {

struct BenchCase {
  Index channels = 32;
  Index kernel = 3;
  Index h = 64;
  Index w = 64;
  int repetitions = 5;
  int warmup = 1;
  std::uint64_t seed = 0;
};

struct BenchRow {
  BenchCase spec;
  double static_ms = 0;
  double fast_ms = 0;
  double naive_ms = 0;
  FlopCount flops;
  double naive_over_fast = 0;
  double gate_error = 0;  // worst relative disagreement between the three paths
  bool gate_passed = false;
  int inner_loops = 1;    // >1 when a single call was too short to time and was repeated
};

inline constexpr double kBenchGateTolerance = 1e-4;

/// Median wall time of repeated calls; auto-scales the inner loop count under ~1 ms per sample.
/// Timings are left at zero for a case whose paths disagree beyond kBenchGateTolerance.
BenchRow run_bench_case(const BenchCase& c);
std::vector<BenchRow> run_bench(const std::vector<BenchCase>& grid);

std::string report_csv(const std::vector<BenchRow>& rows);
std::string report_markdown(const std::vector<BenchRow>& rows);

}  // namespace dr1mask

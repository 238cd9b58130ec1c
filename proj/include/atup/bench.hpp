#pragma once

// Timing harness for the upsampling kernels.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "atup/fast.hpp"
#include "atup/reference.hpp"

namespace atup {

struct BenchShape {
  std::size_t cin = 32, cout = 32, h = 64, w = 64;
  int s = 2, k = 3;
};

struct BenchRecord {
  std::string op;
  BenchShape shape;
  int threads = 1;
  std::uint64_t median_ns = 0;
  std::uint64_t flops = 0;
  double gflops = 0;
  double checksum = 0;
  std::string check;  // "ok" when the checksum matches the reference run
};

/// Ops: attention_ref, attention_fast, deconv_ref, deconv_fast.
inline const std::vector<std::string>& bench_ops() {
  static const std::vector<std::string> ops{"attention_ref", "attention_fast", "deconv_ref", "deconv_fast"};
  return ops;
}

template <class T>
double checksum(const Tensor<T>& t) {
  double s = 0;
  for (T v : t.data()) s += static_cast<double>(v);
  return s;
}

namespace detail {

template <class T>
double abs_mass(const Tensor<T>& t) {
  double s = 0;
  for (T v : t.data()) s += std::abs(static_cast<double>(v));
  return s;
}

}  // namespace detail

/// Times every op on every shape (median of `reps` runs after `warmup`
/// untimed runs). Each record's checksum is compared with a 32-bit reference
/// evaluation of the same operator; mismatching records are dropped and
/// reported on `log`.
inline std::vector<BenchRecord> bench(const std::vector<std::string>& ops, const std::vector<BenchShape>& grid,
                                      int reps = 20, int threads = default_threads(), std::uint64_t seed = 0,
                                      int warmup = 1, double tol = 1e-4, std::ostream* log = nullptr) {
  for (const auto& op : ops)
    if (std::find(bench_ops().begin(), bench_ops().end(), op) == bench_ops().end())
      throw ParamError("bench: unknown op " + op);
  if (reps < 1) throw ParamError("bench: reps must be >= 1");
  std::vector<BenchRecord> out;
  for (const auto& sh : grid) {
    Rng rng(seed);
    const auto x = uniform_tensor<float>({sh.cin, sh.h, sh.w}, -1, 1, rng);
    const auto ap = AttnUpsampleParams<float>::init(sh.cin, sh.cout, sh.k, sh.s, rng);
    const auto dp = DeconvParams<float>::init(sh.cin, sh.cout, sh.k, sh.s, rng);
    std::optional<Tensor<float>> ref_attn, ref_deconv;
    for (const auto& op : ops) {
      const bool attn = op.rfind("attention", 0) == 0;
      const bool fast = op.ends_with("_fast");
      auto run = [&]() -> Tensor<float> {
        if (attn) return fast ? attention_upsample_fast(x, ap, threads) : attention_upsample(x, ap);
        return fast ? transposed_conv2d_fast(x, dp, threads) : transposed_conv2d(x, dp);
      };
      for (int w = 0; w < warmup; ++w) (void)run();
      std::vector<std::uint64_t> ns;
      Tensor<float> y;
      for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        y = run();
        ns.push_back(static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count()));
      }
      std::sort(ns.begin(), ns.end());
      auto& ref = attn ? ref_attn : ref_deconv;
      if (!ref) ref = attn ? attention_upsample(x, ap) : transposed_conv2d(x, dp);
      BenchRecord rec;
      rec.op = op;
      rec.shape = sh;
      rec.threads = fast ? threads : 1;
      rec.median_ns = ns[ns.size() / 2];
      rec.flops = attn ? flops_attention_upsample(sh.cin, sh.cout, sh.h, sh.w, sh.s, sh.k)
                       : flops_transposed_conv(sh.cin, sh.cout, sh.h, sh.w, sh.s, sh.k);
      rec.gflops = static_cast<double>(rec.flops) / static_cast<double>(std::max<std::uint64_t>(rec.median_ns, 1));
      rec.checksum = checksum(y);
      const double ref_sum = checksum(*ref);
      if (std::abs(rec.checksum - ref_sum) > tol * std::max(1.0, detail::abs_mass(*ref))) {
        if (log)
          *log << "bench: checksum mismatch for " << op << " (" << rec.checksum << " vs " << ref_sum
               << "), record dropped\n";
        continue;
      }
      rec.check = "ok";
      out.push_back(rec);
    }
  }
  return out;
}

inline constexpr std::string_view kBenchHeader = "op,Cin,Cout,H,W,S,K,threads,median_ns,flops,gflops,check";

inline std::string bench_csv(const std::vector<BenchRecord>& records) {
  std::string out(kBenchHeader);
  out += '\n';
  for (const auto& r : records) {
    char g[32];
    std::snprintf(g, sizeof g, "%.4f", r.gflops);
    out += r.op + "," + std::to_string(r.shape.cin) + "," + std::to_string(r.shape.cout) + "," +
           std::to_string(r.shape.h) + "," + std::to_string(r.shape.w) + "," + std::to_string(r.shape.s) + "," +
           std::to_string(r.shape.k) + "," + std::to_string(r.threads) + "," + std::to_string(r.median_ns) + "," +
           std::to_string(r.flops) + "," + g + "," + r.check + "\n";
  }
  return out;
}

}  // namespace atup

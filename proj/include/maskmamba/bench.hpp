#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maskmamba/blas_env.hpp"
#include "maskmamba/layers.hpp"

namespace maskmamba {

// One timing/memory measurement of a standalone layer forward pass.
struct BenchRecord {
  LayerKind kind = LayerKind::BiMambaV2;
  Index L = 0;
  Index batch = 1;
  Index C = 0;
  int repeats = 0;
  double median_ms = 0.0;
  double mean_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t peak_bytes = 0;
  std::int64_t flops = 0;
  bool oom = false;  // allocation budget exceeded; timing fields are invalid
};

struct SweepPlan {
  std::vector<LayerKind> kinds;
  std::vector<Index> lengths;  // strictly increasing
  std::vector<Index> batches = {1};
  Index width = 768;
  int repeats = 5;
  int warmups = 2;
  int threads = 1;
  LayerDims dims;  // width is overridden per sweep

  void validate() const {
    if (kinds.empty() || lengths.empty() || batches.empty())
      throw std::invalid_argument("SweepPlan: kinds, lengths and batches must be non-empty");
    if (repeats < 5) throw std::invalid_argument("SweepPlan: repeats must be >= 5");
    if (warmups < 2) throw std::invalid_argument("SweepPlan: warmups must be >= 2");
    for (std::size_t i = 1; i < lengths.size(); ++i)
      if (lengths[i] <= lengths[i - 1])
        throw std::invalid_argument("SweepPlan: lengths must be strictly increasing");
  }
};

// Times forward-only inference of one layer. Warmup iterations are excluded
// from the statistics; peak_bytes is the high-water mark of transient tensor
// allocations above the pre-forward baseline. An allocation-budget failure is
// reported as an out-of-memory record rather than an error.
template <class T = float>
inline BenchRecord time_layer(LayerKind kind, Index L, Index batch, Index C, int repeats,
                              const LayerDims& base_dims = {}, int warmups = 2) {
  if (repeats < 5) throw std::invalid_argument("time_layer: repeats must be >= 5");
  BenchRecord rec;
  rec.kind = kind;
  rec.L = L;
  rec.batch = batch;
  rec.C = C;
  rec.repeats = repeats;
  rec.flops = FlopModel::flops(kind, batch, L, C, base_dims);

  NoGradGuard ng;
  const bool finite_prev = finite_checks();
  finite_checks() = false;
  auto& tracker = AllocTracker::instance();
  try {
    LayerDims dims = base_dims;
    dims.width = C;
    Rng rng(0x9e3779b9u ^ static_cast<std::uint64_t>(static_cast<int>(kind) + 1) * 1000003u ^
            static_cast<std::uint64_t>(L * 31 + batch));
    auto layer = make_layer<T>(kind, dims, rng);
    Tensor<T> x = Tensor<T>::randn({batch, L, C}, rng);

    for (int w = 0; w < warmups; ++w) layer->forward(x);

    std::vector<double> times;
    std::size_t peak = 0;
    for (int r = 0; r < repeats; ++r) {
      const std::size_t live = tracker.current_bytes();
      tracker.reset_peak();
      const auto t0 = std::chrono::steady_clock::now();
      { auto y = layer->forward(x); }
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      peak = std::max(peak, tracker.peak_bytes() - live);
    }
    std::sort(times.begin(), times.end());
    rec.median_ms = times[times.size() / 2];
    double sum = 0;
    for (double t : times) sum += t;
    rec.mean_ms = sum / static_cast<double>(times.size());
    rec.p95_ms = times[std::min(times.size() - 1,
                                static_cast<std::size_t>(std::ceil(0.95 * times.size())) - 1)];
    rec.peak_bytes = peak;
  } catch (const std::bad_alloc&) {
    rec.oom = true;
    rec.peak_bytes = tracker.peak_bytes();
  }
  finite_checks() = finite_prev;
  return rec;
}

template <class T = float>
inline std::vector<BenchRecord> run_sweep(const SweepPlan& plan) {
  plan.validate();
  set_compute_threads(plan.threads);
  std::vector<BenchRecord> records;
  for (LayerKind kind : plan.kinds)
    for (Index batch : plan.batches)
      for (Index L : plan.lengths)
        records.push_back(
            time_layer<T>(kind, L, batch, plan.width, plan.repeats, plan.dims, plan.warmups));
  return records;
}

// ---------------------------------------------------------------------------
// scaling fits
// ---------------------------------------------------------------------------

struct ExponentFit {
  double exponent = 0.0;
  double stderr_ = 0.0;
};

// Least-squares slope of log(y) vs log(x).
inline ExponentFit fit_log_slope(const std::vector<std::pair<double, double>>& points) {
  const std::size_t n = points.size();
  if (n < 2) throw std::invalid_argument("fit_log_slope: need at least 2 points");
  double sx = 0, sy = 0;
  for (auto [x, y] : points) {
    if (!(x > 0) || !(y > 0)) throw std::invalid_argument("fit_log_slope: positive data only");
    sx += std::log(x);
    sy += std::log(y);
  }
  const double mx = sx / static_cast<double>(n), my = sy / static_cast<double>(n);
  double sxx = 0, sxy = 0;
  for (auto [x, y] : points) {
    const double dx = std::log(x) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(y) - my);
  }
  const double slope = sxy / sxx;
  double ss_res = 0;
  const double intercept = my - slope * mx;
  for (auto [x, y] : points) {
    const double r = std::log(y) - (intercept + slope * std::log(x));
    ss_res += r * r;
  }
  ExponentFit fit;
  fit.exponent = slope;
  fit.stderr_ = n > 2 ? std::sqrt(ss_res / static_cast<double>(n - 2) / sxx) : 0.0;
  return fit;
}

enum class BenchMetric { Time, Memory };

// Slope of log(metric) vs log(L) over the given records (one layer kind).
// Requires >= 4 valid points spanning at least 8x in L.
inline ExponentFit fit_scaling_exponent(const std::vector<BenchRecord>& records,
                                        BenchMetric metric = BenchMetric::Time) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : records) {
    if (r.oom) continue;
    const double y = metric == BenchMetric::Time ? r.median_ms
                                                 : static_cast<double>(r.peak_bytes);
    pts.emplace_back(static_cast<double>(r.L), y);
  }
  if (pts.size() < 4)
    throw std::invalid_argument("fit_scaling_exponent: need >= 4 valid points, have " +
                                std::to_string(pts.size()));
  double lo = pts.front().first, hi = pts.front().first;
  for (auto [x, y] : pts) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (hi < 8.0 * lo)
    throw std::invalid_argument("fit_scaling_exponent: points must span at least 8x in L");
  return fit_log_slope(pts);
}

// Records restricted to the top span of the sweep (largest L down to
// L_max/span_factor); the asymptotic regime where the quadratic attention
// term dominates the layer's linear costs.
inline std::vector<BenchRecord> tail_records(const std::vector<BenchRecord>& records,
                                             double span_factor = 8.0) {
  Index max_l = 0;
  for (const auto& r : records) max_l = std::max(max_l, r.L);
  std::vector<BenchRecord> out;
  for (const auto& r : records)
    if (static_cast<double>(r.L) * span_factor >= static_cast<double>(max_l)) out.push_back(r);
  return out;
}

// Smallest L where a's median stays below b's for the rest of the shared
// grid; ties are not a crossover. Both sweeps must cover the same lengths.
inline std::optional<Index> find_crossover(const std::vector<BenchRecord>& a,
                                           const std::vector<BenchRecord>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("find_crossover: grids differ in size");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].L != b[i].L)
      throw std::invalid_argument("find_crossover: L grids differ at index " + std::to_string(i));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].oom || b[i].oom) continue;
    bool wins_rest = true;
    for (std::size_t j = i; j < a.size(); ++j) {
      if (a[j].oom || b[j].oom) continue;
      if (!(a[j].median_ms < b[j].median_ms)) {
        wins_rest = false;
        break;
      }
    }
    if (wins_rest) return a[i].L;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// CSV / summary output
// ---------------------------------------------------------------------------

inline std::string bench_csv_header() {
  return "kind,L,batch,C,repeats,median_ms,mean_ms,p95_ms,peak_bytes,flops";
}

// OOM rows leave the three timing fields empty (see docs/formats.md).
inline std::string bench_csv_row(const BenchRecord& r) {
  std::ostringstream os;
  os << layer_kind_name(r.kind) << ',' << r.L << ',' << r.batch << ',' << r.C << ',' << r.repeats
     << ',';
  if (r.oom) {
    os << ",,";
  } else {
    os.precision(6);
    os << std::fixed << r.median_ms << ',' << r.mean_ms << ',' << r.p95_ms;
  }
  os << ',' << r.peak_bytes << ',' << r.flops;
  return os.str();
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRecord>& records) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << bench_csv_header() << "\n";
  for (const auto& r : records) os << bench_csv_row(r) << "\n";
}

inline std::string bench_summary(const std::vector<BenchRecord>& records) {
  std::ostringstream os;
  os.precision(3);
  std::vector<LayerKind> kinds;
  for (const auto& r : records)
    if (std::find(kinds.begin(), kinds.end(), r.kind) == kinds.end()) kinds.push_back(r.kind);

  auto records_of = [&](LayerKind k) {
    std::vector<BenchRecord> out;
    for (const auto& r : records)
      if (r.kind == k) out.push_back(r);
    return out;
  };

  for (LayerKind k : kinds) {
    auto recs = records_of(k);
    os << layer_kind_name(k) << ":\n";
    int oom_count = 0;
    for (const auto& r : recs) oom_count += r.oom ? 1 : 0;
    if (oom_count > 0) os << "  oom points: " << oom_count << "\n";
    try {
      auto full = fit_scaling_exponent(recs, BenchMetric::Time);
      os << "  time exponent (full range): " << std::fixed << full.exponent << " +- "
         << full.stderr_ << "\n";
      auto tail = fit_scaling_exponent(tail_records(recs), BenchMetric::Time);
      os << "  time exponent (large L):    " << tail.exponent << " +- " << tail.stderr_ << "\n";
      auto mem_full = fit_scaling_exponent(recs, BenchMetric::Memory);
      os << "  memory exponent (full range): " << mem_full.exponent << " +- " << mem_full.stderr_
         << "\n";
      auto mem_tail = fit_scaling_exponent(tail_records(recs), BenchMetric::Memory);
      os << "  memory exponent (large L):    " << mem_tail.exponent << " +- " << mem_tail.stderr_
         << "\n";
    } catch (const std::exception& e) {
      os << "  exponent fit unavailable: " << e.what() << "\n";
    }
  }
  for (std::size_t i = 0; i < kinds.size(); ++i)
    for (std::size_t j = 0; j < kinds.size(); ++j) {
      if (i == j) continue;
      auto ra = records_of(kinds[i]);
      auto rb = records_of(kinds[j]);
      if (ra.size() != rb.size()) continue;
      bool same_grid = true;
      for (std::size_t t = 0; t < ra.size(); ++t) same_grid &= ra[t].L == rb[t].L;
      if (!same_grid) continue;
      auto cross = find_crossover(ra, rb);
      os << "crossover " << layer_kind_name(kinds[i]) << " < " << layer_kind_name(kinds[j])
         << ": ";
      if (cross)
        os << "L* = " << *cross << "\n";
      else
        os << "none\n";
    }
  return os.str();
}

}  // namespace maskmamba

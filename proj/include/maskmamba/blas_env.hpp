#pragma once

namespace maskmamba {

// Pins the BLAS backend to one thread (the default for deterministic training
// and single-threaded benchmarking) or opts in to multi-threaded kernels.
void set_compute_threads(int n);
int compute_threads();

}  // namespace maskmamba

#include "maskmamba/blas_env.hpp"

extern "C" void openblas_set_num_threads(int);

namespace maskmamba {

namespace {
int g_threads = 0;
}

void set_compute_threads(int n) {
  if (n < 1) n = 1;
  g_threads = n;
  openblas_set_num_threads(n);
}

int compute_threads() {
  if (g_threads == 0) set_compute_threads(1);
  return g_threads;
}

namespace {
// Single-threaded kernels unless a caller opts in.
struct InitThreads {
  InitThreads() { set_compute_threads(1); }
} init_threads;
}  // namespace

}  // namespace maskmamba

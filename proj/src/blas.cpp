#include "nfcs/gemm.hpp"

#include <cstdlib>

extern "C" void openblas_set_num_threads(int);

namespace nfcs {

// Pin BLAS to one thread: evaluation jobs parallelize at the job level, and
// single-threaded GEMM keeps accumulation order (and thus results) identical
// no matter how many jobs run at once.
void blas_init() {
  static const bool once = [] {
    setenv("OPENBLAS_NUM_THREADS", "1", 0);
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}

}  // namespace nfcs

#pragma once

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace niwmeta {

/// How the data-parallel loops below are run. Both policies produce
/// bit-identical results: every index writes its own slot and reductions
/// happen afterwards in index order.
enum class ExecPolicy { serial, parallel };

/// Serial reference loop.
template <class Fn>
void for_each_index_serial(std::ptrdiff_t n, Fn&& fn) {
  for (std::ptrdiff_t i = 0; i < n; ++i) fn(i);
}

/// OpenMP loop; falls back to the serial loop when built without OpenMP.
template <class Fn>
void for_each_index_parallel(std::ptrdiff_t n, Fn&& fn) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) fn(i);
#else
  for_each_index_serial(n, fn);
#endif
}

template <class Fn>
void for_each_index(ExecPolicy policy, std::ptrdiff_t n, Fn&& fn) {
  if (policy == ExecPolicy::parallel && n > 1) {
    for_each_index_parallel(n, fn);
  } else {
    for_each_index_serial(n, fn);
  }
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace niwmeta

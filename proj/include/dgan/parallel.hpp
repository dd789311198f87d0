#pragma once

#include <cstddef>
#include <functional>

namespace dgan {

// Worker count used by parallel_for. Resolution order: explicit override,
// then the DGAN_WORKERS environment variable, then hardware concurrency.
std::size_t worker_count();
void set_worker_count(std::size_t n); // 0 clears the override

// Runs fn(i) for i in [0, n) on up to `workers` threads (0 = worker_count()).
// Work is handed out in index order; fn must not touch shared mutable state.
// The first exception thrown by any task is rethrown after all threads join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t workers = 0);

} // namespace dgan

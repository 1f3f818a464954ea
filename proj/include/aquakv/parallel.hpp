#pragma once

#include <cstddef>
#include <functional>

namespace aquakv {

// Worker count: AQUAKV_THREADS if set, otherwise the hardware concurrency.
unsigned worker_count();

// Runs body(begin, end) over contiguous chunks of [0, n). Chunk boundaries are
// a function of n and the grain only, so any per-chunk reduction the caller
// performs in chunk order is independent of the worker count.
void parallel_for(std::size_t n, std::size_t grain, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace aquakv

#pragma once

#include <cstddef>
#include <functional>

namespace specgt {

/// Worker count: SPECGT_THREADS when set and positive, else hardware concurrency.
std::size_t worker_count();

/// Calls body(i) for i in [0, n) over contiguous chunks. Every index is written
/// by exactly one worker, so results placed by index are independent of the
/// thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                  std::size_t threads = 0);

}  // namespace specgt

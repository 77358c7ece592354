#pragma once

#include <cstddef>
#include <functional>

namespace hb {

// Worker count: HANJABRIDGE_THREADS if set (>= 1), otherwise the hardware concurrency.
std::size_t thread_count();

// Runs fn(i) for i in [0, n). Each index is processed exactly once; callers that need
// deterministic results write into per-index slots and reduce in index order afterwards.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace hb

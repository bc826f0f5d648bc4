#pragma once

#include <cstddef>
#include <functional>

namespace headpose {

/// Worker cap: HEADPOSE_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) over at most worker_count() threads with static
/// contiguous chunks. fn must not depend on execution order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace headpose

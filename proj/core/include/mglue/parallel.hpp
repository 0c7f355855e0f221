#pragma once

// Worker-count control and a static-partition parallel loop. Results are
// written per index, so any reduction done afterwards in index order is
// independent of the thread count.

#include <cstddef>
#include <functional>

namespace mglue {

/// MANIFOLD_GLUE_THREADS (default 1). Throws ContractError if it is set but
/// not a positive integer.
std::size_t configured_threads();

/// Calls fn(i) for i in [0, n) on up to `threads` workers (contiguous blocks).
/// The first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads = configured_threads());

}  // namespace mglue

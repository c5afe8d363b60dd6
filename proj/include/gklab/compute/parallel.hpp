#pragma once

#include <cstddef>
#include <functional>

namespace gklab::compute {

/// Calls fn(i) for i in [0, n) on up to `jobs` threads (0 or 1 runs inline).
/// Work is handed out in index order; the exception of the lowest failing index is rethrown.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace gklab::compute

#pragma once

#include <cstddef>
#include <functional>

namespace zonas {

/// Hardware concurrency, at least 1.
std::size_t default_workers();

/// Calls fn(i) for every i in [0, n) on up to `workers` threads. Results must
/// be written to per-index slots; the first exception (by index) is rethrown
/// after all threads finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace zonas

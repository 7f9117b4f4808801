#pragma once

#include <cstddef>
#include <functional>

namespace uql {

// Worker cap: UQL_THREADS when set to a positive integer, otherwise the
// hardware concurrency (at least 1).
std::size_t max_threads();

// Runs body(i) for i in [0, count). Each index runs exactly once; callers
// must write results by index so the outcome is independent of scheduling.
// The first exception thrown by any body is rethrown after all workers join.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace uql

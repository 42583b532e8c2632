#pragma once

#include <cstddef>
#include <functional>

namespace lowrank {

// Worker count used by parallel_for. Defaults to 1.
void set_thread_count(int n);
int thread_count() noexcept;

// Runs body(i) for i in [0, n). Iterations must write to disjoint memory;
// the partition is static so results never depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace lowrank

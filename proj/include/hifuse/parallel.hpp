#pragma once

#include <cstdint>
#include <functional>

namespace hifuse {

// Worker cap for intra-op parallelism. Work is always split by output
// element, so results do not depend on the thread count.
void set_num_threads(int n);
int num_threads();

// Calls fn(begin, end) over disjoint chunks of [0, n). Runs inline when the
// range is smaller than `grain` or only one thread is configured.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace hifuse

#include "fambav/memory.hpp"

#include <algorithm>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fambav::memory {
namespace {

struct Counters {
  std::size_t live = 0;
  std::size_t peak = 0;
};

thread_local Counters counters;

}  // namespace

void on_allocate(std::size_t bytes) noexcept {
  counters.live += bytes;
  counters.peak = std::max(counters.peak, counters.live);
}

void on_release(std::size_t bytes) noexcept {
  counters.live -= std::min(bytes, counters.live);
}

std::size_t live_bytes() noexcept { return counters.live; }

std::size_t peak_live_bytes() noexcept { return counters.peak; }

void reset_peak() noexcept { counters.peak = counters.live; }

void retain_freed_pages() noexcept {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace fambav::memory

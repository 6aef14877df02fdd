#pragma once

#include <cstddef>
#include <limits>
#include <new>
#include <vector>

namespace fambav {
namespace memory {

// Live/peak counters are per thread: a training run owns its thread, so
// concurrent sweep workers do not see each other's allocations.
void on_allocate(std::size_t bytes) noexcept;
void on_release(std::size_t bytes) noexcept;

std::size_t live_bytes() noexcept;
std::size_t peak_live_bytes() noexcept;

/// Restarts peak tracking from the current live total.
void reset_peak() noexcept;

/// Asks the C allocator to keep freed pages mapped. Training reallocates the same
/// large activation buffers every step; returning them to the OS costs a page fault
/// per page on the next step. No-op outside glibc.
void retain_freed_pages() noexcept;

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    if (n > std::numeric_limits<std::size_t>::max() / sizeof(T)) throw std::bad_array_new_length();
    T* p = static_cast<T*>(::operator new(n * sizeof(T)));
    on_allocate(n * sizeof(T));
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    on_release(n * sizeof(T));
    ::operator delete(p);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace memory

/// Peak live tensor payload bytes since the last reset.
inline std::size_t memory_probe() noexcept { return memory::peak_live_bytes(); }

/// Storage for tensor payloads; every byte is accounted by the memory probe.
template <typename T>
using Buffer = std::vector<T, memory::TrackingAllocator<T>>;

}  // namespace fambav

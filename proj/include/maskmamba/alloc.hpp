#pragma once

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <new>
#include <stdexcept>
#include <string>

namespace maskmamba {

// Tracks live bytes handed out to tensor buffers so benchmarks can report
// peak transient allocation, and enforces an optional budget so an oversized
// request surfaces as a recoverable out-of-memory outcome instead of a crash.
class AllocTracker {
 public:
  static AllocTracker& instance() {
    static AllocTracker t;
    return t;
  }

  void on_alloc(std::size_t bytes) {
    std::size_t limit = limit_.load(std::memory_order_relaxed);
    std::size_t cur = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    if (limit != 0 && cur > limit) {
      current_.fetch_sub(bytes, std::memory_order_relaxed);
      throw std::bad_alloc();
    }
    std::size_t peak = peak_.load(std::memory_order_relaxed);
    while (cur > peak &&
           !peak_.compare_exchange_weak(peak, cur, std::memory_order_relaxed)) {
    }
  }

  void on_free(std::size_t bytes) {
    current_.fetch_sub(bytes, std::memory_order_relaxed);
  }

  std::size_t current_bytes() const { return current_.load(std::memory_order_relaxed); }
  std::size_t peak_bytes() const { return peak_.load(std::memory_order_relaxed); }

  // Restart peak tracking from the current live amount.
  void reset_peak() { peak_.store(current_.load(std::memory_order_relaxed)); }

  // 0 disables the budget.
  void set_limit(std::size_t bytes) { limit_.store(bytes, std::memory_order_relaxed); }
  std::size_t limit() const { return limit_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
  std::atomic<std::size_t> limit_{0};
};

// std::vector allocator that reports to AllocTracker and skips value-init of
// trivially constructible elements; kernels fully overwrite their outputs, and
// buffers that need zeros are filled explicitly.
template <class T>
struct CountedAlloc {
  using value_type = T;

  CountedAlloc() noexcept = default;
  template <class U>
  CountedAlloc(const CountedAlloc<U>&) noexcept {}

  T* allocate(std::size_t n) {
    AllocTracker::instance().on_alloc(n * sizeof(T));
    void* p = std::malloc(n * sizeof(T));
    if (!p) {
      AllocTracker::instance().on_free(n * sizeof(T));
      throw std::bad_alloc();
    }
    return static_cast<T*>(p);
  }

  void deallocate(T* p, std::size_t n) noexcept {
    std::free(p);
    AllocTracker::instance().on_free(n * sizeof(T));
  }

  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0 && std::is_trivially_constructible_v<U>) {
      // leave uninitialized
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }

  template <class U>
  bool operator==(const CountedAlloc<U>&) const noexcept {
    return true;
  }
};

}  // namespace maskmamba

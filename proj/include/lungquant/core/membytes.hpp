#pragma once

#include <atomic>
#include <cstddef>

namespace lungquant::membytes {

// Byte counters fed by TrackingAllocator. `peak` is monotone between resets;
// the benchmark harness resets it before a measured phase.
std::atomic<std::size_t>& current_counter();
std::atomic<std::size_t>& peak_counter();

inline std::size_t current() { return current_counter().load(std::memory_order_relaxed); }
inline std::size_t peak() { return peak_counter().load(std::memory_order_relaxed); }
void reset_peak();

void on_alloc(std::size_t bytes);
void on_free(std::size_t bytes);

// Allocator used by Tensor storage so peak working-set of tensor buffers is
// observable without OS-specific sampling.
template <class T>
struct TrackingAllocator {
    using value_type = T;
    TrackingAllocator() = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) {}

    T* allocate(std::size_t n) {
        on_alloc(n * sizeof(T));
        return static_cast<T*>(::operator new(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) {
        on_free(n * sizeof(T));
        ::operator delete(p);
    }
    bool operator==(const TrackingAllocator&) const { return true; }
    bool operator!=(const TrackingAllocator&) const { return false; }
};

}  // namespace lungquant::membytes

#include "lungquant/core/membytes.hpp"

namespace lungquant::membytes {

std::atomic<std::size_t>& current_counter() {
    static std::atomic<std::size_t> c{0};
    return c;
}

std::atomic<std::size_t>& peak_counter() {
    static std::atomic<std::size_t> p{0};
    return p;
}

void reset_peak() {
    peak_counter().store(current(), std::memory_order_relaxed);
}

void on_alloc(std::size_t bytes) {
    std::size_t now = current_counter().fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t prev = peak_counter().load(std::memory_order_relaxed);
    while (now > prev &&
           !peak_counter().compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
}

void on_free(std::size_t bytes) {
    current_counter().fetch_sub(bytes, std::memory_order_relaxed);
}

}  // namespace lungquant::membytes

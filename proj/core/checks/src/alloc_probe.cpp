#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <new>

#include "aotp/checks.hpp"

// Counting replacements of the global allocation functions. Every block
// carries a header with its size so deallocation can be accounted without
// a side table.

namespace {

constexpr std::size_t kHeader = alignof(std::max_align_t);

std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};

void* counted_alloc(std::size_t size) noexcept {
  auto* raw = static_cast<unsigned char*>(std::malloc(size + kHeader));
  if (raw == nullptr) return nullptr;
  *reinterpret_cast<std::size_t*>(raw) = size;
  const std::size_t now = g_current.fetch_add(size, std::memory_order_relaxed) + size;
  std::size_t peak = g_peak.load(std::memory_order_relaxed);
  while (now > peak && !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
  return raw + kHeader;
}

void counted_free(void* p) noexcept {
  if (p == nullptr) return;
  auto* raw = static_cast<unsigned char*>(p) - kHeader;
  g_current.fetch_sub(*reinterpret_cast<std::size_t*>(raw), std::memory_order_relaxed);
  std::free(raw);
}

void* throwing_alloc(std::size_t size) {
  if (void* p = counted_alloc(size == 0 ? 1 : size)) return p;
  throw std::bad_alloc();
}

}  // namespace

void* operator new(std::size_t size) { return throwing_alloc(size); }
void* operator new[](std::size_t size) { return throwing_alloc(size); }
void* operator new(std::size_t size, const std::nothrow_t&) noexcept { return counted_alloc(size == 0 ? 1 : size); }
void* operator new[](std::size_t size, const std::nothrow_t&) noexcept { return counted_alloc(size == 0 ? 1 : size); }
void operator delete(void* p) noexcept { counted_free(p); }
void operator delete[](void* p) noexcept { counted_free(p); }
void operator delete(void* p, std::size_t) noexcept { counted_free(p); }
void operator delete[](void* p, std::size_t) noexcept { counted_free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { counted_free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { counted_free(p); }

namespace aotp::checks {

std::size_t peak_allocation(const std::function<void()>& fn) {
  const std::size_t base = g_current.load(std::memory_order_relaxed);
  g_peak.store(base, std::memory_order_relaxed);
  fn();
  return g_peak.load(std::memory_order_relaxed) - base;
}

}  // namespace aotp::checks

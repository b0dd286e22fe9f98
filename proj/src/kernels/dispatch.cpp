#include "wnet/kernels/dispatch.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace wnet::kernels {

#if defined(WNET_HAVE_AVX2)
const KernelTable& avx2_table_unchecked();
#endif
#if defined(WNET_HAVE_NEON)
const KernelTable& neon_table_unchecked();
#endif

const KernelTable* avx2_table() {
#if defined(WNET_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &avx2_table_unchecked() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable* neon_table() {
#if defined(WNET_HAVE_NEON)
  return &neon_table_unchecked();  // mandatory on AArch64
#else
  return nullptr;
#endif
}

std::vector<const KernelTable*> available_tables() {
  std::vector<const KernelTable*> out{&scalar_table()};
  if (auto* t = avx2_table()) out.push_back(t);
  if (auto* t = neon_table()) out.push_back(t);
  return out;
}

namespace {

const KernelTable* find(std::string_view name) {
  for (const KernelTable* t : available_tables()) {
    if (name == t->name) return t;
  }
  return nullptr;
}

const KernelTable* initial_choice() {
  if (const char* env = std::getenv("WNET_KERNELS")) {
    if (const KernelTable* t = find(env)) return t;
  }
  return available_tables().back();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{initial_choice()};
  return table;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

bool select(std::string_view name) {
  const KernelTable* t = find(name);
  if (t == nullptr) return false;
  current().store(t, std::memory_order_relaxed);
  return true;
}

}  // namespace wnet::kernels

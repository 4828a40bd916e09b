#pragma once

#include <algorithm>
#include <span>
#include <thread>
#include <vector>

namespace eegssm {

// Inclusive scan under an associative (not necessarily commutative) binary
// operator, where op(earlier, later) combines adjacent prefixes.
//
// Three phases over `workers` contiguous chunks: reduce each chunk, scan the
// chunk totals, then rescan every chunk seeded with its carry-in. Any worker
// count yields the same values up to the reassociation the operator allows.
template <class T, class Op>
void inclusive_scan_inplace(std::span<T> xs, Op op, int workers = 1) {
  const std::size_t n = xs.size();
  if (n < 2) return;
  const std::size_t chunks = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, n);
  const std::size_t width = (n + chunks - 1) / chunks;

  auto run = [&](auto&& body) {
    if (chunks == 1) {
      body(0);
      return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) pool.emplace_back(body, c);
  };

  std::vector<T> totals(chunks);
  run([&](std::size_t c) {
    const std::size_t lo = c * width;
    const std::size_t hi = std::min(n, lo + width);
    if (lo >= hi) return;
    T acc = xs[lo];
    for (std::size_t i = lo + 1; i < hi; ++i) acc = op(acc, xs[i]);
    totals[c] = acc;
  });

  // Exclusive prefix of the chunk totals; chunk 0 has no carry.
  std::vector<T> carry(chunks);
  for (std::size_t c = 1; c < chunks; ++c) {
    if (c * width >= n) break;
    carry[c] = (c == 1) ? totals[0] : op(carry[c - 1], totals[c - 1]);
  }

  run([&](std::size_t c) {
    const std::size_t lo = c * width;
    const std::size_t hi = std::min(n, lo + width);
    if (lo >= hi) return;
    if (c > 0) xs[lo] = op(carry[c], xs[lo]);
    for (std::size_t i = lo + 1; i < hi; ++i) xs[i] = op(xs[i - 1], xs[i]);
  });
}

}  // namespace eegssm

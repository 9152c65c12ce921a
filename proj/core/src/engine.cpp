#include "gmdiff/engine.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace gmdiff {

int resolve_workers(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

ResumableCache::ResumableCache(std::string path, std::size_t payload_len)
    : path_(std::move(path)), payload_len_(payload_len) {}

std::vector<bool> ResumableCache::load(
    std::vector<std::vector<float>>& results, std::uint64_t n) const {
  std::vector<bool> have(n, false);
  std::ifstream in(path_, std::ios::binary);
  if (!in) return have;
  const std::size_t row = sizeof(std::uint64_t) + payload_len_ * sizeof(float);
  std::vector<char> buf(row);
  while (in.read(buf.data(), static_cast<std::streamsize>(row))) {
    std::uint64_t id;
    std::memcpy(&id, buf.data(), sizeof(id));
    if (id >= n) continue;
    results[id].resize(payload_len_);
    std::memcpy(results[id].data(), buf.data() + sizeof(id),
                payload_len_ * sizeof(float));
    have[id] = true;
  }
  return have;
}

void ResumableCache::append(std::uint64_t id, const std::vector<float>& payload) {
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  out.write(reinterpret_cast<const char*>(&id), sizeof(id));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload_len_ * sizeof(float)));
}

std::vector<std::vector<float>> map_ids_resumable(
    std::uint64_t n, int workers,
    const std::function<std::vector<float>(std::uint64_t)>& fn,
    const std::string& cache_path, std::size_t payload_len,
    std::int64_t limit) {
  std::vector<std::vector<float>> results(n);
  ResumableCache cache(cache_path, payload_len);
  const std::vector<bool> have = cache.load(results, n);

  std::vector<std::uint64_t> todo;
  todo.reserve(n);
  for (std::uint64_t id = 0; id < n; ++id)
    if (!have[id]) todo.push_back(id);
  if (limit >= 0 && static_cast<std::uint64_t>(limit) < todo.size())
    todo.resize(limit);

  std::mutex cache_mu;
  map_ids<int>(todo.size(), workers, [&](std::uint64_t k) {
    const std::uint64_t id = todo[k];
    std::vector<float> payload = fn(id);
    payload.resize(payload_len, 0.0f);
    {
      std::lock_guard<std::mutex> lock(cache_mu);
      cache.append(id, payload);
    }
    results[id] = std::move(payload);
    return 0;
  });

  if (limit >= 0 && todo.size() < n) {
    // Partial run by request; report what is cached so far.
    return results;
  }
  return results;
}

}  // namespace gmdiff

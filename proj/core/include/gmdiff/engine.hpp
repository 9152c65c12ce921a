#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gmdiff {

// Runs fn(id) for id in [0, n) on `workers` threads. Results land in a
// vector indexed by id, so reductions are independent of scheduling.
template <class R>
std::vector<R> map_ids(std::uint64_t n, int workers,
                       const std::function<R(std::uint64_t)>& fn) {
  std::vector<R> results(n);
  if (n == 0) return results;
  if (workers <= 1) {
    for (std::uint64_t id = 0; id < n; ++id) results[id] = fn(id);
    return results;
  }
  std::atomic<std::uint64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<bool> failed{false};
  std::string error;
  std::mutex error_mu;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::uint64_t id = next.fetch_add(1);
        if (id >= n || failed.load()) return;
        try {
          results[id] = fn(id);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(error_mu);
          error = e.what();
          failed.store(true);
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failed.load()) throw std::runtime_error("worker failed: " + error);
  return results;
}

// Fixed-width payload cache for resumable sweeps. Rows are
// (id: u64, payload: float[payload_len]) appended as trajectories finish;
// on resume, cached ids are skipped and the final id-ordered result is
// identical to an uninterrupted run.
class ResumableCache {
 public:
  ResumableCache(std::string path, std::size_t payload_len);

  // Loads cached rows into `results` (indexed by id); returns the ids found.
  std::vector<bool> load(std::vector<std::vector<float>>& results,
                         std::uint64_t n) const;
  void append(std::uint64_t id, const std::vector<float>& payload);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::size_t payload_len_;
};

// map_ids with a payload cache; `limit` (if >= 0) stops after that many
// newly computed ids, simulating an interrupted sweep.
std::vector<std::vector<float>> map_ids_resumable(
    std::uint64_t n, int workers,
    const std::function<std::vector<float>(std::uint64_t)>& fn,
    const std::string& cache_path, std::size_t payload_len,
    std::int64_t limit = -1);

int resolve_workers(int requested);

}  // namespace gmdiff

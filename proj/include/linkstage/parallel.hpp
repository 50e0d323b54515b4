// Copyright 2026 The Linkstage Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace linkstage {

// Process-wide cap on worker threads (the CLI's --threads flag).
inline std::atomic<int>& ThreadCap() {
  static std::atomic<int> cap{1};
  return cap;
}

inline void SetThreadCap(int threads) {
  ThreadCap().store(std::max(1, threads));
}

// Number of workers ParallelFor will use for `n` items.
inline int WorkerCount(size_t n) {
  return static_cast<int>(
      std::max<size_t>(1, std::min<size_t>(n, ThreadCap().load())));
}

// Splits [0, n) into WorkerCount(n) contiguous chunks and runs
// fn(begin, end, worker) on each. Chunking depends only on n and the thread
// cap, so per-worker reductions are reproducible for a fixed cap.
template <typename Fn>
void ParallelFor(size_t n, Fn&& fn) {
  const int workers = WorkerCount(n);
  if (workers <= 1) {
    if (n > 0) fn(size_t{0}, n, 0);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  const size_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const size_t begin = std::min(n, w * chunk);
    const size_t end = std::min(n, begin + chunk);
    threads.emplace_back([&, begin, end, w] {
      try {
        if (begin < end) fn(begin, end, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace linkstage

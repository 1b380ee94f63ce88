#pragma once

// Fixed-partition thread fan-out. Work item i always lands in the same chunk
// for a given (n, thread count), so reductions done per chunk and merged in
// chunk order are reproducible.

#include <cstddef>
#include <functional>

namespace univlab {

// 0 means hardware concurrency.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Calls fn(begin, end, chunk_index) over `chunks` contiguous ranges covering
// [0, n). Exceptions from workers are rethrown on the caller (first by chunk
// index).
void parallel_chunks(std::size_t n, std::size_t chunks,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

// parallel_chunks with one chunk per worker thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace univlab

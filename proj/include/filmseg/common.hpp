#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace filmseg {

// Derives an independent 64-bit seed from (base, stream) via splitmix64.
uint64_t mix_seed(uint64_t base, uint64_t stream);
uint64_t hash_name(const char* name);
inline uint64_t mix_seed(uint64_t base, const char* stream_name) {
    return mix_seed(base, hash_name(stream_name));
}

// Worker count for parallel_for. 0 resets to the default
// (FILMSEG_THREADS env var if set, else hardware concurrency).
void set_thread_count(int n);
int thread_count();

// Runs fn(block) for block in [0, num_blocks). Blocks must write disjoint
// data; the block decomposition is fixed so results do not depend on the
// worker count.
void parallel_for(int64_t num_blocks, const std::function<void(int64_t)>& fn);

// Linear-interpolation percentile between order statistics (the "type 7"
// rule): rank q*(n-1), interpolated. q in [0,1]. Throws on empty input.
double percentile_linear(std::vector<double> values, double q);

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

}  // namespace filmseg

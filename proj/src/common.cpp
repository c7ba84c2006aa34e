#include "filmseg/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>

namespace filmseg {

uint64_t mix_seed(uint64_t base, uint64_t stream) {
    uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t hash_name(const char* name) {
    // FNV-1a
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const char* p = name; *p; ++p) {
        h ^= static_cast<unsigned char>(*p);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

int default_thread_count() {
    if (const char* env = std::getenv("FILMSEG_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

int g_threads = 0;  // 0 = not yet resolved

}  // namespace

void set_thread_count(int n) { g_threads = n > 0 ? n : default_thread_count(); }

int thread_count() {
    if (g_threads == 0) g_threads = default_thread_count();
    return g_threads;
}

void parallel_for(int64_t num_blocks, const std::function<void(int64_t)>& fn) {
    if (num_blocks <= 0) return;
    int workers = std::min<int64_t>(thread_count(), num_blocks);
    if (workers <= 1) {
        for (int64_t b = 0; b < num_blocks; ++b) fn(b);
        return;
    }
    std::atomic<int64_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                int64_t b = next.fetch_add(1);
                if (b >= num_blocks) return;
                fn(b);
            }
        });
    }
    for (auto& t : pool) t.join();
}

double percentile_linear(std::vector<double> values, double q) {
    check(!values.empty(), "percentile_linear: empty input");
    check(q >= 0.0 && q <= 1.0, "percentile_linear: q must lie in [0,1]");
    std::sort(values.begin(), values.end());
    if (values.size() == 1) return values[0];
    double rank = q * static_cast<double>(values.size() - 1);
    auto lo = static_cast<size_t>(std::floor(rank));
    size_t hi = std::min(lo + 1, values.size() - 1);
    double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

}  // namespace filmseg

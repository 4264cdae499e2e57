#pragma once

// Shared plumbing: error types, deterministic RNG, FNV hashing, timing,
// and a small parallel-for used for cross-branch work.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace prodapt {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes: usage -> 1, data -> 2,
// numeric -> 3.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed invocation or configuration key.
struct UsageError : Error {
    using Error::Error;
};

// Violated operation precondition (bad shapes, empty corpus, ...).
struct ContractError : Error {
    using Error::Error;
};

// Tensor shape disagreement; message names both shapes.
struct ShapeError : ContractError {
    using ContractError::ContractError;
};

// Bad input data: unreadable corpus, checkpoint mismatch, missing file.
struct DataError : Error {
    using Error::Error;
};

// Corrupt or truncated checkpoint / checksum mismatch.
struct IntegrityError : DataError {
    using DataError::DataError;
};

// Non-finite values where finite ones are required (training abort).
struct NumericError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 core with hand-rolled transforms so the
// stream depends only on the seed, not on the standard library's
// distribution internals.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    float next_float() { return static_cast<float>(next_double()); }

    // Uniform integer in [0, n). n must be positive.
    uint64_t next_below(uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return v % n;
    }

    int64_t next_in(int64_t lo, int64_t hi) {  // inclusive range
        return lo + static_cast<int64_t>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    float next_normal(float mean, float stddev) {
        return mean + stddev * static_cast<float>(next_normal());
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Derive a child seed from a parent seed and a tag (branch label, epoch, ...).
inline uint64_t derive_seed(uint64_t seed, const std::string& tag) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return seed ^ h;
}

inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// FNV-1a 64-bit hashing, used for backbone frozen-hashes and file checksums.
// ---------------------------------------------------------------------------

class Fnv64 {
public:
    void update(const void* bytes, size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        uint64_t h = h_;
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
        h_ = h;
    }

    template <typename T>
    void update_value(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        update(&v, sizeof(T));
    }

    uint64_t digest() const { return h_; }

private:
    uint64_t h_ = 1469598103934665603ull;
};

inline uint64_t fnv64(const void* bytes, size_t n) {
    Fnv64 h;
    h.update(bytes, n);
    return h.digest();
}

inline std::string hex_u64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

inline bool parse_hex_u64(const std::string& s, uint64_t& out) {
    if (s.empty() || s.size() > 16) return false;
    uint64_t v = 0;
    for (char c : s) {
        int d;
        if (c >= '0' && c <= '9') d = c - '0';
        else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
        else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
        else return false;
        v = (v << 4) | static_cast<uint64_t>(d);
    }
    out = v;
    return true;
}

// Checksum of a whole file's bytes. Throws DataError if unreadable.
inline uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file for checksum: " + path);
    Fnv64 h;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        const std::streamsize got = in.gcount();
        if (got > 0) h.update(buf, static_cast<size_t>(got));
    }
    return h.digest();
}

inline uint64_t file_size_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open file: " + path);
    return static_cast<uint64_t>(in.tellg());
}

// ---------------------------------------------------------------------------
// Wall-clock timing.
// ---------------------------------------------------------------------------

class Stopwatch {
public:
    Stopwatch() : start_(clock::now()) {}
    void reset() { start_ = clock::now(); }
    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(clock::now() - start_).count();
    }

private:
    using clock = std::chrono::steady_clock;
    clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Cross-branch worker pool. Results must be written to disjoint slots so the
// outcome is independent of scheduling; runs inline when threads <= 1.
// ---------------------------------------------------------------------------

inline int default_thread_count() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    if (threads <= 1 || n == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = static_cast<int>(std::min<int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (int64_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace prodapt

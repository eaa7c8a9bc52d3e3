#pragma once
// Shared utilities: errors, RNG seeding, small statistics, hashing.

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace backlab {

struct error : std::runtime_error {
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void strf_cat(std::ostringstream&) {}
template <class T, class... Rest>
void strf_cat(std::ostringstream& os, T&& v, Rest&&... rest) {
    os << std::forward<T>(v);
    strf_cat(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <class... Args>
std::string strf(Args&&... args) {
    std::ostringstream os;
    detail::strf_cat(os, std::forward<Args>(args)...);
    return os.str();
}

template <class... Args>
void check(bool cond, Args&&... args) {
    if (!cond) throw error(strf(std::forward<Args>(args)...));
}

using Rng = std::mt19937_64;

// FNV-1a over bytes; used for config hashing and seed derivation.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ull);

// Deterministic per-stage seed: mixes a base seed with a stage tag so
// independent pipeline stages draw from unrelated streams.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

double digamma(double x);

double mean(const std::vector<double>& v);
double variance(const std::vector<double>& v);  // population variance
double median(std::vector<double> v);           // by value: sorts a copy
// Median absolute deviation (raw, unscaled).
double mad(const std::vector<double>& v);

// Robust z-score |x - median| / (1.4826 * mad); guard keeps the result finite
// when the MAD collapses to zero.
double robust_index(double x, double med, double mad_value, double guard = 1e-12);

std::string format_double(double v, int precision = 6);

}  // namespace backlab

#ifndef PATCHLENS_COMMON_HPP
#define PATCHLENS_COMMON_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace patchlens {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a dimensional or shape contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// On-disk data is not in the expected format (magic, version, schema).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// On-disk data has the right format but is damaged (truncated, trailing bytes).
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Row-major N x D matrix of 32-bit features. Rows are patches (or images).
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  std::span<float> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  void reserve_rows(std::size_t n) { data_.reserve(n * cols_); }

  /// Appends one row. The first append on an empty 0-column matrix fixes the width.
  void append(std::span<const float> v) {
    if (rows_ == 0 && cols_ == 0) cols_ = v.size();
    if (v.size() != cols_) {
      throw DimensionError("row of dimension " + std::to_string(v.size()) +
                           " appended to matrix of width " + std::to_string(cols_));
    }
    data_.insert(data_.end(), v.begin(), v.end());
    ++rows_;
  }

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

/// Squared Euclidean distance with eight fixed partial sums. The summation
/// order depends only on the vector length, so results are reproducible.
inline float squared_l2(std::span<const float> a, std::span<const float> b) {
  const std::size_t n = a.size();
  const float* pa = a.data();
  const float* pb = b.data();
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) {
      const float d = pa[i + l] - pb[i + l];
      acc[l] += d * d;
    }
  }
  float tail = 0.0f;
  for (; i < n; ++i) {
    const float d = pa[i] - pb[i];
    tail += d * d;
  }
  return (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) +
         tail;
}

inline unsigned default_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1u : n;
}

/// Runs fn(begin, end) over [0, n) split into contiguous ranges, one per
/// worker. Callers must make each index's result independent of the split so
/// that output does not depend on the worker count. The first exception
/// thrown by any worker is rethrown on the calling thread.
template <class Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  if (n == 0) return;
  workers = std::max(1u, workers);
  const std::size_t parts = std::min<std::size_t>(workers, n);
  if (parts == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> threads;
  threads.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t begin = n * p / parts;
    const std::size_t end = n * (p + 1) / parts;
    threads.emplace_back([&, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace patchlens

#endif

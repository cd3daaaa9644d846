#pragma once

#include <complex>
#include <cstddef>
#include <map>
#include <mutex>
#include <span>
#include <tuple>
#include <vector>

#include <fftw3.h>

#include "twinbeam/error.hpp"

// Thin FFTW wrappers. Plans are created once per shape under a lock (the
// planner is not thread-safe) and executed through the new-array interface,
// which is.

namespace twinbeam::fft {

namespace detail {

enum class Kind { R2C, C2R };

class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(Kind kind, int n0, int n1) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_tuple(kind, n0, n1);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;

    const std::size_t real_n = static_cast<std::size_t>(n0) * static_cast<std::size_t>(n1);
    const std::size_t cplx_n = static_cast<std::size_t>(n0) * static_cast<std::size_t>(n1 / 2 + 1);
    double* r = fftw_alloc_real(real_n);
    fftw_complex* c = fftw_alloc_complex(cplx_n);
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fftw_plan plan = nullptr;
    if (n0 == 1) {
      plan = kind == Kind::R2C ? fftw_plan_dft_r2c_1d(n1, r, c, flags)
                               : fftw_plan_dft_c2r_1d(n1, c, r, flags);
    } else {
      plan = kind == Kind::R2C ? fftw_plan_dft_r2c_2d(n0, n1, r, c, flags)
                               : fftw_plan_dft_c2r_2d(n0, n1, c, r, flags);
    }
    fftw_free(r);
    fftw_free(c);
    require(plan != nullptr, Errc::InvalidParameter, "FFTW could not create a plan");
    plans_.emplace(key, plan);
    return plan;
  }

  PlanCache(const PlanCache&) = delete;
  PlanCache& operator=(const PlanCache&) = delete;

  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  PlanCache() = default;
  std::mutex mutex_;
  std::map<std::tuple<Kind, int, int>, fftw_plan> plans_;
};

inline fftw_complex* as_fftw(std::complex<double>* p) { return reinterpret_cast<fftw_complex*>(p); }

}  // namespace detail

/// Half-spectrum of a real rows x cols array, shape rows x (cols/2 + 1).
inline std::vector<std::complex<double>> r2c(std::span<const double> in, std::size_t rows, std::size_t cols) {
  require(in.size() == rows * cols && rows > 0 && cols > 0, Errc::InvalidDimensions, "fft input shape");
  std::vector<double> scratch(in.begin(), in.end());
  std::vector<std::complex<double>> out(rows * (cols / 2 + 1));
  auto plan = detail::PlanCache::instance().get(detail::Kind::R2C, static_cast<int>(rows), static_cast<int>(cols));
  fftw_execute_dft_r2c(plan, scratch.data(), detail::as_fftw(out.data()));
  return out;
}

/// Unnormalized inverse of r2c: returns rows*cols times the original array.
inline std::vector<double> c2r(std::span<const std::complex<double>> in, std::size_t rows, std::size_t cols) {
  require(in.size() == rows * (cols / 2 + 1), Errc::InvalidDimensions, "inverse fft input shape");
  std::vector<std::complex<double>> scratch(in.begin(), in.end());  // c2r clobbers its input
  std::vector<double> out(rows * cols);
  auto plan = detail::PlanCache::instance().get(detail::Kind::C2R, static_cast<int>(rows), static_cast<int>(cols));
  fftw_execute_dft_c2r(plan, detail::as_fftw(scratch.data()), out.data());
  return out;
}

}  // namespace twinbeam::fft

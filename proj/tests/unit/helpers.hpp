#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "advseg/rng.hpp"
#include "advseg/tensor.hpp"

namespace testutil {

inline advseg::Tensor random_tensor(advseg::Shape shape, advseg::Rng& rng, double lo = -1.0, double hi = 1.0) {
  advseg::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline advseg::SoftmaxField random_field(std::size_t h, std::size_t w, std::size_t c, advseg::Rng& rng) {
  advseg::Tensor t({h, w, c});
  for (std::size_t z = 0; z < h * w; ++z) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += t[z * c + k] = rng.uniform() + 1e-3;
    for (std::size_t k = 0; k < c; ++k) t[z * c + k] /= s;
  }
  // renormalize against rounding in the division
  return advseg::SoftmaxField(t);
}

/// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference of f at x[i] with step h.
inline double central_difference(advseg::Tensor& x, std::size_t i, const std::function<double()>& f,
                                 double h = 1e-5) {
  const double keep = x[i];
  x[i] = keep + h;
  const double up = f();
  x[i] = keep - h;
  const double down = f();
  x[i] = keep;
  return (up - down) / (2.0 * h);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("advseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil

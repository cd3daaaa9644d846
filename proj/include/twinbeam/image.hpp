#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "twinbeam/error.hpp"

namespace twinbeam {

/// Dense row-major 2D raster. Element (x, y) lives at data[y * width + x].
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(std::size_t width, std::size_t height, T fill = T{})
      : width_(width), height_(height), data_(width * height, fill) {}
  Image(std::size_t width, std::size_t height, std::vector<T> data)
      : width_(width), height_(height), data_(std::move(data)) {
    require(data_.size() == width_ * height_, Errc::InvalidDimensions,
            "image data length does not match width*height");
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t x, std::size_t y) noexcept { return data_[y * width_ + x]; }
  const T& operator()(std::size_t x, std::size_t y) const noexcept { return data_[y * width_ + x]; }

  std::span<T> pixels() noexcept { return data_; }
  std::span<const T> pixels() const noexcept { return data_; }
  std::span<T> row(std::size_t y) noexcept { return {data_.data() + y * width_, width_}; }
  std::span<const T> row(std::size_t y) const noexcept { return {data_.data() + y * width_, width_}; }

  const std::vector<T>& data() const noexcept { return data_; }

  bool same_shape(const Image& other) const noexcept {
    return width_ == other.width_ && height_ == other.height_;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<T> data_;
};

/// Rectangular window in pixel coordinates.
struct AnalysisRegion {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t width = 0;
  std::size_t height = 0;

  bool fits(std::size_t frame_width, std::size_t frame_height) const noexcept {
    return width > 0 && height > 0 && x0 + width <= frame_width && y0 + height <= frame_height;
  }

  /// Sub-window expressed relative to this one.
  AnalysisRegion compose(const AnalysisRegion& inner) const noexcept {
    return {x0 + inner.x0, y0 + inner.y0, inner.width, inner.height};
  }

  /// Centered window of the given size inside this one.
  AnalysisRegion centered(std::size_t w, std::size_t h) const noexcept {
    return {x0 + (width - w) / 2, y0 + (height - h) / 2, w, h};
  }

  friend bool operator==(const AnalysisRegion&, const AnalysisRegion&) = default;
};

template <typename T>
Image<T> crop(const Image<T>& frame, const AnalysisRegion& region) {
  require(region.fits(frame.width(), frame.height()), Errc::RegionOutOfBounds,
          "region " + std::to_string(region.x0) + "," + std::to_string(region.y0) + " " +
              std::to_string(region.width) + "x" + std::to_string(region.height) +
              " exceeds frame " + std::to_string(frame.width()) + "x" +
              std::to_string(frame.height()));
  Image<T> out(region.width, region.height);
  for (std::size_t y = 0; y < region.height; ++y) {
    auto src = frame.row(region.y0 + y).subspan(region.x0, region.width);
    std::copy(src.begin(), src.end(), out.row(y).begin());
  }
  return out;
}

/// out(x, y) = in(W-1-x, H-1-y).
template <typename T>
Image<T> rotate180(const Image<T>& frame) {
  Image<T> out(frame.width(), frame.height());
  auto src = frame.pixels();
  std::reverse_copy(src.begin(), src.end(), out.pixels().begin());
  return out;
}

/// Sums k x k blocks. Trailing rows/columns past the last full block are dropped.
template <typename T>
Image<T> bin_superpixels(const Image<T>& frame, std::size_t k) {
  require(k >= 1, Errc::InvalidBin, "bin size must be >= 1");
  const std::size_t ow = frame.width() / k;
  const std::size_t oh = frame.height() / k;
  Image<T> out(ow, oh);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t dy = 0; dy < k; ++dy) {
      auto src = frame.row(oy * k + dy);
      auto dst = out.row(oy);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc{};
        for (std::size_t dx = 0; dx < k; ++dx) acc += src[ox * k + dx];
        dst[ox] += acc;
      }
    }
  }
  return out;
}

template <typename To, typename From>
Image<To> image_cast(const Image<From>& in) {
  std::vector<To> data(in.size());
  std::transform(in.pixels().begin(), in.pixels().end(), data.begin(),
                 [](From v) { return static_cast<To>(v); });
  return Image<To>(in.width(), in.height(), std::move(data));
}

template <typename T>
Image<T> operator-(const Image<T>& a, const Image<T>& b) {
  require(a.same_shape(b), Errc::DimensionMismatch, "image subtraction shape mismatch");
  Image<T> out(a.width(), a.height());
  for (std::size_t i = 0; i < a.size(); ++i) out.pixels()[i] = a.pixels()[i] - b.pixels()[i];
  return out;
}

template <typename T>
Image<T> operator+(const Image<T>& a, const Image<T>& b) {
  require(a.same_shape(b), Errc::DimensionMismatch, "image addition shape mismatch");
  Image<T> out(a.width(), a.height());
  for (std::size_t i = 0; i < a.size(); ++i) out.pixels()[i] = a.pixels()[i] + b.pixels()[i];
  return out;
}

template <typename T>
Image<T> scaled(const Image<T>& a, T factor) {
  Image<T> out = a;
  for (auto& v : out.pixels()) v *= factor;
  return out;
}

/// Location of the maximum of the 5x5 box-filtered frame. Only positions with a
/// full window are considered; ties go to the smallest row-major index.
template <typename T>
std::pair<std::size_t, std::size_t> smoothed_argmax(const Image<T>& frame, std::size_t box = 5) {
  require(frame.width() >= box && frame.height() >= box, Errc::InvalidDimensions,
          "frame smaller than smoothing window");
  const std::size_t half = box / 2;
  // Summed-area table keeps the box sums exact for integer-valued counts.
  const std::size_t w = frame.width(), h = frame.height();
  std::vector<double> sat((w + 1) * (h + 1), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    double run = 0.0;
    for (std::size_t x = 0; x < w; ++x) {
      run += static_cast<double>(frame(x, y));
      sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + run;
    }
  }
  auto box_sum = [&](std::size_t x, std::size_t y) {
    const std::size_t xa = x - half, ya = y - half, xb = x + half + 1, yb = y + half + 1;
    return sat[yb * (w + 1) + xb] - sat[ya * (w + 1) + xb] - sat[yb * (w + 1) + xa] +
           sat[ya * (w + 1) + xa];
  };
  std::pair<std::size_t, std::size_t> best{half, half};
  double best_val = box_sum(half, half);
  for (std::size_t y = half; y + half < h; ++y) {
    for (std::size_t x = half; x + half < w; ++x) {
      const double v = box_sum(x, y);
      if (v > best_val) {
        best_val = v;
        best = {x, y};
      }
    }
  }
  return best;
}

/// Window of the given size centered on (cx, cy), clamped to lie inside the frame.
inline AnalysisRegion region_around(std::size_t cx, std::size_t cy, std::size_t w, std::size_t h,
                                    std::size_t frame_width, std::size_t frame_height) {
  require(w <= frame_width && h <= frame_height, Errc::RegionOutOfBounds,
          "requested crop larger than frame");
  auto place = [](std::size_t c, std::size_t len, std::size_t total) {
    const std::size_t start = c >= len / 2 ? c - len / 2 : 0;
    return std::min(start, total - len);
  };
  return {place(cx, w, frame_width), place(cy, h, frame_height), w, h};
}

/// Integer translation with zero fill: out(x, y) = in(x - dx, y - dy).
template <typename T>
Image<T> shifted(const Image<T>& in, long dx, long dy) {
  Image<T> out(in.width(), in.height());
  const long w = static_cast<long>(in.width()), h = static_cast<long>(in.height());
  for (long y = 0; y < h; ++y) {
    const long sy = y - dy;
    if (sy < 0 || sy >= h) continue;
    for (long x = 0; x < w; ++x) {
      const long sx = x - dx;
      if (sx < 0 || sx >= w) continue;
      out(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) =
          in(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy));
    }
  }
  return out;
}

template <typename T>
double mean_of(const Image<T>& img) {
  double s = 0.0;
  for (auto v : img.pixels()) s += static_cast<double>(v);
  return img.empty() ? 0.0 : s / static_cast<double>(img.size());
}

/// Unbiased (n-1) sample variance over pixels.
template <typename T>
double sample_variance(const Image<T>& img) {
  const std::size_t n = img.size();
  if (n < 2) return 0.0;
  const double m = mean_of(img);
  double ss = 0.0;
  for (auto v : img.pixels()) {
    const double d = static_cast<double>(v) - m;
    ss += d * d;
  }
  return ss / static_cast<double>(n - 1);
}

}  // namespace twinbeam

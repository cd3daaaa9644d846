#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "twinbeam/error.hpp"
#include "twinbeam/image.hpp"

namespace twinbeam {

enum class FieldMode { NearField, FarField };

/// Stack of equally sized frames, frame-major, row-major within a frame.
/// Raw simulated counts use float (integers held exactly); differenced data
/// use double.
template <typename T>
struct FrameStack {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);

  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t n_frames = 0;
  std::vector<T> data;
  double pixel_size_s = 16e-6;
  double frame_interval = 60e-6;
  double exposure = 1e-6;

  std::size_t frame_size() const noexcept { return width * height; }

  Image<T> frame(std::size_t i) const {
    require(i < n_frames, Errc::InvalidDimensions, "frame index out of range");
    auto first = data.begin() + static_cast<std::ptrdiff_t>(i * frame_size());
    return Image<T>(width, height, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(frame_size())));
  }

  void push_frame(const Image<T>& img) {
    if (n_frames == 0 && data.empty()) {
      width = img.width();
      height = img.height();
    }
    require(img.width() == width && img.height() == height, Errc::DimensionMismatch,
            "frame shape differs from stack");
    data.insert(data.end(), img.pixels().begin(), img.pixels().end());
    ++n_frames;
  }

  friend bool operator==(const FrameStack&, const FrameStack&) = default;
};

using RawStack = FrameStack<float>;
using FluctStack = FrameStack<double>;
using AnyStack = std::variant<FrameStack<float>, FrameStack<double>>;

/// The four analysis frames of one acquisition plus optional background frames
/// recorded with the probe seed off.
struct AcquisitionSet {
  Image<float> probe_f1, probe_f2, conj_f1, conj_f2;
  std::optional<Image<float>> bg_probe, bg_conj;

  bool has_background() const noexcept { return bg_probe.has_value() && bg_conj.has_value(); }

  void validate() const {
    const bool same = probe_f1.same_shape(probe_f2) && probe_f1.same_shape(conj_f1) &&
                      probe_f1.same_shape(conj_f2) &&
                      (!bg_probe || probe_f1.same_shape(*bg_probe)) &&
                      (!bg_conj || probe_f1.same_shape(*bg_conj));
    require(same, Errc::DimensionMismatch, "acquisition frames differ in shape");
  }
};

/// Geometry needed to turn fitted pixel widths into position or momentum.
struct OpticsConfig {
  static constexpr double kHbar = 1.054571817e-34;

  FieldMode mode = FieldMode::NearField;
  double magnification_M = 0.65;
  double focal_f = 0.5;
  double wavelength_lambda = 795e-9;
  double pixel_size_s = 16e-6;
  double hbar = kHbar;

  void validate() const {
    require(pixel_size_s > 0, Errc::InvalidParameter, "pixel_size_s must be > 0");
    if (mode == FieldMode::NearField) {
      require(magnification_M > 0, Errc::InvalidParameter, "near field needs magnification_M > 0");
    } else {
      require(focal_f > 0 && wavelength_lambda > 0, Errc::InvalidParameter,
              "far field needs focal_f > 0 and wavelength_lambda > 0");
    }
  }
};

// ---------------------------------------------------------------------------
// TBIM container
//
//   offset size field
//        0    4 magic "TBIM"
//        4    2 version (u16, = 1)
//        6    2 dtype   (u16, 0 = f32, 1 = f64)
//        8    4 width   (u32)
//       12    4 height  (u32)
//       16    4 n_frames(u32)
//       20    8 pixel_size_s  (f64)
//       28    8 frame_interval(f64)
//       36    8 exposure      (f64)
//       44      payload, little-endian
// ---------------------------------------------------------------------------

namespace tbim {

inline constexpr std::array<char, 4> kMagic{'T', 'B', 'I', 'M'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 44;

enum class Dtype : std::uint16_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr Dtype dtype_of() {
  return std::is_same_v<T, float> ? Dtype::F32 : Dtype::F64;
}

namespace le {

template <typename U>
void put_le(std::vector<char>& buf, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::array<char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  buf.insert(buf.end(), bytes.begin(), bytes.end());
}

template <typename U>
U get_le(const char* p) {
  std::array<char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  U value;
  std::memcpy(&value, bytes.data(), sizeof(U));
  return value;
}

inline std::uint32_t checked_u32(std::size_t v, const char* name) {
  require(v <= std::numeric_limits<std::uint32_t>::max(), Errc::InvalidDimensions,
          std::string(name) + " overflows the u32 header field");
  return static_cast<std::uint32_t>(v);
}

}  // namespace le

}  // namespace tbim

/// Serializes a stack as TBIM. Returns the number of bytes written.
template <typename T>
std::size_t write_stack(const FrameStack<T>& stack, std::ostream& out) {
  using namespace tbim;
  require(stack.width > 0 && stack.height > 0 && stack.n_frames > 0, Errc::InvalidDimensions,
          "stack must have non-zero width, height and n_frames");
  require(stack.data.size() == stack.width * stack.height * stack.n_frames,
          Errc::InvalidDimensions, "data length != width*height*n_frames");
  require(stack.pixel_size_s > 0, Errc::InvalidParameter, "pixel_size_s must be > 0");

  std::vector<char> buf;
  buf.reserve(kHeaderSize + stack.data.size() * sizeof(T));
  buf.insert(buf.end(), kMagic.begin(), kMagic.end());
  le::put_le(buf, kVersion);
  le::put_le(buf, static_cast<std::uint16_t>(dtype_of<T>()));
  le::put_le(buf, le::checked_u32(stack.width, "width"));
  le::put_le(buf, le::checked_u32(stack.height, "height"));
  le::put_le(buf, le::checked_u32(stack.n_frames, "n_frames"));
  le::put_le(buf, stack.pixel_size_s);
  le::put_le(buf, stack.frame_interval);
  le::put_le(buf, stack.exposure);
  for (T v : stack.data) le::put_le(buf, v);

  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  require(static_cast<bool>(out), Errc::IoFailure, "write failed");
  return buf.size();
}

/// Reads one TBIM stack in its stored dtype.
inline AnyStack read_stack(std::istream& in) {
  using namespace tbim;
  std::array<char, kHeaderSize> hdr{};
  in.read(hdr.data(), 4);
  require(in.gcount() == 4, Errc::BadMagic, "stream too short for magic");
  require(std::equal(kMagic.begin(), kMagic.end(), hdr.begin()), Errc::BadMagic,
          "missing TBIM magic");
  in.read(hdr.data() + 4, kHeaderSize - 4);
  require(in.gcount() == static_cast<std::streamsize>(kHeaderSize - 4), Errc::TruncatedPayload,
          "header truncated");

  const auto version = le::get_le<std::uint16_t>(hdr.data() + 4);
  require(version == kVersion, Errc::UnknownDtype, "unsupported TBIM version " + std::to_string(version));
  const auto dtype = le::get_le<std::uint16_t>(hdr.data() + 6);
  require(dtype <= 1, Errc::UnknownDtype, "dtype code " + std::to_string(dtype));
  const std::size_t w = le::get_le<std::uint32_t>(hdr.data() + 8);
  const std::size_t h = le::get_le<std::uint32_t>(hdr.data() + 12);
  const std::size_t n = le::get_le<std::uint32_t>(hdr.data() + 16);
  require(w > 0 && h > 0 && n > 0, Errc::InvalidDimensions, "zero dimension in header");

  auto fill = [&](auto tag) -> AnyStack {
    using T = decltype(tag);
    FrameStack<T> s;
    s.width = w;
    s.height = h;
    s.n_frames = n;
    s.pixel_size_s = le::get_le<double>(hdr.data() + 20);
    s.frame_interval = le::get_le<double>(hdr.data() + 28);
    s.exposure = le::get_le<double>(hdr.data() + 36);
    const std::size_t count = w * h * n;
    std::vector<char> payload(count * sizeof(T));
    in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    require(in.gcount() == static_cast<std::streamsize>(payload.size()), Errc::TruncatedPayload,
            "payload shorter than header implies");
    s.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) s.data[i] = le::get_le<T>(payload.data() + i * sizeof(T));
    return s;
  };
  return dtype == 0 ? fill(float{}) : fill(double{});
}

/// Reads a TBIM stack and converts it to the requested element type.
template <typename T>
FrameStack<T> read_stack_as(std::istream& in) {
  return std::visit(
      [](auto&& s) -> FrameStack<T> {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, FrameStack<T>>) {
          return std::move(s);
        } else {
          FrameStack<T> out;
          out.width = s.width;
          out.height = s.height;
          out.n_frames = s.n_frames;
          out.pixel_size_s = s.pixel_size_s;
          out.frame_interval = s.frame_interval;
          out.exposure = s.exposure;
          out.data.assign(s.data.begin(), s.data.end());
          return out;
        }
      },
      read_stack(in));
}

// ---------------------------------------------------------------------------
// Acquisition sets <-> stacks. Signal stacks interleave frames as
// [f1(0), f2(0), f1(1), f2(1), ...]; background stacks hold one frame per
// acquisition.
// ---------------------------------------------------------------------------

struct StackSet {
  RawStack probe, conj;
  std::optional<RawStack> bg_probe, bg_conj;
};

inline StackSet to_stacks(std::span<const AcquisitionSet> acqs, double pixel_size_s = 16e-6,
                          double frame_interval = 60e-6, double exposure = 1e-6) {
  require(!acqs.empty(), Errc::EmptyInput, "no acquisitions");
  StackSet out;
  for (RawStack* s : {&out.probe, &out.conj}) {
    s->pixel_size_s = pixel_size_s;
    s->frame_interval = frame_interval;
    s->exposure = exposure;
  }
  const bool bg = acqs.front().has_background();
  if (bg) {
    out.bg_probe = out.probe;
    out.bg_conj = out.probe;
  }
  for (const auto& a : acqs) {
    a.validate();
    require(a.has_background() == bg, Errc::InvalidParameter,
            "background frames present in some acquisitions only");
    out.probe.push_frame(a.probe_f1);
    out.probe.push_frame(a.probe_f2);
    out.conj.push_frame(a.conj_f1);
    out.conj.push_frame(a.conj_f2);
    if (bg) {
      out.bg_probe->push_frame(*a.bg_probe);
      out.bg_conj->push_frame(*a.bg_conj);
    }
  }
  return out;
}

inline std::vector<AcquisitionSet> from_stacks(const StackSet& s) {
  require(s.probe.n_frames == s.conj.n_frames && s.probe.n_frames % 2 == 0 && s.probe.n_frames > 0,
          Errc::InvalidDimensions, "probe/conjugate stacks must hold matching frame pairs");
  require(s.probe.width == s.conj.width && s.probe.height == s.conj.height,
          Errc::DimensionMismatch, "probe and conjugate stacks differ in shape");
  const std::size_t n_acq = s.probe.n_frames / 2;
  const bool bg = s.bg_probe.has_value() && s.bg_conj.has_value();
  if (bg) {
    require(s.bg_probe->n_frames == n_acq && s.bg_conj->n_frames == n_acq,
            Errc::InvalidDimensions, "background stacks need one frame per acquisition");
  }
  std::vector<AcquisitionSet> out(n_acq);
  for (std::size_t i = 0; i < n_acq; ++i) {
    out[i].probe_f1 = s.probe.frame(2 * i);
    out[i].probe_f2 = s.probe.frame(2 * i + 1);
    out[i].conj_f1 = s.conj.frame(2 * i);
    out[i].conj_f2 = s.conj.frame(2 * i + 1);
    if (bg) {
      out[i].bg_probe = s.bg_probe->frame(i);
      out[i].bg_conj = s.bg_conj->frame(i);
    }
    out[i].validate();
  }
  return out;
}

}  // namespace twinbeam

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <vector>

#include "ecenet/losses.hpp"
#include "ecenet/tensor_io.hpp"

namespace ecenet {

/// Image [3 x H x W] in [0, 1] with its class-index map. Class 0 is background.
template <typename T>
struct SegSample {
  Tensor<T> image;
  LabelMap gt;
};

namespace detail {

enum class ShapeKind { kRect, kCircle, kTriangle };

inline ShapeKind shape_kind(std::size_t cls) { return static_cast<ShapeKind>((cls - 1) % 3); }

/// Base color of class `cls`; golden-angle hues, darker for each full cycle
/// of the three shape kinds.
inline std::array<double, 3> class_color(std::size_t cls) {
  const double hue = std::fmod(0.08 + 0.618033988749895 * static_cast<double>(cls - 1), 1.0);
  const double value = 0.95 - 0.15 * static_cast<double>(((cls - 1) / 3) % 3);
  std::array<double, 3> rgb{};
  for (int k = 0; k < 3; ++k) {
    const double h = std::fmod(hue + static_cast<double>(k) / 3.0, 1.0);
    const double v = std::clamp(std::abs(h * 6.0 - 3.0) - 1.0, 0.0, 1.0);
    rgb[static_cast<std::size_t>(k)] = value * (0.25 + 0.75 * v);
  }
  return rgb;
}

inline double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

}  // namespace detail

/// Sample `index` of the stream seeded by `seed`. Independent of how many
/// other samples are drawn.
template <typename T = float>
SegSample<T> gen_sample(std::uint64_t seed, std::uint64_t index, std::size_t size, std::size_t n_classes) {
  if (n_classes < 2) throw ConfigError("gen_shapes: need at least two classes");
  if (n_classes > 255) throw ConfigError("gen_shapes: at most 255 classes");
  if (size < 8) throw ConfigError("gen_shapes: image size must be at least 8");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double n = static_cast<double>(size);
  SegSample<T> s{Tensor<T>({3, size, size}), LabelMap(size, size, 0)};

  // Background: two low-frequency sinusoids over a muted gray.
  const double base = uni(0.3, 0.5);
  const double fx = uni(1.0, 4.0) * 2 * std::numbers::pi / n, fy = uni(1.0, 4.0) * 2 * std::numbers::pi / n;
  const double px = uni(0, 2 * std::numbers::pi), py = uni(0, 2 * std::numbers::pi);
  std::array<double, 3> tint{uni(-0.05, 0.05), uni(-0.05, 0.05), uni(-0.05, 0.05)};
  std::vector<std::array<double, 3>> color(size * size);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double tex = 0.08 * std::sin(fx * static_cast<double>(j) + px) * std::cos(fy * static_cast<double>(i) + py);
      for (std::size_t k = 0; k < 3; ++k) color[i * size + j][k] = base + tint[k] + tex;
    }

  const std::size_t shapes = 1 + static_cast<std::size_t>(rng() % 4);
  std::uniform_int_distribution<std::size_t> pick_class(1, n_classes - 1);
  for (std::size_t k = 0; k < shapes; ++k) {
    const std::size_t cls = pick_class(rng);
    auto rgb = detail::class_color(cls);
    for (auto& v : rgb) v = std::clamp(v + uni(-0.08, 0.08), 0.0, 1.0);
    const double half = uni(n / 10, n / 4);
    const double cx = uni(half * 0.5, n - half * 0.5), cy = uni(half * 0.5, n - half * 0.5);
    const double aspect = uni(0.6, 1.4);
    const double hw = half * aspect, hh = half / aspect;
    // Triangle: apex on top, base at the bottom, with a random apex shift.
    const double shift = uni(-0.5, 0.5) * hw;
    const double ax = cx + shift, ay = cy - hh, bx = cx - hw, by = cy + hh, qx = cx + hw, qy = cy + hh;
    const auto kind = detail::shape_kind(cls);
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double x = static_cast<double>(j) + 0.5, y = static_cast<double>(i) + 0.5;
        bool inside = false;
        switch (kind) {
          case detail::ShapeKind::kRect:
            inside = std::abs(x - cx) <= hw && std::abs(y - cy) <= hh;
            break;
          case detail::ShapeKind::kCircle:
            inside = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= half * half;
            break;
          case detail::ShapeKind::kTriangle: {
            const double e0 = detail::edge(ax, ay, bx, by, x, y);
            const double e1 = detail::edge(bx, by, qx, qy, x, y);
            const double e2 = detail::edge(qx, qy, ax, ay, x, y);
            inside = (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
            break;
          }
        }
        if (!inside) continue;
        s.gt.at(i, j) = static_cast<std::uint8_t>(cls);
        color[i * size + j] = rgb;
      }
  }

  // A shape clipped to nothing (rare) still has to leave a labeled pixel.
  if (std::all_of(s.gt.data.begin(), s.gt.data.end(), [](std::uint8_t v) { return v == 0; })) {
    const std::size_t cls = pick_class(rng);
    const std::size_t c = size / 2;
    for (std::size_t i = c - 2; i < c + 2; ++i)
      for (std::size_t j = c - 2; j < c + 2; ++j) {
        s.gt.at(i, j) = static_cast<std::uint8_t>(cls);
        color[i * size + j] = detail::class_color(cls);
      }
  }

  std::normal_distribution<double> noise(0.0, 0.03);
  const std::size_t hw = size * size;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t k = 0; k < 3; ++k) s.image[k * hw + p] = static_cast<T>(std::clamp(color[p][k] + noise(rng), 0.0, 1.0));
  return s;
}

/// `count` samples 0..count-1 of the stream seeded by `seed`.
template <typename T = float>
std::vector<SegSample<T>> gen_shapes(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t n_classes) {
  if (n_classes < 2) throw ConfigError("gen_shapes: need at least two classes");
  std::vector<SegSample<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sample<T>(seed, i, size, n_classes));
  return out;
}

/// Seed of the held-out stream that belongs to a training seed.
inline std::uint64_t heldout_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

/// Label map as an [H x W] tensor of class indices (255 = ignore).
inline Tensor<float> label_tensor(const LabelMap& gt) {
  Tensor<float> t({gt.height, gt.width});
  for (std::size_t p = 0; p < gt.size(); ++p) t[p] = static_cast<float>(gt.data[p]);
  return t;
}

inline LabelMap label_map(const Tensor<float>& t) {
  if (t.rank() != 2) throw DataError("label tensor must be H x W, got " + shape_str(t.shape()));
  LabelMap gt(t.dim(0), t.dim(1));
  for (std::size_t p = 0; p < gt.size(); ++p) {
    const float v = t[p];
    if (!(v >= 0 && v <= 255) || v != std::floor(v)) throw DataError("label value " + std::to_string(v) + " is not a class index");
    gt.data[p] = static_cast<std::uint8_t>(v);
  }
  return gt;
}

namespace detail {

inline std::string sample_file(const std::string& kind, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05zu.tnsr", kind.c_str(), i);
  return buf;
}

}  // namespace detail

/// Writes image_NNNNN.tnsr / label_NNNNN.tnsr pairs into `dir`.
template <typename T>
void save_dataset(const std::string& dir, const std::vector<SegSample<T>>& samples) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    save_tensor((std::filesystem::path(dir) / detail::sample_file("image", i)).string(), samples[i].image);
    save_tensor((std::filesystem::path(dir) / detail::sample_file("label", i)).string(), label_tensor(samples[i].gt));
  }
}

/// Reads consecutive pairs starting at index 0 until the next image is missing.
template <typename T = float>
std::vector<SegSample<T>> load_dataset(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<SegSample<T>> out;
  for (std::size_t i = 0;; ++i) {
    const auto img = std::filesystem::path(dir) / detail::sample_file("image", i);
    const auto lab = std::filesystem::path(dir) / detail::sample_file("label", i);
    if (!std::filesystem::exists(img)) break;
    if (!std::filesystem::exists(lab)) throw DataError("missing " + lab.string());
    SegSample<T> s{load_tensor<T>(img.string()), label_map(load_tensor<float>(lab.string()))};
    if (s.image.rank() != 3 || s.image.dim(0) != 3 || s.image.dim(1) != s.gt.height || s.image.dim(2) != s.gt.width) {
      throw DataError(img.string() + ": image " + shape_str(s.image.shape()) + " does not match its " +
                      std::to_string(s.gt.height) + "x" + std::to_string(s.gt.width) + " label");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ecenet

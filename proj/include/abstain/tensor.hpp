#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "abstain/error.hpp"

namespace abstain {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array of doubles. A plain value type: copying copies the data.
/// 4-D tensors follow the (batch, channel, height, width) layout.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw DimensionError("Tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-D accessors.
  double& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) noexcept {
    return data_[((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  double at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return data_[((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  double item() const {
    if (data_.size() != 1) throw DimensionError("Tensor::item on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
      throw DimensionError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Integer class map over a (batch, height, width) pixel grid. Class ids fit in 8 bits
/// so masks round-trip through 8-bit PGM files.
class LabelMask {
 public:
  LabelMask() = default;
  LabelMask(std::size_t height, std::size_t width, std::uint8_t fill = 0) : LabelMask(1, height, width, fill) {}
  LabelMask(std::size_t batch, std::size_t height, std::size_t width, std::uint8_t fill)
      : batch_(batch), height_(height), width_(width), labels_(batch * height * width, fill) {}
  LabelMask(std::size_t batch, std::size_t height, std::size_t width, std::vector<std::uint8_t> labels)
      : batch_(batch), height_(height), width_(width), labels_(std::move(labels)) {
    if (labels_.size() != batch_ * height_ * width_) {
      throw DimensionError("LabelMask: label count does not match batch*height*width");
    }
  }

  std::size_t batch() const noexcept { return batch_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t plane() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return labels_.size(); }

  std::uint8_t& operator[](std::size_t i) noexcept { return labels_[i]; }
  std::uint8_t operator[](std::size_t i) const noexcept { return labels_[i]; }
  std::uint8_t& at(std::size_t y, std::size_t x) noexcept { return labels_[y * width_ + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const noexcept { return labels_[y * width_ + x]; }
  std::uint8_t& at(std::size_t b, std::size_t y, std::size_t x) noexcept { return labels_[(b * height_ + y) * width_ + x]; }
  std::uint8_t at(std::size_t b, std::size_t y, std::size_t x) const noexcept {
    return labels_[(b * height_ + y) * width_ + x];
  }

  std::span<const std::uint8_t> labels() const noexcept { return labels_; }
  std::span<std::uint8_t> labels() noexcept { return labels_; }

  // Throws RangeError if any label is >= num_classes.
  void validate(std::size_t num_classes) const {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i] >= num_classes) {
        throw RangeError("label " + std::to_string(labels_[i]) + " at pixel " + std::to_string(i) +
                         " outside [0," + std::to_string(num_classes) + ")");
      }
    }
  }

  // The b-th plane as a single-image mask.
  LabelMask slice(std::size_t b) const {
    std::vector<std::uint8_t> out(labels_.begin() + static_cast<std::ptrdiff_t>(b * plane()),
                                  labels_.begin() + static_cast<std::ptrdiff_t>((b + 1) * plane()));
    return LabelMask(1, height_, width_, std::move(out));
  }

  // Stacks single-image masks of equal size into one batch.
  static LabelMask stack(std::span<const LabelMask* const> masks) {
    if (masks.empty()) return {};
    const auto h = masks.front()->height(), w = masks.front()->width();
    std::vector<std::uint8_t> out;
    out.reserve(masks.size() * h * w);
    for (const auto* m : masks) {
      if (m->height() != h) throw DimensionError("LabelMask::stack", "height", h, m->height());
      if (m->width() != w) throw DimensionError("LabelMask::stack", "width", w, m->width());
      out.insert(out.end(), m->labels_.begin(), m->labels_.end());
    }
    return LabelMask(masks.size(), h, w, std::move(out));
  }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;

 private:
  std::size_t batch_ = 0, height_ = 0, width_ = 0;
  std::vector<std::uint8_t> labels_;
};

// One-hot lift of `labels` to a [b, num_classes, h, w] tensor.
inline Tensor one_hot(const LabelMask& labels, std::size_t num_classes) {
  Tensor t(Shape{labels.batch(), num_classes, labels.height(), labels.width()});
  const auto plane = labels.plane();
  for (std::size_t b = 0; b < labels.batch(); ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      const auto c = labels[b * plane + i];
      if (c >= num_classes) throw RangeError("one_hot: label " + std::to_string(c) + " >= " + std::to_string(num_classes));
      t[(b * num_classes + c) * plane + i] = 1.0;
    }
  }
  return t;
}

}  // namespace abstain

#pragma once

// Orthonormal 2-D Haar transform with a quad-tree coefficient layout.
//
// Coefficients are stored in canonical order: the scaling block first, then
// detail levels 1 (coarsest) .. L (finest); each level holds the H, V and D
// bands in that order, each band row-major. With S = (height/2^L)*(width/2^L)
// scaling coefficients, band o of level l starts at S * 4^(l-1) * (1 + o).
//
// Orientation naming: H is low-pass along rows and high-pass along columns
// (responds to horizontal edges), V is the converse, D is high-pass in both.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>

#include "vbtree/common.hpp"

namespace vbtree {

struct Image {
  int height = 0;
  int width = 0;
  Vector pixels;  // row-major

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return pixels.size(); }
  double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};

enum class Orientation : std::uint8_t { Scaling, H, V, D };

const char* to_string(Orientation o);

class WaveletLayout {
 public:
  static constexpr int kNoParent = -1;

  /// Throws DimensionError unless 2^levels divides both dimensions.
  WaveletLayout(int height, int width, int levels);

  int height() const { return height_; }
  int width() const { return width_; }
  int levels() const { return levels_; }
  std::size_t size() const { return static_cast<std::size_t>(height_) * width_; }

  /// Dimensions of the coarsest (scaling) block.
  int base_rows() const { return base_rows_; }
  int base_cols() const { return base_cols_; }
  std::size_t scaling_count() const { return static_cast<std::size_t>(base_rows_) * base_cols_; }
  std::size_t detail_count() const { return size() - scaling_count(); }

  /// Detail nodes at level l (1-based).
  std::size_t level_count(int level) const;
  /// First canonical index of band `o` at `level`.
  std::size_t band_offset(int level, Orientation o) const;
  int band_rows(int level) const { return base_rows_ << (level - 1); }
  int band_cols(int level) const { return base_cols_ << (level - 1); }

  // Per-coefficient metadata. Level 0 denotes a scaling coefficient.
  int level(std::size_t j) const { return level_[j]; }
  Orientation orientation(std::size_t j) const { return orient_[j]; }
  int row(std::size_t j) const { return row_[j]; }
  int col(std::size_t j) const { return col_[j]; }
  int parent(std::size_t j) const { return parent_[j]; }
  bool is_scaling(std::size_t j) const { return level_[j] == 0; }

  /// Children of a detail node; empty (count 0) at the finest level or for
  /// scaling coefficients.
  int child_count(std::size_t j) const;
  std::array<int, 4> children(std::size_t j) const;

  std::size_t index_of(int level, Orientation o, int r, int c) const;

  /// Debug dump: index,level,orientation,row,col,parent_index,value.
  void write_csv(std::ostream& os, std::span<const double> values) const;

 private:
  int height_;
  int width_;
  int levels_;
  int base_rows_;
  int base_cols_;
  std::vector<int> level_;
  std::vector<Orientation> orient_;
  std::vector<int> row_;
  std::vector<int> col_;
  std::vector<int> parent_;
};

/// s = B u.
Vector forward(const Image& image, const WaveletLayout& layout);
void forward(std::span<const double> pixels, const WaveletLayout& layout, std::span<double> coeffs);

/// u = B^T s (= B^-1 s).
Image inverse(std::span<const double> coeffs, const WaveletLayout& layout);
void inverse(std::span<const double> coeffs, const WaveletLayout& layout, std::span<double> pixels);

}  // namespace vbtree

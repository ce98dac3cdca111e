#include "vbtree/wavelet.hpp"

#include <algorithm>
#include <ostream>

namespace vbtree {

namespace {

const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

// One analysis step on the top-left rows x cols block of a row-major buffer
// with the given stride. Afterwards the block holds LL | V over H | D.
void analysis_step(double* buf, int stride, int rows, int cols, Vector& line) {
  const int hr = rows / 2;
  const int hc = cols / 2;
  for (int r = 0; r < rows; ++r) {
    double* row = buf + static_cast<std::ptrdiff_t>(r) * stride;
    for (int c = 0; c < hc; ++c) {
      const double a = row[2 * c];
      const double b = row[2 * c + 1];
      line[c] = (a + b) * kInvSqrt2;
      line[hc + c] = (a - b) * kInvSqrt2;
    }
    std::copy_n(line.begin(), cols, row);
  }
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < hr; ++r) {
      const double a = buf[static_cast<std::ptrdiff_t>(2 * r) * stride + c];
      const double b = buf[static_cast<std::ptrdiff_t>(2 * r + 1) * stride + c];
      line[r] = (a + b) * kInvSqrt2;
      line[hr + r] = (a - b) * kInvSqrt2;
    }
    for (int r = 0; r < rows; ++r) buf[static_cast<std::ptrdiff_t>(r) * stride + c] = line[r];
  }
}

void synthesis_step(double* buf, int stride, int rows, int cols, Vector& line) {
  const int hr = rows / 2;
  const int hc = cols / 2;
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < hr; ++r) {
      const double lo = buf[static_cast<std::ptrdiff_t>(r) * stride + c];
      const double hi = buf[static_cast<std::ptrdiff_t>(hr + r) * stride + c];
      line[2 * r] = (lo + hi) * kInvSqrt2;
      line[2 * r + 1] = (lo - hi) * kInvSqrt2;
    }
    for (int r = 0; r < rows; ++r) buf[static_cast<std::ptrdiff_t>(r) * stride + c] = line[r];
  }
  for (int r = 0; r < rows; ++r) {
    double* row = buf + static_cast<std::ptrdiff_t>(r) * stride;
    for (int c = 0; c < hc; ++c) {
      const double lo = row[c];
      const double hi = row[hc + c];
      line[2 * c] = (lo + hi) * kInvSqrt2;
      line[2 * c + 1] = (lo - hi) * kInvSqrt2;
    }
    std::copy_n(line.begin(), cols, row);
  }
}

// Band position inside the Mallat-style in-place buffer, relative to the
// block of size (2*br) x (2*bc) in which it was produced.
void band_origin(Orientation o, int br, int bc, int& r0, int& c0) {
  switch (o) {
    case Orientation::H: r0 = br; c0 = 0; break;
    case Orientation::V: r0 = 0; c0 = bc; break;
    case Orientation::D: r0 = br; c0 = bc; break;
    default: r0 = 0; c0 = 0; break;
  }
}

constexpr Orientation kBands[3] = {Orientation::H, Orientation::V, Orientation::D};

}  // namespace

const char* to_string(Orientation o) {
  switch (o) {
    case Orientation::Scaling: return "S";
    case Orientation::H: return "H";
    case Orientation::V: return "V";
    case Orientation::D: return "D";
  }
  return "?";
}

WaveletLayout::WaveletLayout(int height, int width, int levels)
    : height_(height), width_(width), levels_(levels) {
  if (levels < 1 || levels > 30) throw DimensionError("wavelet depth must be in [1, 30]");
  if (height <= 0 || width <= 0) throw DimensionError("image dimensions must be positive");
  const int block = 1 << levels;
  if (height % block != 0 || width % block != 0)
    throw DimensionError("image dimensions " + std::to_string(height) + "x" + std::to_string(width) +
                         " are not divisible by 2^" + std::to_string(levels));
  base_rows_ = height / block;
  base_cols_ = width / block;

  const std::size_t n = size();
  level_.assign(n, 0);
  orient_.assign(n, Orientation::Scaling);
  row_.assign(n, 0);
  col_.assign(n, 0);
  parent_.assign(n, kNoParent);

  for (int r = 0; r < base_rows_; ++r)
    for (int c = 0; c < base_cols_; ++c) {
      const std::size_t j = static_cast<std::size_t>(r) * base_cols_ + c;
      row_[j] = r;
      col_[j] = c;
    }
  for (int l = 1; l <= levels_; ++l)
    for (Orientation o : kBands) {
      const std::size_t off = band_offset(l, o);
      const int br = band_rows(l);
      const int bc = band_cols(l);
      for (int r = 0; r < br; ++r)
        for (int c = 0; c < bc; ++c) {
          const std::size_t j = off + static_cast<std::size_t>(r) * bc + c;
          level_[j] = l;
          orient_[j] = o;
          row_[j] = r;
          col_[j] = c;
          if (l > 1) parent_[j] = static_cast<int>(index_of(l - 1, o, r / 2, c / 2));
        }
    }
}

std::size_t WaveletLayout::level_count(int level) const {
  if (level < 1 || level > levels_) return 0;
  return 3 * scaling_count() * (std::size_t{1} << (2 * (level - 1)));
}

std::size_t WaveletLayout::band_offset(int level, Orientation o) const {
  const std::size_t band = scaling_count() * (std::size_t{1} << (2 * (level - 1)));
  // H, V, D are enumerated 1, 2, 3.
  return band * static_cast<std::size_t>(o);
}

std::size_t WaveletLayout::index_of(int level, Orientation o, int r, int c) const {
  if (o == Orientation::Scaling) return static_cast<std::size_t>(r) * base_cols_ + c;
  return band_offset(level, o) + static_cast<std::size_t>(r) * band_cols(level) + c;
}

int WaveletLayout::child_count(std::size_t j) const {
  return (level_[j] == 0 || level_[j] == levels_) ? 0 : 4;
}

std::array<int, 4> WaveletLayout::children(std::size_t j) const {
  std::array<int, 4> out{kNoParent, kNoParent, kNoParent, kNoParent};
  if (child_count(j) == 0) return out;
  const int l = level_[j] + 1;
  const int r = 2 * row_[j];
  const int c = 2 * col_[j];
  out[0] = static_cast<int>(index_of(l, orient_[j], r, c));
  out[1] = static_cast<int>(index_of(l, orient_[j], r, c + 1));
  out[2] = static_cast<int>(index_of(l, orient_[j], r + 1, c));
  out[3] = static_cast<int>(index_of(l, orient_[j], r + 1, c + 1));
  return out;
}

void WaveletLayout::write_csv(std::ostream& os, std::span<const double> values) const {
  if (values.size() != size()) throw DimensionError("coefficient dump: length mismatch");
  os << "index,level,orientation,row,col,parent_index,value\n";
  for (std::size_t j = 0; j < size(); ++j)
    os << j << ',' << level_[j] << ',' << to_string(orient_[j]) << ',' << row_[j] << ',' << col_[j]
       << ',' << parent_[j] << ',' << values[j] << '\n';
}

void forward(std::span<const double> pixels, const WaveletLayout& layout, std::span<double> coeffs) {
  if (pixels.size() != layout.size() || coeffs.size() != layout.size())
    throw DimensionError("wavelet forward: size mismatch with layout");
  const int w = layout.width();
  Vector work(pixels.begin(), pixels.end());
  Vector line(static_cast<std::size_t>(std::max(layout.height(), w)));

  for (int l = layout.levels(); l >= 1; --l) {
    const int rows = layout.band_rows(l) * 2;
    const int cols = layout.band_cols(l) * 2;
    analysis_step(work.data(), w, rows, cols, line);
    const int br = rows / 2;
    const int bc = cols / 2;
    for (Orientation o : kBands) {
      int r0, c0;
      band_origin(o, br, bc, r0, c0);
      double* dst = coeffs.data() + layout.band_offset(l, o);
      for (int r = 0; r < br; ++r)
        std::copy_n(work.data() + static_cast<std::ptrdiff_t>(r0 + r) * w + c0, bc,
                    dst + static_cast<std::ptrdiff_t>(r) * bc);
    }
  }
  for (int r = 0; r < layout.base_rows(); ++r)
    std::copy_n(work.data() + static_cast<std::ptrdiff_t>(r) * w, layout.base_cols(),
                coeffs.data() + static_cast<std::ptrdiff_t>(r) * layout.base_cols());
}

Vector forward(const Image& image, const WaveletLayout& layout) {
  if (image.height != layout.height() || image.width != layout.width())
    throw DimensionError("wavelet forward: image dimensions do not match layout");
  Vector out(layout.size());
  forward(image.pixels, layout, out);
  return out;
}

void inverse(std::span<const double> coeffs, const WaveletLayout& layout, std::span<double> pixels) {
  if (pixels.size() != layout.size() || coeffs.size() != layout.size())
    throw DimensionError("wavelet inverse: size mismatch with layout");
  const int w = layout.width();
  std::fill(pixels.begin(), pixels.end(), 0.0);
  Vector line(static_cast<std::size_t>(std::max(layout.height(), w)));

  for (int r = 0; r < layout.base_rows(); ++r)
    std::copy_n(coeffs.data() + static_cast<std::ptrdiff_t>(r) * layout.base_cols(), layout.base_cols(),
                pixels.data() + static_cast<std::ptrdiff_t>(r) * w);
  for (int l = 1; l <= layout.levels(); ++l) {
    const int br = layout.band_rows(l);
    const int bc = layout.band_cols(l);
    for (Orientation o : kBands) {
      int r0, c0;
      band_origin(o, br, bc, r0, c0);
      const double* src = coeffs.data() + layout.band_offset(l, o);
      for (int r = 0; r < br; ++r)
        std::copy_n(src + static_cast<std::ptrdiff_t>(r) * bc, bc,
                    pixels.data() + static_cast<std::ptrdiff_t>(r0 + r) * w + c0);
    }
    synthesis_step(pixels.data(), w, 2 * br, 2 * bc, line);
  }
}

Image inverse(std::span<const double> coeffs, const WaveletLayout& layout) {
  Image out(layout.height(), layout.width());
  inverse(coeffs, layout, out.pixels);
  return out;
}

}  // namespace vbtree

#pragma once

#include <string>

#include "vbtree/tree_model.hpp"
#include "vbtree/wavelet.hpp"

namespace vbtree {

/// Reads an 8-bit greyscale PGM (P2/P5) or PNG, scaled to [0, 1] by maxval.
/// With levels > 0 the dimensions must be divisible by 2^levels.
Image load_image(const std::string& path, int levels = 0);

/// P5, maxval 255; values are clipped to [0, 1] and rounded.
void save_pgm(const std::string& path, const Image& image);

/// Little-endian float32, row-major, no header; writes "<path>.dims" with
/// "height width".
void save_f32(const std::string& path, const Image& image);

/// One PGM per level with the H | V | D bands of Q(delta_j = 1 | y) side by
/// side; files are named <prefix>_q1_level<l>.pgm.
void save_marginal_heatmaps(const std::string& prefix, const WaveletLayout& layout, const TreeMarginals& m);

/// CSV (index,level,orientation,row,col,q1) over detail nodes.
void save_marginal_csv(const std::string& path, const WaveletLayout& layout, const TreeMarginals& m);

}  // namespace vbtree

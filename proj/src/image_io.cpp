#include "vbtree/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace vbtree {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Next whitespace-separated header token, skipping '#' comments.
std::string pgm_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

int parse_int(const std::string& tok, const std::string& path) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IoError(path + ": malformed PGM header");
  }
}

Image load_pgm(std::ifstream& is, const std::string& path) {
  const std::string magic = pgm_token(is);
  const int width = parse_int(pgm_token(is), path);
  const int height = parse_int(pgm_token(is), path);
  const int maxval = parse_int(pgm_token(is), path);
  if (width <= 0 || height <= 0) throw IoError(path + ": invalid PGM dimensions");
  if (maxval <= 0 || maxval > 255) throw IoError(path + ": only 8-bit PGM is supported");

  Image img(height, width);
  if (magic == "P5") {
    std::vector<unsigned char> buf(img.size());
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() != static_cast<std::streamsize>(buf.size())) throw IoError(path + ": truncated PGM data");
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / static_cast<double>(maxval);
  } else {
    for (double& v : img.pixels) {
      const std::string tok = pgm_token(is);
      if (tok.empty()) throw IoError(path + ": truncated PGM data");
      v = parse_int(tok, path) / static_cast<double>(maxval);
    }
  }
  return img;
}

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

Image load_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw IoError(path + ": cannot open");
  PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw IoError(path + ": libpng init failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw IoError(path + ": libpng init failed");
  if (setjmp(png_jmpbuf(g.png))) throw IoError(path + ": corrupt PNG");
  png_init_io(g.png, fp.get());
  png_read_info(g.png, g.info);
  const png_uint_32 width = png_get_image_width(g.png, g.info);
  const png_uint_32 height = png_get_image_height(g.png, g.info);
  const int depth = png_get_bit_depth(g.png, g.info);
  const int color = png_get_color_type(g.png, g.info);
  if (color != PNG_COLOR_TYPE_GRAY) throw IoError(path + ": PNG is not greyscale");
  if (depth > 8) throw IoError(path + ": only 8-bit PNG is supported");
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
  png_read_update_info(g.png, g.info);

  std::vector<unsigned char> buf(static_cast<std::size_t>(width) * height);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 r = 0; r < height; ++r) rows[r] = buf.data() + static_cast<std::size_t>(r) * width;
  png_read_image(g.png, rows.data());
  Image img(static_cast<int>(height), static_cast<int>(width));
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / 255.0;
  return img;
}

}  // namespace

Image load_image(const std::string& path, int levels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open");
  std::array<unsigned char, 8> sig{};
  is.read(reinterpret_cast<char*>(sig.data()), sig.size());
  const auto got = static_cast<std::size_t>(is.gcount());
  is.clear();
  is.seekg(0);

  Image img;
  if (got >= 2 && sig[0] == 'P' && (sig[1] == '5' || sig[1] == '2')) {
    img = load_pgm(is, path);
  } else if (got == 8 && png_sig_cmp(sig.data(), 0, 8) == 0) {
    is.close();
    img = load_png(path);
  } else if (got >= 2 && sig[0] == 'P' && (sig[1] == '3' || sig[1] == '6')) {
    throw IoError(path + ": colour PPM images are not supported");
  } else {
    throw IoError(path + ": unsupported image format (expected PGM or PNG)");
  }
  if (levels > 0) {
    const int block = 1 << levels;
    if (img.height % block != 0 || img.width % block != 0)
      throw DimensionError(path + ": size " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                           " not divisible by 2^" + std::to_string(levels));
  }
  return img;
}

void save_pgm(const std::string& path, const Image& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path + ": cannot write");
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<char> buf(image.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<char>(to_byte(image.pixels[i]));
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError(path + ": write failed");
}

void save_f32(const std::string& path, const Image& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path + ": cannot write");
  for (double v : image.pixels) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  std::ofstream dims(path + ".dims");
  dims << image.height << ' ' << image.width << '\n';
  if (!os || !dims) throw IoError(path + ": write failed");
}

void save_marginal_heatmaps(const std::string& prefix, const WaveletLayout& layout, const TreeMarginals& m) {
  if (m.size() != layout.detail_count()) throw DimensionError("marginal heatmaps: size mismatch");
  const std::size_t offset = layout.scaling_count();
  for (int l = 1; l <= layout.levels(); ++l) {
    const int br = layout.band_rows(l);
    const int bc = layout.band_cols(l);
    Image img(br, 3 * bc);
    int band = 0;
    for (Orientation o : {Orientation::H, Orientation::V, Orientation::D}) {
      for (int r = 0; r < br; ++r)
        for (int c = 0; c < bc; ++c) img.at(r, band * bc + c) = m.q1[layout.index_of(l, o, r, c) - offset];
      ++band;
    }
    save_pgm(prefix + "_q1_level" + std::to_string(l) + ".pgm", img);
  }
}

void save_marginal_csv(const std::string& path, const WaveletLayout& layout, const TreeMarginals& m) {
  if (m.size() != layout.detail_count()) throw DimensionError("marginal dump: size mismatch");
  std::ofstream os(path);
  if (!os) throw IoError(path + ": cannot write");
  os << "index,level,orientation,row,col,q1\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    const std::size_t j = layout.scaling_count() + i;
    os << j << ',' << layout.level(j) << ',' << to_string(layout.orientation(j)) << ',' << layout.row(j) << ','
       << layout.col(j) << ',' << m.q1[i] << '\n';
  }
}

}  // namespace vbtree

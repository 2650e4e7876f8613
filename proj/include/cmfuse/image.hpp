#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmfuse {

// RGB image, pixels in [0,1], row-major H x W x 3.
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double& at(std::size_t r, std::size_t c, std::size_t ch) {
    return pixels[(r * width + c) * 3 + ch];
  }
  double at(std::size_t r, std::size_t c, std::size_t ch) const {
    return pixels[(r * width + c) * 3 + ch];
  }

  static RawImage blank(std::size_t h, std::size_t w, double fill = 0.0) {
    RawImage img;
    img.height = h;
    img.width = w;
    img.pixels.assign(h * w * 3, fill);
    return img;
  }
};

// Non-overlapping patches in row-major grid order; each patch is flattened
// row-major with interleaved RGB, length patch_size^2 * 3.
struct ImagePatchGrid {
  std::size_t patch_size = 0;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::vector<std::vector<double>> patches;
};

inline ImagePatchGrid patchify(const RawImage& img, std::size_t patch_size) {
  if (patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0) {
    throw std::invalid_argument("patchify: image " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + " not divisible by patch size " +
                                std::to_string(patch_size));
  }
  ImagePatchGrid grid;
  grid.patch_size = patch_size;
  grid.grid_rows = img.height / patch_size;
  grid.grid_cols = img.width / patch_size;
  grid.patches.reserve(grid.grid_rows * grid.grid_cols);
  for (std::size_t pr = 0; pr < grid.grid_rows; ++pr) {
    for (std::size_t pc = 0; pc < grid.grid_cols; ++pc) {
      std::vector<double> patch(patch_size * patch_size * 3);
      std::size_t k = 0;
      for (std::size_t r = 0; r < patch_size; ++r) {
        for (std::size_t c = 0; c < patch_size; ++c) {
          for (std::size_t ch = 0; ch < 3; ++ch) {
            patch[k++] = img.at(pr * patch_size + r, pc * patch_size + c, ch);
          }
        }
      }
      grid.patches.push_back(std::move(patch));
    }
  }
  return grid;
}

inline RawImage unpatchify(const ImagePatchGrid& grid) {
  const std::size_t p = grid.patch_size;
  RawImage img = RawImage::blank(grid.grid_rows * p, grid.grid_cols * p);
  for (std::size_t pr = 0; pr < grid.grid_rows; ++pr) {
    for (std::size_t pc = 0; pc < grid.grid_cols; ++pc) {
      const std::vector<double>& patch = grid.patches[pr * grid.grid_cols + pc];
      std::size_t k = 0;
      for (std::size_t r = 0; r < p; ++r) {
        for (std::size_t c = 0; c < p; ++c) {
          for (std::size_t ch = 0; ch < 3; ++ch) {
            img.at(pr * p + r, pc * p + c, ch) = patch[k++];
          }
        }
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------- PPM / PGM

inline std::uint8_t quantize_byte(double v) {
  const double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0));
}

inline void write_ppm(const std::string& path, const RawImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> bytes(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) bytes[i] = quantize_byte(img.pixels[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write_ppm: failed writing " + path);
}

namespace detail {
inline void skip_pnm_whitespace(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}
}  // namespace detail

inline RawImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: " + path + " is not a P6 pixmap");
  std::size_t w = 0, h = 0, maxval = 0;
  detail::skip_pnm_whitespace(in);
  in >> w;
  detail::skip_pnm_whitespace(in);
  in >> h;
  detail::skip_pnm_whitespace(in);
  in >> maxval;
  if (!in || w == 0 || h == 0 || maxval != 255) {
    throw std::runtime_error("read_ppm: bad header in " + path);
  }
  in.get();  // single whitespace byte after maxval
  std::vector<std::uint8_t> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  }
  RawImage img = RawImage::blank(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

// 8-bit P5 graymap of values in [0,1], row-major.
inline void write_pgm(const std::string& path, std::size_t rows, std::size_t cols,
                      const std::vector<double>& values) {
  if (values.size() != rows * cols) {
    throw std::invalid_argument("write_pgm: " + std::to_string(values.size()) + " values for " +
                                std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << cols << " " << rows << "\n255\n";
  for (double v : values) {
    const std::uint8_t b = quantize_byte(v);
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!out) throw std::runtime_error("write_pgm: failed writing " + path);
}

}  // namespace cmfuse

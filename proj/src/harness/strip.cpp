#include "gtmm/harness/strip.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace gtmm {

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

GrayImage layout_strip(const std::vector<std::vector<std::vector<float>>>& sequences, ImageDims dims) {
  if (sequences.empty() || sequences.front().empty()) throw std::invalid_argument("strip: nothing to draw");
  const Index n = static_cast<Index>(sequences.size());
  const Index T = static_cast<Index>(sequences.front().size());
  const Index H = dims.height, W = dims.width, plane = H * W;
  GrayImage img;
  img.width = T * W + (T - 1);
  img.height = n * H + (n - 1);
  img.pixels.assign(static_cast<std::size_t>(img.width * img.height), 255);
  for (Index s = 0; s < n; ++s) {
    const auto& seq = sequences[static_cast<std::size_t>(s)];
    if (static_cast<Index>(seq.size()) != T) throw std::invalid_argument("strip: sequences differ in length");
    for (Index t = 0; t < T; ++t) {
      const auto& f = seq[static_cast<std::size_t>(t)];
      if (static_cast<Index>(f.size()) != dims.pixels()) throw std::invalid_argument("strip: frame size mismatch");
      for (Index y = 0; y < H; ++y) {
        for (Index x = 0; x < W; ++x) {
          double v = 0.0;
          for (Index c = 0; c < dims.channels; ++c) v += f[static_cast<std::size_t>(c * plane + y * W + x)];
          const Index row = s * (H + 1) + y, col = t * (W + 1) + x;
          img.pixels[static_cast<std::size_t>(row * img.width + col)] = quantize(v / static_cast<double>(dims.channels));
        }
      }
    }
  }
  return img;
}

namespace {

void write_png(const std::filesystem::path& path, const GrayImage& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (Index y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_pnm(const std::filesystem::path& path, const GrayImage& img, bool color) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (color ? "P6\n" : "P5\n") << img.width << ' ' << img.height << "\n255\n";
  for (std::uint8_t v : img.pixels) {
    const int reps = color ? 3 : 1;
    for (int i = 0; i < reps; ++i) out.put(static_cast<char>(v));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

void write_image(const std::filesystem::path& path, const GrayImage& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto ext = path.extension().string();
  if (ext == ".png") return write_png(path, img);
  if (ext == ".pgm") return write_pnm(path, img, false);
  if (ext == ".ppm") return write_pnm(path, img, true);
  throw std::invalid_argument("unsupported image extension '" + ext + "' (png, pgm, ppm)");
}

GrayImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  GrayImage img;
  in >> magic >> img.width >> img.height >> maxval;
  in.get();
  if ((magic != "P5" && magic != "P6") || maxval != 255 || img.width <= 0 || img.height <= 0) {
    throw std::runtime_error(path.string() + ": unsupported PNM header");
  }
  const int reps = magic == "P6" ? 3 : 1;
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  for (auto& p : img.pixels) {
    char buf[3];
    if (!in.read(buf, reps)) throw std::runtime_error(path.string() + ": truncated PNM payload");
    p = static_cast<std::uint8_t>(buf[0]);
  }
  return img;
}

void dump_sequence_strip(const std::vector<std::vector<std::vector<float>>>& sequences, ImageDims dims,
                         const std::filesystem::path& path) {
  write_image(path, layout_strip(sequences, dims));
}

}  // namespace gtmm

#include "dplc/imageio.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

namespace dplc {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

struct Rgb8Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB
};

Rgb8Image load_png(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw std::runtime_error("not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng decode error");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  Rgb8Image img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(img.width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("unexpected PNG row layout");
  }
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<std::size_t>(y)] = img.pixels.data() + static_cast<std::size_t>(y) * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Rgb8Image load_jpeg(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open " + path);

  jpeg_decompress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw std::runtime_error("libjpeg decode error");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);

  Rgb8Image img;
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() +
                   static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

bool has_suffix_ci(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(),
                    [](char a, char b) { return ::tolower(a) == ::tolower(b); });
}

}  // namespace

Tensor load_image_chw(const std::string& path, std::int64_t resolution) {
  Rgb8Image img;
  if (has_suffix_ci(path, ".png"))
    img = load_png(path);
  else if (has_suffix_ci(path, ".jpg") || has_suffix_ci(path, ".jpeg"))
    img = load_jpeg(path);
  else
    throw std::runtime_error("unsupported image format: " + path);

  // Center crop to square.
  const int side = std::min(img.width, img.height);
  const int x0 = (img.width - side) / 2;
  const int y0 = (img.height - side) / 2;

  auto pixel = [&](int x, int y, int c) -> double {
    x = std::clamp(x0 + x, 0, img.width - 1);
    y = std::clamp(y0 + y, 0, img.height - 1);
    return img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 +
                      static_cast<std::size_t>(c)];
  };

  Tensor out({3, resolution, resolution});
  const double scale = static_cast<double>(side) / static_cast<double>(resolution);
  for (std::int64_t ty = 0; ty < resolution; ++ty) {
    for (std::int64_t tx = 0; tx < resolution; ++tx) {
      // Bilinear sample at the source-space center of the target pixel.
      const double sx = (tx + 0.5) * scale - 0.5;
      const double sy = (ty + 0.5) * scale - 0.5;
      const int ix = static_cast<int>(std::floor(sx));
      const int iy = static_cast<int>(std::floor(sy));
      const double fx = sx - ix, fy = sy - iy;
      for (int c = 0; c < 3; ++c) {
        const double v =
            (1 - fx) * (1 - fy) * pixel(ix, iy, c) + fx * (1 - fy) * pixel(ix + 1, iy, c) +
            (1 - fx) * fy * pixel(ix, iy + 1, c) + fx * fy * pixel(ix + 1, iy + 1, c);
        out[(c * resolution + ty) * resolution + tx] = v / 127.5 - 1.0;
      }
    }
  }
  return out;
}

void save_image_chw(const Tensor& image, const std::string& path) {
  if (image.rank() != 3 || (image.shape[0] != 3 && image.shape[0] != 1))
    throw std::invalid_argument("save_image_chw: expected (3,h,w) or (1,h,w)");
  const std::int64_t c = image.shape[0], h = image.shape[1], w = image.shape[2];
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h * w * 3));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t ch = 0; ch < 3; ++ch) {
        const std::int64_t src_ch = c == 3 ? ch : 0;
        double v = image[(src_ch * h + y) * w + x];
        v = std::clamp((v + 1.0) * 127.5, 0.0, 255.0);
        rgb[static_cast<std::size_t>((y * w + x) * 3 + ch)] =
            static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  write_png_rgb8(path, rgb.data(), static_cast<int>(w), static_cast<int>(h));
}

void write_png_rgb8(const std::string& path, const std::uint8_t* rgb, int width,
                    int height) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng encode error");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y)
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(rgb + static_cast<std::size_t>(y) * width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace dplc

#include "rls/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "rls/errors.hpp"

namespace rls {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png16(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw InvalidParameter("write_png16: channels must be 1 or 3");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 16,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels * 2);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      for (int ch = 0; ch < img.channels; ++ch) {
        const float v = std::clamp(img.at(r, c, ch), 0.0f, 1.0f);
        const auto q = static_cast<unsigned>(std::lround(v * 65535.0f));
        const std::size_t k = (static_cast<std::size_t>(c) * img.channels + ch) * 2;
        row[k] = static_cast<png_byte>(q >> 8);  // PNG is big-endian
        row[k + 1] = static_cast<png_byte>(q & 0xff);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  const int bytes = png_get_bit_depth(png, info) == 16 ? 2 : 1;
  Image img(height, width, channels);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int r = 0; r < height; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (int i = 0; i < width * channels; ++i) {
      float v = bytes == 2 ? static_cast<float>((row[2 * i] << 8) | row[2 * i + 1]) / 65535.0f
                           : static_cast<float>(row[i]) / 255.0f;
      img.pixels[static_cast<std::size_t>(r) * width * channels + i] = v;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Image resize_nearest(const Image& img, int size) {
  Image out(size, size, img.channels);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const int sr = r * img.height / size;
      const int sc = c * img.width / size;
      for (int ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(sr, sc, ch);
    }
  return out;
}

Image contact_sheet(const std::vector<std::vector<Image>>& rows, int cell, int gap) {
  std::size_t ncols = 0;
  int channels = 3;
  for (const auto& row : rows) {
    ncols = std::max(ncols, row.size());
    if (!row.empty()) channels = row.front().channels;
  }
  const int H = static_cast<int>(rows.size()) * (cell + gap) + gap;
  const int W = static_cast<int>(ncols) * (cell + gap) + gap;
  Image sheet(H, W, channels, 1.0f);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      Image tile = resize_nearest(rows[i][j], cell);
      const int r0 = gap + static_cast<int>(i) * (cell + gap);
      const int c0 = gap + static_cast<int>(j) * (cell + gap);
      for (int r = 0; r < cell; ++r)
        for (int c = 0; c < cell; ++c)
          for (int ch = 0; ch < channels; ++ch)
            sheet.at(r0 + r, c0 + c, ch) = tile.at(r, c, std::min(ch, tile.channels - 1));
    }
  return sheet;
}

}  // namespace rls

#include "wnet/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

namespace wnet {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports errors through longjmp; the message is stashed here so the
// C++ side can throw after the jump, with no destructors skipped.
struct ErrorSlot {
  char message[256] = {};
};

void on_error(png_structp png, png_const_charp msg) {
  auto* slot = static_cast<ErrorSlot*>(png_get_error_ptr(png));
  std::snprintf(slot->message, sizeof slot->message, "%s", msg);
  png_longjmp(png, 1);
}

void on_warning(png_structp, png_const_charp) {}

// Both return false on a libpng error. Heap state lives behind pointers set
// before setjmp, so a longjmp leaves nothing indeterminate.
bool decode(std::FILE* f, ErrorSlot& slot, PngImage& out) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &slot, on_error, on_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  std::vector<png_bytep>* rows = new std::vector<png_bytep>();
  std::vector<png_byte>* buffer = new std::vector<png_byte>();
  volatile bool ok = false;
  if (setjmp(png_jmpbuf(png)) == 0) {
    png_init_io(png, f);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = png_get_channels(png, info);
    out.bit_depth = png_get_bit_depth(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    buffer->resize(stride * static_cast<std::size_t>(out.height));
    rows->resize(static_cast<std::size_t>(out.height));
    for (int y = 0; y < out.height; ++y) (*rows)[static_cast<std::size_t>(y)] = buffer->data() + stride * y;
    png_read_image(png, rows->data());
    png_read_end(png, nullptr);
    const std::size_t count = static_cast<std::size_t>(out.width) * out.height * out.channels;
    out.samples.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      out.samples[i] = out.bit_depth == 16
                           ? static_cast<std::uint16_t>(((*buffer)[2 * i] << 8) | (*buffer)[2 * i + 1])
                           : (*buffer)[i];
    }
    ok = true;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  delete rows;
  delete buffer;
  return ok;
}

bool encode(std::FILE* f, ErrorSlot& slot, const PngImage& img, std::vector<png_bytep>& rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &slot, on_error, on_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  volatile bool ok = false;
  if (setjmp(png_jmpbuf(png)) == 0) {
    png_init_io(png, f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 img.bit_depth, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    ok = true;
  }
  png_destroy_write_struct(&png, &info);
  return ok;
}

}  // namespace

PngImage read_png(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw ImageIOError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageIOError(path.string() + " is not a PNG file");
  }
  std::rewind(f.get());
  ErrorSlot slot;
  PngImage img;
  if (!decode(f.get(), slot, img)) {
    throw ImageIOError("cannot decode " + path.string() + (slot.message[0] ? ": " : "") + slot.message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const PngImage& img) {
  require(img.channels == 1 || img.channels == 3, "write_png: channels must be 1 or 3");
  require(img.bit_depth == 8 || img.bit_depth == 16, "write_png: bit depth must be 8 or 16");
  require(img.width > 0 && img.height > 0, "write_png: empty image");
  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * img.channels;
  require(img.samples.size() == count, "write_png: sample count does not match geometry");

  const std::size_t bytes = static_cast<std::size_t>(img.bit_depth / 8);
  std::vector<png_byte> buffer(count * bytes);
  for (std::size_t i = 0; i < count; ++i) {
    if (bytes == 2) {
      buffer[2 * i] = static_cast<png_byte>(img.samples[i] >> 8);
      buffer[2 * i + 1] = static_cast<png_byte>(img.samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<png_byte>(std::min<std::uint16_t>(img.samples[i], 255));
    }
  }
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels * bytes;
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + stride * y;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw ImageIOError("cannot create " + path.string());
  ErrorSlot slot;
  if (!encode(f.get(), slot, img, rows)) {
    throw ImageIOError("cannot encode " + path.string() + (slot.message[0] ? ": " : "") + slot.message);
  }
}

Tensor png_to_tensor(const PngImage& img) {
  Tensor t({1, img.channels, img.height, img.width});
  const double peak = img.max_value();
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        const std::size_t i = (static_cast<std::size_t>(y) * img.width + x) * img.channels + c;
        t.at(0, c, y, x) = static_cast<float>(img.samples[i] / peak);
      }
    }
  }
  return t;
}

PngImage tensor_to_png(const Tensor& t, int bit_depth) {
  const Shape s = t.shape();
  require(s.n == 1 && (s.c == 1 || s.c == 3), "tensor_to_png: expected (1, 1|3, H, W), got " + s.str());
  PngImage img;
  img.width = s.w;
  img.height = s.h;
  img.channels = s.c;
  img.bit_depth = bit_depth;
  const double peak = img.max_value();
  img.samples.resize(s.numel());
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      for (int c = 0; c < s.c; ++c) {
        const double v = std::clamp(static_cast<double>(t.at(0, c, y, x)), 0.0, 1.0);
        img.samples[(static_cast<std::size_t>(y) * s.w + x) * s.c + c] =
            static_cast<std::uint16_t>(std::lround(v * peak));
      }
    }
  }
  return img;
}

}  // namespace wnet

#include "tdn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#ifdef TDN_HAVE_JPEG
#include <jpeglib.h>
#endif
#ifdef TDN_HAVE_PNG
#include <png.h>
#endif

#include "tdn/error.hpp"
#include "tdn/rng.hpp"

namespace fs = std::filesystem;

namespace tdn {

std::optional<int> class_from_name(std::string_view name) {
  for (int c = 0; c < kNumClasses; ++c) {
    if (name == kClassNames[c] || name == kClassPrefixes[c]) return c;
  }
  // File stems: "<Prefix>_<rest>".
  const auto underscore = name.find('_');
  if (underscore != std::string_view::npos) {
    const std::string_view prefix = name.substr(0, underscore);
    for (int c = 0; c < kNumClasses; ++c) {
      if (prefix == kClassPrefixes[c]) return c;
    }
  }
  return std::nullopt;
}

namespace {

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

Image decode_pgm(const std::vector<unsigned char>& bytes, const std::string& path) {
  std::size_t pos = 2;
  auto next_int = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > 1 << 20) throw IoError(path + ": PGM header value out of range");
    }
    if (!any) throw IoError(path + ": malformed PGM header");
    return static_cast<int>(v);
  };
  const bool binary = bytes[1] == '5';
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw IoError(path + ": bad PGM dimensions");
  Image img(h, w);
  if (binary) {
    ++pos;  // single whitespace after maxval
    const std::size_t bpp = maxval > 255 ? 2 : 1;
    if (bytes.size() < pos + static_cast<std::size_t>(w) * h * bpp) throw IoError(path + ": truncated PGM");
    for (Eigen::Index k = 0; k < img.size(); ++k) {
      const unsigned v = bpp == 1 ? bytes[pos + k] : (bytes[pos + 2 * k] << 8) | bytes[pos + 2 * k + 1];
      img.data()[k] = static_cast<float>(v) / static_cast<float>(maxval);
    }
  } else {
    for (Eigen::Index k = 0; k < img.size(); ++k) img.data()[k] = static_cast<float>(next_int()) / maxval;
  }
  return img;
}

std::uint32_t le32(const std::vector<unsigned char>& b, std::size_t at) {
  return b[at] | (b[at + 1] << 8) | (b[at + 2] << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}
std::uint16_t le16(const std::vector<unsigned char>& b, std::size_t at) { return b[at] | (b[at + 1] << 8); }

Image decode_bmp(const std::vector<unsigned char>& b, const std::string& path) {
  if (b.size() < 54) throw IoError(path + ": truncated BMP");
  const std::uint32_t data_offset = le32(b, 10);
  const std::uint32_t header_size = le32(b, 14);
  const std::int32_t w = static_cast<std::int32_t>(le32(b, 18));
  std::int32_t h = static_cast<std::int32_t>(le32(b, 22));
  const int bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  if (compression != 0 && compression != 3) throw IoError(path + ": compressed BMP not supported");
  if (bpp != 8 && bpp != 24 && bpp != 32) throw IoError(path + ": unsupported BMP bit depth");
  const bool top_down = h < 0;
  h = std::abs(h);
  if (w < 1 || h < 1 || w > 65536 || h > 65536) throw IoError(path + ": bad BMP dimensions");
  const std::size_t stride = (static_cast<std::size_t>(w) * bpp / 8 + 3) & ~std::size_t{3};
  if (b.size() < data_offset + stride * h) throw IoError(path + ": truncated BMP");
  std::vector<float> palette;
  if (bpp == 8) {
    std::uint32_t colors = le32(b, 46);
    if (colors == 0) colors = 256;
    const std::size_t at = 14 + header_size;
    for (std::uint32_t i = 0; i < colors && at + 4 * i + 3 <= b.size(); ++i) {
      const std::size_t p = at + 4 * i;
      palette.push_back(luma(b[p + 2], b[p + 1], b[p]) / 255.0f);
    }
  }
  Image img(h, w);
  for (int y = 0; y < h; ++y) {
    const std::size_t row = data_offset + stride * (top_down ? y : h - 1 - y);
    for (int x = 0; x < w; ++x) {
      float v;
      if (bpp == 8) {
        const unsigned idx = b[row + x];
        v = idx < palette.size() ? palette[idx] : idx / 255.0f;
      } else {
        const std::size_t p = row + static_cast<std::size_t>(x) * (bpp / 8);
        v = luma(b[p + 2], b[p + 1], b[p]) / 255.0f;
      }
      img(y, x) = v;
    }
  }
  return img;
}

#ifdef TDN_HAVE_JPEG
Image decode_jpeg(const std::vector<unsigned char>& bytes, const std::string& path) {
  jpeg_decompress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jerr.error_exit = [](j_common_ptr info) {
    char msg[JMSG_LENGTH_MAX];
    (*info->err->format_message)(info, msg);
    throw IoError(msg);
  };
  jpeg_create_decompress(&cinfo);
  try {
    jpeg_mem_src(&cinfo, bytes.data(), bytes.size());
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_GRAYSCALE;
    jpeg_start_decompress(&cinfo);
    Image img(cinfo.output_height, cinfo.output_width);
    std::vector<unsigned char> row(cinfo.output_width);
    while (cinfo.output_scanline < cinfo.output_height) {
      unsigned char* rp = row.data();
      const int y = static_cast<int>(cinfo.output_scanline);
      jpeg_read_scanlines(&cinfo, &rp, 1);
      for (JDIMENSION x = 0; x < cinfo.output_width; ++x) img(y, x) = row[x] / 255.0f;
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
  } catch (const IoError& e) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError(path + ": " + e.what());
  }
}
#endif

#ifdef TDN_HAVE_PNG
Image decode_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) throw IoError(path + ": " + image.message);
  image.format = PNG_FORMAT_GRAY;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(path + ": " + image.message);
  }
  Image img(image.height, image.width);
  for (Eigen::Index k = 0; k < img.size(); ++k) img.data()[k] = buffer[k] / 255.0f;
  return img;
}
#endif

}  // namespace

Image read_image(const std::string& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '2')) return decode_pgm(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'B' && bytes[1] == 'M') return decode_bmp(bytes, path);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
#ifdef TDN_HAVE_JPEG
    return decode_jpeg(bytes, path);
#else
    throw IoError(path + ": JPEG support not built");
#endif
  }
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G') {
#ifdef TDN_HAVE_PNG
    return decode_png(path);
#else
    throw IoError(path + ": PNG support not built");
#endif
  }
  throw IoError(path + ": unrecognized image format");
}

namespace {

void write_pgm_bytes(const std::string& path, int h, int w, const std::vector<unsigned char>& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace

void write_pgm(const std::string& path, const Image& image) {
  std::vector<unsigned char> px(static_cast<std::size_t>(image.size()));
  for (Eigen::Index k = 0; k < image.size(); ++k) {
    px[k] = static_cast<unsigned char>(std::lround(std::clamp(image.data()[k], 0.0f, 1.0f) * 255.0f));
  }
  write_pgm_bytes(path, static_cast<int>(image.rows()), static_cast<int>(image.cols()), px);
}

void write_pgm(const std::string& path, const Mask& mask) {
  std::vector<unsigned char> px(static_cast<std::size_t>(mask.size()));
  for (Eigen::Index k = 0; k < mask.size(); ++k) px[k] = mask.data()[k] ? 255 : 0;
  write_pgm_bytes(path, static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), px);
}

Image resize_bilinear(const Image& src, int height, int width) {
  if (height < 1 || width < 1) throw ShapeError("resize target must be positive");
  if (src.rows() == height && src.cols() == width) return src;
  Image dst(height, width);
  const double sy = static_cast<double>(src.rows()) / height;
  const double sx = static_cast<double>(src.cols()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.rows() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, static_cast<int>(src.rows()) - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.cols() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, static_cast<int>(src.cols()) - 1);
      const double wx = fx - x0;
      dst(y, x) = static_cast<float>((1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                                     wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1)));
    }
  }
  return dst;
}

Mask dilate(const Mask& mask, int radius) {
  if (radius <= 0) return mask;
  Mask out = Mask::Zero(mask.rows(), mask.cols());
  const int h = static_cast<int>(mask.rows());
  const int w = static_cast<int>(mask.cols());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dy * dy + dx * dx > radius * radius) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) out(yy, xx) = 1;
        }
      }
    }
  }
  return out;
}

LoadReport load_neu(const std::string& directory, int height, int width) {
  if (!fs::is_directory(directory)) throw IoError("not a directory: " + directory);
  static const std::vector<std::string> kExtensions = {".bmp", ".jpg", ".jpeg", ".png", ".pgm"};
  struct Entry {
    fs::path path;
    int label;
  };
  std::vector<Entry> entries;
  auto is_image = [](const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return std::find(kExtensions.begin(), kExtensions.end(), ext) != kExtensions.end() &&
           p.stem().string().find("_mask") == std::string::npos;
  };
  for (const auto& item : fs::directory_iterator(directory)) {
    if (item.is_directory()) {
      const auto label = class_from_name(item.path().filename().string());
      if (!label) throw IoError("unknown class directory: " + item.path().string());
      for (const auto& f : fs::directory_iterator(item.path())) {
        if (f.is_regular_file() && is_image(f.path())) entries.push_back({f.path(), *label});
      }
    } else if (item.is_regular_file() && is_image(item.path())) {
      const auto label = class_from_name(item.path().stem().string());
      if (!label) throw IoError("unknown class prefix: " + item.path().string());
      entries.push_back({item.path(), *label});
    }
  }
  if (entries.empty()) throw IoError("no images found in " + directory);
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.path < b.path; });

  LoadReport report;
  for (const auto& e : entries) {
    try {
      LabeledImage li;
      li.pixels = resize_bilinear(read_image(e.path.string()), height, width).cwiseMax(0.0f).cwiseMin(1.0f);
      li.label = e.label;
      li.source_id = e.path.stem().string();
      report.images.push_back(std::move(li));
    } catch (const IoError& err) {
      report.failures.push_back(e.path.string() + ": " + err.what());
    }
  }
  return report;
}

DatasetSplit split_neu(std::vector<LabeledImage> images, const SplitOptions& options) {
  std::vector<std::vector<LabeledImage*>> by_class(kNumClasses);
  for (auto& img : images) {
    if (img.label < 0 || img.label >= kNumClasses) throw ShapeError("label out of range: " + img.source_id);
    by_class[img.label].push_back(&img);
  }
  DatasetSplit split;
  for (int c = 0; c < kNumClasses; ++c) {
    auto& list = by_class[c];
    if (list.size() < 2) {
      throw ShapeError("class " + std::string(kClassNames[c]) + " has fewer than 2 images");
    }
    std::sort(list.begin(), list.end(),
              [](const LabeledImage* a, const LabeledImage* b) { return a->source_id < b->source_id; });
    std::size_t n_train, n_test;
    if (list.size() >= static_cast<std::size_t>(options.train_per_class + options.test_per_class)) {
      n_train = options.train_per_class;
      n_test = options.test_per_class;
    } else {
      n_train = static_cast<std::size_t>(std::lround(options.train_fraction * static_cast<double>(list.size())));
      n_train = std::clamp<std::size_t>(n_train, 1, list.size() - 1);
      n_test = list.size() - n_train;
    }
    for (std::size_t k = 0; k < n_train + n_test; ++k) {
      (k < n_train ? split.train : split.test).push_back(std::move(*list[k]));
    }
  }
  return split;
}

MeanStd mean_std(const std::vector<LabeledImage>& images) {
  if (images.empty()) throw ShapeError("mean_std of an empty image list");
  double sum = 0, sq = 0;
  std::int64_t n = 0;
  for (const auto& img : images) {
    sum += img.pixels.cast<double>().sum();
    n += img.pixels.size();
  }
  const double mean = sum / static_cast<double>(n);
  for (const auto& img : images) sq += (img.pixels.cast<double>().array() - mean).square().sum();
  return {mean, std::sqrt(sq / static_cast<double>(n))};
}

// ---------------------------------------------------------------------------
// Synthetic defects. Every phenotype writes into a signed delta canvas; the
// mask is where the delta is visible.

namespace {

using Canvas = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = px - (ax + t * dx), ey = py - (ay + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

void draw_segment(Canvas& d, double ax, double ay, double bx, double by, double half_width, double amp) {
  const int h = static_cast<int>(d.rows()), w = static_cast<int>(d.cols());
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - half_width - 2)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(ax, bx) + half_width + 2)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - half_width - 2)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(ay, by) + half_width + 2)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dist = segment_distance(x, y, ax, ay, bx, by);
      const double weight = std::clamp(half_width + 0.5 - dist, 0.0, 1.0);
      if (weight > 0 && std::abs(amp * weight) > std::abs(d(y, x))) d(y, x) = amp * weight;
    }
  }
}

void draw_ellipse(Canvas& d, double cx, double cy, double a, double b, double angle, double amp) {
  const int h = static_cast<int>(d.rows()), w = static_cast<int>(d.cols());
  const double c = std::cos(angle), s = std::sin(angle);
  const double reach = std::max(a, b) + 2;
  for (int y = std::max(0, static_cast<int>(cy - reach)); y <= std::min(h - 1, static_cast<int>(cy + reach)); ++y) {
    for (int x = std::max(0, static_cast<int>(cx - reach)); x <= std::min(w - 1, static_cast<int>(cx + reach)); ++x) {
      const double u = ((x - cx) * c + (y - cy) * s) / a;
      const double v = (-(x - cx) * s + (y - cy) * c) / b;
      const double r = std::sqrt(u * u + v * v);
      const double weight = std::clamp((1.0 - r) * std::min(a, b), 0.0, 1.0);
      if (weight > 0 && std::abs(amp * weight) > std::abs(d(y, x))) d(y, x) = amp * weight;
    }
  }
}

/// Bilinear upsampling of a random coarse grid with the given cell size.
Canvas smooth_noise(Rng& rng, int size, double cell, double amplitude) {
  const int n = static_cast<int>(std::ceil(size / cell)) + 2;
  Canvas grid(n, n);
  for (Eigen::Index k = 0; k < grid.size(); ++k) grid.data()[k] = rng.uniform(-amplitude, amplitude);
  Canvas out(size, size);
  for (int y = 0; y < size; ++y) {
    const double fy = y / cell;
    const int y0 = static_cast<int>(fy);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = x / cell;
      const int x0 = static_cast<int>(fx);
      const double wx = fx - x0;
      out(y, x) = (1 - wy) * ((1 - wx) * grid(y0, x0) + wx * grid(y0, x0 + 1)) +
                  wy * ((1 - wx) * grid(y0 + 1, x0) + wx * grid(y0 + 1, x0 + 1));
    }
  }
  return out;
}

double sign(Rng& rng) { return rng.coin() ? 1.0 : -1.0; }

void render_scratches(Canvas& d, Rng& rng, int size) {
  const int count = rng.range(1, 3);
  const double amp = sign(rng) * rng.uniform(0.25, 0.4);
  for (int i = 0; i < count; ++i) {
    const double len = rng.uniform(0.4, 0.9) * size;
    const double angle = rng.uniform(0, M_PI);
    const double cx = rng.uniform(0.2, 0.8) * size, cy = rng.uniform(0.2, 0.8) * size;
    const double dx = 0.5 * len * std::cos(angle), dy = 0.5 * len * std::sin(angle);
    const double hw = rng.uniform(0.5, 1.0) * std::max(1.0, size / 100.0);
    draw_segment(d, cx - dx, cy - dy, cx + dx, cy + dy, hw, amp);
  }
}

void render_inclusion(Canvas& d, Rng& rng, int size) {
  const int count = rng.range(1, 3);
  for (int i = 0; i < count; ++i) {
    const double a = rng.uniform(0.07, 0.15) * size;
    const double b = std::max(1.5, a / rng.uniform(2.5, 4.0));
    draw_ellipse(d, rng.uniform(0.2, 0.8) * size, rng.uniform(0.2, 0.8) * size, a, b, rng.uniform(0, M_PI),
                 -rng.uniform(0.25, 0.4));
  }
}

void render_patches(Canvas& d, Rng& rng, int size) {
  const double amp = sign(rng) * rng.uniform(0.15, 0.25);
  const double cx = rng.uniform(0.3, 0.7) * size, cy = rng.uniform(0.3, 0.7) * size;
  const int count = rng.range(2, 4);
  for (int i = 0; i < count; ++i) {
    const double r = rng.uniform(0.1, 0.2) * size;
    draw_ellipse(d, cx + rng.uniform(-0.15, 0.15) * size, cy + rng.uniform(-0.15, 0.15) * size, r,
                 r * rng.uniform(0.6, 1.0), rng.uniform(0, M_PI), amp);
  }
}

void render_pitted(Canvas& d, Rng& rng, int size) {
  const double cx = rng.uniform(0.3, 0.7) * size, cy = rng.uniform(0.3, 0.7) * size;
  const double region = rng.uniform(0.2, 0.35) * size;
  const int count = static_cast<int>(std::lround(rng.uniform(25, 45) * std::max(0.5, size / 200.0)));
  for (int i = 0; i < count; ++i) {
    const double rr = region * std::sqrt(rng.uniform());
    const double th = rng.uniform(0, 2 * M_PI);
    const double r = rng.uniform(1.0, 1.8) * std::max(1.0, size / 120.0);
    draw_ellipse(d, cx + rr * std::cos(th), cy + rr * std::sin(th), r, r, 0, -rng.uniform(0.25, 0.4));
  }
}

void render_rolled(Canvas& d, Rng& rng, int size) {
  const Canvas texture = smooth_noise(rng, size, std::max(3.0, size / 16.0), 0.3);
  const double cx = rng.uniform(0.3, 0.7) * size, cy = rng.uniform(0.3, 0.7) * size;
  const double a = rng.uniform(0.2, 0.35) * size, b = rng.uniform(0.15, 0.3) * size;
  const double angle = rng.uniform(0, M_PI);
  const double c = std::cos(angle), s = std::sin(angle);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = ((x - cx) * c + (y - cy) * s) / a;
      const double v = (-(x - cx) * s + (y - cy) * c) / b;
      if (u * u + v * v <= 1.0) d(y, x) = texture(y, x) + (texture(y, x) >= 0 ? 0.05 : -0.05);
    }
  }
}

void render_crazing(Canvas& d, Rng& rng, int size) {
  const double cx = rng.uniform(0.3, 0.7) * size, cy = rng.uniform(0.3, 0.7) * size;
  const double region = rng.uniform(0.25, 0.4) * size;
  const double base = rng.uniform(0, M_PI);
  const int count = rng.range(14, 24);
  const double amp = -rng.uniform(0.2, 0.3);
  for (int i = 0; i < count; ++i) {
    const double angle = base + (i % 2 ? M_PI / 2 : 0) + rng.uniform(-0.25, 0.25);
    const double len = rng.uniform(0.1, 0.22) * size;
    const double px = cx + rng.uniform(-region, region), py = cy + rng.uniform(-region, region);
    const double dx = 0.5 * len * std::cos(angle), dy = 0.5 * len * std::sin(angle);
    draw_segment(d, px - dx, py - dy, px + dx, py + dy, 0.5 * std::max(1.0, size / 150.0), amp);
  }
}

}  // namespace

LabeledImage synth_image(std::uint64_t seed, int label, int index, int size) {
  if (label < 0 || label >= kNumClasses) throw ShapeError("label out of range");
  if (size < 8) throw ShapeError("synthetic images must be at least 8 pixels");
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(index)));

  // Background shared by all classes: level, low-frequency shading, grain.
  const double level = rng.uniform(0.42, 0.58);
  Canvas background = smooth_noise(rng, size, std::max(4.0, size / 4.0), 0.06);
  for (Eigen::Index k = 0; k < background.size(); ++k) background.data()[k] += level + 0.03 * rng.normal();

  Canvas delta = Canvas::Zero(size, size);
  switch (label) {
    case kCrazing: render_crazing(delta, rng, size); break;
    case kInclusion: render_inclusion(delta, rng, size); break;
    case kPatches: render_patches(delta, rng, size); break;
    case kPittedSurface: render_pitted(delta, rng, size); break;
    case kRolledInScale: render_rolled(delta, rng, size); break;
    case kScratches: render_scratches(delta, rng, size); break;
    default: break;
  }

  LabeledImage img;
  img.label = label;
  img.source_id = std::string(kClassPrefixes[label]) + "_" + std::to_string(index);
  img.pixels.resize(size, size);
  Mask mask(size, size);
  for (Eigen::Index k = 0; k < background.size(); ++k) {
    const double v = std::clamp(background.data()[k] + delta.data()[k], 0.0, 1.0);
    img.pixels.data()[k] = static_cast<float>(std::round(v * 255.0) / 255.0);
    mask.data()[k] = std::abs(delta.data()[k]) > 0.03 ? 1 : 0;
  }
  img.mask = std::move(mask);
  return img;
}

DatasetSplit synth(const SynthConfig& cfg) {
  if (cfg.per_class < 2) throw ShapeError("synth needs at least 2 images per class");
  const int n_train = std::clamp(static_cast<int>(std::lround(cfg.train_fraction * cfg.per_class)), 1,
                                 cfg.per_class - 1);
  DatasetSplit split;
  for (int c = 0; c < kNumClasses; ++c) {
    for (int i = 0; i < cfg.per_class; ++i) {
      (i < n_train ? split.train : split.test).push_back(synth_image(cfg.seed, c, i, cfg.size));
    }
  }
  return split;
}

void write_dataset(const DatasetSplit& split, const std::string& directory) {
  fs::create_directories(directory);
  std::ofstream manifest(fs::path(directory) / "manifest.tsv");
  if (!manifest) throw IoError("cannot write manifest in " + directory);
  manifest << "file\tclass\tsplit\n";
  auto emit = [&](const std::vector<LabeledImage>& images, const char* name) {
    for (const auto& img : images) {
      const std::string file = img.source_id + ".pgm";
      write_pgm((fs::path(directory) / file).string(), img.pixels);
      if (img.mask) write_pgm((fs::path(directory) / (img.source_id + "_mask.pgm")).string(), *img.mask);
      manifest << file << '\t' << kClassNames[img.label] << '\t' << name << '\n';
    }
  };
  emit(split.train, "train");
  emit(split.test, "test");
  if (!manifest) throw IoError("write failed: manifest.tsv");
}

DatasetSplit read_dataset(const std::string& directory) {
  std::ifstream manifest(fs::path(directory) / "manifest.tsv");
  if (!manifest) throw IoError("missing manifest.tsv in " + directory);
  DatasetSplit split;
  std::string line;
  int line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::istringstream fields(line);
    std::string file, cls, which;
    if (!std::getline(fields, file, '\t') || !std::getline(fields, cls, '\t') || !std::getline(fields, which)) {
      throw IoError("manifest.tsv line " + std::to_string(line_no) + ": expected 3 fields");
    }
    const auto label = class_from_name(cls);
    if (!label) throw IoError("manifest.tsv line " + std::to_string(line_no) + ": unknown class " + cls);
    LabeledImage img;
    img.pixels = read_image((fs::path(directory) / file).string());
    img.label = *label;
    img.source_id = fs::path(file).stem().string();
    const fs::path mask_path = fs::path(directory) / (img.source_id + "_mask.pgm");
    if (fs::exists(mask_path)) {
      const Image m = read_image(mask_path.string());
      img.mask = (m.array() > 0.5f).cast<std::uint8_t>().matrix();
    }
    if (which == "train") {
      split.train.push_back(std::move(img));
    } else if (which == "test") {
      split.test.push_back(std::move(img));
    } else {
      throw IoError("manifest.tsv line " + std::to_string(line_no) + ": split must be train or test");
    }
  }
  return split;
}

}  // namespace tdn

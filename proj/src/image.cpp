#include "biomass/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

namespace biomass {

void ImageTensor::validate() const {
  if (height == 0 || width == 0) throw DataError("empty image");
  if (values.size() != height * width * 3) {
    throw DataError("image buffer size does not match dimensions");
  }
  for (float v : values) {
    if (!(v >= 0.f && v <= 1.f)) throw DataError("image value outside [0, 1]");
  }
}

ImageTensor constant_image(std::size_t h, std::size_t w, float r, float g, float b) {
  ImageTensor img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
  return img;
}

ImageTensor resize_area(const ImageTensor& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw DataError("resize target must be non-empty");
  ImageTensor out(out_h, out_w);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      double acc[3] = {0, 0, 0};
      double area = 0;
      for (std::size_t iy = static_cast<std::size_t>(y0);
           iy < img.height && iy < static_cast<std::size_t>(std::ceil(y1)); ++iy) {
        const double wy = std::min<double>(y1, iy + 1) - std::max<double>(y0, iy);
        if (wy <= 0) continue;
        for (std::size_t ix = static_cast<std::size_t>(x0);
             ix < img.width && ix < static_cast<std::size_t>(std::ceil(x1)); ++ix) {
          const double wx = std::min<double>(x1, ix + 1) - std::max<double>(x0, ix);
          if (wx <= 0) continue;
          const double w = wy * wx;
          for (int c = 0; c < 3; ++c) acc[c] += w * img.at(iy, ix, c);
          area += w;
        }
      }
      for (int c = 0; c < 3; ++c)
        out.at(oy, ox, c) = static_cast<float>(area > 0 ? acc[c] / area : 0.0);
    }
  }
  return out;
}

std::pair<ImageTensor, ImageTensor> split_views(const ImageTensor& img, std::size_t view_size) {
  if (img.width < 2) throw DataError("split_views needs width >= 2");
  const std::size_t lw = (img.width + 1) / 2;
  const std::size_t rw = img.width - lw;
  ImageTensor left(img.height, lw), right(img.height, rw);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < lw; ++x)
      for (int c = 0; c < 3; ++c) left.at(y, x, c) = img.at(y, x, c);
    for (std::size_t x = 0; x < rw; ++x)
      for (int c = 0; c < 3; ++c) right.at(y, x, c) = img.at(y, lw + x, c);
  }
  return {resize_area(left, view_size, view_size), resize_area(right, view_size, view_size)};
}

ImageTensor hflip(const ImageTensor& img) {
  ImageTensor out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

namespace {

// reflect-101: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
std::size_t reflect101(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

float sample_bilinear(const ImageTensor& img, double y, double x, int c) {
  const long y0 = static_cast<long>(std::floor(y));
  const long x0 = static_cast<long>(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  const float v00 = img.at(reflect101(y0, img.height), reflect101(x0, img.width), c);
  const float v01 = img.at(reflect101(y0, img.height), reflect101(x0 + 1, img.width), c);
  const float v10 = img.at(reflect101(y0 + 1, img.height), reflect101(x0, img.width), c);
  const float v11 = img.at(reflect101(y0 + 1, img.height), reflect101(x0 + 1, img.width), c);
  return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                            fy * ((1 - fx) * v10 + fx * v11));
}

}  // namespace

ImageTensor rotate_deg(const ImageTensor& img, double degrees) {
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(img.height) - 1) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1) / 2.0;
  ImageTensor out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dy = y - cy, dx = x - cx;
      // inverse rotation into source coordinates
      const double sy = cy + (cs * dy + sn * dx);
      const double sx = cx + (-sn * dy + cs * dx);
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = std::clamp(sample_bilinear(img, sy, sx, c), 0.f, 1.f);
      }
    }
  return out;
}

ImageTensor brightness_contrast(const ImageTensor& img, double brightness, double contrast) {
  double mean = 0;
  for (float v : img.values) mean += v;
  mean /= static_cast<double>(img.values.size());
  ImageTensor out(img.height, img.width);
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    double v = img.values[i] * brightness;
    v = (v - mean) * contrast + mean;
    out.values[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

void write_ppm(const std::string& path, const ImageTensor& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(y, x, c), 0.f, 1.f);
        row[x * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IoError("failed writing '" + path + "'");
}

ImageTensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string magic;
  f >> magic;
  if (magic != "P6") throw IoError("'" + path + "' is not a binary PPM");
  std::size_t w = 0, h = 0;
  int maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w == 0 || h == 0 || maxval != 255) throw IoError("bad PPM header in '" + path + "'");
  f.get();  // single whitespace after header
  ImageTensor img(h, w);
  std::vector<std::uint8_t> buf(w * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw IoError("truncated PPM '" + path + "'");
  }
  for (std::size_t i = 0; i < buf.size(); ++i) img.values[i] = buf[i] / 255.0f;
  return img;
}

}  // namespace biomass

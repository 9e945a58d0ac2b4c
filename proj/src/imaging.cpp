#include "vbsr/imaging.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace vbsr {

GrayImage make_image(int width, int height, double fill) {
  if (width < 1 || height < 1)
    throw std::invalid_argument("make_image: dimensions must be positive");
  GrayImage img;
  img.width = width;
  img.height = height;
  img.data = Eigen::VectorXd::Constant(width * height, fill);
  return img;
}

int luminance_to_byte(double lum) {
  const double raw = (lum + 1.0) * 0.5 * 255.0;
  const double clamped = std::clamp(raw, 0.0, 255.0);
  return static_cast<int>(std::lround(clamped));  // lround = half away from zero
}

namespace {

// Cursor over a fully slurped PGM file; every failure names its byte offset.
struct PgmCursor {
  const std::string& path;
  const std::string& buf;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& what, size_t at) const {
    throw std::runtime_error(path + ": " + what + " at byte " +
                             std::to_string(at));
  }

  static bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' ||
           c == '\v';
  }

  // PGM headers allow whitespace and '#' comments running to end of line.
  void skip_separators() {
    while (pos < buf.size()) {
      if (is_space(buf[pos])) {
        ++pos;
      } else if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }

  long parse_uint(const char* what, long max_value) {
    skip_separators();
    const size_t start = pos;
    if (pos >= buf.size()) fail(std::string("missing ") + what, pos);
    if (!std::isdigit(static_cast<unsigned char>(buf[pos])))
      fail(std::string("expected ") + what, pos);
    long value = 0;
    while (pos < buf.size() &&
           std::isdigit(static_cast<unsigned char>(buf[pos]))) {
      value = value * 10 + (buf[pos] - '0');
      if (value > max_value)
        fail(std::string(what) + " out of range", start);
      ++pos;
    }
    return value;
  }
};

}  // namespace

GrayImage load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  PgmCursor cur{path, buf};
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '2' && buf[1] != '5'))
    cur.fail("not a P2/P5 PGM header", 0);
  const bool binary = buf[1] == '5';
  cur.pos = 2;

  const long width = cur.parse_uint("width", 1 << 20);
  const long height = cur.parse_uint("height", 1 << 20);
  if (width < 1 || height < 1) cur.fail("degenerate dimensions", cur.pos);
  const size_t maxval_at = (cur.skip_separators(), cur.pos);
  const long maxval = cur.parse_uint("maxval", 1 << 20);
  if (maxval != 255)
    cur.fail("unsupported maxval " + std::to_string(maxval) + " (want 255)",
             maxval_at);

  GrayImage img = make_image(static_cast<int>(width), static_cast<int>(height));
  const long n = width * height;

  if (binary) {
    // Exactly one whitespace byte separates the header from the raster.
    if (cur.pos >= buf.size() || !PgmCursor::is_space(buf[cur.pos]))
      cur.fail("missing raster separator", cur.pos);
    ++cur.pos;
    if (buf.size() - cur.pos < static_cast<size_t>(n))
      cur.fail("truncated raster (" +
                   std::to_string(buf.size() - cur.pos) + " of " +
                   std::to_string(n) + " bytes)",
               buf.size());
    for (long i = 0; i < n; ++i)
      img.data[i] =
          byte_to_luminance(static_cast<unsigned char>(buf[cur.pos + i]));
  } else {
    for (long i = 0; i < n; ++i) {
      const long v = cur.parse_uint("pixel value", 255);
      img.data[i] = byte_to_luminance(static_cast<int>(v));
    }
  }
  return img;
}

void save_pgm(const GrayImage& img, const std::string& path, PgmFormat format) {
  if (img.width < 1 || img.height < 1 || img.data.size() != img.pixels())
    throw std::invalid_argument("save_pgm: malformed image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");

  if (format == PgmFormat::binary) {
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::string raster(img.pixels(), '\0');
    for (int i = 0; i < img.pixels(); ++i)
      raster[i] = static_cast<char>(luminance_to_byte(img.data[i]));
    out.write(raster.data(), raster.size());
  } else {
    out << "P2\n" << img.width << " " << img.height << "\n255\n";
    for (int r = 0; r < img.height; ++r) {
      for (int c = 0; c < img.width; ++c) {
        if (c) out << ' ';
        out << luminance_to_byte(img.at(r, c));
      }
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

double bilinear_sample(const GrayImage& img, double hpos, double vpos) {
  // Continuous column/row coordinates; pixel (r, c) is centered at
  // (c - (width-1)/2, r - (height-1)/2).
  const double col = hpos + (img.width - 1) * 0.5;
  const double row = vpos + (img.height - 1) * 0.5;

  int c0 = 0, r0 = 0;
  double tc = 0, tr = 0;
  if (img.width > 1) {
    c0 = std::clamp(static_cast<int>(std::floor(col)), 0, img.width - 2);
    tc = col - c0;  // may leave [0,1] at the margins: boundary-gradient extrapolation
  }
  if (img.height > 1) {
    r0 = std::clamp(static_cast<int>(std::floor(row)), 0, img.height - 2);
    tr = row - r0;
  }
  const int c1 = std::min(c0 + 1, img.width - 1);
  const int r1 = std::min(r0 + 1, img.height - 1);

  const double top = (1 - tc) * img.at(r0, c0) + tc * img.at(r0, c1);
  const double bot = (1 - tc) * img.at(r1, c0) + tc * img.at(r1, c1);
  return (1 - tr) * top + tr * bot;
}

GrayImage bilinear_upsample(const GrayImage& img, double factor) {
  if (!(factor >= 1.0))
    throw std::invalid_argument("bilinear_upsample: factor must be >= 1");
  const double wf = factor * img.width;
  const double hf = factor * img.height;
  const int out_w = static_cast<int>(std::lround(wf));
  const int out_h = static_cast<int>(std::lround(hf));
  if (std::abs(wf - out_w) > 1e-9 || std::abs(hf - out_h) > 1e-9)
    throw std::invalid_argument(
        "bilinear_upsample: factor times dimensions must be integral");

  // Output pixels are 1/factor input units wide; both grids share the center.
  GrayImage out = make_image(out_w, out_h);
  for (int r = 0; r < out_h; ++r) {
    const double vpos = (r - (out_h - 1) * 0.5) / factor;
    for (int c = 0; c < out_w; ++c) {
      const double hpos = (c - (out_w - 1) * 0.5) / factor;
      out.at(r, c) = bilinear_sample(img, hpos, vpos);
    }
  }
  return out;
}

double psnr(const GrayImage& estimate, const GrayImage& truth) {
  if (estimate.width != truth.width || estimate.height != truth.height)
    throw std::invalid_argument("psnr: dimension mismatch");
  const double mse =
      (estimate.data - truth.data).squaredNorm() / truth.pixels();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(4.0 / mse);
}

}  // namespace vbsr

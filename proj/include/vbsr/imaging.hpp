#pragma once

// Grayscale image container, PGM file I/O, the bilinear upsampling baseline,
// and the PSNR/ISNR quality metrics.

#include <Eigen/Core>
#include <string>

namespace vbsr {

// Luminance is real-valued with -1 = black, +1 = white; pixels are stored
// lexicographically (row-major). Pixel centers sit on a unit lattice at
// half-integer offsets from the image center, which is the coordinate origin.
struct GrayImage {
  int width = 0;
  int height = 0;
  Eigen::VectorXd data;  // width * height entries, row-major

  double& at(int row, int col) { return data[row * width + col]; }
  double at(int row, int col) const { return data[row * width + col]; }
  int pixels() const { return width * height; }
};

GrayImage make_image(int width, int height, double fill = 0.0);

// 8-bit <-> luminance maps: v in [0,255] <-> 2 v/255 - 1. Saving clamps to
// [0,255] and rounds half away from zero.
inline double byte_to_luminance(int v) { return 2.0 * v / 255.0 - 1.0; }
int luminance_to_byte(double lum);

enum class PgmFormat { binary, ascii };  // P5 / P2

// Parse errors name the byte offset of the offending input.
GrayImage load_pgm(const std::string& path);
void save_pgm(const GrayImage& img, const std::string& path,
              PgmFormat format = PgmFormat::binary);

// Interpolated luminance at a point given in the centered pixel-center frame
// (hpos along columns, vpos along rows). The margin outside the outermost
// pixel centers extrapolates the boundary gradient, so linear luminance
// fields are reproduced exactly everywhere.
double bilinear_sample(const GrayImage& img, double hpos, double vpos);

// Upsample by a real factor > 1 with integral output dimensions.
GrayImage bilinear_upsample(const GrayImage& img, double factor);

// 10 log10( peak^2 / mse ) with peak = 2 (the luminance range). Identical
// images give +infinity.
double psnr(const GrayImage& estimate, const GrayImage& truth);

inline double isnr(double proposed_psnr, double baseline_psnr) {
  return proposed_psnr - baseline_psnr;
}

}  // namespace vbsr

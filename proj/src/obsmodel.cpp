#include "vbsr/obsmodel.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "vbsr/mathcore.hpp"
#include "vbsr/rng.hpp"

namespace vbsr {

GridSpec make_grid(int hr_width, int hr_height, double alpha) {
  if (hr_width < 1 || hr_height < 1)
    throw std::invalid_argument("make_grid: dimensions must be positive");
  if (!(alpha >= 1.0))
    throw std::invalid_argument("make_grid: alpha must be >= 1");
  GridSpec g;
  g.hr_width = hr_width;
  g.hr_height = hr_height;
  g.alpha = alpha;
  const double lw = hr_width / alpha;
  const double lh = hr_height / alpha;
  g.lr_width = static_cast<int>(std::lround(lw));
  g.lr_height = static_cast<int>(std::lround(lh));
  if (std::abs(lw - g.lr_width) > 1e-9 || std::abs(lh - g.lr_height) > 1e-9 ||
      g.lr_width < 1 || g.lr_height < 1)
    throw std::invalid_argument("make_grid: dimensions not divisible by alpha");
  return g;
}

Eigen::Vector2d pixel_center(int index, int width, int height) {
  const int row = index / width;
  const int col = index % width;
  return {col - (width - 1) * 0.5, row - (height - 1) * 0.5};
}

Eigen::Vector2d displacement(double theta, const Eigen::Vector2d& o,
                             const Eigen::Vector2d& zeta,
                             const Eigen::Vector2d& xi, double alpha) {
  const Eigen::Vector2d u = alpha * zeta - o;
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * u[0] + s * u[1] - xi[0], -s * u[0] + c * u[1] - xi[1]};
}

namespace {

// Argument reduction for the periodic theta factors; keeps every row's
// denominator evaluated at one canonical argument, so it is exactly
// i-independent in floating point as well as in exact arithmetic.
double reduce_period(double u) { return u - std::nearbyint(u); }

void build_w_core(const RegistrationParams& phi, const GridSpec& grid,
                  bool with_derivatives, WWithDerivatives& out) {
  if (!(phi.gamma > 0))
    throw std::invalid_argument("build_w: gamma must be positive");
  const int ny = grid.n_lr(), nx = grid.n_hr();
  const int hw = grid.hr_width, hh = grid.hr_height;
  const double gamma = phi.gamma;
  const double q = std::exp(-2.0 * std::numbers::pi * std::numbers::pi / gamma);
  const double dq_dgamma = q * 2.0 * std::numbers::pi * std::numbers::pi /
                           (gamma * gamma);
  const double norm1d = std::sqrt(gamma / (2.0 * std::numbers::pi));
  const double ct = std::cos(phi.theta), st = std::sin(phi.theta);

  out.w.setZero(ny, nx);
  if (with_derivatives)
    for (auto& m : out.dw) m.setZero(ny, nx);

  Eigen::VectorXd gh(hw), gv(hh), chih(hw), chiv(hh);
  Eigen::VectorXd ah(hw), av(hh), ghg(hw), gvg(hh);

  for (int j = 0; j < ny; ++j) {
    const Eigen::Vector2d zeta = pixel_center(j, grid.lr_width, grid.lr_height);
    const Eigen::Vector2d u = grid.alpha * zeta - Eigen::Vector2d(phi.o_h, phi.o_v);
    const double rh = ct * u[0] + st * u[1];  // PSF center, HR coordinates
    const double rv = -st * u[0] + ct * u[1];

    // The displacement components separate: chi_h depends only on the HR
    // column, chi_v only on the HR row, so the row of W is an outer product
    // of two 1-D theta-normalized Gaussian profiles.
    for (int c = 0; c < hw; ++c) chih[c] = rh - (c - (hw - 1) * 0.5);
    for (int r = 0; r < hh; ++r) chiv[r] = rv - (r - (hh - 1) * 0.5);

    const double th_h = theta3(reduce_period(chih[0]), q);
    const double th_v = theta3(reduce_period(chiv[0]), q);
    for (int c = 0; c < hw; ++c)
      gh[c] = norm1d * std::exp(-0.5 * gamma * chih[c] * chih[c]) / th_h;
    for (int r = 0; r < hh; ++r)
      gv[r] = norm1d * std::exp(-0.5 * gamma * chiv[r] * chiv[r]) / th_v;

    double* wrow = out.w.data() + j;  // column-major: stride ny between columns
    for (int r = 0; r < hh; ++r)
      for (int c = 0; c < hw; ++c) wrow[static_cast<long>(r * hw + c) * ny] = gv[r] * gh[c];

    if (!with_derivatives) continue;

    // d ln W / d p = sum over axes of (-gamma chi - theta3'/theta3) dchi/dp;
    // the theta terms are row constants by periodicity.
    const double lh_du = theta3_du(reduce_period(chih[0]), q) / th_h;
    const double lv_du = theta3_du(reduce_period(chiv[0]), q) / th_v;
    for (int c = 0; c < hw; ++c) ah[c] = -gamma * chih[c] - lh_du;
    for (int r = 0; r < hh; ++r) av[r] = -gamma * chiv[r] - lv_du;

    // Chain rule through the rotation: dchi_h/dtheta = rv, dchi_v/dtheta = -rh.
    const double dchi_dp[3][2] = {
        {rv, -rh},    // theta
        {-ct, st},    // o_h
        {-st, -ct},   // o_v
    };

    // Gamma differentiates the Gaussian precision and the nome.
    const double lh_dq = theta3_dq(reduce_period(chih[0]), q) / th_h;
    const double lv_dq = theta3_dq(reduce_period(chiv[0]), q) / th_v;
    for (int c = 0; c < hw; ++c)
      ghg[c] = 0.5 / gamma - 0.5 * chih[c] * chih[c] - dq_dgamma * lh_dq;
    for (int r = 0; r < hh; ++r)
      gvg[r] = 0.5 / gamma - 0.5 * chiv[r] * chiv[r] - dq_dgamma * lv_dq;

    for (int p = 0; p < 4; ++p) {
      double* drow = out.dw[p].data() + j;
      if (p < 3) {
        const double dh = dchi_dp[p][0], dv = dchi_dp[p][1];
        for (int r = 0; r < hh; ++r) {
          const double fv = av[r] * dv;
          for (int c = 0; c < hw; ++c)
            drow[static_cast<long>(r * hw + c) * ny] =
                gv[r] * gh[c] * (ah[c] * dh + fv);
        }
      } else {
        for (int r = 0; r < hh; ++r)
          for (int c = 0; c < hw; ++c)
            drow[static_cast<long>(r * hw + c) * ny] =
                gv[r] * gh[c] * (ghg[c] + gvg[r]);
      }
    }
  }
}

}  // namespace

TransformMatrix build_w(const RegistrationParams& phi, const GridSpec& grid) {
  WWithDerivatives out;
  build_w_core(phi, grid, false, out);
  return std::move(out.w);
}

std::array<Eigen::MatrixXd, 4> build_w_derivatives(const RegistrationParams& phi,
                                                   const GridSpec& grid) {
  WWithDerivatives out;
  build_w_core(phi, grid, true, out);
  return std::move(out.dw);
}

WWithDerivatives build_w_with_derivatives(const RegistrationParams& phi,
                                          const GridSpec& grid) {
  WWithDerivatives out;
  build_w_core(phi, grid, true, out);
  return out;
}

double snr_to_beta(const std::vector<GrayImage>& clean_stack, double snr_db) {
  if (clean_stack.empty())
    throw std::invalid_argument("snr_to_beta: empty stack");
  double sum = 0, lo = clean_stack[0].data(0), hi = lo;
  long n = 0;
  for (const auto& img : clean_stack) {
    sum += img.data.sum();
    lo = std::min(lo, img.data.minCoeff());
    hi = std::max(hi, img.data.maxCoeff());
    n += img.pixels();
  }
  // A constant stack has zero variance exactly; the mean-centered pass below
  // would report only its own rounding crumbs, so detect flatness directly.
  if (hi == lo)
    throw std::invalid_argument("snr_to_beta: zero-variance stack");
  const double mean = sum / n;
  double ss = 0;
  for (const auto& img : clean_stack)
    ss += (img.data.array() - mean).square().sum();
  const double var = ss / n;
  if (!(var > 0))
    throw std::invalid_argument("snr_to_beta: zero-variance stack");
  return std::pow(10.0, snr_db / 10.0) / var;
}

RegistrationPrior default_registration_prior(double alpha) {
  RegistrationPrior p;
  p.mu = {0, 0, 0, 12.0 / (alpha * alpha)};
  p.variance = {1e-3, 1, 1, 1e-3};
  return p;
}

SynthesisResult synthesize_observations(const GrayImage& x, double alpha,
                                        int frames, double snr_db,
                                        std::uint64_t seed,
                                        const RegistrationPrior& prior) {
  if (frames < 1)
    throw std::invalid_argument("synthesize_observations: need >= 1 frame");
  if (!std::isfinite(snr_db))
    throw std::invalid_argument("synthesize_observations: snr must be finite");
  const GridSpec grid = make_grid(x.width, x.height, alpha);

  NormalSampler rng(seed);
  SynthesisResult out;
  std::vector<TransformMatrix> ws;
  for (int l = 0; l < frames; ++l) {
    RegistrationParams phi;
    phi.theta = prior.mu[0] + std::sqrt(prior.variance[0]) * rng.normal();
    phi.o_h = prior.mu[1] + std::sqrt(prior.variance[1]) * rng.normal();
    phi.o_v = prior.mu[2] + std::sqrt(prior.variance[2]) * rng.normal();
    phi.gamma = prior.mu[3] + std::sqrt(prior.variance[3]) * rng.normal();
    phi.gamma = std::max(phi.gamma, 1e-3);  // the PSF must stay valid
    out.params.push_back(phi);
    ws.push_back(build_w(phi, grid));

    GrayImage clean = make_image(grid.lr_width, grid.lr_height);
    clean.data = ws.back() * x.data;
    out.frames.push_back(std::move(clean));
  }

  out.beta = snr_to_beta(out.frames, snr_db);
  const double sigma = 1.0 / std::sqrt(out.beta);
  for (auto& frame : out.frames)
    for (int i = 0; i < frame.pixels(); ++i) frame.data[i] += sigma * rng.normal();
  return out;
}

SynthesisResult synthesize_observations(const GrayImage& x, double alpha,
                                        int frames, double snr_db,
                                        std::uint64_t seed) {
  return synthesize_observations(x, alpha, frames, snr_db, seed,
                                 default_registration_prior(alpha));
}

}  // namespace vbsr

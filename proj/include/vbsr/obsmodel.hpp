#pragma once

// The observation model: each LR frame is a rotated, translated, Gaussian-
// blurred, lattice-sampled view of the HR image plus white noise. This module
// builds the dense transform matrix W(phi) whose rows are theta-normalized
// Gaussian PSFs, its analytic derivatives in the four registration
// parameters, and the synthetic degradation pipeline used by the experiments.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <vector>

#include "vbsr/imaging.hpp"

namespace vbsr {

// phi packing order: [theta, o_h, o_v, gamma].
struct RegistrationParams {
  double theta = 0;  // planar rotation, radians
  double o_h = 0;    // translation, HR-pixel units
  double o_v = 0;
  double gamma = 1;  // PSF precision, HR-pixel^-2; must stay positive

  Eigen::Vector4d packed() const { return {theta, o_h, o_v, gamma}; }
  static RegistrationParams from_packed(const Eigen::Vector4d& p) {
    return {p[0], p[1], p[2], p[3]};
  }
};

struct GridSpec {
  int hr_width = 0, hr_height = 0;
  int lr_width = 0, lr_height = 0;
  double alpha = 1;  // enhancement factor, hr = alpha * lr per axis

  int n_hr() const { return hr_width * hr_height; }
  int n_lr() const { return lr_width * lr_height; }
};

// Derives the LR dimensions; hr/alpha must be integral, alpha >= 1.
GridSpec make_grid(int hr_width, int hr_height, double alpha);

// Centered pixel-center coordinate (horizontal, vertical) of a row-major
// pixel index in a width x height lattice.
Eigen::Vector2d pixel_center(int index, int width, int height);

// chi = R(theta) (alpha zeta - o) - xi with R = [cos sin; -sin cos].
Eigen::Vector2d displacement(double theta, const Eigen::Vector2d& o,
                             const Eigen::Vector2d& zeta,
                             const Eigen::Vector2d& xi, double alpha);

// Dense N_lr x N_hr matrix; entry (j, i) is the product of two 1-D
// theta-normalized Gaussians of the displacement components. Entries are
// nonnegative; a row sums to the fraction of its PSF lattice mass that falls
// inside the HR image (exactly 1 when the support is fully interior).
using TransformMatrix = Eigen::MatrixXd;

TransformMatrix build_w(const RegistrationParams& phi, const GridSpec& grid);

// d W / d phi_k in packing order, analytic (chain rule through the
// displacement for theta/o and through both the Gaussian precision and the
// nome for gamma).
std::array<Eigen::MatrixXd, 4> build_w_derivatives(const RegistrationParams& phi,
                                                   const GridSpec& grid);

struct WWithDerivatives {
  TransformMatrix w;
  std::array<Eigen::MatrixXd, 4> dw;
};

// One pass computing W and all four derivatives from shared row factors.
WWithDerivatives build_w_with_derivatives(const RegistrationParams& phi,
                                          const GridSpec& grid);

// beta = 10^(snr/10) / Var(pooled noiseless LR pixels), population variance.
double snr_to_beta(const std::vector<GrayImage>& clean_stack, double snr_db);

// Gaussian prior over phi used both by the simulator and as the VB prior.
struct RegistrationPrior {
  Eigen::Vector4d mu{0, 0, 0, 0.75};
  Eigen::Vector4d variance{1e-3, 1, 1, 1e-3};
};

// mu = [0, 0, 0, 12/alpha^2], variances [1e-3, 1, 1, 1e-3].
RegistrationPrior default_registration_prior(double alpha);

struct SynthesisResult {
  std::vector<GrayImage> frames;             // noisy LR observations
  std::vector<RegistrationParams> params;    // ground-truth draws
  double beta = 0;                           // noise precision actually used
};

// Draws phi_l from the prior (gamma clamped to >= 1e-3), renders the clean
// frames, fixes beta from the requested SNR, then adds white noise.
// Deterministic under seed: per frame 4 prior normals (theta, o_h, o_v,
// gamma), then after all frames the noise normals in frame-major pixel order.
SynthesisResult synthesize_observations(const GrayImage& x, double alpha,
                                        int frames, double snr_db,
                                        std::uint64_t seed,
                                        const RegistrationPrior& prior);

SynthesisResult synthesize_observations(const GrayImage& x, double alpha,
                                        int frames, double snr_db,
                                        std::uint64_t seed);

}  // namespace vbsr

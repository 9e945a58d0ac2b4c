#pragma once

// The edge-controlled Gaussian MRF prior on the HR image: line-process
// bookkeeping over the 4-neighbor lattice, the precision matrix
// A(eta, rho, kappa), log prior density, and exact sampling.

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <cstdint>
#include <utility>
#include <vector>

#include "vbsr/imaging.hpp"

namespace vbsr {

// Edges are ordered deterministically: all horizontal pairs (i, i+1)
// row-major, then all vertical pairs (i, i+width) row-major; i < j in every
// pair. Edge count is 2 w h - w - h.
struct LineProcessLayout {
  int hr_width = 0;
  int hr_height = 0;
  std::vector<std::pair<int, int>> edges;

  int n_pixels() const { return hr_width * hr_height; }
  int n_edges() const { return static_cast<int>(edges.size()); }
  int n_horizontal() const { return (hr_width - 1) * hr_height; }
};

LineProcessLayout build_layout(int hr_width, int hr_height);

// A = rho * sum_e eta_e M_e + kappa I, where M_e for edge (i,j) adds +1 at
// (i,i),(j,j) and -1 at (i,j),(j,i). Fractional eta in [0,1] is accepted
// (the VB updates substitute Bernoulli means); kappa = 0 is permitted since
// some update traces evaluate A(eta, 1, 0).
using PrecisionMatrix = Eigen::SparseMatrix<double>;

PrecisionMatrix build_a(const LineProcessLayout& layout,
                        const Eigen::VectorXd& eta, double rho, double kappa);

// tr(C M_e) = C_ii + C_jj - 2 C_ij for symmetric C.
double edge_trace(const Eigen::MatrixXd& c, const LineProcessLayout& layout,
                  int edge);

// ln p(x, eta | lambda, rho, kappa) for binary eta:
//   -lambda sum(1-eta) - rho/2 sum eta (x_i - x_j)^2 - kappa/2 |x|^2
//   + 1/2 ln|A| - N_x/2 ln(2 pi) + N_eta ln sigma(lambda).
double log_joint_prior(const Eigen::VectorXd& x, const Eigen::VectorXd& eta,
                       double lambda, double rho, double kappa,
                       const LineProcessLayout& layout);

struct PriorSample {
  Eigen::VectorXd x;
  Eigen::VectorXd eta;  // binary
};

// eta_e ~ Bernoulli(sigma(lambda)) independently, then x ~ N(0, A^-1) via a
// sparse SPD factorization. Deterministic under seed.
PriorSample sample_prior(double lambda, double rho, double kappa,
                         const LineProcessLayout& layout, std::uint64_t seed);

// Edge means rendered for inspection: horizontal field is (w-1) x h, vertical
// is w x (h-1); mean 0 maps to black, 1 to white.
struct EdgeMaps {
  GrayImage horizontal;
  GrayImage vertical;
};

EdgeMaps edge_means_to_images(const LineProcessLayout& layout,
                              const Eigen::VectorXd& mu_eta);

}  // namespace vbsr

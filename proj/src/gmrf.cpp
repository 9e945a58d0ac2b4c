#include "vbsr/gmrf.hpp"

#include <Eigen/SparseCholesky>

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "vbsr/mathcore.hpp"
#include "vbsr/rng.hpp"

namespace vbsr {

LineProcessLayout build_layout(int hr_width, int hr_height) {
  if (hr_width < 1 || hr_height < 1)
    throw std::invalid_argument("build_layout: dimensions must be positive");
  LineProcessLayout layout;
  layout.hr_width = hr_width;
  layout.hr_height = hr_height;
  for (int r = 0; r < hr_height; ++r)
    for (int c = 0; c + 1 < hr_width; ++c) {
      const int i = r * hr_width + c;
      layout.edges.emplace_back(i, i + 1);
    }
  for (int r = 0; r + 1 < hr_height; ++r)
    for (int c = 0; c < hr_width; ++c) {
      const int i = r * hr_width + c;
      layout.edges.emplace_back(i, i + hr_width);
    }
  if (layout.edges.empty())
    throw std::invalid_argument("build_layout: lattice has no edges");
  return layout;
}

PrecisionMatrix build_a(const LineProcessLayout& layout,
                        const Eigen::VectorXd& eta, double rho, double kappa) {
  if (eta.size() != layout.n_edges())
    throw std::invalid_argument("build_a: eta length mismatch");
  if (rho < 0) throw std::invalid_argument("build_a: negative rho");
  if (kappa < 0) throw std::invalid_argument("build_a: negative kappa");

  const int n = layout.n_pixels();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(n) + 4 * layout.edges.size());
  for (int i = 0; i < n; ++i) trips.emplace_back(i, i, kappa);
  for (int e = 0; e < layout.n_edges(); ++e) {
    const auto [i, j] = layout.edges[e];
    const double w = rho * eta[e];
    trips.emplace_back(i, i, w);
    trips.emplace_back(j, j, w);
    trips.emplace_back(i, j, -w);
    trips.emplace_back(j, i, -w);
  }
  PrecisionMatrix a(n, n);
  a.setFromTriplets(trips.begin(), trips.end());
  return a;
}

double edge_trace(const Eigen::MatrixXd& c, const LineProcessLayout& layout,
                  int edge) {
  if (edge < 0 || edge >= layout.n_edges())
    throw std::out_of_range("edge_trace: edge index out of range");
  const auto [i, j] = layout.edges[edge];
  return c(i, i) + c(j, j) - 2.0 * c(i, j);
}

double log_joint_prior(const Eigen::VectorXd& x, const Eigen::VectorXd& eta,
                       double lambda, double rho, double kappa,
                       const LineProcessLayout& layout) {
  if (!(lambda > 0) || !(rho > 0) || !(kappa > 0))
    throw std::invalid_argument("log_joint_prior: hyperparameters must be positive");
  if (x.size() != layout.n_pixels() || eta.size() != layout.n_edges())
    throw std::invalid_argument("log_joint_prior: size mismatch");

  double pair_term = 0, off = 0;
  for (int e = 0; e < layout.n_edges(); ++e) {
    const auto [i, j] = layout.edges[e];
    const double d = x[i] - x[j];
    pair_term += eta[e] * d * d;
    off += 1.0 - eta[e];
  }

  const PrecisionMatrix a = build_a(layout, eta, rho, kappa);
  Eigen::SimplicialLDLT<PrecisionMatrix> ldlt(a);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("log_joint_prior: precision matrix not SPD");
  const double logdet = ldlt.vectorD().array().log().sum();

  return -lambda * off - 0.5 * rho * pair_term -
         0.5 * kappa * x.squaredNorm() + 0.5 * logdet -
         0.5 * layout.n_pixels() * std::log(2.0 * std::numbers::pi) +
         layout.n_edges() * std::log(logistic(lambda));
}

PriorSample sample_prior(double lambda, double rho, double kappa,
                         const LineProcessLayout& layout, std::uint64_t seed) {
  if (!(rho > 0) || !(kappa >= 0))
    throw std::invalid_argument("sample_prior: invalid hyperparameters");

  NormalSampler rng(seed);
  PriorSample s;
  const double p_on = logistic(lambda);
  s.eta.resize(layout.n_edges());
  for (int e = 0; e < layout.n_edges(); ++e)
    s.eta[e] = rng.uniform() < p_on ? 1.0 : 0.0;

  const PrecisionMatrix a = build_a(layout, s.eta, rho, kappa);
  Eigen::SimplicialLLT<PrecisionMatrix> llt(a);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(
        "sample_prior: precision matrix factorization failed (kappa = 0?)");

  Eigen::VectorXd z(layout.n_pixels());
  for (int i = 0; i < z.size(); ++i) z[i] = rng.normal();
  // With P A P^T = L L^T, x = P^T L^-T z has covariance A^-1.
  s.x = llt.permutationPinv() * llt.matrixU().solve(z);
  return s;
}

EdgeMaps edge_means_to_images(const LineProcessLayout& layout,
                              const Eigen::VectorXd& mu_eta) {
  if (mu_eta.size() != layout.n_edges())
    throw std::invalid_argument("edge_means_to_images: length mismatch");
  const int w = layout.hr_width, h = layout.hr_height;
  EdgeMaps maps;
  maps.horizontal = make_image(std::max(w - 1, 1), h, -1.0);
  maps.vertical = make_image(w, std::max(h - 1, 1), -1.0);
  int e = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c + 1 < w; ++c) maps.horizontal.at(r, c) = 2.0 * mu_eta[e++] - 1.0;
  for (int r = 0; r + 1 < h; ++r)
    for (int c = 0; c < w; ++c) maps.vertical.at(r, c) = 2.0 * mu_eta[e++] - 1.0;
  return maps;
}

}  // namespace vbsr

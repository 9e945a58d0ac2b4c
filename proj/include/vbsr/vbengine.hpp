#pragma once

// The variational-Bayes fixed-point loop. A factorized trial distribution
// over (x, eta, lambda, rho, kappa, beta, Phi) is refined by cyclic
// closed-form updates; the posterior-mean image is mu_x at convergence.
//
// Update order within one sweep: eta, then x, then the four gamma
// hyperparameters, then the per-frame registration posteriors. The x and
// hyperparameter blocks consume the freshly advanced eta; the registration
// block consumes the freshly advanced (x, eta) but the *previous* beta mean,
// matching the coordinate schedule the update equations were derived under.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vbsr/gmrf.hpp"
#include "vbsr/imaging.hpp"
#include "vbsr/mathcore.hpp"
#include "vbsr/obsmodel.hpp"

namespace vbsr {

struct PriorConstants {
  GammaParams lambda0{1e-2, 1e-2};
  GammaParams rho0{1e-2, 1e-2};
  GammaParams kappa0{1e-2, 1e-2};
  GammaParams beta0{1e-2, 1e-2};
  RegistrationPrior phi0;  // shared by all frames

  static PriorConstants for_alpha(double alpha) {
    PriorConstants p;
    p.phi0 = default_registration_prior(alpha);
    return p;
  }
};

struct TrialState {
  Eigen::VectorXd mu_eta;               // N_eta, entries in [0,1]
  Eigen::VectorXd mu_x;                 // N_x
  Eigen::MatrixXd sigma_x;              // N_x x N_x, PSD (zero only at t=0)
  GammaParams lambda, rho, kappa, beta;
  std::vector<Eigen::Vector4d> mu_phi;     // per frame
  std::vector<Eigen::Matrix4d> sigma_phi;  // per frame, SPD
  int iteration = 0;
};

struct SrProblem {
  std::vector<Eigen::VectorXd> y;  // one LR frame per entry, length N_lr
  GridSpec grid;
  LineProcessLayout layout;
  PriorConstants priors;
};

SrProblem make_problem(const std::vector<GrayImage>& frames, const GridSpec& grid);
SrProblem make_problem(const std::vector<GrayImage>& frames, const GridSpec& grid,
                       const PriorConstants& priors);

// W and its four parameter derivatives per frame, all evaluated at the
// current registration means; rebuilt once per sweep after the phi update.
using FrameOperators = std::vector<WWithDerivatives>;

FrameOperators build_frame_operators(const GridSpec& grid,
                                     const std::vector<Eigen::Vector4d>& mu_phi);

// mu_eta = 0, mu_x = 0, sigma_x = 0, hyperparameter and registration trial
// parameters copied from the priors.
TrialState init_state(const PriorConstants& priors,
                      const LineProcessLayout& layout, int frames);

// mu_eta^{t+1}[e] = sigma( mu_lambda + mu_rho/2 * tr[(A^-1 - C_x) M_e] ).
Eigen::VectorXd update_eta(const SrProblem& problem, const TrialState& state);

struct XUpdate {
  Eigen::VectorXd mu_x;
  Eigen::MatrixXd sigma_x;
};

// Requires state.mu_eta already advanced; hyperparameters and phi still at t.
XUpdate update_x(const SrProblem& problem, const FrameOperators& frames,
                 const TrialState& state);

// Per-frame data moments shared by the hyperparameter and phi updates.
// gram(m, m') = tr(C_x B_m^T B_m') over the operator stack B = [W, W'_1..4];
// y_b_mu[m] = y^T B_m mu_x; y_sq = y^T y.
struct FrameMoments {
  Eigen::Matrix<double, 5, 5> gram;
  Eigen::Matrix<double, 5, 1> y_b_mu;
  double y_sq = 0;
};

std::vector<FrameMoments> compute_frame_moments(const SrProblem& problem,
                                                const FrameOperators& frames,
                                                const TrialState& state);

struct HyperUpdate {
  GammaParams lambda, rho, kappa, beta;
};

// Requires eta and x advanced to t+1 in state while the gamma-parameter
// fields still hold step t (their means enter the a-updates).
HyperUpdate update_hyper(const SrProblem& problem, const FrameOperators& frames,
                         const TrialState& state);
HyperUpdate update_hyper(const SrProblem& problem, const FrameOperators& frames,
                         const TrialState& state,
                         const std::vector<FrameMoments>& moments);

struct PhiUpdate {
  std::vector<Eigen::Vector4d> mu_phi;
  std::vector<Eigen::Matrix4d> sigma_phi;
};

// mu_beta_t is the beta mean from *before* this sweep's hyperparameter
// update; W/W' in frames are still the step-t operators.
PhiUpdate update_phi(const SrProblem& problem, const FrameOperators& frames,
                     const TrialState& state, double mu_beta_t);
PhiUpdate update_phi(const SrProblem& problem, const FrameOperators& frames,
                     const TrialState& state, double mu_beta_t,
                     const std::vector<FrameMoments>& moments);

struct ConvergenceThresholds {
  double x_tol = 1e-4;    // on (1/N_x) |delta mu_x|^2
  double phi_tol = 1e-4;  // on (1/L) sum_l (delta mu_phi_k)^2 / var0_k, each k
};

struct ConvergenceMetrics {
  double x_change = 0;
  Eigen::Vector4d phi_change = Eigen::Vector4d::Zero();
  bool converged = false;
};

ConvergenceMetrics check_convergence(const TrialState& next,
                                     const Eigen::VectorXd& prev_mu_x,
                                     const std::vector<Eigen::Vector4d>& prev_mu_phi,
                                     const PriorConstants& priors,
                                     const ConvergenceThresholds& thresholds);

struct SweepRecord {
  int iteration = 0;
  ConvergenceMetrics metrics;
  double mu_lambda = 0, mu_rho = 0, mu_kappa = 0, mu_beta = 0;
};

struct RunOptions {
  ConvergenceThresholds thresholds;
  int max_iterations = 100;
  bool update_hyperparameters = true;  // freeze for oracle-comparison runs
  bool update_registration = true;
  std::ostream* diagnostics = nullptr;  // one key=value record per sweep
};

struct SRResult {
  GrayImage pm_image;          // mu_x at the final sweep
  Eigen::VectorXd mu_x;
  Eigen::VectorXd edge_means;  // mu_eta
  double mu_lambda = 0, mu_rho = 0, mu_kappa = 0, mu_beta = 0;
  std::vector<Eigen::Vector4d> mu_phi;
  std::vector<Eigen::Matrix4d> sigma_phi;
  int iterations = 0;
  bool converged = false;
  std::vector<SweepRecord> history;
};

// One full sweep in place; returns the convergence record. Exposed so tests
// can drive the loop step by step.
SweepRecord sweep(const SrProblem& problem, TrialState& state,
                  FrameOperators& frames, const RunOptions& options);

SRResult run(const SrProblem& problem, const RunOptions& options = {});

// Exact posterior mean by enumerating every binary edge configuration with
// the hyperparameters and registration fixed. Test apparatus for small
// lattices; requires N_eta <= 16.
struct ExactPm {
  Eigen::VectorXd x;
  Eigen::VectorXd eta;
};

ExactPm exact_pm_oracle(const std::vector<Eigen::VectorXd>& y,
                        const std::vector<Eigen::MatrixXd>& w, double lambda,
                        double rho, double kappa, double beta,
                        const LineProcessLayout& layout);

}  // namespace vbsr

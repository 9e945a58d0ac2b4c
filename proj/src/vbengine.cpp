#include "vbsr/vbengine.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <utility>

namespace vbsr {

namespace {

// Dense SPD inverse with one jitter retry; persistent failure is a bug worth
// surfacing, not something to paper over.
Eigen::MatrixXd spd_inverse(Eigen::MatrixXd m, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    m.diagonal().array() += 1e-10 * m.diagonal().mean();
    llt.compute(m);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error(std::string(what) +
                               ": SPD factorization failed after jitter retry");
  }
  return llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
}

double edge_sq(const Eigen::VectorXd& v, std::pair<int, int> e) {
  const double d = v[e.first] - v[e.second];
  return d * d;
}

void require_positive(const GammaParams& g, const char* what) {
  if (!(g.a > 0) || !(g.b > 0))
    throw std::runtime_error(std::string(what) +
                             ": gamma parameters left the positive domain");
}

}  // namespace

SrProblem make_problem(const std::vector<GrayImage>& frames,
                       const GridSpec& grid) {
  return make_problem(frames, grid, PriorConstants::for_alpha(grid.alpha));
}

SrProblem make_problem(const std::vector<GrayImage>& frames,
                       const GridSpec& grid, const PriorConstants& priors) {
  if (frames.empty()) throw std::invalid_argument("make_problem: empty stack");
  SrProblem p;
  for (const auto& f : frames) {
    if (f.width != grid.lr_width || f.height != grid.lr_height)
      throw std::invalid_argument("make_problem: frame dimensions mismatch");
    p.y.push_back(f.data);
  }
  p.grid = grid;
  p.layout = build_layout(grid.hr_width, grid.hr_height);
  p.priors = priors;
  return p;
}

FrameOperators build_frame_operators(const GridSpec& grid,
                                     const std::vector<Eigen::Vector4d>& mu_phi) {
  FrameOperators ops;
  ops.reserve(mu_phi.size());
  for (const auto& phi : mu_phi)
    ops.push_back(build_w_with_derivatives(RegistrationParams::from_packed(phi), grid));
  return ops;
}

TrialState init_state(const PriorConstants& priors,
                      const LineProcessLayout& layout, int frames) {
  if (frames < 1) throw std::invalid_argument("init_state: need >= 1 frame");
  TrialState s;
  s.mu_eta = Eigen::VectorXd::Zero(layout.n_edges());
  s.mu_x = Eigen::VectorXd::Zero(layout.n_pixels());
  s.sigma_x = Eigen::MatrixXd::Zero(layout.n_pixels(), layout.n_pixels());
  s.lambda = priors.lambda0;
  s.rho = priors.rho0;
  s.kappa = priors.kappa0;
  s.beta = priors.beta0;
  s.mu_phi.assign(frames, priors.phi0.mu);
  s.sigma_phi.assign(frames, priors.phi0.variance.asDiagonal());
  s.iteration = 0;
  return s;
}

Eigen::VectorXd update_eta(const SrProblem& problem, const TrialState& state) {
  const double mu_l = gamma_mean(state.lambda);
  const double mu_r = gamma_mean(state.rho);
  const double mu_k = gamma_mean(state.kappa);

  Eigen::MatrixXd diff = spd_inverse(
      Eigen::MatrixXd(build_a(problem.layout, state.mu_eta, mu_r, mu_k)),
      "update_eta: A(mu_eta, mu_rho, mu_kappa)");
  diff -= state.sigma_x;  // the mu mu^T part of C_x enters as (mu_i - mu_j)^2

  Eigen::VectorXd next(problem.layout.n_edges());
  for (int e = 0; e < problem.layout.n_edges(); ++e) {
    const double c_eta = edge_trace(diff, problem.layout, e) -
                         edge_sq(state.mu_x, problem.layout.edges[e]);
    next[e] = logistic(mu_l + 0.5 * mu_r * c_eta);
  }
  return next;
}

XUpdate update_x(const SrProblem& problem, const FrameOperators& frames,
                 const TrialState& state) {
  const int nx = problem.grid.n_hr();
  const double mu_r = gamma_mean(state.rho);
  const double mu_k = gamma_mean(state.kappa);
  const double mu_b = gamma_mean(state.beta);

  Eigen::MatrixXd cw = Eigen::MatrixXd::Zero(nx, nx);
  Eigen::VectorXd wty = Eigen::VectorXd::Zero(nx);
  for (size_t l = 0; l < frames.size(); ++l) {
    const auto& f = frames[l];
    cw.selfadjointView<Eigen::Lower>().rankUpdate(f.w.transpose());
    // The registration-uncertainty term sum_{kk'} [Sigma_phi]_{kk'} W'_k^T
    // W'_k' accumulates through the PSD square root of Sigma_phi, one rank
    // update per eigenmode.
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(state.sigma_phi[l]);
    for (int m = 0; m < 4; ++m) {
      const double lam = es.eigenvalues()[m];
      if (!(lam > 0)) continue;
      Eigen::MatrixXd u = Eigen::MatrixXd::Zero(f.w.rows(), nx);
      for (int k = 0; k < 4; ++k) {
        const double c = es.eigenvectors()(k, m);
        if (c != 0) u.noalias() += c * f.dw[k];
      }
      u *= std::sqrt(lam);
      cw.selfadjointView<Eigen::Lower>().rankUpdate(u.transpose());
    }
    wty.noalias() += f.w.transpose() * problem.y[l];
  }

  Eigen::MatrixXd system =
      Eigen::MatrixXd(build_a(problem.layout, state.mu_eta, mu_r, mu_k));
  system += mu_b * Eigen::MatrixXd(cw.selfadjointView<Eigen::Lower>());

  XUpdate out;
  out.sigma_x =
      spd_inverse(std::move(system), "update_x: A + mu_beta sum_l C'_W");
  out.mu_x = out.sigma_x * (mu_b * wty);
  return out;
}

std::vector<FrameMoments> compute_frame_moments(const SrProblem& problem,
                                                const FrameOperators& frames,
                                                const TrialState& state) {
  const int ny = problem.grid.n_lr();
  const int nx = problem.grid.n_hr();
  std::vector<FrameMoments> out(frames.size());

  // C_x = mu_x mu_x^T + Sigma_x is never formed; the rank-one part turns into
  // products B_m mu_x and the Sigma_x part into one stacked GEMM per frame.
  Eigen::MatrixXd stack(5 * ny, nx);
  for (size_t l = 0; l < frames.size(); ++l) {
    const auto& f = frames[l];
    stack.topRows(ny) = f.w;
    for (int k = 0; k < 4; ++k) stack.middleRows((k + 1) * ny, ny) = f.dw[k];

    const Eigen::MatrixXd t = stack * state.sigma_x;
    const Eigen::VectorXd bmu = stack * state.mu_x;

    FrameMoments& m = out[l];
    for (int a = 0; a < 5; ++a)
      for (int b = a; b < 5; ++b) {
        const double g =
            t.middleRows(a * ny, ny).cwiseProduct(stack.middleRows(b * ny, ny)).sum() +
            bmu.segment(a * ny, ny).dot(bmu.segment(b * ny, ny));
        m.gram(a, b) = g;
        m.gram(b, a) = g;
      }
    m.y_b_mu = bmu.reshaped(ny, 5).transpose() * problem.y[l];
    m.y_sq = problem.y[l].squaredNorm();
  }
  return out;
}

HyperUpdate update_hyper(const SrProblem& problem, const FrameOperators& frames,
                         const TrialState& state) {
  return update_hyper(problem, frames, state,
                      compute_frame_moments(problem, frames, state));
}

HyperUpdate update_hyper(const SrProblem& problem, const FrameOperators& frames,
                         const TrialState& state,
                         const std::vector<FrameMoments>& moments) {
  const auto& prior = problem.priors;
  const auto& layout = problem.layout;
  const double mu_l = gamma_mean(state.lambda);
  const double mu_r = gamma_mean(state.rho);
  const double mu_k = gamma_mean(state.kappa);

  HyperUpdate h;
  h.lambda.a = prior.lambda0.a + layout.n_edges() * mu_l * logistic(-mu_l);
  h.lambda.b = prior.lambda0.b + (1.0 - state.mu_eta.array()).sum();

  const Eigen::MatrixXd ainv = spd_inverse(
      Eigen::MatrixXd(build_a(layout, state.mu_eta, mu_r, mu_k)),
      "update_hyper: A(mu_eta, mu_rho, mu_kappa)");
  double tr_ainv_a10 = 0, tr_cx_a10 = 0;
  for (int e = 0; e < layout.n_edges(); ++e) {
    tr_ainv_a10 += state.mu_eta[e] * edge_trace(ainv, layout, e);
    tr_cx_a10 += state.mu_eta[e] * (edge_trace(state.sigma_x, layout, e) +
                                    edge_sq(state.mu_x, layout.edges[e]));
  }
  h.rho.a = prior.rho0.a + 0.5 * mu_r * tr_ainv_a10;
  h.rho.b = prior.rho0.b + 0.5 * tr_cx_a10;
  h.kappa.a = prior.kappa0.a + 0.5 * mu_k * ainv.trace();
  h.kappa.b =
      prior.kappa0.b + 0.5 * (state.sigma_x.trace() + state.mu_x.squaredNorm());

  const long n_data = static_cast<long>(frames.size()) * problem.grid.n_lr();
  h.beta.a = prior.beta0.a + 0.5 * n_data;
  double resid = 0;
  for (size_t l = 0; l < moments.size(); ++l) {
    const FrameMoments& m = moments[l];
    double tr_cx_cw = m.gram(0, 0);
    for (int k = 0; k < 4; ++k)
      for (int kp = 0; kp < 4; ++kp)
        tr_cx_cw += state.sigma_phi[l](k, kp) * m.gram(k + 1, kp + 1);
    resid += tr_cx_cw - 2.0 * m.y_b_mu[0] + m.y_sq;
  }
  h.beta.b = prior.beta0.b + 0.5 * resid;

  require_positive(h.lambda, "update_hyper: lambda");
  require_positive(h.rho, "update_hyper: rho");
  require_positive(h.kappa, "update_hyper: kappa");
  require_positive(h.beta, "update_hyper: beta");
  return h;
}

PhiUpdate update_phi(const SrProblem& problem, const FrameOperators& frames,
                     const TrialState& state, double mu_beta_t) {
  return update_phi(problem, frames, state, mu_beta_t,
                    compute_frame_moments(problem, frames, state));
}

PhiUpdate update_phi(const SrProblem& problem, const FrameOperators& frames,
                     const TrialState& state, double mu_beta_t,
                     const std::vector<FrameMoments>& moments) {
  const Eigen::Vector4d mu0 = problem.priors.phi0.mu;
  const Eigen::Matrix4d prior_prec =
      problem.priors.phi0.variance.cwiseInverse().asDiagonal();

  PhiUpdate out;
  out.mu_phi.resize(frames.size());
  out.sigma_phi.resize(frames.size());
  for (size_t l = 0; l < frames.size(); ++l) {
    const FrameMoments& m = moments[l];
    Eigen::Matrix4d c2;
    Eigen::Vector4d c1;
    for (int k = 0; k < 4; ++k) {
      c1[k] = m.gram(0, k + 1) - m.y_b_mu[k + 1];
      for (int kp = 0; kp < 4; ++kp) c2(k, kp) = m.gram(k + 1, kp + 1);
    }
    const Eigen::Matrix4d prec = prior_prec + mu_beta_t * c2;
    Eigen::LLT<Eigen::Matrix4d> llt(prec);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("update_phi: posterior precision not SPD");
    out.sigma_phi[l] = llt.solve(Eigen::Matrix4d::Identity());
    out.mu_phi[l] = out.sigma_phi[l] * (prior_prec * mu0 +
                                        mu_beta_t * (c2 * state.mu_phi[l] - c1));
  }
  return out;
}

ConvergenceMetrics check_convergence(const TrialState& next,
                                     const Eigen::VectorXd& prev_mu_x,
                                     const std::vector<Eigen::Vector4d>& prev_mu_phi,
                                     const PriorConstants& priors,
                                     const ConvergenceThresholds& thresholds) {
  ConvergenceMetrics m;
  m.x_change = (next.mu_x - prev_mu_x).squaredNorm() / next.mu_x.size();
  for (size_t l = 0; l < next.mu_phi.size(); ++l) {
    const Eigen::Vector4d d = next.mu_phi[l] - prev_mu_phi[l];
    m.phi_change += d.cwiseQuotient(priors.phi0.variance).cwiseProduct(d);
  }
  m.phi_change /= static_cast<double>(next.mu_phi.size());
  m.converged = m.x_change < thresholds.x_tol &&
                (m.phi_change.array() < thresholds.phi_tol).all();
  return m;
}

SweepRecord sweep(const SrProblem& problem, TrialState& state,
                  FrameOperators& frames, const RunOptions& options) {
  const Eigen::VectorXd prev_mu_x = state.mu_x;
  const std::vector<Eigen::Vector4d> prev_mu_phi = state.mu_phi;

  state.mu_eta = update_eta(problem, state);

  XUpdate xu = update_x(problem, frames, state);
  state.mu_x = std::move(xu.mu_x);
  state.sigma_x = std::move(xu.sigma_x);

  // The phi block is derived against the step-t hyperparameters, so the beta
  // mean is captured before the hyperparameter block overwrites it.
  const double mu_beta_t = gamma_mean(state.beta);

  std::vector<FrameMoments> moments;
  if (options.update_hyperparameters || options.update_registration)
    moments = compute_frame_moments(problem, frames, state);

  if (options.update_hyperparameters) {
    const HyperUpdate h = update_hyper(problem, frames, state, moments);
    state.lambda = h.lambda;
    state.rho = h.rho;
    state.kappa = h.kappa;
    state.beta = h.beta;
  }

  if (options.update_registration) {
    PhiUpdate pu = update_phi(problem, frames, state, mu_beta_t, moments);
    state.mu_phi = std::move(pu.mu_phi);
    state.sigma_phi = std::move(pu.sigma_phi);
    for (size_t l = 0; l < state.mu_phi.size(); ++l)
      if (!(state.mu_phi[l][3] > 0))
        throw std::runtime_error(
            "vb sweep: PSF precision posterior mean became non-positive on frame " +
            std::to_string(l));
    frames = build_frame_operators(problem.grid, state.mu_phi);
  }

  state.iteration += 1;

  SweepRecord rec;
  rec.iteration = state.iteration;
  rec.metrics = check_convergence(state, prev_mu_x, prev_mu_phi, problem.priors,
                                  options.thresholds);
  rec.mu_lambda = gamma_mean(state.lambda);
  rec.mu_rho = gamma_mean(state.rho);
  rec.mu_kappa = gamma_mean(state.kappa);
  rec.mu_beta = gamma_mean(state.beta);
  return rec;
}

namespace {

void emit_diagnostics(std::ostream& os, const SweepRecord& rec) {
  char line[360];
  std::snprintf(line, sizeof line,
                "sweep=%d dx2=%.9g dphi2_theta=%.9g dphi2_oh=%.9g "
                "dphi2_ov=%.9g dphi2_gamma=%.9g mu_lambda=%.9g mu_rho=%.9g "
                "mu_kappa=%.9g mu_beta=%.9g converged=%d",
                rec.iteration, rec.metrics.x_change, rec.metrics.phi_change[0],
                rec.metrics.phi_change[1], rec.metrics.phi_change[2],
                rec.metrics.phi_change[3], rec.mu_lambda, rec.mu_rho,
                rec.mu_kappa, rec.mu_beta, rec.metrics.converged ? 1 : 0);
  os << line << '\n';
}

SRResult run_loop(const SrProblem& problem, TrialState state,
                  const RunOptions& options) {
  if (problem.y.empty()) throw std::invalid_argument("run: empty stack");
  for (const auto& y : problem.y)
    if (y.size() != problem.grid.n_lr())
      throw std::invalid_argument("run: frame length mismatch");
  if (problem.layout.n_pixels() != problem.grid.n_hr())
    throw std::invalid_argument("run: layout does not match grid");

  FrameOperators frames = build_frame_operators(problem.grid, state.mu_phi);

  SRResult res;
  for (int t = 0; t < options.max_iterations; ++t) {
    const SweepRecord rec = sweep(problem, state, frames, options);
    res.history.push_back(rec);
    if (options.diagnostics) emit_diagnostics(*options.diagnostics, rec);
    if (rec.metrics.converged) {
      res.converged = true;
      break;
    }
  }

  res.pm_image = make_image(problem.grid.hr_width, problem.grid.hr_height);
  res.pm_image.data = state.mu_x;
  res.mu_x = std::move(state.mu_x);
  res.edge_means = std::move(state.mu_eta);
  res.mu_lambda = gamma_mean(state.lambda);
  res.mu_rho = gamma_mean(state.rho);
  res.mu_kappa = gamma_mean(state.kappa);
  res.mu_beta = gamma_mean(state.beta);
  res.mu_phi = std::move(state.mu_phi);
  res.sigma_phi = std::move(state.sigma_phi);
  res.iterations = state.iteration;
  return res;
}

}  // namespace

SRResult run(const SrProblem& problem, const RunOptions& options) {
  return run_loop(problem,
                  init_state(problem.priors, problem.layout,
                             static_cast<int>(problem.y.size())),
                  options);
}

ExactPm exact_pm_oracle(const std::vector<Eigen::VectorXd>& y,
                        const std::vector<Eigen::MatrixXd>& w, double lambda,
                        double rho, double kappa, double beta,
                        const LineProcessLayout& layout) {
  if (layout.n_edges() > 16)
    throw std::invalid_argument("exact_pm_oracle: N_eta exceeds enumeration cap (16)");
  if (y.size() != w.size() || y.empty())
    throw std::invalid_argument("exact_pm_oracle: stack mismatch");
  if (!(rho > 0) || !(kappa > 0) || !(beta > 0))
    throw std::invalid_argument("exact_pm_oracle: hyperparameters must be positive");

  const int nx = layout.n_pixels();
  const int ne = layout.n_edges();

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(nx, nx);
  Eigen::VectorXd h = Eigen::VectorXd::Zero(nx);
  for (size_t l = 0; l < w.size(); ++l) {
    gram.noalias() += w[l].transpose() * w[l];
    h.noalias() += w[l].transpose() * y[l];
  }
  gram *= beta;
  h *= beta;

  const double log_on = std::log(logistic(lambda));    // ln sigma(lambda)
  const double log_off = std::log(logistic(-lambda));  // -inf at the lambda=+inf limit

  const long count = 1L << ne;
  std::vector<double> logw(count);
  std::vector<Eigen::VectorXd> means(count);
  std::vector<Eigen::VectorXd> etas(count);
  double max_logw = -std::numeric_limits<double>::infinity();

  for (long mask = 0; mask < count; ++mask) {
    Eigen::VectorXd eta(ne);
    for (int e = 0; e < ne; ++e) eta[e] = (mask >> e) & 1 ? 1.0 : 0.0;

    const Eigen::MatrixXd a = Eigen::MatrixXd(build_a(layout, eta, rho, kappa));
    Eigen::LLT<Eigen::MatrixXd> llt_a(a);
    Eigen::LLT<Eigen::MatrixXd> llt_p(a + gram);
    if (llt_a.info() != Eigen::Success || llt_p.info() != Eigen::Success)
      throw std::runtime_error("exact_pm_oracle: factorization failed");
    const double logdet_a =
        2.0 * llt_a.matrixLLT().diagonal().array().log().sum();
    const double logdet_p =
        2.0 * llt_p.matrixLLT().diagonal().array().log().sum();

    means[mask] = llt_p.solve(h);
    const double n_on = eta.sum();
    logw[mask] = 0.5 * logdet_a - 0.5 * logdet_p + 0.5 * h.dot(means[mask]) +
                 n_on * log_on + (ne - n_on) * log_off;
    etas[mask] = std::move(eta);
    max_logw = std::max(max_logw, logw[mask]);
  }

  ExactPm pm;
  pm.x = Eigen::VectorXd::Zero(nx);
  pm.eta = Eigen::VectorXd::Zero(ne);
  double total = 0;
  for (long mask = 0; mask < count; ++mask) {
    const double wgt = std::exp(logw[mask] - max_logw);
    total += wgt;
    pm.x += wgt * means[mask];
    pm.eta += wgt * etas[mask];
  }
  pm.x /= total;
  pm.eta /= total;
  return pm;
}

}  // namespace vbsr

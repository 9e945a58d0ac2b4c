#pragma once

// Experiment harness: render low-resolution stacks from reference images
// across an SNR x replication grid, reconstruct each stack, and aggregate
// PSNR / ISNR / registration-error statistics into CSV tables.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vbsr/gmrf.hpp"
#include "vbsr/imaging.hpp"
#include "vbsr/vbengine.hpp"

namespace vbsr {

// What feeds the bilinear reference: the first LR frame (default), or the
// pixel mean of the whole stack.
enum class BaselineMode { first_frame, frame_average };

struct ExperimentConfig {
  std::vector<std::string> image_paths;
  double alpha = 4.0;
  int frames = 10;
  std::vector<double> snr_db{20.0, 25.0, 30.0};
  int replications = 10;
  std::uint64_t master_seed = 1;
  int max_iterations = 100;
  ConvergenceThresholds thresholds;
  std::string out_dir;       // empty: keep everything in memory
  BaselineMode baseline = BaselineMode::first_frame;
  bool write_images = true;  // per-cell PGM artifacts under out_dir
  int workers = 1;           // concurrent cells; rows stay in grid order
};

struct MetricsRow {
  std::string image;       // stem of the reference image path
  double snr_db = 0;
  int replication = 0;     // 0-based
  std::uint64_t seed = 0;  // per-run seed actually used
  bool failed = false;     // engine aborted; metric fields undefined
  std::string error;       // abort reason when failed
  int iterations = 0;
  bool converged = false;
  double psnr_proposed = 0;
  double psnr_bilinear = 0;
  double isnr_bilinear = 0;
  // mean over frames of the squared registration-mean error, per component
  double sqerr_theta = 0, sqerr_oh = 0, sqerr_ov = 0, sqerr_gamma = 0;
  double mu_lambda = 0, mu_rho = 0, mu_kappa = 0, mu_beta = 0;
};

// Wall-clock times live apart from metrics so metrics.csv stays bit-stable
// across reruns.
struct TimingRow {
  std::string image;
  double snr_db = 0;
  int replication = 0;
  double wall_seconds = 0;
};

struct CellResult {
  MetricsRow row;
  double wall_seconds = 0;  // reconstruction only
  GrayImage recon;          // empty when the run failed
  GrayImage bilinear;
  EdgeMaps edge_maps;
};

struct ExperimentResult {
  std::vector<MetricsRow> metrics;
  std::vector<TimingRow> timings;
};

// Deterministic per-cell seed: splitmix chain over the master seed, the
// image id hash, the SNR in milli-dB, and the replication index.
std::uint64_t run_seed(std::uint64_t master_seed, const std::string& image_id,
                       double snr_db, int replication);

// "data/lena.pgm" -> "lena"
std::string path_stem(const std::string& path);

// One cell: synthesize cfg.frames observations from truth at snr_db,
// reconstruct, and score against truth and the bilinear baseline. Engine
// aborts are caught and recorded on the row, not thrown.
CellResult run_cell(const GrayImage& truth, const std::string& image_id,
                    double snr_db, int replication, const ExperimentConfig& cfg,
                    std::ostream* diagnostics = nullptr);

// Full grid in deterministic order (image, then SNR, then replication).
// Writes per-cell artifacts under cfg.out_dir when configured; one progress
// line per cell when progress is given.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                std::ostream* progress = nullptr);

void write_metrics_csv(const std::string& path,
                       const std::vector<MetricsRow>& rows);
void write_timings_csv(const std::string& path,
                       const std::vector<TimingRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

struct SummaryCell {
  std::string image;
  double snr_db = 0;
  int n = 0;  // successful runs aggregated
  int failures = 0;
  double psnr_mean = 0, psnr_std = 0;  // sample std; 0 when n < 2
  double isnr_mean = 0, isnr_std = 0;
};

// Registration accuracy pooled over images and replications at one SNR:
// rmse_k = sqrt(mean over runs of the per-run mean squared error).
struct RegistrationSummary {
  double snr_db = 0;
  int n = 0;
  double rmse_theta = 0, rmse_oh = 0, rmse_ov = 0, rmse_gamma = 0;
};

struct Summary {
  std::vector<SummaryCell> cells;  // image x SNR, first-appearance order
  std::vector<RegistrationSummary> registration;
};

Summary summarize(const std::vector<MetricsRow>& rows);
std::string format_summary(const Summary& summary);

}  // namespace vbsr

#include "vbsr/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "vbsr/obsmodel.hpp"
#include "vbsr/rng.hpp"

namespace vbsr {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string fmt_seed(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(v));
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

// Splits one CSV record, honoring double-quoted fields with "" escapes.
std::vector<std::string> csv_split(const std::string& line, const std::string& where) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw std::runtime_error(where + ": unterminated quoted field");
  fields.push_back(std::move(cur));
  return fields;
}

constexpr const char* kMetricsHeader =
    "image,snr_db,replication,seed,failed,error,iterations,converged,"
    "psnr_proposed,psnr_bilinear,isnr_bilinear,sqerr_theta,sqerr_oh,sqerr_ov,"
    "sqerr_gamma,mu_lambda,mu_rho,mu_kappa,mu_beta";

double parse_double(const std::string& s, const std::string& where) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(where + ": bad numeric field '" + s + "'");
  }
}

struct MeanStd {
  double mean = 0, std = 0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double acc = 0;
  for (double x : v) acc += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(acc / static_cast<double>(v.size() - 1));
  return r;
}

}  // namespace

std::uint64_t run_seed(std::uint64_t master_seed, const std::string& image_id,
                       double snr_db, int replication) {
  std::uint64_t s = master_seed;
  s = splitmix64(s ^ fnv1a64(image_id));
  s = splitmix64(s ^ static_cast<std::uint64_t>(std::llround(snr_db * 1000.0)));
  s = splitmix64(s ^ static_cast<std::uint64_t>(replication));
  return s;
}

std::string path_stem(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

CellResult run_cell(const GrayImage& truth, const std::string& image_id,
                    double snr_db, int replication, const ExperimentConfig& cfg,
                    std::ostream* diagnostics) {
  CellResult out;
  MetricsRow& row = out.row;
  row.image = image_id;
  row.snr_db = snr_db;
  row.replication = replication;
  row.seed = run_seed(cfg.master_seed, image_id, snr_db, replication);

  const SynthesisResult syn = synthesize_observations(
      truth, cfg.alpha, cfg.frames, snr_db, row.seed);
  GrayImage reference = syn.frames[0];
  if (cfg.baseline == BaselineMode::frame_average) {
    for (size_t l = 1; l < syn.frames.size(); ++l)
      reference.data += syn.frames[l].data;
    reference.data /= static_cast<double>(syn.frames.size());
  }
  out.bilinear = bilinear_upsample(reference, cfg.alpha);
  row.psnr_bilinear = psnr(out.bilinear, truth);

  try {
    const GridSpec grid = make_grid(truth.width, truth.height, cfg.alpha);
    const SrProblem problem = make_problem(syn.frames, grid);
    RunOptions options;
    options.thresholds = cfg.thresholds;
    options.max_iterations = cfg.max_iterations;
    options.diagnostics = diagnostics;

    const auto t0 = std::chrono::steady_clock::now();
    SRResult res = run(problem, options);
    out.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();

    row.iterations = res.iterations;
    row.converged = res.converged;
    row.psnr_proposed = psnr(res.pm_image, truth);
    row.isnr_bilinear = isnr(row.psnr_proposed, row.psnr_bilinear);
    Eigen::Vector4d sqerr = Eigen::Vector4d::Zero();
    for (size_t l = 0; l < res.mu_phi.size(); ++l) {
      const Eigen::Vector4d d = res.mu_phi[l] - syn.params[l].packed();
      sqerr += d.cwiseProduct(d);
    }
    sqerr /= static_cast<double>(res.mu_phi.size());
    row.sqerr_theta = sqerr[0];
    row.sqerr_oh = sqerr[1];
    row.sqerr_ov = sqerr[2];
    row.sqerr_gamma = sqerr[3];
    row.mu_lambda = res.mu_lambda;
    row.mu_rho = res.mu_rho;
    row.mu_kappa = res.mu_kappa;
    row.mu_beta = res.mu_beta;

    out.recon = std::move(res.pm_image);
    out.edge_maps = edge_means_to_images(problem.layout, res.edge_means);
  } catch (const std::exception& e) {
    row.failed = true;
    row.error = e.what();
  }
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                std::ostream* progress) {
  namespace fs = std::filesystem;
  if (cfg.image_paths.empty())
    throw std::invalid_argument("run_experiment: no images");
  if (cfg.frames < 1 || cfg.replications < 1)
    throw std::invalid_argument("run_experiment: need >= 1 frame and replication");

  const bool artifacts = !cfg.out_dir.empty();
  if (artifacts) fs::create_directories(cfg.out_dir);

  std::vector<GrayImage> truths;
  std::vector<std::string> ids;
  for (const auto& path : cfg.image_paths) {
    truths.push_back(load_pgm(path));
    ids.push_back(path_stem(path));
  }

  struct Task {
    int img, rep;
    double snr;
  };
  std::vector<Task> tasks;
  for (size_t i = 0; i < truths.size(); ++i)
    for (double snr : cfg.snr_db)
      for (int rep = 0; rep < cfg.replications; ++rep)
        tasks.push_back({static_cast<int>(i), rep, snr});

  ExperimentResult result;
  result.metrics.resize(tasks.size());
  result.timings.resize(tasks.size());

  std::mutex progress_mutex;
  auto run_one = [&](size_t t) {
    const Task& task = tasks[t];
    const std::string& id = ids[task.img];
    std::string cell_dir;
    std::ofstream diag;
    if (artifacts) {
      cell_dir = cfg.out_dir + "/" + id + "_snr" + fmt_double(task.snr) +
                 "_rep" + std::to_string(task.rep);
      fs::create_directories(cell_dir);
      diag.open(cell_dir + "/diagnostics.txt");
    }
    CellResult cell = run_cell(truths[task.img], id, task.snr, task.rep, cfg,
                               artifacts ? &diag : nullptr);
    if (artifacts && cfg.write_images && !cell.row.failed) {
      save_pgm(cell.recon, cell_dir + "/recon.pgm");
      save_pgm(cell.bilinear, cell_dir + "/bilinear.pgm");
      save_pgm(cell.edge_maps.horizontal, cell_dir + "/edges_h.pgm");
      save_pgm(cell.edge_maps.vertical, cell_dir + "/edges_v.pgm");
    }
    if (progress) {
      std::lock_guard<std::mutex> lock(progress_mutex);
      if (cell.row.failed)
        *progress << "image=" << id << " snr=" << fmt_double(task.snr)
                  << " rep=" << task.rep << " FAILED: " << cell.row.error
                  << '\n';
      else
        *progress << "image=" << id << " snr=" << fmt_double(task.snr)
                  << " rep=" << task.rep
                  << " psnr=" << fmt_double(cell.row.psnr_proposed)
                  << " isnr=" << fmt_double(cell.row.isnr_bilinear)
                  << " iters=" << cell.row.iterations
                  << " converged=" << (cell.row.converged ? 1 : 0)
                  << " wall_s=" << fmt_double(cell.wall_seconds) << '\n';
      progress->flush();
    }
    result.timings[t] = {id, task.snr, task.rep, cell.wall_seconds};
    result.metrics[t] = std::move(cell.row);
  };

  const int workers =
      std::max(1, std::min<int>(cfg.workers, static_cast<int>(tasks.size())));
  if (workers == 1) {
    for (size_t t = 0; t < tasks.size(); ++t) run_one(t);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::mutex error_mutex;
    std::exception_ptr first_error;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (size_t t = next.fetch_add(1); t < tasks.size();
             t = next.fetch_add(1)) {
          try {
            run_one(t);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  return result;
}

void write_metrics_csv(const std::string& path,
                       const std::vector<MetricsRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    os << csv_escape(r.image) << ',' << fmt_double(r.snr_db) << ','
       << r.replication << ',' << fmt_seed(r.seed) << ',' << (r.failed ? 1 : 0)
       << ',' << csv_escape(r.error) << ',' << r.iterations << ','
       << (r.converged ? 1 : 0) << ',' << fmt_double(r.psnr_proposed) << ','
       << fmt_double(r.psnr_bilinear) << ',' << fmt_double(r.isnr_bilinear)
       << ',' << fmt_double(r.sqerr_theta) << ',' << fmt_double(r.sqerr_oh)
       << ',' << fmt_double(r.sqerr_ov) << ',' << fmt_double(r.sqerr_gamma)
       << ',' << fmt_double(r.mu_lambda) << ',' << fmt_double(r.mu_rho) << ','
       << fmt_double(r.mu_kappa) << ',' << fmt_double(r.mu_beta) << '\n';
  }
}

void write_timings_csv(const std::string& path,
                       const std::vector<TimingRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_timings_csv: cannot open " + path);
  os << "image,snr_db,replication,wall_seconds\n";
  for (const auto& r : rows)
    os << csv_escape(r.image) << ',' << fmt_double(r.snr_db) << ','
       << r.replication << ',' << fmt_double(r.wall_seconds) << '\n';
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_metrics_csv: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader)
    throw std::runtime_error("read_metrics_csv: unexpected header in " + path);

  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    const auto f = csv_split(line, where);
    if (f.size() != 19)
      throw std::runtime_error(where + ": expected 19 fields, got " +
                               std::to_string(f.size()));
    MetricsRow r;
    r.image = f[0];
    r.snr_db = parse_double(f[1], where);
    r.replication = static_cast<int>(parse_double(f[2], where));
    r.seed = std::stoull(f[3]);
    r.failed = f[4] == "1";
    r.error = f[5];
    r.iterations = static_cast<int>(parse_double(f[6], where));
    r.converged = f[7] == "1";
    r.psnr_proposed = parse_double(f[8], where);
    r.psnr_bilinear = parse_double(f[9], where);
    r.isnr_bilinear = parse_double(f[10], where);
    r.sqerr_theta = parse_double(f[11], where);
    r.sqerr_oh = parse_double(f[12], where);
    r.sqerr_ov = parse_double(f[13], where);
    r.sqerr_gamma = parse_double(f[14], where);
    r.mu_lambda = parse_double(f[15], where);
    r.mu_rho = parse_double(f[16], where);
    r.mu_kappa = parse_double(f[17], where);
    r.mu_beta = parse_double(f[18], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

Summary summarize(const std::vector<MetricsRow>& rows) {
  Summary s;
  for (const auto& r : rows) {
    // image x SNR cell, first-appearance order
    SummaryCell* cell = nullptr;
    for (auto& c : s.cells)
      if (c.image == r.image && c.snr_db == r.snr_db) {
        cell = &c;
        break;
      }
    if (!cell) {
      s.cells.push_back({r.image, r.snr_db, 0, 0, 0, 0, 0, 0});
      cell = &s.cells.back();
    }
    if (r.failed)
      ++cell->failures;
    else
      ++cell->n;
  }

  for (auto& cell : s.cells) {
    std::vector<double> psnrs, isnrs;
    for (const auto& r : rows)
      if (!r.failed && r.image == cell.image && r.snr_db == cell.snr_db) {
        psnrs.push_back(r.psnr_proposed);
        isnrs.push_back(r.isnr_bilinear);
      }
    const MeanStd p = mean_std(psnrs), i = mean_std(isnrs);
    cell.psnr_mean = p.mean;
    cell.psnr_std = p.std;
    cell.isnr_mean = i.mean;
    cell.isnr_std = i.std;
  }

  for (const auto& r : rows) {
    if (r.failed) continue;
    RegistrationSummary* reg = nullptr;
    for (auto& g : s.registration)
      if (g.snr_db == r.snr_db) {
        reg = &g;
        break;
      }
    if (!reg) {
      s.registration.push_back({r.snr_db, 0, 0, 0, 0, 0});
      reg = &s.registration.back();
    }
    ++reg->n;
    reg->rmse_theta += r.sqerr_theta;  // accumulate mean squares, root below
    reg->rmse_oh += r.sqerr_oh;
    reg->rmse_ov += r.sqerr_ov;
    reg->rmse_gamma += r.sqerr_gamma;
  }
  for (auto& g : s.registration) {
    g.rmse_theta = std::sqrt(g.rmse_theta / g.n);
    g.rmse_oh = std::sqrt(g.rmse_oh / g.n);
    g.rmse_ov = std::sqrt(g.rmse_ov / g.n);
    g.rmse_gamma = std::sqrt(g.rmse_gamma / g.n);
  }
  return s;
}

std::string format_summary(const Summary& summary) {
  std::ostringstream os;
  char buf[200];
  os << "reconstruction quality (mean +/- sample std over replications)\n";
  std::snprintf(buf, sizeof buf, "%-12s %8s %4s %6s %12s %10s %12s %10s\n",
                "image", "snr_db", "n", "failed", "psnr_mean", "psnr_std",
                "isnr_mean", "isnr_std");
  os << buf;
  for (const auto& c : summary.cells) {
    std::snprintf(buf, sizeof buf,
                  "%-12s %8g %4d %6d %12.4f %10.4f %12.4f %10.4f%s\n",
                  c.image.c_str(), c.snr_db, c.n, c.failures, c.psnr_mean,
                  c.psnr_std, c.isnr_mean, c.isnr_std,
                  c.n < 2 ? "  [n<2: std not estimable]" : "");
    os << buf;
  }
  os << "\nregistration error (RMSE pooled over images and replications)\n";
  std::snprintf(buf, sizeof buf, "%8s %4s %12s %12s %12s %12s\n", "snr_db",
                "n", "rmse_theta", "rmse_oh", "rmse_ov", "rmse_gamma");
  os << buf;
  for (const auto& g : summary.registration) {
    std::snprintf(buf, sizeof buf, "%8g %4d %12.6f %12.6f %12.6f %12.6f\n",
                  g.snr_db, g.n, g.rmse_theta, g.rmse_oh, g.rmse_ov,
                  g.rmse_gamma);
    os << buf;
  }
  return os.str();
}

}  // namespace vbsr

// Command-line front end: synthesize observation stacks, reconstruct them,
// run the full evaluation protocol, and summarize metric tables.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vbsr/evalharness.hpp"
#include "vbsr/gmrf.hpp"
#include "vbsr/imaging.hpp"
#include "vbsr/obsmodel.hpp"
#include "vbsr/vbengine.hpp"

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

struct SynthesizeArgs {
  std::string image, out;
  double alpha = 4.0;
  int frames = 10;
  double snr = 30.0;
  std::uint64_t seed = 1;
};

void do_synthesize(const SynthesizeArgs& a) {
  namespace fs = std::filesystem;
  const vbsr::GrayImage truth = vbsr::load_pgm(a.image);
  const vbsr::SynthesisResult syn =
      vbsr::synthesize_observations(truth, a.alpha, a.frames, a.snr, a.seed);

  fs::create_directories(a.out);
  std::vector<std::string> names;
  for (int l = 0; l < a.frames; ++l) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%02d.pgm", l);
    names.push_back(name);
    vbsr::save_pgm(syn.frames[l], a.out + "/" + name);
  }

  std::ofstream truth_csv(a.out + "/truth.csv", std::ios::binary);
  truth_csv << "frame,theta,o_h,o_v,gamma,beta\n";
  for (int l = 0; l < a.frames; ++l) {
    const auto& p = syn.params[l];
    truth_csv << l << ',' << fmt(p.theta) << ',' << fmt(p.o_h) << ','
              << fmt(p.o_v) << ',' << fmt(p.gamma) << ',' << fmt(syn.beta)
              << '\n';
  }

  std::ofstream manifest(a.out + "/manifest.txt", std::ios::binary);
  manifest << "alpha=" << fmt(a.alpha) << "\nframes=" << a.frames
           << "\nsnr_db=" << fmt(a.snr) << "\nseed=" << a.seed
           << "\nhr_width=" << truth.width << "\nhr_height=" << truth.height
           << "\nbeta=" << fmt(syn.beta) << '\n';
  for (int l = 0; l < a.frames; ++l)
    manifest << "frame_" << l << '=' << names[l] << '\n';

  std::cout << "wrote " << a.frames << " frames, truth.csv, manifest.txt to "
            << a.out << " (beta=" << fmt(syn.beta) << ")\n";
}

struct ReconstructArgs {
  std::string stack_dir;
  std::vector<std::string> frame_paths;
  std::string out = "recon_out";
  double alpha = 4.0;
  int max_iters = 100;
};

std::map<std::string, std::string> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ": malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void do_reconstruct(const ReconstructArgs& a) {
  namespace fs = std::filesystem;
  std::vector<std::string> paths = a.frame_paths;
  double alpha = a.alpha;
  if (!a.stack_dir.empty()) {
    if (!paths.empty())
      throw std::runtime_error("give either --stack or --frame, not both");
    const auto kv = read_manifest(a.stack_dir + "/manifest.txt");
    alpha = std::stod(kv.at("alpha"));
    const int frames = std::stoi(kv.at("frames"));
    for (int l = 0; l < frames; ++l)
      paths.push_back(a.stack_dir + "/" + kv.at("frame_" + std::to_string(l)));
  }
  if (paths.empty())
    throw std::runtime_error("no input frames; use --stack or --frame");

  std::vector<vbsr::GrayImage> frames;
  for (const auto& p : paths) frames.push_back(vbsr::load_pgm(p));

  const vbsr::GridSpec grid =
      vbsr::make_grid(static_cast<int>(std::lround(frames[0].width * alpha)),
                      static_cast<int>(std::lround(frames[0].height * alpha)),
                      alpha);
  const vbsr::SrProblem problem = vbsr::make_problem(frames, grid);

  fs::create_directories(a.out);
  std::ofstream diag(a.out + "/diagnostics.txt");
  vbsr::RunOptions options;
  options.max_iterations = a.max_iters;
  options.diagnostics = &diag;

  const vbsr::SRResult res = vbsr::run(problem, options);

  vbsr::save_pgm(res.pm_image, a.out + "/recon.pgm");
  const vbsr::EdgeMaps maps =
      vbsr::edge_means_to_images(problem.layout, res.edge_means);
  vbsr::save_pgm(maps.horizontal, a.out + "/edges_h.pgm");
  vbsr::save_pgm(maps.vertical, a.out + "/edges_v.pgm");

  std::ofstream result(a.out + "/result.txt", std::ios::binary);
  result << "iterations=" << res.iterations
         << "\nconverged=" << (res.converged ? 1 : 0)
         << "\nmu_lambda=" << fmt(res.mu_lambda)
         << "\nmu_rho=" << fmt(res.mu_rho)
         << "\nmu_kappa=" << fmt(res.mu_kappa)
         << "\nmu_beta=" << fmt(res.mu_beta) << '\n';
  for (size_t l = 0; l < res.mu_phi.size(); ++l)
    result << "frame_" << l << "_theta=" << fmt(res.mu_phi[l][0])
           << "\nframe_" << l << "_o_h=" << fmt(res.mu_phi[l][1])
           << "\nframe_" << l << "_o_v=" << fmt(res.mu_phi[l][2])
           << "\nframe_" << l << "_gamma=" << fmt(res.mu_phi[l][3]) << '\n';

  std::cout << "reconstructed " << grid.hr_width << "x" << grid.hr_height
            << " image in " << res.iterations << " sweeps (converged="
            << (res.converged ? 1 : 0) << "); artifacts in " << a.out << '\n';
}

struct RunArgs {
  vbsr::ExperimentConfig cfg;
  std::string baseline = "first";
  bool no_images = false;
};

void do_run(RunArgs& a) {
  a.cfg.baseline = a.baseline == "average"
                       ? vbsr::BaselineMode::frame_average
                       : vbsr::BaselineMode::first_frame;
  a.cfg.write_images = !a.no_images;
  if (a.cfg.out_dir.empty()) a.cfg.out_dir = "vbsr_out";

  const vbsr::ExperimentResult result =
      vbsr::run_experiment(a.cfg, &std::cout);

  vbsr::write_metrics_csv(a.cfg.out_dir + "/metrics.csv", result.metrics);
  vbsr::write_timings_csv(a.cfg.out_dir + "/timings.csv", result.timings);
  const std::string text = vbsr::format_summary(vbsr::summarize(result.metrics));
  std::ofstream(a.cfg.out_dir + "/summary.txt", std::ios::binary) << text;
  std::cout << '\n' << text;
}

struct SummarizeArgs {
  std::string metrics;
  std::string out;
};

void do_summarize(const SummarizeArgs& a) {
  const auto rows = vbsr::read_metrics_csv(a.metrics);
  const std::string text = vbsr::format_summary(vbsr::summarize(rows));
  if (!a.out.empty()) std::ofstream(a.out, std::ios::binary) << text;
  std::cout << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Multi-frame Bayesian super-resolution: posterior-mean reconstruction "
      "of a high-resolution image from warped, blurred, downsampled, noisy "
      "frames, with an evaluation harness."};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "key=value config file ([section] per subcommand); "
                 "command-line flags take precedence");

  SynthesizeArgs sy;
  auto* syn = app.add_subcommand(
      "synthesize", "Render a low-resolution observation stack from a reference image");
  syn->configurable();
  syn->add_option("--image", sy.image, "reference high-resolution PGM")
      ->required()
      ->check(CLI::ExistingFile);
  syn->add_option("--alpha", sy.alpha, "enhancement factor")->capture_default_str();
  syn->add_option("--frames", sy.frames, "number of observed frames")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  syn->add_option("--snr", sy.snr, "observation SNR in dB")->capture_default_str();
  syn->add_option("--seed", sy.seed, "RNG seed")->capture_default_str();
  syn->add_option("--out", sy.out, "output directory")->required();

  ReconstructArgs rc;
  auto* rec = app.add_subcommand(
      "reconstruct", "Reconstruct a high-resolution image from a stack of frames");
  rec->configurable();
  rec->add_option("--stack", rc.stack_dir,
                  "directory produced by synthesize (reads manifest.txt)");
  rec->add_option("--frame", rc.frame_paths, "LR frame PGM (repeatable)");
  rec->add_option("--alpha", rc.alpha, "enhancement factor (with --frame)")
      ->capture_default_str();
  rec->add_option("--max-iters", rc.max_iters, "sweep cap")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  rec->add_option("--out", rc.out, "output directory")->capture_default_str();

  RunArgs ra;
  auto* run = app.add_subcommand(
      "run", "Full protocol: synthesize, reconstruct, and score a grid of cells");
  run->configurable();
  run->add_option("--image", ra.cfg.image_paths,
                  "reference PGM (repeatable)")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--alpha", ra.cfg.alpha, "enhancement factor")
      ->capture_default_str();
  run->add_option("--frames", ra.cfg.frames, "frames per stack")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  run->add_option("--snr", ra.cfg.snr_db, "SNR in dB (repeatable)")
      ->capture_default_str();
  run->add_option("--reps", ra.cfg.replications, "replications per cell")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  run->add_option("--seed", ra.cfg.master_seed, "master seed")
      ->capture_default_str();
  run->add_option("--max-iters", ra.cfg.max_iterations, "sweep cap")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  run->add_option("--out", ra.cfg.out_dir, "output directory")
      ->capture_default_str();
  run->add_option("--baseline", ra.baseline,
                  "bilinear reference: first frame or stack average")
      ->check(CLI::IsMember({"first", "average"}))
      ->capture_default_str();
  run->add_option("--workers", ra.cfg.workers, "concurrent cells")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  run->add_flag("--no-images", ra.no_images, "skip per-cell PGM artifacts");

  SummarizeArgs su;
  auto* sum = app.add_subcommand("summarize", "Aggregate a metrics CSV into tables");
  sum->configurable();
  sum->add_option("--metrics", su.metrics, "metrics.csv path")
      ->required()
      ->check(CLI::ExistingFile);
  sum->add_option("--out", su.out, "also write the tables to this file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*syn) do_synthesize(sy);
    if (*rec) do_reconstruct(rc);
    if (*run) do_run(ra);
    if (*sum) do_summarize(su);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

// lcae: infrared small-target detection toolkit.
//
// Subcommands: attend, synth, train, eval, roc, sweep, bench. Every command is
// deterministic under --seed except the timed throughput loop in bench.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <vector>

#include "lcae/data.hpp"
#include "lcae/lca.hpp"
#include "lcae/metrics.hpp"
#include "lcae/model.hpp"
#include "lcae/train.hpp"

namespace fs = std::filesystem;
using namespace lcae;

namespace {

// Exit codes: 0 success, 2 usage/config, 3 I/O or data, 4 numerical failure,
// 5 internal.
constexpr int kUsage = 2;
constexpr int kIo = 3;
constexpr int kNumeric = 4;
constexpr int kInternal = 5;

struct ModelFlags {
  int base_channels = 16;
  double alpha = 1.0;
  double beta = 0.5;
  int dilation = 1;
  int input_size = 256;
  bool no_lce = false;
  bool lca_on_raw = false;

  model::ModelConfig to_config() const {
    model::ModelConfig cfg;
    cfg.base_channels = base_channels;
    cfg.lca_params = {alpha, beta, dilation};
    cfg.input_height = cfg.input_width = input_size;
    cfg.lce_enabled = !no_lce;
    cfg.lca_on_raw = lca_on_raw;
    return cfg;
  }

  void attach(CLI::App* cmd) {
    cmd->add_option("--base-channels", base_channels, "Stem width C (stage widths C,2C,4C,8C)");
    cmd->add_option("--alpha", alpha, "Center weight of the contrast operators");
    cmd->add_option("--beta", beta, "Neighbor weight of the contrast operators");
    cmd->add_option("--dilation", dilation, "Operator dilation d (neighbor offset in pixels)");
    cmd->add_option("--input-size", input_size, "Square network input size");
    cmd->add_flag("--no-lce", no_lce, "Replace the contrast attention map by identity");
    cmd->add_flag("--lca-on-raw", lca_on_raw,
                  "Compute contrast attention from raw intensities instead of standardized");
  }
};

struct TrainFlags {
  int epochs = 400;
  int batch_size = 16;
  double lr = 0.0005;
  double decay = 0.1;
  std::vector<std::string> milestones_raw;  // default 200,300; '' clears
  CLI::Option* milestones_opt = nullptr;
  std::uint64_t seed = 0;
  int threads = 0;
  bool poly = false;
  bool no_augment = false;

  std::vector<int> milestones() const {
    if (!milestones_opt || milestones_opt->count() == 0) return {200, 300};
    std::vector<int> out;
    for (const auto& tok : milestones_raw) {
      if (tok.empty()) continue;
      size_t pos = 0;
      int v = 0;
      try {
        v = std::stoi(tok, &pos);
      } catch (const std::exception&) {
        throw ConfigError("train: bad milestone '" + tok + "'");
      }
      if (pos != tok.size()) throw ConfigError("train: bad milestone '" + tok + "'");
      out.push_back(v);
    }
    return out;
  }

  train::TrainConfig to_config(int crop) const {
    train::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.lr0 = lr;
    cfg.decay_factor = decay;
    cfg.milestones = milestones();
    cfg.seed = seed;
    cfg.threads = threads;
    cfg.lr_mode = poly ? train::TrainConfig::LrMode::poly : train::TrainConfig::LrMode::step;
    cfg.augment = !no_augment;
    cfg.crop = crop;
    return cfg;
  }

  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", epochs, "Training epochs");
    cmd->add_option("--batch-size", batch_size, "Mini-batch size");
    cmd->add_option("--lr", lr, "Initial learning rate");
    cmd->add_option("--decay", decay, "Learning-rate decay factor per milestone");
    milestones_opt = cmd->add_option("--milestones", milestones_raw,
                                     "Decay epochs, comma separated ('' for none; default 200,300)")
                         ->delimiter(',');
    cmd->add_option("--seed", seed, "Global seed");
    cmd->add_option("--threads", threads, "Worker threads (0 = hardware)");
    cmd->add_flag("--poly", poly, "Polynomial learning-rate decay instead of step decay");
    cmd->add_flag("--no-augment", no_augment, "Disable random crop/flip augmentation");
  }
};

void write_raw_values(const std::string& path, const Plane<double>& values) {
  std::ofstream out(path);
  if (!out) throw IoError("attend: cannot write raw values to " + path);
  out << values.rows() << " " << values.cols() << "\n";
  char buf[40];
  for (Index y = 0; y < values.rows(); ++y) {
    for (Index x = 0; x < values.cols(); ++x) {
      std::snprintf(buf, sizeof(buf), "%.17g", values(y, x));
      out << buf << (x + 1 == values.cols() ? "" : " ");
    }
    out << "\n";
  }
}

int cmd_attend(const std::string& in, const std::string& out, const std::string& raw_out,
               double alpha, double beta, int dilation, bool on_raw) {
  const lca::LcaParams params{alpha, beta, dilation};
  const Image<double> img = data::read_pgm(in);
  const Image<double> src = on_raw ? img : data::standardize(img);
  const Plane<double> weights = lca::lca_map(src, params);
  data::write_pgm(out, (weights.array() * 255.0).matrix());
  if (!raw_out.empty()) write_raw_values(raw_out, weights);
  std::cout << "wrote " << out;
  if (!raw_out.empty()) std::cout << " and " << raw_out;
  std::cout << "\n";
  return 0;
}

struct SynthFlags {
  std::string out;
  int count = 0;
  std::uint64_t seed = 0;
  int size = 256;
  int min_targets = 1;
  int max_targets = 3;
  double amp_min = 60.0, amp_max = 180.0;
  double sigma_min = 0.5, sigma_max = 2.0;
  bool no_clutter = false;
  double test_fraction = 0.2;
};

int cmd_synth(const SynthFlags& f) {
  if (f.count < 0) throw ConfigError("synth: count must be non-negative");
  if (f.test_fraction < 0.0 || f.test_fraction > 1.0)
    throw ConfigError("synth: test fraction must lie in [0,1]");
  std::vector<data::Sample> samples;
  std::vector<data::ManifestEntry> manifest;
  const Rng root(f.seed);
  const int n_test = static_cast<int>(f.count * f.test_fraction + 0.5);
  const int n_train = f.count - n_test;
  for (int i = 0; i < f.count; ++i) {
    data::SynthSpec spec;
    spec.height = spec.width = f.size;
    spec.min_targets = f.min_targets;
    spec.max_targets = f.max_targets;
    spec.amp_min = f.amp_min;
    spec.amp_max = f.amp_max;
    spec.sigma_min = f.sigma_min;
    spec.sigma_max = f.sigma_max;
    spec.clutter = !f.no_clutter;
    spec.seed = root.stream(static_cast<std::uint64_t>(i)).seed();
    auto s = data::synth_generate(spec);
    char id[32];
    std::snprintf(id, sizeof(id), "s%05d", i);
    s.id = id;
    manifest.push_back({s.id, i < n_train ? data::Subset::train : data::Subset::test});
    samples.push_back(std::move(s));
  }
  data::write_dataset(f.out, samples, manifest);
  std::cout << "wrote " << f.count << " samples (" << n_train << " train, " << n_test
            << " test) under " << f.out << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir, const ModelFlags& mf,
              const TrainFlags& tf, const std::string& resume) {
  const auto train_set = data::load_dataset(data_dir, data::Subset::train);
  const auto test_set = data::load_dataset(data_dir, data::Subset::test);
  if (train_set.empty()) throw InputError("train: no training samples in " + data_dir);

  std::error_code ec;
  fs::create_directories(out_dir, ec);

  model::ModelConfig mcfg = mf.to_config();
  model::LcaeNet<float> net =
      resume.empty() ? model::LcaeNet<float>(mcfg, tf.seed)
                     : model::load_checkpoint<float>(resume);
  const train::TrainConfig tcfg = tf.to_config(net.config().input_height);

  const auto result = train::train_loop(net, train_set, test_set, tcfg,
                                        [](const train::EpochLog& e) {
                                          std::printf("epoch %d lr %.6g loss %.6f iou %.4f "
                                                      "pd %.4f fa %.3g\n",
                                                      e.epoch, e.lr, e.loss, e.iou, e.pd, e.fa);
                                          std::fflush(stdout);
                                        });

  const std::string ckpt = (fs::path(out_dir) / "checkpoint.ckpt").string();
  model::save_checkpoint(net, ckpt);
  train::write_train_log((fs::path(out_dir) / "train_log.tsv").string(), result.log);
  if (!test_set.empty()) {
    const auto rep = train::evaluate_model(net, test_set, tcfg.threads);
    metrics::write_report((fs::path(out_dir) / "eval.txt").string(), rep);
    std::cout << metrics::report_header() << "\n" << metrics::report_row(rep) << "\n";
  }
  std::cout << "checkpoint " << ckpt << " (best epoch " << result.best_epoch << ")\n";
  return 0;
}

std::vector<data::Sample> load_subset(const std::string& dir, const std::string& subset) {
  if (subset == "train") return data::load_dataset(dir, data::Subset::train);
  if (subset == "test") return data::load_dataset(dir, data::Subset::test);
  if (subset == "all") {
    auto s = data::load_dataset(dir, data::Subset::train);
    auto t = data::load_dataset(dir, data::Subset::test);
    s.insert(s.end(), t.begin(), t.end());
    return s;
  }
  throw ConfigError("subset must be train, test or all");
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& subset,
             const std::string& out, bool per_image, int threads) {
  const auto net = model::load_checkpoint<float>(ckpt);
  const auto samples = load_subset(data_dir, subset);
  if (samples.empty()) throw InputError("eval: no samples in subset " + subset);
  const auto rep = train::evaluate_model(net, samples, threads);
  std::cout << metrics::report_header() << "\n" << metrics::report_row(rep) << "\n";
  if (per_image) {
    // recompute with per-image averaging for comparison
    std::vector<Mask> preds, gts;
    for (const auto& s : samples) {
      data::Sample std_s = s;
      std_s.image = data::standardize(std_s.image);
      std_s = data::pad_crop(std_s, net.config().input_height, net.config().input_width, nullptr);
      const auto raw_s = data::pad_crop(s, net.config().input_height, net.config().input_width,
                                        nullptr);
      const Image<float> img = std_s.image.cast<float>();
      const Image<float> raw = raw_s.image.cast<float>();
      preds.push_back(model::predict(net.infer(img, &raw), 0.5));
      gts.push_back(std_s.mask);
    }
    std::cout << "iou_per_image " << metrics::iou_per_image(preds, gts) << "\n";
  }
  if (!out.empty()) metrics::write_report(out, rep);
  return 0;
}

int cmd_roc(const std::string& ckpt, const std::string& data_dir, const std::string& subset,
            const std::string& out, std::vector<double> thresholds, int threads) {
  const auto net = model::load_checkpoint<float>(ckpt);
  const auto samples = load_subset(data_dir, subset);
  if (samples.empty()) throw InputError("roc: no samples in subset " + subset);
  if (thresholds.empty())
    for (int i = 20; i >= 0; --i) thresholds.push_back(i / 20.0);
  for (double t : thresholds)
    if (t < 0.0 || t > 1.0) throw ConfigError("roc: thresholds must lie in [0,1]");

  const int n = static_cast<int>(samples.size());
  std::vector<Plane<double>> probs(n);
  std::vector<Mask> gts(n);
  train::detail::parallel_for(n, train::detail::resolve_threads(threads), [&](int i) {
    data::Sample std_s = samples[i];
    std_s.image = data::standardize(std_s.image);
    std_s = data::pad_crop(std_s, net.config().input_height, net.config().input_width, nullptr);
    const auto raw_s = data::pad_crop(samples[i], net.config().input_height,
                                      net.config().input_width, nullptr);
    const Image<float> img = std_s.image.cast<float>();
    const Image<float> raw = raw_s.image.cast<float>();
    probs[i] = net.infer(img, &raw).cast<double>();
    gts[i] = std_s.mask;
  });
  const auto points = metrics::roc(probs, gts, thresholds);
  metrics::write_roc(out, points);
  std::cout << "# threshold fa pd\n";
  for (const auto& p : points) std::printf("%.4f %.9g %.9g\n", p.threshold, p.fa, p.pd);
  return 0;
}

struct SweepFlags {
  std::string data_dir, out;
  std::vector<int> d_values{1, 2, 3, 4};
  std::vector<double> alpha_values{1.0, 1.5, 2.0};
  std::vector<double> beta_values{0.5, 1.0};
  int epochs = 10;           // desk-scale override; --full-budget restores 400
  int base_channels = 8;
  int input_size = 64;
  int batch_size = 16;
  std::uint64_t seed = 0;
  int jobs = 1;
  int threads = 1;
  bool full_budget = false;
  bool ablation = false;
  int ablation_seeds = 3;
};

train::TrainConfig sweep_train_config(const SweepFlags& f) {
  train::TrainConfig t;
  t.epochs = f.full_budget ? 400 : f.epochs;
  t.batch_size = f.batch_size;
  t.seed = f.seed;
  t.threads = f.threads;
  t.crop = f.input_size;
  if (!f.full_budget) t.milestones = {};
  return t;
}

int cmd_sweep(const SweepFlags& f) {
  if (f.d_values.empty() || f.alpha_values.empty() || f.beta_values.empty())
    throw ConfigError("sweep: hyperparameter grid must be non-empty");
  const auto train_set = data::load_dataset(f.data_dir, data::Subset::train);
  const auto test_set = data::load_dataset(f.data_dir, data::Subset::test);
  if (train_set.empty() || test_set.empty())
    throw InputError("sweep: dataset must contain train and test subsets");

  if (f.ablation) {
    const auto rep = train::lce_ablation<float>(
        [&] {
          model::ModelConfig m;
          m.base_channels = f.base_channels;
          m.input_height = m.input_width = f.input_size;
          return m;
        }(),
        sweep_train_config(f), train_set, test_set, f.ablation_seeds);
    std::cout << "seed\tiou_lce_on\tiou_lce_off\tdelta\n";
    for (const auto& r : rep.rows)
      std::printf("%d\t%.6f\t%.6f\t%+.6f\n", r.seed, r.iou_on, r.iou_off, r.iou_on - r.iou_off);
    std::printf("median_iou_delta\t%+.6f\n", rep.median_delta);
    if (!f.out.empty()) {
      std::ofstream os(f.out);
      if (!os) throw IoError("sweep: cannot write " + f.out);
      os << "seed\tiou_lce_on\tiou_lce_off\tdelta\n";
      for (const auto& r : rep.rows)
        os << r.seed << "\t" << r.iou_on << "\t" << r.iou_off << "\t" << (r.iou_on - r.iou_off)
           << "\n";
      os << "median_iou_delta\t" << rep.median_delta << "\n";
    }
    return 0;
  }

  struct Row {
    int d;
    double alpha, beta;
    metrics::EvalReport rep;
  };
  std::vector<Row> rows;
  for (int d : f.d_values)
    for (double a : f.alpha_values)
      for (double b : f.beta_values) rows.push_back({d, a, b, {}});

  train::detail::parallel_for(static_cast<int>(rows.size()), std::max(1, f.jobs), [&](int i) {
    model::ModelConfig m;
    m.base_channels = f.base_channels;
    m.input_height = m.input_width = f.input_size;
    m.lca_params = {rows[i].alpha, rows[i].beta, rows[i].d};
    model::LcaeNet<float> net(m, f.seed);
    auto tcfg = sweep_train_config(f);
    train::train_loop(net, train_set, test_set, tcfg);
    rows[i].rep = train::evaluate_model(net, test_set, tcfg.threads);
  });

  size_t best_iou = 0, best_pd = 0, best_fa = 0;
  for (size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].rep.iou > rows[best_iou].rep.iou) best_iou = i;
    if (rows[i].rep.pd > rows[best_pd].rep.pd) best_pd = i;
    if (rows[i].rep.fa < rows[best_fa].rep.fa) best_fa = i;
  }

  auto emit = [&](std::ostream& os) {
    os << "d\talpha\tbeta\tiou\tpd\tfa\tbest\n";
    for (size_t i = 0; i < rows.size(); ++i) {
      std::string marks;
      if (i == best_iou) marks += "iou ";
      if (i == best_pd) marks += "pd ";
      if (i == best_fa) marks += "fa";
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%d\t%g\t%g\t%.6f\t%.6f\t%.6g\t%s\n", rows[i].d,
                    rows[i].alpha, rows[i].beta, rows[i].rep.iou, rows[i].rep.pd, rows[i].rep.fa,
                    marks.c_str());
      os << buf;
    }
  };
  emit(std::cout);
  if (!f.out.empty()) {
    std::ofstream os(f.out);
    if (!os) throw IoError("sweep: cannot write " + f.out);
    emit(os);
  }
  return 0;
}

int cmd_bench(const ModelFlags& mf, double seconds, std::uint64_t seed) {
  model::ModelConfig cfg = mf.to_config();
  model::LcaeNet<float> net(cfg, seed);
  std::cout << "params " << net.count_params() << "\n";
  std::cout << "flops " << net.count_flops(cfg.input_height, cfg.input_width) << "\n";

  data::SynthSpec spec;
  spec.height = cfg.input_height;
  spec.width = cfg.input_width;
  spec.seed = seed;
  const auto sample = data::synth_generate(spec);
  const Image<float> img = data::standardize(sample.image).cast<float>();
  const Image<float> raw = sample.image.cast<float>();

  net.infer(img, &raw);  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  int iters = 0;
  double elapsed = 0.0;
  while (elapsed < seconds) {
    net.infer(img, &raw);
    ++iters;
    elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  std::printf("throughput_ips %.3f\n", iters / elapsed);
  std::printf("images %d seconds %.3f\n", iters, elapsed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lcae: contrast-attention infrared small-target detection toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "Key=value config file with [subcommand] sections; flags win");

  // attend
  auto* attend = app.add_subcommand("attend", "Emit the contrast attention map for an image");
  std::string at_in, at_out, at_raw_out;
  double at_alpha = 1.0, at_beta = 0.5;
  int at_d = 1;
  bool at_on_raw = false;
  attend->add_option("--in", at_in, "Input grayscale PGM")->required();
  attend->add_option("--out", at_out, "Output 8-bit PGM attention map")->required();
  attend->add_option("--raw-out", at_raw_out, "Optional full-precision values file");
  attend->add_option("--alpha", at_alpha, "Center weight");
  attend->add_option("--beta", at_beta, "Neighbor weight");
  attend->add_option("--dilation", at_d, "Neighbor offset in pixels");
  attend->add_flag("--raw", at_on_raw, "Skip standardization, use raw intensities");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene dataset");
  SynthFlags sf;
  synth->add_option("--out", sf.out, "Output dataset directory")->required();
  synth->add_option("--count", sf.count, "Number of samples")->required();
  synth->add_option("--seed", sf.seed, "Generator seed");
  synth->add_option("--size", sf.size, "Square image size");
  synth->add_option("--min-targets", sf.min_targets, "Minimum targets per image");
  synth->add_option("--max-targets", sf.max_targets, "Maximum targets per image");
  synth->add_option("--amp-min", sf.amp_min, "Minimum target amplitude");
  synth->add_option("--amp-max", sf.amp_max, "Maximum target amplitude");
  synth->add_option("--sigma-min", sf.sigma_min, "Minimum target sigma");
  synth->add_option("--sigma-max", sf.sigma_max, "Maximum target sigma");
  synth->add_flag("--no-clutter", sf.no_clutter, "Disable bright clutter ridges");
  synth->add_option("--test-fraction", sf.test_fraction, "Fraction assigned to the test subset");

  // train
  auto* tr = app.add_subcommand("train", "Train a detector on a dataset directory");
  std::string tr_data, tr_out, tr_resume;
  ModelFlags tr_model;
  TrainFlags tr_flags;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--resume", tr_resume, "Resume from checkpoint (model flags are ignored)");
  tr_model.attach(tr);
  tr_flags.attach(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_subset = "test", ev_out;
  bool ev_per_image = false;
  int ev_threads = 0;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--subset", ev_subset, "train, test or all");
  ev->add_option("--out", ev_out, "Write the structured report here");
  ev->add_flag("--per-image-iou", ev_per_image, "Also report per-image-averaged IoU");
  ev->add_option("--threads", ev_threads, "Worker threads (0 = hardware)");

  // roc
  auto* rc = app.add_subcommand("roc", "Sweep thresholds and emit (fa, pd) points");
  std::string rc_ckpt, rc_data, rc_subset = "test", rc_out = "roc.txt";
  std::vector<double> rc_thresholds;
  int rc_threads = 0;
  rc->add_option("--checkpoint", rc_ckpt, "Checkpoint file")->required();
  rc->add_option("--data", rc_data, "Dataset directory")->required();
  rc->add_option("--subset", rc_subset, "train, test or all");
  rc->add_option("--out", rc_out, "Output two-column table");
  rc->add_option("--thresholds", rc_thresholds, "Explicit threshold list")->delimiter(',');
  rc->add_option("--threads", rc_threads, "Worker threads (0 = hardware)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Hyperparameter grid or LCE ablation at desk scale");
  SweepFlags swf;
  sw->add_option("--data", swf.data_dir, "Dataset directory")->required();
  sw->add_option("--out", swf.out, "Write the results table here");
  sw->add_option("--d-values", swf.d_values, "Dilations to sweep")->delimiter(',');
  sw->add_option("--alpha-values", swf.alpha_values, "Alphas to sweep")->delimiter(',');
  sw->add_option("--beta-values", swf.beta_values, "Betas to sweep")->delimiter(',');
  sw->add_option("--epochs", swf.epochs, "Desk-scale epochs per combination");
  sw->add_option("--base-channels", swf.base_channels, "Desk-scale width");
  sw->add_option("--input-size", swf.input_size, "Desk-scale input size");
  sw->add_option("--batch-size", swf.batch_size, "Mini-batch size");
  sw->add_option("--seed", swf.seed, "Seed shared by all combinations");
  sw->add_option("--jobs", swf.jobs, "Combinations trained in parallel");
  sw->add_option("--threads", swf.threads, "Threads per training");
  sw->add_flag("--full-budget", swf.full_budget, "Use the full 400-epoch training protocol");
  sw->add_flag("--ablation", swf.ablation, "Report LCE-on vs LCE-off instead of the grid");
  sw->add_option("--ablation-seeds", swf.ablation_seeds, "Seeds for the ablation");

  // bench
  auto* be = app.add_subcommand("bench", "Report parameters, FLOPs and throughput");
  ModelFlags be_model;
  double be_seconds = 3.0;
  std::uint64_t be_seed = 0;
  be_model.attach(be);
  be->add_option("--seconds", be_seconds, "Timed loop duration");
  be->add_option("--seed", be_seed, "Seed for weights and the benchmark scene");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*attend) return cmd_attend(at_in, at_out, at_raw_out, at_alpha, at_beta, at_d, at_on_raw);
    if (*synth) return cmd_synth(sf);
    if (*tr) return cmd_train(tr_data, tr_out, tr_model, tr_flags, tr_resume);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_subset, ev_out, ev_per_image, ev_threads);
    if (*rc) return cmd_roc(rc_ckpt, rc_data, rc_subset, rc_out, rc_thresholds, rc_threads);
    if (*sw) return cmd_sweep(swf);
    if (*be) return cmd_bench(be_model, be_seconds, be_seed);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {  // Io, Input, Dimension
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}

#include "hair/cli.hpp"

#include "hair/checks.hpp"
#include "hair/config.hpp"
#include "hair/image_io.hpp"
#include "hair/training.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace hair {

namespace {

namespace fs = std::filesystem;

struct SampleSource {
  std::string data_dir;
  std::string synthetic;
  int count = 20;
  Index size = 64;
  std::uint64_t seed = 12345;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Manifest rows: id,source,spec where source is "seed:<n>" (procedural) or a
// PPM path relative to the manifest directory.
std::vector<Sample> manifest_samples(const SampleSource& src) {
  const fs::path manifest = fs::path(src.data_dir) / "manifest.csv";
  std::ifstream in(manifest);
  if (!in) throw std::ios_base::failure("cannot open manifest '" + manifest.string() + "'");
  std::string line;
  std::getline(in, line);
  if (split_csv_line(line) != std::vector<std::string>{"id", "source", "spec"})
    throw std::invalid_argument(manifest.string() + ": expected header 'id,source,spec'");
  std::vector<Sample> out;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto cells = split_csv_line(line);
    if (cells.size() != 3) throw std::invalid_argument(manifest.string() + ": row " + std::to_string(row) + " needs 3 cells");
    Image clean;
    if (cells[1].rfind("seed:", 0) == 0) {
      std::uint64_t seed = 0;
      const std::string v = cells[1].substr(5);
      auto res = std::from_chars(v.data(), v.data() + v.size(), seed);
      if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
        throw std::invalid_argument(manifest.string() + ": bad seed in row " + std::to_string(row));
      clean = gen_clean(seed, src.size, src.size);
    } else {
      clean = read_ppm((fs::path(src.data_dir) / cells[1]).string());
    }
    out.push_back(compose(clean, parse_degradation_chain(cells[2]), derive_seed(src.seed, row), cells[0]));
  }
  if (out.empty()) throw std::invalid_argument(manifest.string() + ": no samples");
  return out;
}

std::vector<Sample> synthetic_samples(const SampleSource& src) {
  const auto tasks = parse_task_list(src.synthetic);
  if (src.count < 1) throw std::invalid_argument("--count must be >= 1");
  if (src.size < 16) throw std::invalid_argument("--size must be >= 16");
  std::vector<Image> clean;
  for (int i = 0; i < src.count; ++i) clean.push_back(gen_clean(derive_seed(src.seed, i), src.size, src.size));
  std::vector<Sample> out;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const std::uint64_t task_seed = derive_seed(derive_seed(src.seed, 0x7461736bULL), k);
    for (int i = 0; i < src.count; ++i) {
      std::mt19937_64 rng(derive_seed(task_seed, i));
      auto specs = tasks[k].sample(rng);
      out.push_back(compose(clean[i], std::move(specs), rng(), tasks[k].label + "/" + std::to_string(i)));
    }
  }
  return out;
}

std::vector<Sample> load_samples(const SampleSource& src) {
  if (src.data_dir.empty() == src.synthetic.empty())
    throw std::invalid_argument("exactly one of --data and --synthetic is required");
  return src.data_dir.empty() ? synthetic_samples(src) : manifest_samples(src);
}

void add_source_options(CLI::App* cmd, SampleSource& src) {
  cmd->add_option("--data", src.data_dir, "Directory with manifest.csv (id,source,spec)");
  cmd->add_option("--synthetic", src.synthetic, "';'-separated degradation tasks on procedural images");
  cmd->add_option("--count", src.count, "Synthetic images per task");
  cmd->add_option("--size", src.size, "Synthetic image size");
  cmd->add_option("--seed", src.seed, "Seed for synthetic images and degradations");
}

// Writes to `path`, or to `out` when the path is empty or "-".
template <typename Fn>
void emit(const std::string& path, std::ostream& out, Fn&& write) {
  if (path.empty() || path == "-") {
    write(out);
    return;
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::ios_base::failure("cannot write '" + path + "'");
  write(file);
  file.flush();
  if (!file) throw std::ios_base::failure("write failed for '" + path + "'");
}

std::string shortest(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

int cmd_train(const std::string& config_path, const std::string& output_override, bool quiet, std::ostream& out,
              std::ostream& err) {
  RunConfig config = load_config(config_path);
  if (!output_override.empty()) config.output_dir = output_override;
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw std::ios_base::failure("cannot create output directory '" + config.output_dir + "': " + ec.message());
  const Dataset data = make_dataset(config);

  TrainOptions options;
  options.checkpoint_path = (fs::path(config.output_dir) / "checkpoint.hair").string();
  options.log_path = (fs::path(config.output_dir) / "log.csv").string();
  if (!quiet) {
    options.on_log = [&](const LogRow& row) {
      err << "step " << row.step << "/" << config.total_steps() << " lr " << row.lr << " loss " << row.train_loss;
      if (row.has_eval) {
        for (const auto& r : row.eval.rows())
          err << " | " << r.label << " " << format_metric(r.mean_psnr()) << " dB " << format_metric(r.mean_ssim());
      }
      err << '\n';
    };
  }
  const TrainResult result = train_loop(config, data, options);
  out << "trained " << result.steps << " steps; checkpoint " << options.checkpoint_path << ", log " << options.log_path
      << '\n';
  return kExitOk;
}

int cmd_restore(const std::string& ckpt_path, const std::string& in_path, const std::string& out_path) {
  const Model<float> model = restore_model(load_checkpoint(ckpt_path));
  write_ppm(restore_image(model, read_ppm(in_path)), out_path);
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const SampleSource& src, const std::string& out_path, std::ostream& out,
             std::ostream& err) {
  const Model<float> model = restore_model(load_checkpoint(ckpt_path));
  const auto samples = load_samples(src);
  MetricsReport report = evaluate(model, samples);
  if (model.desc().hyper()) {
    for (const auto& [label, ratio] : giv_midpoint_report(compute_givs(model, samples))) report.set_giv_midpoint(label, ratio);
  }
  const MetricsReport degraded = evaluate_degraded(samples);
  for (const auto& r : degraded.rows())
    err << r.label << ": degraded input " << format_metric(r.mean_psnr()) << " dB, restored "
        << format_metric(report.row(r.label).mean_psnr()) << " dB\n";
  emit(out_path, out, [&](std::ostream& os) { report.write_csv(os); });
  return kExitOk;
}

int cmd_giv(const std::string& ckpt_path, const SampleSource& src, const std::string& out_path, std::ostream& out) {
  const Model<float> model = restore_model(load_checkpoint(ckpt_path));
  if (!model.desc().hyper()) throw std::invalid_argument("checkpoint model has no degradation-aware classifier");
  const auto samples = load_samples(src);
  emit(out_path, out, [&](std::ostream& os) {
    os << "id,label";
    for (Index i = 0; i < model.desc().giv_length(); ++i) os << ",v_" << i;
    os << '\n';
    for (const auto& s : samples) {
      const Index h = s.degraded.dim(1), w = s.degraded.dim(2);
      const Tensor<float> giv = model.giv(Var<float>(s.degraded.reshaped({1, 3, h, w}))).value();
      os << s.id << ',' << chain_label(s.specs);
      for (Index i = 0; i < giv.size(); ++i) os << ',' << shortest(giv[i]);
      os << '\n';
    }
  });
  return kExitOk;
}

int cmd_check(const std::string& suite, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  const auto reports = run_suites(suite, seed);
  const CheckResult* failed = nullptr;
  std::string failed_suite;
  for (const auto& report : reports) {
    for (const auto& r : report.results) {
      out << (r.passed ? "PASS " : "FAIL ") << report.suite << ": " << r.name << " (" << r.detail << ")\n";
      if (!r.passed && !failed) {
        failed = &r;
        failed_suite = report.suite;
      }
    }
  }
  if (failed) {
    err << "invariant failed: " << failed_suite << ": " << failed->name << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hypernetwork-based all-in-one image restoration"};
  app.name("hair");
  app.require_subcommand(1);

  std::string config_path, output_override;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config_path, "key=value run configuration")->required();
  train->add_option("--output-dir", output_override, "Override the config's output_dir");
  train->add_flag("--quiet", quiet, "No progress output");

  std::string ckpt, in_path, out_path;
  auto* restore = app.add_subcommand("restore", "Restore one PPM image");
  restore->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  restore->add_option("--in", in_path, "Degraded input (binary PPM)")->required();
  restore->add_option("--out", out_path, "Restored output (binary PPM)")->required();

  SampleSource eval_src, giv_src;
  std::string eval_out, giv_out;
  auto* eval = app.add_subcommand("eval", "Per-degradation PSNR/SSIM report (CSV)");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--out", eval_out, "Report path (default: stdout)");
  add_source_options(eval, eval_src);

  auto* giv = app.add_subcommand("giv", "Export degradation embeddings (CSV)");
  giv->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  giv->add_option("--out", giv_out, "CSV path (default: stdout)");
  add_source_options(giv, giv_src);

  std::string suite = "all";
  std::uint64_t check_seed = 0;
  auto* check = app.add_subcommand("check", "Run property suites");
  check->add_option("--suite", suite, "distributivity|gradients|invariants|all")
      ->check(CLI::IsMember(suite_names()));
  check->add_option("--seed", check_seed, "Seed for random draws");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalidConfig;
  }

  try {
    if (*train) return cmd_train(config_path, output_override, quiet, out, err);
    if (*restore) return cmd_restore(ckpt, in_path, out_path);
    if (*eval) return cmd_eval(ckpt, eval_src, eval_out, out, err);
    if (*giv) return cmd_giv(ckpt, giv_src, giv_out, out);
    if (*check) return cmd_check(suite, check_seed, out, err);
  } catch (const ConfigError& e) {
    err << "invalid config: " << e.what() << '\n';
    return kExitInvalidConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitMissingFile;
  } catch (const ImageIoError& e) {
    err << "image error: " << e.what() << '\n';
    return kExitMissingFile;
  } catch (const std::ios_base::failure& e) {
    err << "file error: " << e.what() << '\n';
    return kExitMissingFile;
  } catch (const fs::filesystem_error& e) {
    err << "file error: " << e.what() << '\n';
    return kExitMissingFile;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kExitInvalidConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace hair

// deepcaps command line: train, eval, ensemble, perturb, variance, bench, inspect.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "deepcaps/harness.hpp"

using namespace deepcaps;
namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string data_dir;
  std::string out_dir;
  std::vector<std::string> checkpoints;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)");
  cmd->add_option("--seed", o.seed, "Seed overriding the config");
  cmd->add_flag("--deterministic", o.deterministic, "Force deterministic mode");
  cmd->add_option("--data-dir", o.data_dir, "Dataset directory overriding the config");
  cmd->add_option("--out-dir", o.out_dir, "Output directory overriding the config");
  cmd->add_option("--checkpoint", o.checkpoints, "Checkpoint file (repeatable for ensemble)");
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.deterministic) c.deterministic = true;
  if (!o.data_dir.empty()) c.dataset.dir = o.data_dir;
  if (!o.out_dir.empty()) c.out_dir = o.out_dir;
  return c;
}

const std::string& single_checkpoint(const CommonOptions& o) {
  if (o.checkpoints.size() != 1) throw ConfigError("expected exactly one --checkpoint");
  return o.checkpoints.front();
}

Dataset split_data(const RunConfig& c, const std::string& split, std::size_t limit) {
  if (split != "train" && split != "test") throw ConfigError("--split must be train or test");
  DatasetConfig dc = c.dataset;
  if (limit) (split == "train" ? dc.train_limit : dc.test_limit) = limit;
  return load_dataset(dc, split == "train");
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("not a non-negative integer list: '" + text + "'");
    }
  }
  return out;
}

void print_layers(const Model<float>& model) {
  std::printf("%-24s %-20s %12s\n", "layer", "output", "params");
  for (const LayerInfo& l : model.layer_table()) {
    std::printf("%-24s %-20s %12zu\n", l.name.c_str(), l.output.c_str(), l.params);
  }
  std::printf("trainable parameters: %zu\n", model.parameter_count());
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training reallocates the same large activation buffers every step; keep
  // freed memory in the heap instead of returning it to the kernel.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
  CLI::App app{"DeepCaps capsule network engine"};
  app.require_subcommand(1);
  CommonOptions common;

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model and write metrics and checkpoints");
  add_common(train_cmd, common);
  std::optional<std::size_t> epochs, train_limit, test_limit, log_every;
  train_cmd->add_option("--epochs", epochs, "Epoch count overriding the config");
  train_cmd->add_option("--train-limit", train_limit, "Use only the first N training samples");
  train_cmd->add_option("--test-limit", test_limit, "Use only the first N test samples");
  train_cmd->add_option("--log-every", log_every, "Progress line every N batches");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy and confusion matrix of a checkpoint");
  add_common(eval_cmd, common);
  std::string split = "test";
  std::size_t limit = 0;
  eval_cmd->add_option("--split", split, "train or test");
  eval_cmd->add_option("--limit", limit, "Use only the first N samples");

  // ensemble
  auto* ens_cmd = app.add_subcommand("ensemble", "Accuracy of the mean class norms of several checkpoints");
  add_common(ens_cmd, common);
  ens_cmd->add_option("--split", split, "train or test");
  ens_cmd->add_option("--limit", limit, "Use only the first N samples");

  // perturb
  auto* perturb_cmd = app.add_subcommand("perturb", "Sweep one activity dimension and write an image grid");
  add_common(perturb_cmd, common);
  std::size_t dim = 28, steps = 11;
  double lo = -0.075, hi = 0.075;
  std::string samples, mode = "offset", image_out;
  perturb_cmd->add_option("--dim", dim, "Activity dimension, 1-indexed");
  perturb_cmd->add_option("--lo", lo, "Sweep start");
  perturb_cmd->add_option("--hi", hi, "Sweep end");
  perturb_cmd->add_option("--steps", steps, "Sweep steps");
  perturb_cmd->add_option("--mode", mode, "replace or offset");
  perturb_cmd->add_option("--samples", samples, "Comma-separated test indices (default: first of each class)");
  perturb_cmd->add_option("--out", image_out, "Output PGM/PPM path");

  // variance
  auto* var_cmd = app.add_subcommand("variance", "Rank activity dimensions by variance");
  add_common(var_cmd, common);
  std::string csv_out;
  bool grids = false;
  var_cmd->add_option("--split", split, "train or test");
  var_cmd->add_option("--limit", limit, "Use only the first N samples");
  var_cmd->add_option("--out", csv_out, "CSV output path");
  var_cmd->add_flag("--grids", grids, "Also write sweep grids for the highest and lowest variance dims");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Per-image inference latency");
  add_common(bench_cmd, common);
  std::string batch_sizes = "1,8,32";
  std::size_t iterations = 100, warmup = 10;
  bench_cmd->add_option("--batch-sizes", batch_sizes, "Comma-separated batch sizes");
  bench_cmd->add_option("--iters", iterations, "Timed iterations per batch size");
  bench_cmd->add_option("--warmup", warmup, "Untimed iterations per batch size");

  // inspect
  auto* inspect_cmd = app.add_subcommand("inspect", "Parameter count and layer table");
  add_common(inspect_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: UsageError: %s\n", e.what());
    return 64;
  }

  try {
    RunConfig config = resolve_config(common);

    if (train_cmd->parsed()) {
      if (common.config.empty()) throw ConfigError("train needs --config");
      if (epochs) config.epochs = *epochs;
      if (train_limit) config.dataset.train_limit = *train_limit;
      if (test_limit) config.dataset.test_limit = *test_limit;
      if (log_every) config.log_every = *log_every;
      const Dataset train_set = load_dataset(config.dataset, true);
      const Dataset test_set = load_dataset(config.dataset, false);
      fs::create_directories(config.out_dir);
      {
        std::ofstream cfg(config.out_dir / "config.json");
        cfg << run_config_to_json(config).dump(2) << "\n";
      }
      std::printf("training on %zu samples, testing on %zu\n", train_set.size(), test_set.size());
      std::fflush(stdout);
      const TrainResult r = train(config, train_set, test_set, &std::cout);
      std::printf("best test accuracy %.4f\nmetrics %s\ncheckpoints %s %s\n", r.best_test_acc,
                  r.metrics_path.string().c_str(), r.last_checkpoint.string().c_str(),
                  r.best_checkpoint.string().c_str());
      return 0;
    }

    if (eval_cmd->parsed()) {
      const Checkpoint ckpt = read_checkpoint(single_checkpoint(common));
      auto model = model_from_checkpoint(ckpt);
      const Dataset data = split_data(config, split, limit);
      const EvalResult r = evaluate(*model, data, config.eval_batch_size);
      std::printf("accuracy %.6f (%zu/%zu)\nconfusion (rows = true class):\n", r.accuracy, r.correct, r.total);
      std::string csv;
      for (const auto& row : r.confusion) {
        std::string line;
        for (std::size_t c = 0; c < row.size(); ++c) line += (c ? "," : "") + std::to_string(row[c]);
        std::printf("%s\n", line.c_str());
        csv += line + "\n";
      }
      if (!common.out_dir.empty()) {
        fs::create_directories(config.out_dir);
        std::ofstream(config.out_dir / "confusion.csv") << csv;
      }
      return 0;
    }

    if (ens_cmd->parsed()) {
      if (common.checkpoints.empty()) throw ConfigError("ensemble needs at least one --checkpoint");
      std::vector<Checkpoint> members;
      for (const auto& path : common.checkpoints) members.push_back(read_checkpoint(path));
      const Dataset data = split_data(config, split, limit);
      const EvalResult r = ensemble_predict(members, data, config.eval_batch_size);
      std::printf("ensemble of %zu: accuracy %.6f (%zu/%zu)\n", members.size(), r.accuracy, r.correct, r.total);
      return 0;
    }

    if (perturb_cmd->parsed()) {
      const Checkpoint ckpt = read_checkpoint(single_checkpoint(common));
      auto model = model_from_checkpoint(ckpt);
      const Dataset data = split_data(config, "test", 0);
      if (dim == 0) throw ValueError("perturb: --dim is 1-indexed");
      PerturbRequest req;
      req.samples = samples.empty() ? one_per_class(data) : parse_list(samples);
      req.dim = dim - 1;
      req.lo = lo;
      req.hi = hi;
      req.steps = steps;
      req.mode = parse_perturb_mode(mode);
      const auto grid = perturb_grid(*model, data, req);
      const fs::path out = image_out.empty()
                               ? config.out_dir / ("perturb_dim" + std::to_string(dim) +
                                                   (data.channels == 1 ? ".pgm" : ".ppm"))
                               : fs::path(image_out);
      write_image_grid(out, grid);
      std::printf("wrote %zux%zu grid to %s\n", grid.size(), steps, out.string().c_str());
      return 0;
    }

    if (var_cmd->parsed()) {
      const Checkpoint ckpt = read_checkpoint(single_checkpoint(common));
      auto model = model_from_checkpoint(ckpt);
      const Dataset data = split_data(config, split, limit);
      const auto ranked = variance_rank(winning_vectors(*model, data, config.eval_batch_size));
      const fs::path out = csv_out.empty() ? config.out_dir / "variance.csv" : fs::path(csv_out);
      write_variance_csv(out, ranked);
      std::printf("dim,variance,rank\n");
      for (std::size_t r = 0; r < ranked.size(); ++r) {
        std::printf("%zu,%.10g,%zu\n", ranked[r].first + 1, ranked[r].second, r + 1);
      }
      if (grids) {
        PerturbRequest req;
        req.samples = one_per_class(data);
        for (const auto& [which, entry] : {std::pair{"top", ranked.front()}, std::pair{"bottom", ranked.back()}}) {
          req.dim = entry.first;
          const fs::path path = out.parent_path() / (std::string("sweep_") + which + "_dim" +
                                                     std::to_string(entry.first + 1) +
                                                     (data.channels == 1 ? ".pgm" : ".ppm"));
          write_image_grid(path, perturb_grid(*model, data, req));
          std::printf("wrote %s\n", path.string().c_str());
        }
      }
      return 0;
    }

    if (bench_cmd->parsed() || inspect_cmd->parsed()) {
      std::unique_ptr<Model<float>> model;
      if (!common.checkpoints.empty()) {
        model = model_from_checkpoint(read_checkpoint(single_checkpoint(common)));
      } else if (!common.config.empty()) {
        model = std::make_unique<Model<float>>(config.architecture, config.seed);
      } else {
        throw ConfigError("need --config or --checkpoint");
      }
      if (inspect_cmd->parsed()) {
        print_layers(*model);
        return 0;
      }
      const auto rows = benchmark_inference(*model, parse_list(batch_sizes), iterations, warmup, config.seed);
      std::printf("batch,parameters,mean_ms_per_image,median_ms_per_image,iterations\n");
      for (const auto& r : rows) {
        std::printf("%zu,%zu,%.4f,%.4f,%zu\n", r.batch, r.parameters, r.mean_ms_per_image, r.median_ms_per_image,
                    r.iterations);
      }
      return 0;
    }
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "error: %s: %s\n", e.kind().c_str(), msg.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "error: InternalError: %s\n", msg.c_str());
    return 3;
  }
  return 0;
}

#include "deepcaps/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

namespace deepcaps {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) text += r.csv() + "\n";
  write_text(path, text);
}

// Contiguous [count, H, W, C] slice starting at `first`.
Tensor<float> gather_images(const Dataset& data, std::size_t first, std::size_t count) {
  Tensor<float> out(Shape{count, data.height, data.width, data.channels});
  const std::size_t n = data.image_size();
  std::copy_n(data.pixels.data() + first * n, count * n, out.ptr());
  return out;
}

std::size_t argmax_row(const float* row, std::size_t C) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < C; ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

Json metrics_json(const MetricsRow& r) {
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"train_loss", r.train_loss},
          {"train_acc", r.train_acc},
          {"test_acc", r.test_acc}};
}

}  // namespace

// ---- Adam --------------------------------------------------------------------

Adam::Adam(ParamRegistry<float>& registry, const OptimizerConfig& config) : registry_(registry), config_(config) {
  for (const auto& p : registry_.params()) {
    m_.emplace_back(p.tensor.shape());
    v_.emplace_back(p.tensor.shape());
  }
}

void Adam::step(std::size_t epoch) {
  ++t_;
  const double lr = config_.learning_rate * std::pow(config_.decay, static_cast<double>(epoch));
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const auto step_size = static_cast<float>(lr / c1);
  const auto inv_c2 = static_cast<float>(1.0 / c2);
  const auto eps = static_cast<float>(config_.epsilon);
  const auto fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
  auto& params = registry_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    DTensor<float> p = params[i].tensor;
    if (!p.has_grad()) continue;
    const Tensor<float>& g = p.grad();
    Tensor<float>& w = p.mutable_value();
    Tensor<float>& m = m_[i];
    Tensor<float>& v = v_[i];
    for (std::size_t k = 0; k < w.numel(); ++k) {
      m[k] = fb1 * m[k] + (1.0f - fb1) * g[k];
      v[k] = fb2 * v[k] + (1.0f - fb2) * g[k] * g[k];
      w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
    }
  }
}

// ---- training --------------------------------------------------------------

std::string MetricsRow::csv() const {
  return std::to_string(epoch) + "," + std::to_string(step) + "," + fmt("%.8f", train_loss) + "," +
         fmt("%.8f", train_margin) + "," + fmt("%.8f", train_recon) + "," + fmt("%.6f", train_acc) + "," +
         fmt("%.6f", test_acc) + "," + fmt("%.3f", wall_time_s);
}

TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& test_set, std::ostream* log) {
  const ArchitectureSpec& arch = config.architecture;
  for (const Dataset* ds : {&train_set, &test_set}) {
    if (ds->height != arch.height || ds->width != arch.width || ds->channels != arch.channels) {
      throw ShapeError("train: " + ds->name + "/" + ds->split + " images are " + std::to_string(ds->height) + "x" +
                       std::to_string(ds->width) + "x" + std::to_string(ds->channels) + ", architecture expects " +
                       std::to_string(arch.height) + "x" + std::to_string(arch.width) + "x" +
                       std::to_string(arch.channels));
    }
    if (ds->classes != arch.classes) throw ConfigError("train: dataset class count differs from architecture");
  }
  if (train_set.size() == 0) throw ValueError("train: empty training set");

  Model<float> model(arch, config.seed);
  Adam adam(model.registry(), config.optimizer);
  Rng run_rng(config.seed);

  TrainResult result;
  result.metrics_path = config.out_dir / "metrics.csv";
  result.last_checkpoint = config.out_dir / "last.ckpt";
  result.best_checkpoint = config.out_dir / "best.ckpt";
  fs::create_directories(config.out_dir);
  write_metrics(result.metrics_path, {});

  if (config.epochs == 0) {
    const Checkpoint initial = snapshot(model, 0, 0, run_rng.state(), Json::object());
    write_checkpoint(result.last_checkpoint, initial);
    write_checkpoint(result.best_checkpoint, initial);
    return result;
  }

  const auto start = std::chrono::steady_clock::now();
  double best = -1.0;
  bool first_batch = true;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    BatchIterator batches(train_set, config.batch_size, run_rng.next(), epoch, true, config.dataset.augment);
    double loss_sum = 0, margin_sum = 0, recon_sum = 0;
    std::size_t correct = 0, seen = 0, b = 0;
    Batch batch;
    while (batches.next(batch)) {
      const std::size_t B = batch.label_ids.size();
      Tape<float> tape;
      TapeScope<float> scope(tape);
      DTensor<float> images(batch.images);
      auto out = model.forward(images, Mode::Train);
      DTensor<float> recon =
          model.reconstruct(out.class_caps, arch.train_mask == MaskSource::Label ? &batch.labels : nullptr);
      LossReport<float> report = total_loss(out.norms, batch.labels, recon, batch.images, config.loss);
      const float loss = report.total.value()[0];
      if (!std::isfinite(loss)) {
        throw NonFiniteLossError("non-finite loss at step " + std::to_string(adam.steps() + 1) + " (epoch " +
                                 std::to_string(epoch + 1) + ", batch " + std::to_string(b + 1) + ")");
      }
      if (first_batch) {
        result.initial_loss = loss;
        first_batch = false;
      }
      tape.backward(report.total);
      adam.step(epoch);
      model.registry().zero_grad();

      loss_sum += static_cast<double>(loss) * static_cast<double>(B);
      margin_sum += static_cast<double>(report.margin_term) * static_cast<double>(B);
      recon_sum += static_cast<double>(report.recon_term) * static_cast<double>(B);
      const Tensor<float>& norms = out.norms.value();
      for (std::size_t n = 0; n < B; ++n) {
        if (static_cast<int>(argmax_row(norms.ptr() + n * arch.classes, arch.classes)) == batch.label_ids[n]) {
          ++correct;
        }
      }
      seen += B;
      ++b;
      if (log && config.log_every > 0 && b % config.log_every == 0) {
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        *log << "epoch " << epoch + 1 << " batch " << b << "/" << batches.batches() << " loss "
             << fmt("%.5f", loss_sum / static_cast<double>(seen)) << " acc "
             << fmt("%.4f", static_cast<double>(correct) / static_cast<double>(seen)) << " (" << fmt("%.1f", elapsed)
             << " s)\n"
             << std::flush;
      }
    }

    MetricsRow row;
    row.epoch = epoch + 1;
    row.step = adam.steps();
    row.train_loss = loss_sum / static_cast<double>(seen);
    row.train_margin = margin_sum / static_cast<double>(seen);
    row.train_recon = recon_sum / static_cast<double>(seen);
    row.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    row.test_acc = test_set.size() > 0 ? evaluate(model, test_set, config.eval_batch_size).accuracy : 0.0;
    row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.rows.push_back(row);
    write_metrics(result.metrics_path, result.rows);

    const Checkpoint ckpt = snapshot(model, row.step, row.epoch, run_rng.state(), metrics_json(row));
    write_checkpoint(result.last_checkpoint, ckpt);
    if (row.test_acc > best) {
      best = row.test_acc;
      write_checkpoint(result.best_checkpoint, ckpt);
    }
    if (log) {
      *log << "epoch " << row.epoch << " done: train_loss " << fmt("%.5f", row.train_loss) << " train_acc "
           << fmt("%.4f", row.train_acc) << " test_acc " << fmt("%.4f", row.test_acc) << " ("
           << fmt("%.1f", row.wall_time_s) << " s)\n"
           << std::flush;
    }
  }
  result.best_test_acc = best;
  return result;
}

// ---- evaluation ------------------------------------------------------------

Tensor<float> class_scores(Model<float>& model, const Dataset& data, std::size_t batch_size) {
  if (batch_size == 0) throw ValueError("class_scores: batch size must be >= 1");
  const ArchitectureSpec& arch = model.spec();
  if (data.height != arch.height || data.width != arch.width || data.channels != arch.channels) {
    throw ShapeError("evaluate: dataset images " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                     "x" + std::to_string(data.channels) + " do not match the model input");
  }
  const std::size_t C = arch.classes;
  Tensor<float> scores(Shape{std::max<std::size_t>(data.size(), 1), C});
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - first);
    auto out = model.forward(DTensor<float>(gather_images(data, first, count)), Mode::Infer);
    std::copy_n(out.norms.value().ptr(), count * C, scores.ptr() + first * C);
  }
  return scores;
}

EvalResult score(const Tensor<float>& scores, const std::vector<int>& labels, std::size_t classes) {
  EvalResult r;
  r.total = labels.size();
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto pred = static_cast<int>(argmax_row(scores.ptr() + n * classes, classes));
    r.predictions.push_back(pred);
    ++r.confusion[static_cast<std::size_t>(labels[n])][static_cast<std::size_t>(pred)];
    if (pred == labels[n]) ++r.correct;
  }
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

EvalResult evaluate(Model<float>& model, const Dataset& data, std::size_t batch_size) {
  if (data.classes != model.spec().classes) throw ArchitectureMismatchError("evaluate: dataset class count differs");
  return score(class_scores(model, data, batch_size), data.labels, data.classes);
}

Tensor<float> mean_scores(const std::vector<Tensor<float>>& member_scores) {
  if (member_scores.empty()) throw ValueError("ensemble: no members");
  const Shape& shape = member_scores.front().shape();
  std::vector<double> sum(member_scores.front().numel(), 0.0);
  for (const Tensor<float>& s : member_scores) {
    if (s.shape() != shape) throw ShapeError("ensemble: member scores " + s.shape().str() + " vs " + shape.str());
    for (std::size_t i = 0; i < s.numel(); ++i) sum[i] += static_cast<double>(s[i]);
  }
  Tensor<float> mean(shape);
  for (std::size_t i = 0; i < sum.size(); ++i) {
    mean[i] = static_cast<float>(sum[i] / static_cast<double>(member_scores.size()));
  }
  return mean;
}

EvalResult ensemble_predict(const std::vector<Checkpoint>& members, const Dataset& data, std::size_t batch_size) {
  if (members.empty()) throw ValueError("ensemble: no members");
  for (std::size_t i = 1; i < members.size(); ++i) {
    if (members[i].architecture != members[0].architecture) {
      throw ArchitectureMismatchError("ensemble: member " + std::to_string(i + 1) +
                                      " has a different architecture from member 1");
    }
  }
  std::vector<Tensor<float>> scores;
  for (const Checkpoint& ckpt : members) {
    auto model = model_from_checkpoint(ckpt);
    if (data.classes != model->spec().classes) throw ArchitectureMismatchError("ensemble: dataset class count differs");
    scores.push_back(class_scores(*model, data, batch_size));
  }
  return score(mean_scores(scores), data.labels, data.classes);
}

Tensor<float> winning_vectors(Model<float>& model, const Dataset& data, std::size_t batch_size,
                              std::vector<int>* classes) {
  if (data.size() == 0) throw ValueError("winning_vectors: empty dataset");
  const std::size_t d = model.spec().class_caps.dim;
  Tensor<float> out(Shape{data.size(), d});
  if (classes) classes->clear();
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - first);
    auto fwd = model.forward(DTensor<float>(gather_images(data, first, count)), Mode::Infer);
    MaskResult<float> win = mask_winner(fwd.class_caps);
    std::copy_n(win.vectors.value().ptr(), count * d, out.ptr() + first * d);
    if (classes) classes->insert(classes->end(), win.class_ids.begin(), win.class_ids.end());
  }
  return out;
}

// ---- artifacts ---------------------------------------------------------------

void write_image_grid(const fs::path& path, const std::vector<std::vector<Tensor<float>>>& tiles) {
  if (tiles.empty() || tiles.front().empty()) throw ValueError("image grid: no tiles");
  const Shape tile = tiles.front().front().shape();
  if (tile.rank() != 3 || (tile[2] != 1 && tile[2] != 3)) {
    throw ShapeError("image grid: tiles must be [H,W,1] or [H,W,3], got " + tile.str());
  }
  const std::size_t rows = tiles.size(), cols = tiles.front().size();
  const std::size_t H = tile[0], W = tile[1], C = tile[2];
  for (const auto& row : tiles) {
    if (row.size() != cols) throw ShapeError("image grid: ragged rows");
    for (const auto& t : row)
      if (t.shape() != tile) throw ShapeError("image grid: tile " + t.shape().str() + " differs from " + tile.str());
  }
  const std::size_t width = cols * W, height = rows * H;
  std::string out = (C == 1 ? "P5\n" : "P6\n") + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + width * height * C);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const Tensor<float>& t = tiles[r][c];
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          for (std::size_t ch = 0; ch < C; ++ch) {
            const float v = std::clamp(t[(y * W + x) * C + ch], 0.0f, 1.0f);
            out[header + ((r * H + y) * width + c * W + x) * C + ch] =
                static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
          }
    }
  write_text(path, out);
}

std::vector<std::vector<Tensor<float>>> perturb_grid(Model<float>& model, const Dataset& data,
                                                     const PerturbRequest& request) {
  if (request.samples.empty()) throw ValueError("perturb: no samples selected");
  const std::size_t d = model.spec().class_caps.dim;
  if (request.dim >= d) {
    throw ValueError("perturb: dimension " + std::to_string(request.dim + 1) + " (1-indexed) outside 1.." +
                     std::to_string(d));
  }
  std::vector<std::vector<Tensor<float>>> grid;
  const Shape tile{data.height, data.width, data.channels};
  for (std::size_t idx : request.samples) {
    if (idx >= data.size()) throw ValueError("perturb: sample index " + std::to_string(idx) + " out of range");
    auto fwd = model.forward(DTensor<float>(gather_images(data, idx, 1)), Mode::Infer);
    const Tensor<float> v = mask_winner(fwd.class_caps).vectors.value().reshaped(Shape{d});
    const Tensor<float> images =
        perturb_sweep(model.decoder(), v, request.dim, request.lo, request.hi, request.steps, request.mode);
    std::vector<Tensor<float>> row;
    for (std::size_t s = 0; s < request.steps; ++s) {
      std::vector<float> px(images.ptr() + s * tile.numel(), images.ptr() + (s + 1) * tile.numel());
      row.emplace_back(tile, std::move(px));
    }
    grid.push_back(std::move(row));
  }
  return grid;
}

std::vector<std::size_t> one_per_class(const Dataset& data) {
  std::vector<std::size_t> first(data.classes, data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& slot = first[static_cast<std::size_t>(data.labels[i])];
    if (slot == data.size()) slot = i;
  }
  std::vector<std::size_t> out;
  for (std::size_t idx : first)
    if (idx != data.size()) out.push_back(idx);
  return out;
}

void write_variance_csv(const fs::path& path, const std::vector<std::pair<std::size_t, double>>& ranked) {
  std::string text = "dim,variance,rank\n";
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    text += std::to_string(ranked[r].first + 1) + "," + fmt("%.10g", ranked[r].second) + "," + std::to_string(r + 1) +
            "\n";
  }
  write_text(path, text);
}

std::vector<BenchRow> benchmark_inference(Model<float>& model, const std::vector<std::size_t>& batch_sizes,
                                          std::size_t iterations, std::size_t warmup, std::uint64_t seed) {
  if (iterations == 0) throw ValueError("bench: iterations must be >= 1");
  const ArchitectureSpec& a = model.spec();
  Rng rng(seed);
  std::vector<BenchRow> rows;
  for (std::size_t B : batch_sizes) {
    if (B == 0) throw ValueError("bench: batch size must be >= 1");
    Tensor<float> images(Shape{B, a.height, a.width, a.channels});
    for (auto& v : images.data()) v = static_cast<float>(rng.uniform());
    DTensor<float> input(images);
    for (std::size_t i = 0; i < warmup; ++i) model.forward(input, Mode::Infer);
    std::vector<double> per_image;
    per_image.reserve(iterations);
    for (std::size_t i = 0; i < iterations; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      auto out = model.forward(input, Mode::Infer);
      const auto t1 = std::chrono::steady_clock::now();
      per_image.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(B));
    }
    BenchRow row;
    row.batch = B;
    row.parameters = model.parameter_count();
    row.iterations = iterations;
    double total = 0;
    for (double v : per_image) total += v;
    row.mean_ms_per_image = total / static_cast<double>(iterations);
    std::sort(per_image.begin(), per_image.end());
    const std::size_t mid = iterations / 2;
    row.median_ms_per_image = iterations % 2 ? per_image[mid] : 0.5 * (per_image[mid - 1] + per_image[mid]);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace deepcaps

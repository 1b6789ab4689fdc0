#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "deepcaps/checkpoint.hpp"
#include "deepcaps/config.hpp"
#include "deepcaps/harness.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace deepcaps;
namespace fs = std::filesystem;
using testing::TempDir;

namespace {

// 8x8x1 input, one single-layer cell, three classes.
Json toy_architecture(std::size_t classes = 3) {
  Json j = Json::parse(R"({
    "input": [8, 8, 1],
    "stem": {"kernel": 3, "channels": 4, "capsule_dim": 2, "batchnorm": true},
    "cells": [{"layers": [{"kernel": 3, "stride": 1, "types": 2, "dim": 2}]}],
    "class_caps": {"inputs": [0], "dim": 4, "routing_iterations": 3, "sharing": "per_input"},
    "decoder": {"kind": "fc", "hidden": [5]}
  })");
  j["classes"] = classes;
  return j;
}

ArchitectureSpec toy_spec(std::size_t classes = 3) { return architecture_from_json(toy_architecture(classes)); }

// Balanced labels, uniform pixels.
Dataset synthetic(std::size_t n, std::size_t classes, std::uint64_t seed, std::size_t side = 8) {
  Rng rng(seed);
  Dataset d;
  d.name = "synthetic";
  d.split = "train";
  d.classes = classes;
  d.height = d.width = side;
  d.channels = 1;
  d.pixels.resize(n * side * side);
  for (float& p : d.pixels) p = static_cast<float>(rng.uniform(0, 1));
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % classes));
  return d;
}

RunConfig toy_run(const fs::path& out_dir, std::size_t epochs = 1) {
  RunConfig c;
  c.architecture = toy_spec();
  c.epochs = epochs;
  c.batch_size = 8;
  c.eval_batch_size = 16;
  c.seed = 7;
  c.out_dir = out_dir;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

// metrics.csv with the trailing wall_time_s column removed from every line.
std::string without_wall_time(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

}  // namespace

TEST_CASE("parameter count of a toy architecture matches a hand sum") {
  // stem: 3*3*1*4 kernel + 4 bias + 4 gamma + 4 beta
  const std::size_t stem = 36 + 4 + 4 + 4;
  // cell layer: 2 types x 2 dims in and out, 3x3 kernel, bias, batch norm
  const std::size_t cell = 3 * 3 * 4 * 4 + 4 + 4 + 4;
  // class caps: 8*8*2 input capsules, one 2x4 transform per (input, class)
  const std::size_t class_caps = 128 * 3 * 2 * 4;
  // decoder: 4 -> 5 -> 64
  const std::size_t decoder = (4 * 5 + 5) + (5 * 64 + 64);
  CHECK(stem == 48);
  CHECK(cell == 156);
  CHECK(class_caps == 3072);
  CHECK(decoder == 409);

  const Model<float> model(toy_spec(), 1);
  CHECK(model.parameter_count() == stem + cell + class_caps + decoder);
  std::size_t table = 0;
  for (const LayerInfo& l : model.layer_table()) table += l.params;
  CHECK(table == model.parameter_count());
  CHECK(Model<float>(toy_spec(), 99).parameter_count() == model.parameter_count());
}

TEST_CASE("architecture validation") {
  Json j = toy_architecture();
  j["cells"][0]["skip_from"] = 0;
  CHECK_THROWS_AS(Model<float>(architecture_from_json(j), 1), ConfigError);

  j = toy_architecture();
  j["cells"][0]["layers"].push_back({{"kernel", 3}, {"stride", 2}, {"types", 2}, {"dim", 2}});
  j["cells"][0]["skip_from"] = 0;
  try {
    Model<float> m(architecture_from_json(j), 1);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("cell1") != std::string::npos);
  }

  j = toy_architecture();
  j["class_caps"]["inputs"] = {3};
  CHECK_THROWS_AS(Model<float>(architecture_from_json(j), 1), ConfigError);

  j = toy_architecture();
  j["stem"]["kernal"] = 3;
  CHECK_THROWS_AS(architecture_from_json(j), ConfigError);
}

TEST_CASE("run config JSON round-trips") {
  RunConfig c = toy_run("runs/x", 2);
  c.dataset.augment.max_shift = 2;
  c.loss.recon_weight = 0.001;
  const Json j = run_config_to_json(c);
  CHECK(run_config_to_json(run_config_from_json(j)) == j);
  Json bad = j;
  bad["optimiser"] = Json::object();
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
}

TEST_CASE("checkpoint format") {
  TempDir dir;
  Model<float> model(toy_spec(), 3);
  const Checkpoint ckpt = snapshot(model, 12, 2, Rng(5).state(), Json{{"test_acc", 0.5}});
  write_checkpoint(dir / "a.ckpt", ckpt);

  SUBCASE("save, load, save is byte identical") {
    const Checkpoint back = read_checkpoint(dir / "a.ckpt");
    CHECK(back.step == 12);
    CHECK(back.epoch == 2);
    CHECK(back.rng_state == ckpt.rng_state);
    write_checkpoint(dir / "b.ckpt", back);
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  }
  SUBCASE("restored model reproduces the original outputs bitwise") {
    auto copy = model_from_checkpoint(read_checkpoint(dir / "a.ckpt"));
    Rng rng(6);
    const DTensor<float> x(testing::random_tensor<float>(Shape{3, 8, 8, 1}, rng, 0, 1));
    CHECK(copy->forward(x, Mode::Infer).class_caps.value().storage() ==
          model.forward(x, Mode::Infer).class_caps.value().storage());
  }
  SUBCASE("corruptions raise distinct errors") {
    const std::string good = slurp(dir / "a.ckpt");
    std::string bytes = good;
    bytes[8] = static_cast<char>(kCheckpointVersion + 1);
    spit(dir / "v.ckpt", bytes);
    CHECK_THROWS_AS(read_checkpoint(dir / "v.ckpt"), CheckpointVersionError);

    spit(dir / "t.ckpt", good.substr(0, good.size() - 10));
    CHECK_THROWS_AS(read_checkpoint(dir / "t.ckpt"), CheckpointTruncatedError);

    spit(dir / "s.ckpt", good.substr(0, 12));
    CHECK_THROWS_AS(read_checkpoint(dir / "s.ckpt"), CheckpointTruncatedError);

    bytes = good;
    bytes[0] = 'X';
    spit(dir / "m.ckpt", bytes);
    CHECK_THROWS_AS(read_checkpoint(dir / "m.ckpt"), CheckpointHeaderError);

    bytes = good;
    bytes[17] = '#';  // first byte of the JSON header
    spit(dir / "h.ckpt", bytes);
    CHECK_THROWS_AS(read_checkpoint(dir / "h.ckpt"), CheckpointHeaderError);

    CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), IoError);
  }
  SUBCASE("restoring into a different architecture is refused") {
    Model<float> other(toy_spec(4), 3);
    CHECK_THROWS_AS(restore(other, ckpt), ArchitectureMismatchError);
  }
}

TEST_CASE("evaluation") {
  SUBCASE("score on hand-built scores") {
    const Tensor<float> s(Shape{4, 3}, {0.9f, 0.1f, 0.0f,  //
                                        0.2f, 0.3f, 0.1f,  //
                                        0.5f, 0.5f, 0.1f,  //
                                        0.0f, 0.1f, 0.2f});
    const EvalResult r = score(s, {0, 2, 1, 2}, 3);
    CHECK(r.predictions == std::vector<int>{0, 1, 0, 2});
    CHECK(r.correct == 2);
    CHECK(r.accuracy == 0.5);
    CHECK(r.confusion[2][1] == 1);
    CHECK(r.confusion[1][0] == 1);
  }
  SUBCASE("confusion rows sum to the class counts") {
    Model<float> model(toy_spec(), 4);
    Dataset d = synthetic(37, 3, 8);
    d.labels[5] = 0;
    const EvalResult r = evaluate(model, d, 16);
    CHECK(r.total == 37);
    for (std::size_t c = 0; c < 3; ++c) {
      std::size_t row = 0, expected = 0;
      for (std::size_t v : r.confusion[c]) row += v;
      for (int l : d.labels) expected += static_cast<std::size_t>(l) == c;
      CHECK(row == expected);
    }
    CHECK_THROWS_AS(evaluate(model, synthetic(4, 5, 1), 4), ArchitectureMismatchError);
    CHECK_THROWS_AS(evaluate(model, synthetic(4, 3, 1, 9), 4), ShapeError);
  }
  SUBCASE("a forced-correct single sample scores 100%") {
    Model<float> model(toy_spec(), 4);
    Dataset one = synthetic(1, 3, 9);
    one.labels[0] = evaluate(model, one, 1).predictions[0];
    const EvalResult r = evaluate(model, one, 1);
    CHECK(r.accuracy == 1.0);
    CHECK(r.confusion[one.labels[0]][one.labels[0]] == 1);
  }
  SUBCASE("an untrained model is at chance on balanced random data") {
    double total = 0;
    const int seeds = 10;
    for (int s = 0; s < seeds; ++s) {
      Model<float> model(toy_spec(10), 100 + s);
      total += evaluate(model, synthetic(200, 10, 200 + s), 50).accuracy;
    }
    CHECK(std::abs(total / seeds - 0.1) <= 0.05);
  }
}

TEST_CASE("ensemble") {
  SUBCASE("mean of scores decides") {
    const Tensor<float> a(Shape{1, 2}, {0.6f, 0.4f});
    const Tensor<float> b(Shape{1, 2}, {0.1f, 0.9f});
    const Tensor<float> m = mean_scores({a, b});
    CHECK(m[0] == doctest::Approx(0.35));
    CHECK(m[1] == doctest::Approx(0.65));
    CHECK(score(m, {1}, 2).predictions[0] == 1);
    CHECK_THROWS_AS(mean_scores({}), ValueError);
    CHECK_THROWS_AS(mean_scores({a, Tensor<float>(Shape{1, 3})}), ShapeError);
  }
  SUBCASE("unanimous members keep their prediction") {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t C = 2 + rng.below(9), M = 1 + rng.below(7);
      const std::size_t win = rng.below(C);
      std::vector<Tensor<float>> members;
      for (std::size_t k = 0; k < M; ++k) {
        Tensor<float> t = testing::random_tensor<float>(Shape{1, C}, rng, 0, 0.5);
        t[win] = static_cast<float>(rng.uniform(0.5, 1));
        members.push_back(t);
      }
      CHECK(score(mean_scores(members), {0}, C).predictions[0] == static_cast<int>(win));
    }
  }
  SUBCASE("copies of one checkpoint reproduce the single model") {
    Model<float> model(toy_spec(), 11);
    const Checkpoint ckpt = snapshot(model, 0, 0, "", Json::object());
    const Dataset d = synthetic(40, 3, 12);
    const EvalResult single = evaluate(model, d, 16);
    const EvalResult ens = ensemble_predict(std::vector<Checkpoint>(7, ckpt), d, 16);
    CHECK(ens.predictions == single.predictions);
    CHECK(ens.correct == single.correct);
    CHECK(ensemble_predict({ckpt}, d, 16).predictions == single.predictions);
  }
  SUBCASE("mixed architectures are refused") {
    Model<float> a(toy_spec(), 1);
    Json j = toy_architecture();
    j["class_caps"]["dim"] = 6;
    Model<float> b(architecture_from_json(j), 1);
    const std::vector<Checkpoint> members = {snapshot(a, 0, 0, "", Json::object()),
                                             snapshot(b, 0, 0, "", Json::object())};
    CHECK_THROWS_AS(ensemble_predict(members, synthetic(4, 3, 1), 4), ArchitectureMismatchError);
  }
}

TEST_CASE("training outputs") {
  TempDir dir;
  const Dataset train_set = synthetic(24, 3, 21), test_set = synthetic(9, 3, 22);

  SUBCASE("zero epochs writes a header-only CSV and the initial weights") {
    const TrainResult r = train(toy_run(dir / "zero", 0), train_set, test_set, nullptr);
    CHECK(r.rows.empty());
    CHECK(slurp(r.metrics_path) == std::string(kMetricsHeader) + "\n");
    const Model<float> fresh(toy_spec(), 7);
    write_checkpoint(dir / "fresh.ckpt", snapshot(fresh, 0, 0, Rng(7).state(), Json::object()));
    CHECK(slurp(r.last_checkpoint) == slurp(dir / "fresh.ckpt"));
    CHECK(slurp(r.best_checkpoint) == slurp(dir / "fresh.ckpt"));
  }
  SUBCASE("one row per epoch, checkpoints readable") {
    const TrainResult r = train(toy_run(dir / "two", 2), train_set, test_set, nullptr);
    REQUIRE(r.rows.size() == 2);
    CHECK(r.rows[0].step == 3);
    CHECK(r.rows[1].step == 6);
    std::istringstream csv(slurp(r.metrics_path));
    std::string line;
    std::getline(csv, line);
    CHECK(line == kMetricsHeader);
    int lines = 0;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == 2);
    const Checkpoint last = read_checkpoint(r.last_checkpoint);
    CHECK(last.epoch == 2);
    CHECK(last.step == 6);
    const Checkpoint best = read_checkpoint(r.best_checkpoint);
    CHECK(best.metrics.at("test_acc").get<double>() == r.best_test_acc);
  }
  SUBCASE("same seed gives identical metrics and checkpoints") {
    const TrainResult a = train(toy_run(dir / "a", 2), train_set, test_set, nullptr);
    const TrainResult b = train(toy_run(dir / "b", 2), train_set, test_set, nullptr);
    CHECK(without_wall_time(slurp(a.metrics_path)) == without_wall_time(slurp(b.metrics_path)));
    CHECK(slurp(a.last_checkpoint) == slurp(b.last_checkpoint));
    CHECK(slurp(a.best_checkpoint) == slurp(b.best_checkpoint));
    RunConfig other = toy_run(dir / "c", 2);
    other.seed = 8;
    CHECK(slurp(train(other, train_set, test_set, nullptr).last_checkpoint) != slurp(a.last_checkpoint));
  }
  SUBCASE("a NaN pixel stops training at step 1") {
    Dataset poisoned = train_set;
    for (float& p : poisoned.pixels) p = std::nanf("");
    try {
      train(toy_run(dir / "nan", 1), poisoned, test_set, nullptr);
      FAIL("expected NonFiniteLossError");
    } catch (const NonFiniteLossError& e) {
      CHECK(std::string(e.what()).find("step 1 ") != std::string::npos);
    }
  }
  SUBCASE("mismatched data is refused") {
    CHECK_THROWS_AS(train(toy_run(dir / "bad", 1), synthetic(8, 3, 1, 9), test_set, nullptr), ShapeError);
    CHECK_THROWS_AS(train(toy_run(dir / "bad", 1), synthetic(8, 4, 1), test_set, nullptr), ConfigError);
  }
}

TEST_CASE("training loss drops on a small MNIST subset") {
  const char* mnist = std::getenv("DEEPCAPS_MNIST_DIR");
  if (!mnist) {
    MESSAGE("DEEPCAPS_MNIST_DIR not set, skipped");
    return;
  }
  TempDir dir;
  const Dataset full = load_mnist_dir(mnist, true);
  const Dataset subset = full.head(200);
  const Dataset held = load_mnist_dir(mnist, false).head(50);
  Json arch = toy_architecture(10);
  arch["input"] = {28, 28, 1};
  arch["stem"]["channels"] = 8;
  arch["cells"][0]["layers"][0]["stride"] = 2;
  arch["cells"][0]["layers"][0]["types"] = 4;
  arch["decoder"]["hidden"] = {32};
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    RunConfig c;
    c.architecture = architecture_from_json(arch);
    c.epochs = 2;
    c.batch_size = 32;
    c.seed = seed;
    c.out_dir = dir / std::to_string(seed);
    const TrainResult r = train(c, subset, held, nullptr);
    INFO("seed " << seed << ": " << r.initial_loss << " -> " << r.rows.back().train_loss);
    decreased += r.rows.back().train_loss < r.initial_loss;
  }
  CHECK(decreased >= 8);
}

TEST_CASE("image grids") {
  TempDir dir;
  auto tile = [](std::size_t h, std::size_t w, std::size_t c, float v) { return Tensor<float>(Shape{h, w, c}, v); };
  SUBCASE("PGM header and tiling") {
    std::vector<std::vector<Tensor<float>>> tiles(2, std::vector<Tensor<float>>(3, tile(4, 5, 1, 0.0f)));
    tiles[1][2] = tile(4, 5, 1, 1.0f);
    write_image_grid(dir / "g.pgm", tiles);
    const std::string bytes = slurp(dir / "g.pgm");
    const std::string header = "P5\n15 8\n255\n";
    REQUIRE(bytes.size() == header.size() + 15 * 8);
    CHECK(bytes.substr(0, header.size()) == header);
    const auto px = [&](std::size_t y, std::size_t x) {
      return static_cast<unsigned char>(bytes[header.size() + y * 15 + x]);
    };
    CHECK(px(0, 0) == 0);
    CHECK(px(4, 10) == 255);
    CHECK(px(7, 14) == 255);
    CHECK(px(3, 14) == 0);
    CHECK(px(7, 9) == 0);
  }
  SUBCASE("colour grids are PPM") {
    write_image_grid(dir / "c.ppm", {{tile(2, 2, 3, 0.5f)}});
    const std::string bytes = slurp(dir / "c.ppm");
    CHECK(bytes.substr(0, 11) == "P6\n2 2\n255\n");
    CHECK(bytes.size() == 11 + 12);
  }
  SUBCASE("ragged or mixed tiles are refused") {
    CHECK_THROWS_AS(write_image_grid(dir / "r.pgm", {{tile(2, 2, 1, 0)}, {tile(2, 2, 1, 0), tile(2, 2, 1, 0)}}),
                    ShapeError);
    CHECK_THROWS_AS(write_image_grid(dir / "m.pgm", {{tile(2, 2, 1, 0), tile(3, 2, 1, 0)}}), ShapeError);
  }
}

TEST_CASE("perturbation and variance from a model") {
  Model<float> model(toy_spec(), 13);
  const Dataset d = synthetic(12, 3, 14);
  SUBCASE("grid geometry and the zero-width sweep") {
    PerturbRequest req;
    req.samples = one_per_class(d);
    CHECK(req.samples == std::vector<std::size_t>{0, 1, 2});
    req.dim = 3;
    const auto grid = perturb_grid(model, d, req);
    REQUIRE(grid.size() == 3);
    for (const auto& row : grid) CHECK(row.size() == 11);
    CHECK(grid[0][0].shape() == Shape{8, 8, 1});

    req.steps = 1;  // midpoint of a symmetric range is a zero offset
    const auto mid = perturb_grid(model, d, req);
    const Tensor<float> plain = model.reconstruct(model.forward(DTensor<float>(d.image(1).reshaped(Shape{1, 8, 8, 1})),
                                                                Mode::Infer)
                                                      .class_caps,
                                                  nullptr)
                                    .value();
    CHECK(mid[1][0].storage() == plain.reshaped(Shape{8, 8, 1}).storage());

    req.dim = 4;
    CHECK_THROWS_AS(perturb_grid(model, d, req), ValueError);
  }
  SUBCASE("winning vectors") {
    std::vector<int> classes;
    const Tensor<float> v = winning_vectors(model, d, 5, &classes);
    CHECK(v.shape() == Shape{12, 4});
    CHECK(classes.size() == 12);
    CHECK(variance_rank(v).size() == 4);
  }
  SUBCASE("variance CSV") {
    TempDir dir;
    write_variance_csv(dir / "v.csv", {{3, 2.5}, {0, 1.0}});
    CHECK(slurp(dir / "v.csv").rfind("dim,variance,rank\n4,", 0) == 0);
  }
}

TEST_CASE("inference benchmark") {
  Model<float> model(toy_spec(), 15);
  const std::vector<std::size_t> sizes = {1, 4, 16};
  const auto rows = benchmark_inference(model, sizes, 5, 1, 3);
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].batch == sizes[i]);
    CHECK(rows[i].parameters == model.parameter_count());
    CHECK(rows[i].iterations == 5);
    CHECK(rows[i].mean_ms_per_image > 0);
    CHECK(rows[i].median_ms_per_image > 0);
  }
  CHECK_THROWS_AS(benchmark_inference(model, {0}, 5, 1, 3), ValueError);
  CHECK_THROWS_AS(benchmark_inference(model, {1}, 0, 1, 3), ValueError);
}

TEST_CASE("inference latency is stable and grows with model size") {
  auto scaled = [](std::size_t types) {
    Json j = toy_architecture(10);
    j["input"] = {16, 16, 1};
    j["stem"]["channels"] = 4 * types;
    j["cells"][0]["layers"][0]["types"] = types;
    return architecture_from_json(j);
  };
  Model<float> small(scaled(2), 1), medium(scaled(4), 1), large(scaled(8), 1);
  const double first = benchmark_inference(medium, {8}, 100, 10, 1)[0].median_ms_per_image;
  const double second = benchmark_inference(medium, {8}, 100, 10, 1)[0].median_ms_per_image;
  INFO("medians " << first << " and " << second << " ms");
  CHECK(std::abs(first - second) <= 0.2 * std::min(first, second));

  std::vector<std::pair<std::size_t, double>> points;
  for (Model<float>* m : {&small, &medium, &large}) {
    points.emplace_back(m->parameter_count(), benchmark_inference(*m, {8}, 100, 10, 1)[0].median_ms_per_image);
  }
  for (std::size_t i = 1; i < points.size(); ++i) {
    INFO(points[i - 1].first << " params " << points[i - 1].second << " ms, " << points[i].first << " params "
                             << points[i].second << " ms");
    CHECK(points[i].first > points[i - 1].first);
    CHECK(points[i].second > points[i - 1].second);
  }
}

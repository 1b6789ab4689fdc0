#include "deepcaps/config.hpp"

#include <fstream>
#include <set>

namespace deepcaps {

namespace fs = std::filesystem;

namespace {

// Reads an object's fields, rejecting keys outside `known`.
class Fields {
 public:
  Fields(const Json& j, std::string where, std::set<std::string> known) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
    for (const auto& [key, _] : j.items()) {
      if (!known.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const Json& at(const std::string& key) const { return j_.at(key); }
  std::string path(const std::string& key) const { return where_ + "." + key; }

  template <typename V>
  void get(const std::string& key, V& out) const {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const Json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

 private:
  const Json& j_;
  std::string where_;
};

ConvCapsSpec layer_from_json(const Json& j, const std::string& where) {
  Fields f(j, where, {"kernel", "stride", "types", "dim"});
  ConvCapsSpec s;
  f.get("kernel", s.kernel);
  f.get("stride", s.stride);
  f.get("types", s.types);
  f.get("dim", s.dim);
  return s;
}

Json layer_to_json(const ConvCapsSpec& s) {
  return {{"kernel", s.kernel}, {"stride", s.stride}, {"types", s.types}, {"dim", s.dim}};
}

std::string sharing_name(TransformSharing s) { return s == TransformSharing::PerType ? "per_type" : "per_input"; }
std::string mask_name(MaskSource m) { return m == MaskSource::Label ? "label" : "prediction"; }

}  // namespace

ArchitectureSpec architecture_from_json(const Json& j) {
  Fields f(j, "architecture",
           {"input", "classes", "stem", "cells", "class_caps", "batchnorm", "softmax_axis", "routing_gradient",
            "decoder", "train_mask"});
  ArchitectureSpec a;
  if (f.has("input")) {
    std::vector<std::size_t> in;
    f.get("input", in);
    if (in.size() != 3) throw ConfigError("architecture.input: expected [H, W, C]");
    a.height = in[0];
    a.width = in[1];
    a.channels = in[2];
  }
  f.get("classes", a.classes);
  if (f.has("stem")) {
    Fields s(f.at("stem"), "architecture.stem", {"kernel", "channels", "capsule_dim", "batchnorm"});
    s.get("kernel", a.stem.kernel);
    s.get("channels", a.stem.channels);
    s.get("capsule_dim", a.stem.capsule_dim);
    s.get("batchnorm", a.stem.batchnorm);
  }
  if (f.has("cells")) {
    const Json& cells = f.at("cells");
    if (!cells.is_array()) throw ConfigError("architecture.cells: expected an array");
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string where = "architecture.cells[" + std::to_string(c) + "]";
      Fields cf(cells[c], where, {"layers", "skip_from", "routed", "routing_iterations"});
      CellSpec cell;
      if (cf.has("layers")) {
        const Json& layers = cf.at("layers");
        if (!layers.is_array()) throw ConfigError(where + ".layers: expected an array");
        for (std::size_t l = 0; l < layers.size(); ++l) {
          cell.layers.push_back(layer_from_json(layers[l], where + ".layers[" + std::to_string(l) + "]"));
        }
      }
      cf.get("skip_from", cell.skip_from);
      cf.get("routed", cell.routed);
      cf.get("routing_iterations", cell.routing_iterations);
      a.cells.push_back(cell);
    }
  }
  if (f.has("class_caps")) {
    Fields cc(f.at("class_caps"), "architecture.class_caps", {"inputs", "dim", "routing_iterations", "sharing"});
    cc.get("inputs", a.class_caps.inputs);
    cc.get("dim", a.class_caps.dim);
    cc.get("routing_iterations", a.class_caps.routing_iterations);
    if (cc.has("sharing")) {
      std::string s;
      cc.get("sharing", s);
      if (s == "per_input") {
        a.class_caps.sharing = TransformSharing::PerInput;
      } else if (s == "per_type") {
        a.class_caps.sharing = TransformSharing::PerType;
      } else {
        throw ConfigError("architecture.class_caps.sharing: expected per_input|per_type, got '" + s + "'");
      }
    }
  }
  f.get("batchnorm", a.options.batchnorm);
  if (f.has("softmax_axis")) a.options.softmax_axis = parse_softmax_axis(f.at("softmax_axis").get<std::string>());
  if (f.has("routing_gradient")) {
    a.options.routing_gradient = parse_routing_gradient(f.at("routing_gradient").get<std::string>());
  }
  if (f.has("train_mask")) {
    const std::string m = f.at("train_mask").get<std::string>();
    if (m == "label") {
      a.train_mask = MaskSource::Label;
    } else if (m == "prediction") {
      a.train_mask = MaskSource::Prediction;
    } else {
      throw ConfigError("architecture.train_mask: expected label|prediction, got '" + m + "'");
    }
  }
  if (f.has("decoder")) {
    Fields d(f.at("decoder"), "architecture.decoder", {"kind", "hidden", "base", "channels", "kernel"});
    if (d.has("kind")) a.decoder.kind = parse_decoder_kind(d.at("kind").get<std::string>());
    d.get("hidden", a.decoder.hidden);
    d.get("base", a.decoder.base);
    d.get("channels", a.decoder.channels);
    d.get("kernel", a.decoder.kernel);
  }
  a.decoder.input_dim = a.class_caps.dim;
  a.decoder.out_h = a.height;
  a.decoder.out_w = a.width;
  a.decoder.out_c = a.channels;
  return a;
}

Json architecture_to_json(const ArchitectureSpec& a) {
  Json cells = Json::array();
  for (const CellSpec& c : a.cells) {
    Json layers = Json::array();
    for (const auto& l : c.layers) layers.push_back(layer_to_json(l));
    cells.push_back({{"layers", layers},
                     {"skip_from", c.skip_from},
                     {"routed", c.routed},
                     {"routing_iterations", c.routing_iterations}});
  }
  Json decoder = {{"kind", to_string(a.decoder.kind)}};
  if (a.decoder.kind == DecoderKind::FullyConnected) {
    decoder["hidden"] = a.decoder.hidden;
  } else {
    decoder["base"] = a.decoder.base;
    decoder["channels"] = a.decoder.channels;
    decoder["kernel"] = a.decoder.kernel;
  }
  return {{"input", {a.height, a.width, a.channels}},
          {"classes", a.classes},
          {"stem",
           {{"kernel", a.stem.kernel},
            {"channels", a.stem.channels},
            {"capsule_dim", a.stem.capsule_dim},
            {"batchnorm", a.stem.batchnorm}}},
          {"cells", cells},
          {"class_caps",
           {{"inputs", a.class_caps.inputs},
            {"dim", a.class_caps.dim},
            {"routing_iterations", a.class_caps.routing_iterations},
            {"sharing", sharing_name(a.class_caps.sharing)}}},
          {"batchnorm", a.options.batchnorm},
          {"softmax_axis", to_string(a.options.softmax_axis)},
          {"routing_gradient", to_string(a.options.routing_gradient)},
          {"decoder", decoder},
          {"train_mask", mask_name(a.train_mask)}};
}

RunConfig run_config_from_json(const Json& j) {
  Fields f(j, "config",
           {"dataset", "architecture", "loss", "optimizer", "epochs", "batch_size", "eval_batch_size", "seed",
            "deterministic", "out_dir", "log_every"});
  RunConfig c;
  if (f.has("dataset")) {
    Fields d(f.at("dataset"), "config.dataset",
             {"name", "format", "dir", "train_limit", "test_limit", "resize", "augment", "raw_shape", "raw_classes"});
    d.get("name", c.dataset.name);
    d.get("format", c.dataset.format);
    if (d.has("dir")) c.dataset.dir = d.at("dir").get<std::string>();
    d.get("train_limit", c.dataset.train_limit);
    d.get("test_limit", c.dataset.test_limit);
    d.get("resize", c.dataset.resize);
    if (d.has("augment")) {
      Fields a(d.at("augment"), "config.dataset.augment", {"max_shift", "flip"});
      a.get("max_shift", c.dataset.augment.max_shift);
      a.get("flip", c.dataset.augment.flip);
    }
    if (d.has("raw_shape")) {
      std::vector<std::size_t> rs;
      d.get("raw_shape", rs);
      if (rs.size() != 3) throw ConfigError("config.dataset.raw_shape: expected [H, W, C]");
      c.dataset.raw_height = rs[0];
      c.dataset.raw_width = rs[1];
      c.dataset.raw_channels = rs[2];
    }
    d.get("raw_classes", c.dataset.raw_classes);
    if (c.dataset.format != "idx" && c.dataset.format != "cifar10" && c.dataset.format != "raw") {
      throw ConfigError("config.dataset.format: expected idx|cifar10|raw, got '" + c.dataset.format + "'");
    }
  }
  c.architecture = architecture_from_json(f.has("architecture") ? f.at("architecture") : Json::object());
  if (f.has("loss")) {
    Fields l(f.at("loss"), "config.loss", {"m_plus", "m_minus", "lambda_down", "recon_weight"});
    l.get("m_plus", c.loss.m_plus);
    l.get("m_minus", c.loss.m_minus);
    l.get("lambda_down", c.loss.lambda_down);
    l.get("recon_weight", c.loss.recon_weight);
  }
  c.loss.validate();
  if (f.has("optimizer")) {
    Fields o(f.at("optimizer"), "config.optimizer", {"kind", "learning_rate", "decay", "beta1", "beta2", "epsilon"});
    o.get("kind", c.optimizer.kind);
    o.get("learning_rate", c.optimizer.learning_rate);
    o.get("decay", c.optimizer.decay);
    o.get("beta1", c.optimizer.beta1);
    o.get("beta2", c.optimizer.beta2);
    o.get("epsilon", c.optimizer.epsilon);
    if (c.optimizer.kind != "adam") throw ConfigError("config.optimizer.kind: only 'adam' is supported");
  }
  f.get("epochs", c.epochs);
  f.get("batch_size", c.batch_size);
  f.get("eval_batch_size", c.eval_batch_size);
  f.get("seed", c.seed);
  f.get("deterministic", c.deterministic);
  if (f.has("out_dir")) c.out_dir = f.at("out_dir").get<std::string>();
  f.get("log_every", c.log_every);
  if (c.batch_size == 0 || c.eval_batch_size == 0) throw ConfigError("config: batch sizes must be >= 1");
  return c;
}

Json run_config_to_json(const RunConfig& c) {
  return {{"dataset",
           {{"name", c.dataset.name},
            {"format", c.dataset.format},
            {"dir", c.dataset.dir.string()},
            {"train_limit", c.dataset.train_limit},
            {"test_limit", c.dataset.test_limit},
            {"resize", c.dataset.resize},
            {"augment", {{"max_shift", c.dataset.augment.max_shift}, {"flip", c.dataset.augment.flip}}},
            {"raw_shape", {c.dataset.raw_height, c.dataset.raw_width, c.dataset.raw_channels}},
            {"raw_classes", c.dataset.raw_classes}}},
          {"architecture", architecture_to_json(c.architecture)},
          {"loss",
           {{"m_plus", c.loss.m_plus},
            {"m_minus", c.loss.m_minus},
            {"lambda_down", c.loss.lambda_down},
            {"recon_weight", c.loss.recon_weight}}},
          {"optimizer",
           {{"kind", c.optimizer.kind},
            {"learning_rate", c.optimizer.learning_rate},
            {"decay", c.optimizer.decay},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"epsilon", c.optimizer.epsilon}}},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"eval_batch_size", c.eval_batch_size},
          {"seed", c.seed},
          {"deterministic", c.deterministic},
          {"out_dir", c.out_dir.string()},
          {"log_every", c.log_every}};
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

Dataset load_dataset(const DatasetConfig& config, bool train) {
  Dataset ds;
  if (config.format == "idx") {
    ds = load_mnist_dir(config.dir, train, config.name);
  } else if (config.format == "cifar10") {
    ds = load_cifar10_dir(config.dir, train);
    ds.name = config.name;
  } else if (config.format == "raw") {
    const std::string split = train ? "train" : "test";
    ds = load_raw_tensor(config.dir / (split + "-images.f32"), config.dir / (split + "-labels.i32"),
                         config.raw_height, config.raw_width, config.raw_channels, config.raw_classes);
    ds.name = config.name;
    ds.split = split;
  } else {
    throw ConfigError("dataset format '" + config.format + "' is not supported");
  }
  ds = ds.head(train ? config.train_limit : config.test_limit);
  if (config.resize != 0 && (ds.height != config.resize || ds.width != config.resize)) {
    ds = resize_dataset(ds, config.resize, config.resize);
  }
  return ds;
}

}  // namespace deepcaps

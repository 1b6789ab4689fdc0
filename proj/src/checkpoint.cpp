#include "deepcaps/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace deepcaps {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'D', 'C', 'A', 'P', 'C', 'K', 'P', 'T'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(in[at + i])} << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32(const std::string& in, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t{static_cast<unsigned char>(in[at + i])} << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

Checkpoint snapshot(const Model<float>& model, std::uint64_t step, std::size_t epoch, const std::string& rng_state,
                    const Json& metrics) {
  Checkpoint c;
  c.architecture = architecture_to_json(model.spec());
  c.step = step;
  c.epoch = epoch;
  c.rng_state = rng_state;
  c.metrics = metrics;
  for (const auto& p : model.registry().params()) {
    const Tensor<float>& v = p.tensor.value();
    c.tensors.push_back({p.name, "param", v.shape(), v.storage()});
  }
  for (const auto& b : model.registry().buffers()) {
    c.tensors.push_back({b.name, "buffer", b.tensor->shape(), b.tensor->storage()});
  }
  return c;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  Json table = Json::array();
  std::size_t floats = 0;
  for (const auto& t : ckpt.tensors) {
    table.push_back({{"name", t.name}, {"kind", t.kind}, {"shape", t.shape.dims()}});
    floats += t.values.size();
  }
  const Json header = {{"format", "deepcaps-checkpoint"},
                       {"architecture", ckpt.architecture},
                       {"step", ckpt.step},
                       {"epoch", ckpt.epoch},
                       {"rng_state", ckpt.rng_state},
                       {"metrics", ckpt.metrics},
                       {"tensors", table}};
  const std::string text = header.dump(1);
  std::string out(kMagic, sizeof kMagic);
  out.push_back(static_cast<char>(kCheckpointVersion));
  put_u64(out, text.size());
  out += text;
  put_u64(out, floats * 4);
  out.reserve(out.size() + floats * 4);
  for (const auto& t : ckpt.tensors)
    for (float v : t.values) put_f32(out, v);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  if (in.size() < sizeof kMagic || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointHeaderError(where + ": not a checkpoint (bad magic)");
  }
  if (in.size() < 9) throw CheckpointTruncatedError(where + ": missing version byte");
  const auto version = static_cast<std::uint8_t>(in[8]);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError(where + ": format version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  }
  if (in.size() < 17) throw CheckpointTruncatedError(where + ": missing header length");
  const std::uint64_t header_len = get_u64(in, 9);
  if (header_len > in.size() - 17) throw CheckpointTruncatedError(where + ": header extends past end of file");
  Json header;
  try {
    header = Json::parse(in.substr(17, header_len));
  } catch (const Json::parse_error& e) {
    throw CheckpointHeaderError(where + ": corrupt header: " + e.what());
  }

  Checkpoint c;
  std::vector<std::size_t> sizes;
  try {
    if (header.at("format").get<std::string>() != "deepcaps-checkpoint") {
      throw CheckpointHeaderError(where + ": unexpected format tag");
    }
    c.architecture = header.at("architecture");
    c.step = header.at("step").get<std::uint64_t>();
    c.epoch = header.at("epoch").get<std::size_t>();
    c.rng_state = header.at("rng_state").get<std::string>();
    c.metrics = header.at("metrics");
    for (const Json& t : header.at("tensors")) {
      CheckpointTensor ct;
      ct.name = t.at("name").get<std::string>();
      ct.kind = t.at("kind").get<std::string>();
      ct.shape = Shape(t.at("shape").get<std::vector<std::size_t>>());
      sizes.push_back(ct.shape.numel());
      c.tensors.push_back(std::move(ct));
    }
  } catch (const Json::exception& e) {
    throw CheckpointHeaderError(where + ": corrupt header: " + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointHeaderError(where + ": corrupt header: " + e.what());
  }

  const std::size_t payload_at = 17 + header_len;
  if (in.size() < payload_at + 8) throw CheckpointTruncatedError(where + ": missing payload length");
  const std::uint64_t payload_len = get_u64(in, payload_at);
  std::uint64_t expected = 0;
  for (std::size_t s : sizes) expected += 4 * s;
  if (payload_len != expected) {
    throw CheckpointHeaderError(where + ": payload length " + std::to_string(payload_len) +
                                " disagrees with tensor table (" + std::to_string(expected) + " bytes)");
  }
  if (in.size() - payload_at - 8 < payload_len) {
    throw CheckpointTruncatedError(where + ": parameter payload has " + std::to_string(in.size() - payload_at - 8) +
                                   " of " + std::to_string(payload_len) + " bytes");
  }
  std::size_t at = payload_at + 8;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    c.tensors[i].values.resize(sizes[i]);
    for (std::size_t k = 0; k < sizes[i]; ++k, at += 4) c.tensors[i].values[k] = get_f32(in, at);
  }
  return c;
}

void restore(Model<float>& model, const Checkpoint& ckpt) {
  const Json arch = architecture_to_json(model.spec());
  if (arch != ckpt.architecture) {
    throw ArchitectureMismatchError("checkpoint architecture differs from the model's: checkpoint " +
                                    ckpt.architecture.dump() + " vs model " + arch.dump());
  }
  auto& params = model.registry().params();
  auto& buffers = model.registry().buffers();
  if (ckpt.tensors.size() != params.size() + buffers.size()) {
    throw ArchitectureMismatchError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model has " +
                                    std::to_string(params.size() + buffers.size()));
  }
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const CheckpointTensor& t = ckpt.tensors[i];
    const bool is_param = i < params.size();
    const std::string& name = is_param ? params[i].name : buffers[i - params.size()].name;
    DTensor<float> handle = is_param ? params[i].tensor : DTensor<float>();
    Tensor<float>& dst = is_param ? handle.mutable_value() : *buffers[i - params.size()].tensor;
    if (t.name != name || t.kind != (is_param ? "param" : "buffer") || t.shape != dst.shape()) {
      throw ArchitectureMismatchError("checkpoint tensor " + t.name + " " + t.shape.str() + " does not match model " +
                                      name + " " + dst.shape().str());
    }
    dst.storage() = t.values;
  }
}

std::unique_ptr<Model<float>> model_from_checkpoint(const Checkpoint& ckpt) {
  ArchitectureSpec spec;
  try {
    spec = architecture_from_json(ckpt.architecture);
  } catch (const ConfigError& e) {
    throw CheckpointHeaderError(std::string("checkpoint architecture unreadable: ") + e.what());
  }
  auto model = std::make_unique<Model<float>>(spec, 0);
  restore(*model, ckpt);
  return model;
}

}  // namespace deepcaps

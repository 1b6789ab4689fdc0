#include "deepcaps/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace deepcaps {

namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<unsigned char> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("failed reading " + path.string());
  }
  return bytes;
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at, const fs::path& path) {
  if (at + 4 > b.size()) throw TruncatedError(path.string() + ": truncated IDX header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t epoch) {
  // splitmix64 finaliser over the pair
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (epoch + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Tensor<float> Dataset::image(std::size_t index) const {
  if (index >= size()) throw ValueError("dataset index " + std::to_string(index) + " out of range");
  const std::size_t n = image_size();
  std::vector<float> px(pixels.begin() + static_cast<std::ptrdiff_t>(index * n),
                        pixels.begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  return Tensor<float>(Shape{height, width, channels}, std::move(px));
}

Dataset Dataset::head(std::size_t count) const {
  if (count == 0 || count >= size()) return *this;
  Dataset out = *this;
  out.labels.resize(count);
  out.pixels.resize(count * image_size());
  return out;
}

Dataset load_idx(const fs::path& images_path, const fs::path& labels_path, std::size_t classes) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != 0x00000803) {
    throw FormatError(images_path.string() + ": bad IDX image magic 0x" + [&] {
      char buf[9];
      std::snprintf(buf, sizeof buf, "%08x", img_magic);
      return std::string(buf);
    }());
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801) throw FormatError(labels_path.string() + ": bad IDX label magic");
  const std::size_t count = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t label_count = read_be32(lab, 4, labels_path);
  if (count == 0 || rows == 0 || cols == 0) throw FormatError(images_path.string() + ": empty IDX dimensions");
  if (img.size() < 16 + count * rows * cols) {
    throw TruncatedError(images_path.string() + ": expected " + std::to_string(count * rows * cols) +
                         " pixel bytes, file has " + std::to_string(img.size() - 16));
  }
  if (lab.size() < 8 + label_count) {
    throw TruncatedError(labels_path.string() + ": expected " + std::to_string(label_count) + " labels");
  }
  if (label_count != count) {
    throw CountMismatchError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                             std::to_string(label_count) + " labels");
  }
  Dataset ds;
  ds.classes = classes;
  ds.height = rows;
  ds.width = cols;
  ds.channels = 1;
  ds.pixels.resize(count * rows * cols);
  for (std::size_t i = 0; i < ds.pixels.size(); ++i) ds.pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = lab[8 + i];
    if (static_cast<std::size_t>(ds.labels[i]) >= classes) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(ds.labels[i]) + " >= class count " +
                        std::to_string(classes));
    }
  }
  return ds;
}

Dataset load_cifar10_bin(const std::vector<fs::path>& files) {
  constexpr std::size_t kRecord = 1 + 3072;
  Dataset ds;
  ds.name = "cifar10";
  ds.classes = 10;
  ds.height = 32;
  ds.width = 32;
  ds.channels = 3;
  for (const auto& path : files) {
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw TruncatedError(path.string() + ": size " + std::to_string(bytes.size()) +
                           " is not a whole number of 3073-byte records");
    }
    const std::size_t records = bytes.size() / kRecord;
    const std::size_t base = ds.pixels.size();
    ds.pixels.resize(base + records * 3072);
    for (std::size_t r = 0; r < records; ++r) {
      const unsigned char* rec = bytes.data() + r * kRecord;
      if (rec[0] >= 10) throw FormatError(path.string() + ": label byte " + std::to_string(rec[0]) + " >= 10");
      ds.labels.push_back(rec[0]);
      float* dst = ds.pixels.data() + base + r * 3072;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 1024; ++p) dst[p * 3 + c] = static_cast<float>(rec[1 + c * 1024 + p]) / 255.0f;
    }
  }
  return ds;
}

Dataset load_cifar10_dir(const fs::path& dir, bool train) {
  std::vector<fs::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  Dataset ds = load_cifar10_bin(files);
  ds.split = train ? "train" : "test";
  return ds;
}

Dataset load_raw_tensor(const fs::path& images_path, const fs::path& labels_path, std::size_t height,
                        std::size_t width, std::size_t channels, std::size_t classes) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const std::size_t per = height * width * channels * sizeof(float);
  if (per == 0 || img.size() % per != 0) throw TruncatedError(images_path.string() + ": not a whole number of images");
  if (lab.size() % sizeof(std::int32_t) != 0) throw TruncatedError(labels_path.string() + ": partial label");
  const std::size_t count = img.size() / per;
  if (lab.size() / sizeof(std::int32_t) != count) {
    throw CountMismatchError("raw tensor count mismatch: " + std::to_string(count) + " images vs " +
                             std::to_string(lab.size() / sizeof(std::int32_t)) + " labels");
  }
  Dataset ds;
  ds.classes = classes;
  ds.height = height;
  ds.width = width;
  ds.channels = channels;
  ds.pixels.resize(count * height * width * channels);
  std::memcpy(ds.pixels.data(), img.data(), img.size());
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::int32_t v;
    std::memcpy(&v, lab.data() + i * 4, 4);
    if (v < 0 || static_cast<std::size_t>(v) >= classes) throw FormatError(labels_path.string() + ": label out of range");
    ds.labels[i] = v;
  }
  for (float& p : ds.pixels) {
    if (!(p >= 0.0f && p <= 1.0f)) throw FormatError(images_path.string() + ": pixel outside [0,1]");
  }
  return ds;
}

Dataset load_mnist_dir(const fs::path& dir, bool train, const std::string& name) {
  const std::string prefix = train ? "train" : "t10k";
  auto pick = [&](const std::string& kind, const std::string& idx) {
    for (const std::string& candidate :
         {prefix + "-" + kind + "-" + idx, prefix + "-" + kind + "." + idx}) {
      if (fs::exists(dir / candidate)) return dir / candidate;
    }
    throw IoError("no " + prefix + " " + kind + " file (" + prefix + "-" + kind + "-" + idx + ") under " + dir.string());
  };
  Dataset ds = load_idx(pick("images", "idx3-ubyte"), pick("labels", "idx1-ubyte"));
  ds.name = name;
  ds.split = train ? "train" : "test";
  return ds;
}

Tensor<float> resize_bilinear_to(const Tensor<float>& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw ShapeError("resize_bilinear: image must be [H,W,C], got " + image.shape().str());
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  Tensor<float> out(Shape{out_h, out_w, C});
  auto source = [](std::size_t dst, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, double& t) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    t = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double ty;
    source(y, H, out_h, y0, y1, ty);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double tx;
      source(x, W, out_w, x0, x1, tx);
      for (std::size_t c = 0; c < C; ++c) {
        const double a = image.at({y0, x0, c}), b = image.at({y0, x1, c});
        const double p = image.at({y1, x0, c}), q = image.at({y1, x1, c});
        const double v = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * p + tx * q);
        out.at({y, x, c}) = static_cast<float>(v);
      }
    }
  }
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& image) {
  if (image.shape() != Shape{32, 32, 3}) {
    throw ShapeError("resize_bilinear: expected a 32x32x3 image, got " + image.shape().str());
  }
  return resize_bilinear_to(image, 64, 64);
}

Dataset resize_dataset(const Dataset& data, std::size_t out_h, std::size_t out_w) {
  Dataset out = data;
  out.height = out_h;
  out.width = out_w;
  out.pixels.assign(data.size() * out_h * out_w * data.channels, 0.0f);
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tensor<float> r = resize_bilinear_to(data.image(i), out_h, out_w);
    std::copy(r.data().begin(), r.data().end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(i * r.numel()));
  }
  return out;
}

Tensor<float> shift_image(const Tensor<float>& image, int dy, int dx) {
  if (image.rank() != 3) throw ShapeError("shift_image: image must be [H,W,C], got " + image.shape().str());
  const auto H = static_cast<std::ptrdiff_t>(image.dim(0)), W = static_cast<std::ptrdiff_t>(image.dim(1));
  const std::size_t C = image.dim(2);
  Tensor<float> out(image.shape());
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    const std::ptrdiff_t sy = y - dy;
    if (sy < 0 || sy >= H) continue;
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      const std::ptrdiff_t sx = x - dx;
      if (sx < 0 || sx >= W) continue;
      std::copy_n(image.ptr() + (sy * W + sx) * static_cast<std::ptrdiff_t>(C), C,
                  out.ptr() + (y * W + x) * static_cast<std::ptrdiff_t>(C));
    }
  }
  return out;
}

Tensor<float> augment_shift(const Tensor<float>& image, int max_shift, Rng& rng) {
  if (max_shift <= 0) return image;
  const int dy = static_cast<int>(rng.between(-max_shift, max_shift));
  const int dx = static_cast<int>(rng.between(-max_shift, max_shift));
  return shift_image(image, dy, dx);
}

Tensor<float> flip_horizontal(const Tensor<float>& image) {
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  Tensor<float> out(image.shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      std::copy_n(image.ptr() + (y * W + x) * C, C, out.ptr() + (y * W + (W - 1 - x)) * C);
  return out;
}

BatchIterator::BatchIterator(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::size_t epoch,
                             bool shuffle, AugmentOptions augment)
    : data_(data), batch_size_(batch_size), augment_(augment), rng_(mix_seed(seed, epoch)) {
  if (batch_size == 0) throw ValueError("batch_iter: batch size must be >= 1");
  order_.resize(data.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle) rng_.shuffle(order_);
}

std::size_t BatchIterator::batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

bool BatchIterator::next(Batch& batch) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t B = std::min(batch_size_, order_.size() - cursor_);
  const std::size_t n = data_.image_size();
  batch.images = Tensor<float>(Shape{B, data_.height, data_.width, data_.channels});
  batch.labels = Tensor<float>(Shape{B, data_.classes});
  batch.label_ids.assign(B, 0);
  batch.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                       order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + B));
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t idx = batch.indices[b];
    float* dst = batch.images.ptr() + b * n;
    if (augment_.max_shift > 0 || augment_.flip) {
      Tensor<float> img = data_.image(idx);
      if (augment_.flip && rng_.below(2) == 1) img = flip_horizontal(img);
      img = augment_shift(img, augment_.max_shift, rng_);
      std::copy_n(img.ptr(), n, dst);
    } else {
      std::copy_n(data_.pixels.data() + idx * n, n, dst);
    }
    batch.label_ids[b] = data_.labels[idx];
    batch.labels[b * data_.classes + static_cast<std::size_t>(data_.labels[idx])] = 1.0f;
  }
  cursor_ += B;
  return true;
}

}  // namespace deepcaps

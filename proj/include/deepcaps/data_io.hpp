#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepcaps/random.hpp"
#include "deepcaps/tensor.hpp"

namespace deepcaps {

// Images are stored contiguously as float [count, H, W, C] with pixels in
// [0, 1]; labels in [0, classes).
struct Dataset {
  std::string name;
  std::string split;  // "train" or "test"
  std::size_t classes = 10;
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width * channels; }
  Tensor<float> image(std::size_t index) const;  // [H, W, C]

  // First `count` samples (or all, if count is 0 or larger than the set).
  Dataset head(std::size_t count) const;
};

// Big-endian IDX pair (magic 0x00000803 images, 0x00000801 labels).
// FormatError on bad magic, TruncatedError on short files,
// CountMismatchError if the two files disagree on the sample count.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t classes = 10);

// Parses CIFAR-10 binary records (1 label byte + 3072 channel-planar bytes).
Dataset load_cifar10_bin(const std::vector<std::filesystem::path>& files);

// data_batch_1..5.bin (train) or test_batch.bin (test) under `dir`.
Dataset load_cifar10_dir(const std::filesystem::path& dir, bool train);

// Raw float32 little-endian [count,H,W,C] + int32 labels, for datasets
// without a native loader (e.g. SVHN after external conversion).
Dataset load_raw_tensor(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t height, std::size_t width, std::size_t channels, std::size_t classes);

// MNIST-style dataset under `dir`, accepting both "train-images-idx3-ubyte"
// and "train-images.idx3-ubyte" file names.
Dataset load_mnist_dir(const std::filesystem::path& dir, bool train, const std::string& name = "mnist");

// Bilinear 2x upsampling of a 32x32x3 image to 64x64x3 using the half-pixel
// (align_corners = false) convention with edge clamping.
Tensor<float> resize_bilinear(const Tensor<float>& image);

// General bilinear resize with the same convention; image is [H, W, C].
Tensor<float> resize_bilinear_to(const Tensor<float>& image, std::size_t out_h, std::size_t out_w);

Dataset resize_dataset(const Dataset& data, std::size_t out_h, std::size_t out_w);

// Translates by (dy, dx) with zero fill; positive dy moves content down.
Tensor<float> shift_image(const Tensor<float>& image, int dy, int dx);

// Random translation in [-max_shift, max_shift]^2 drawn from `rng`.
Tensor<float> augment_shift(const Tensor<float>& image, int max_shift, Rng& rng);

Tensor<float> flip_horizontal(const Tensor<float>& image);

struct Batch {
  Tensor<float> images;  // [B, H, W, C]
  Tensor<float> labels;  // one-hot [B, classes]
  std::vector<int> label_ids;
  std::vector<std::size_t> indices;
};

struct AugmentOptions {
  int max_shift = 0;
  bool flip = false;
};

// Deterministic epoch iterator: the order is a function of (seed, epoch).
// The final partial batch is included.
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::size_t epoch,
                bool shuffle = true, AugmentOptions augment = {});

  bool next(Batch& batch);
  std::size_t batches() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset& data_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  AugmentOptions augment_;
  Rng rng_;
};

}  // namespace deepcaps

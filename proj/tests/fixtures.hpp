#pragma once

// Byte-level writers for IDX and CIFAR-10 fixture files.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

namespace testing::fixtures {

namespace fs = std::filesystem;

inline void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

inline std::vector<unsigned char> idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                                      const std::vector<unsigned char>& pixels, std::uint32_t magic = 0x803) {
  std::vector<unsigned char> b;
  put_be32(b, magic);
  put_be32(b, count);
  put_be32(b, rows);
  put_be32(b, cols);
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

inline std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels, std::uint32_t count) {
  std::vector<unsigned char> b;
  put_be32(b, 0x801);
  put_be32(b, count);
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

}  // namespace testing::fixtures

#pragma once

// SHA-256 (for parameter/config checksums) and CRC-32 (for file trailers).

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace memcom {

class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  std::array<uint8_t, 32> finish();

  static std::array<uint8_t, 32> digest(const void* data, size_t len);
  static std::string hex(const std::array<uint8_t, 32>& d);

 private:
  void block(const uint8_t* p);
  uint32_t h_[8];
  uint64_t total_ = 0;
  uint8_t buf_[64];
  size_t buffered_ = 0;
};

// CRC-32 (IEEE 802.3 polynomial, reflected). crc32_update lets callers stream.
uint32_t crc32(const void* data, size_t len);
uint32_t crc32_update(uint32_t crc, const void* data, size_t len);

}  // namespace memcom

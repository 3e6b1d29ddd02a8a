#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace avsdiff {

// Shape/size violations (mismatched operands, non-integral conv output, ...).
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Precondition violations (bad step index, empty batch, degenerate input, ...).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk container violations; carries the byte offset of the failure.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& msg, std::uint64_t offset)
      : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_ = 0;
};

std::string shape_to_string(const std::vector<int>& shape);

// Little-endian serialization into byte buffers. x86-64 is little-endian but
// the writers go through fixed-width byte stores so the containers stay
// portable.
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);

// Cursor-based readers; throw FormatError on truncation.
struct ByteReader {
  const std::uint8_t* data = nullptr;
  std::uint64_t size = 0;
  std::uint64_t pos = 0;

  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  void bytes(void* dst, std::uint64_t n);
  void expect_done() const;
};

// Shortest decimal form that round-trips a double exactly.
std::string format_double(double v);

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file_bytes(const std::string& path);

}  // namespace avsdiff

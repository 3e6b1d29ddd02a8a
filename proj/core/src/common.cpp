#include "avsdiff/common.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace avsdiff {

std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

std::uint16_t ByteReader::u16() {
  if (pos + 2 > size) throw FormatError("truncated u16", pos);
  std::uint16_t v = static_cast<std::uint16_t>(data[pos]) |
                    static_cast<std::uint16_t>(data[pos + 1]) << 8;
  pos += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  if (pos + 4 > size) throw FormatError("truncated u32", pos);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  if (pos + 8 > size) throw FormatError("truncated u64", pos);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
  pos += 8;
  return v;
}

double ByteReader::f64() {
  std::uint64_t bits = u64();
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void ByteReader::bytes(void* dst, std::uint64_t n) {
  if (pos + n > size) throw FormatError("truncated byte run of " + std::to_string(n), pos);
  std::memcpy(dst, data + pos, n);
  pos += n;
}

void ByteReader::expect_done() const {
  if (pos != size) throw FormatError("trailing bytes after container payload", pos);
}

std::string format_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    if (back == v || (back != back && v != v)) return buf;
  }
  return buf;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  auto n = static_cast<std::uint64_t>(f.tellg());
  f.seekg(0);
  std::vector<std::uint8_t> bytes(n);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("read failed: " + path);
  return bytes;
}

}  // namespace avsdiff

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "bnadapt/errors.hpp"

namespace bnadapt::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  os.write(buf, 8);
}

inline void write_doubles(std::ostream& os, std::span<const double> v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::uint64_t read_u64(std::istream& is) {
  char buf[8];
  if (!is.read(buf, 8)) throw IoError("unexpected end of file reading integer");
  std::uint64_t v;
  std::memcpy(&v, buf, 8);
  return v;
}

inline std::vector<double> read_doubles(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
    throw IoError("unexpected end of file reading " + std::to_string(n) + " doubles");
  }
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace bnadapt::binio

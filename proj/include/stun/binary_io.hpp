#pragma once

// Little helpers for the versioned binary artifact files. Values are written
// in host byte order; artifacts are not meant to cross architectures.

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace stun::bin {

template <typename T>
  requires std::is_trivially_copyable_v<T>
void write(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T read(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated artifact file");
  return v;
}

template <typename T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
  write<std::uint64_t>(os, v.size());
  if (!v.empty()) os.write(reinterpret_cast<const char*>(v.data()), sizeof(T) * v.size());
}

template <typename T>
std::vector<T> read_vec(std::istream& is) {
  const auto n = read<std::uint64_t>(is);
  if (n > (std::uint64_t{1} << 34)) throw std::runtime_error("corrupt artifact file (vector length)");
  std::vector<T> v(n);
  if (n) is.read(reinterpret_cast<char*>(v.data()), sizeof(T) * n);
  if (!is) throw std::runtime_error("truncated artifact file");
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
  const auto n = read<std::uint64_t>(is);
  if (n > (1u << 24)) throw std::runtime_error("corrupt artifact file (string length)");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("truncated artifact file");
  return s;
}

/// Writes a 4-byte tag and a format version.
inline void write_header(std::ostream& os, const char (&magic)[5], std::uint32_t version) {
  os.write(magic, 4);
  write(os, version);
}

/// Checks the tag and returns the version; rejects versions above `max_version`.
inline std::uint32_t read_header(std::istream& is, const char (&magic)[5], std::uint32_t max_version) {
  char tag[4];
  is.read(tag, 4);
  if (!is || std::string(tag, 4) != std::string(magic, 4)) {
    throw std::runtime_error(std::string("not a ") + magic + " artifact");
  }
  const auto v = read<std::uint32_t>(is);
  if (v == 0 || v > max_version) {
    throw std::runtime_error(std::string(magic) + " artifact version " + std::to_string(v) + " unsupported");
  }
  return v;
}

}  // namespace stun::bin

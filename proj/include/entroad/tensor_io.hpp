#pragma once

// Shared container layout for every binary file the library writes:
//   magic (4 bytes) | version u16 | header length u32 | UTF-8 JSON header | payload
// Payload tensors are f32 little-endian, row-major.

#include "entroad/error.hpp"
#include "entroad/tensor.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace entroad::io {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are not supported");

using json = nlohmann::json;

class BinaryWriter {
public:
  explicit BinaryWriter(const std::filesystem::path& path) : path_(path) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) {
      throw DataError("cannot open '" + path.string() + "' for writing");
    }
  }

  void write_header(std::string_view magic, std::uint16_t version, const json& header) {
    if (magic.size() != 4) {
      throw UsageError("file magic must be 4 bytes");
    }
    const std::string text = header.dump();
    write_raw(magic.data(), 4);
    write_scalar(version);
    write_scalar(static_cast<std::uint32_t>(text.size()));
    write_raw(text.data(), text.size());
  }

  template <class T>
  void write_matrix(const Mat<T>& m) {
    const Mat<float> f = m.template cast<float>();
    write_raw(f.data(), sizeof(float) * static_cast<std::size_t>(f.size()));
  }

  template <class T>
  void write_vector(const Vec<T>& v) {
    const Vec<float> f = v.template cast<float>();
    write_raw(f.data(), sizeof(float) * static_cast<std::size_t>(f.size()));
  }

  // Full-width f64, no narrowing.
  void write_vector_f64(const Vec<double>& v) {
    write_raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
  }

  void write_bytes(const std::vector<std::uint8_t>& bytes) { write_raw(bytes.data(), bytes.size()); }

  void close() {
    out_.flush();
    if (!out_) {
      throw DataError("write failed for '" + path_.string() + "'");
    }
    out_.close();
  }

private:
  template <class S>
  void write_scalar(S value) {
    write_raw(&value, sizeof(S));
  }

  void write_raw(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) {
      throw DataError("write failed for '" + path_.string() + "'");
    }
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
public:
  explicit BinaryReader(const std::filesystem::path& path) : path_(path) {
    in_.open(path, std::ios::binary);
    if (!in_) {
      throw DataError("cannot open '" + path.string() + "'");
    }
  }

  // Reads and validates the fixed prefix; returns the parsed JSON header.
  json read_header(std::string_view magic, std::uint16_t max_version, std::uint16_t* version_out = nullptr) {
    std::array<char, 4> got{};
    read_raw(got.data(), 4, "magic");
    if (std::string_view(got.data(), 4) != magic) {
      throw DataError("'" + path_.string() + "': bad magic, expected " + std::string(magic));
    }
    const auto version = read_scalar<std::uint16_t>("version");
    if (version == 0 || version > max_version) {
      throw DataError("'" + path_.string() + "': unsupported version " + std::to_string(version));
    }
    if (version_out != nullptr) {
      *version_out = version;
    }
    const auto length = read_scalar<std::uint32_t>("header length");
    std::string text(length, '\0');
    read_raw(text.data(), length, "header");
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw DataError("'" + path_.string() + "': malformed header: " + e.what());
    }
  }

  template <class T>
  Mat<T> read_matrix(Eigen::Index rows, Eigen::Index cols, const char* what) {
    Mat<float> f(rows, cols);
    read_raw(f.data(), sizeof(float) * static_cast<std::size_t>(rows * cols), what);
    return f.template cast<T>();
  }

  template <class T>
  Vec<T> read_vector(Eigen::Index n, const char* what) {
    Vec<float> f(n);
    read_raw(f.data(), sizeof(float) * static_cast<std::size_t>(n), what);
    return f.template cast<T>();
  }

  Vec<double> read_vector_f64(Eigen::Index n, const char* what) {
    Vec<double> v(n);
    read_raw(v.data(), sizeof(double) * static_cast<std::size_t>(n), what);
    return v;
  }

  std::vector<std::uint8_t> read_bytes(std::size_t n, const char* what) {
    std::vector<std::uint8_t> bytes(n);
    read_raw(bytes.data(), n, what);
    return bytes;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  const std::filesystem::path& path() const { return path_; }

private:
  template <class S>
  S read_scalar(const char* what) {
    S value{};
    read_raw(&value, sizeof(S), what);
    return value;
  }

  void read_raw(void* data, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw DataError("'" + path_.string() + "': truncated while reading " + what);
    }
  }

  std::filesystem::path path_;
  std::ifstream in_;
};

// Pulls a required key out of a header, rethrowing type errors as DataError.
template <class V>
V header_get(const json& header, const char* key, const std::filesystem::path& path) {
  if (!header.contains(key)) {
    throw DataError("'" + path.string() + "': header missing '" + key + "'");
  }
  try {
    return header.at(key).get<V>();
  } catch (const json::exception& e) {
    throw DataError("'" + path.string() + "': header field '" + key + "': " + e.what());
  }
}

// 64-bit FNV-1a, used for config and manifest hashes that must be stable
// across runs and platforms.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 14695981039346656037ULL) {
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

} // namespace entroad::io

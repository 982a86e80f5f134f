#pragma once

// Flat little-endian array files.

#include <Eigen/Core>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedrsu {

namespace detail {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xff));
    return out;
  }
  return v;
}

inline std::vector<char> read_all(const std::filesystem::path& path, std::size_t expected_bytes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() != expected_bytes) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(expected_bytes) + " bytes, found " +
                             std::to_string(buf.size()));
  }
  return buf;
}

inline void write_all(const std::filesystem::path& path, const std::vector<char>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

}  // namespace detail

/// Writes the matrix in row-major element order as float32.
template <typename Derived>
void write_f32(const std::filesystem::path& path, const Eigen::MatrixBase<Derived>& m) {
  std::vector<char> buf(static_cast<std::size_t>(m.size()) * 4);
  std::size_t pos = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const auto bits = detail::to_little(std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c))));
      std::memcpy(buf.data() + pos, &bits, 4);
      pos += 4;
    }
  }
  detail::write_all(path, buf);
}

template <typename Matrix>
Matrix read_f32(const std::filesystem::path& path, Eigen::Index rows) {
  Matrix m(rows, Matrix::ColsAtCompileTime);
  const auto buf = detail::read_all(path, static_cast<std::size_t>(m.size()) * 4);
  std::size_t pos = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      std::uint32_t bits;
      std::memcpy(&bits, buf.data() + pos, 4);
      pos += 4;
      m(r, c) = static_cast<double>(std::bit_cast<float>(detail::to_little(bits)));
    }
  }
  return m;
}

inline void write_f64(const std::filesystem::path& path, const Eigen::VectorXd& v) {
  std::vector<char> buf(static_cast<std::size_t>(v.size()) * 8);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto bits = detail::to_little(std::bit_cast<std::uint64_t>(v[i]));
    std::memcpy(buf.data() + 8 * i, &bits, 8);
  }
  detail::write_all(path, buf);
}

inline Eigen::VectorXd read_f64(const std::filesystem::path& path, Eigen::Index size) {
  const auto buf = detail::read_all(path, static_cast<std::size_t>(size) * 8);
  Eigen::VectorXd v(size);
  for (Eigen::Index i = 0; i < size; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, buf.data() + 8 * i, 8);
    v[i] = std::bit_cast<double>(detail::to_little(bits));
  }
  return v;
}

inline void write_u8(const std::filesystem::path& path, const std::vector<std::uint8_t>& v) {
  detail::write_all(path, std::vector<char>(v.begin(), v.end()));
}

inline std::vector<std::uint8_t> read_u8(const std::filesystem::path& path, Eigen::Index size) {
  const auto buf = detail::read_all(path, static_cast<std::size_t>(size));
  return std::vector<std::uint8_t>(buf.begin(), buf.end());
}

}  // namespace fedrsu

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

#include "saep/error.hpp"
#include "saep/tensor.hpp"

namespace saep {
namespace detail {

inline constexpr char kNpyMagic[6] = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

inline void byteswap_if_big_endian(std::vector<float>& data) {
  if constexpr (std::endian::native == std::endian::big) {
    for (float& f : data) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = ((u & 0x000000FFu) << 24) | ((u & 0x0000FF00u) << 8) |
          ((u & 0x00FF0000u) >> 8) | ((u & 0xFF000000u) >> 24);
      std::memcpy(&f, &u, 4);
    }
  }
}

inline std::string npy_header(const Tensor::Shape& shape) {
  std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    dict += std::to_string(shape[i]);
    if (i + 1 < shape.size()) dict += ", ";
  }
  if (shape.size() == 1) dict += ",";
  dict += "), }";
  // Preamble (magic + version + header-length field) is 10 bytes; the padded
  // header ends in '\n' and the total is a multiple of 64.
  std::size_t unpadded = 10 + dict.size() + 1;
  std::size_t total = (unpadded + 63) / 64 * 64;
  dict.append(total - unpadded, ' ');
  dict += '\n';
  return dict;
}

}  // namespace detail

/// Reads an NPY v1.0 file holding a little-endian f32 C-order array.
inline Tensor tensor_from_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::io, "cannot open " + path.string());

  char magic[6];
  unsigned char version[2];
  unsigned char len_bytes[2];
  in.read(magic, 6);
  in.read(reinterpret_cast<char*>(version), 2);
  in.read(reinterpret_cast<char*>(len_bytes), 2);
  require(in.gcount() == 2 && !in.fail(), Errc::format,
          path.string() + ": file too short for an NPY preamble");
  require(std::memcmp(magic, detail::kNpyMagic, 6) == 0, Errc::format,
          path.string() + ": bad NPY magic");
  require(version[0] == 1 && version[1] == 0, Errc::format,
          path.string() + ": unsupported NPY version");

  std::size_t header_len = static_cast<std::size_t>(len_bytes[0]) |
                           (static_cast<std::size_t>(len_bytes[1]) << 8);
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  require(in.gcount() == static_cast<std::streamsize>(header_len), Errc::format,
          path.string() + ": truncated NPY header");

  static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  std::smatch m;
  require(std::regex_search(header, m, descr_re), Errc::format,
          path.string() + ": NPY header missing 'descr'");
  require(m[1] == "<f4", Errc::format,
          path.string() + ": dtype must be '<f4', got '" + m[1].str() + "'");
  require(std::regex_search(header, m, order_re), Errc::format,
          path.string() + ": NPY header missing 'fortran_order'");
  require(m[1] == "False", Errc::format,
          path.string() + ": Fortran-order arrays are not supported");
  require(std::regex_search(header, m, shape_re), Errc::format,
          path.string() + ": NPY header missing 'shape'");

  Tensor::Shape shape;
  {
    std::string tuple = m[1];
    static const std::regex int_re(R"(\d+)");
    for (auto it = std::sregex_iterator(tuple.begin(), tuple.end(), int_re);
         it != std::sregex_iterator(); ++it) {
      shape.push_back(std::stoll(it->str()));
    }
  }
  require(!shape.empty() && shape.size() <= 4, Errc::format,
          path.string() + ": tensor rank must be between 1 and 4");
  std::int64_t count = 1;
  for (std::int64_t e : shape) {
    require(e >= 1, Errc::format, path.string() + ": extents must be positive");
    count *= e;
  }

  std::vector<float> data(static_cast<std::size_t>(count));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * 4));
  require(in.gcount() == static_cast<std::streamsize>(data.size() * 4),
          Errc::truncated, path.string() + ": payload shorter than header promises");
  in.peek();
  require(in.eof(), Errc::format,
          path.string() + ": trailing bytes after the declared payload");
  detail::byteswap_if_big_endian(data);

  return Tensor(std::move(shape), std::move(data));
}

/// Writes NPY v1.0 ('<f4', C-order, 64-byte-aligned header). The file is
/// staged next to `path` and renamed into place, so readers never observe a
/// partial write.
inline void tensor_to_npy(const Tensor& t, const std::filesystem::path& path) {
  std::string header = detail::npy_header(t.shape());
  require(header.size() <= 0xFFFF, Errc::io, "NPY header too large");

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), Errc::io, "cannot create " + tmp.string());
    out.write(detail::kNpyMagic, 6);
    const unsigned char version[2] = {1, 0};
    out.write(reinterpret_cast<const char*>(version), 2);
    const unsigned char len_bytes[2] = {
        static_cast<unsigned char>(header.size() & 0xFF),
        static_cast<unsigned char>((header.size() >> 8) & 0xFF)};
    out.write(reinterpret_cast<const char*>(len_bytes), 2);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));

    std::vector<float> payload(t.data().begin(), t.data().end());
    detail::byteswap_if_big_endian(payload);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * 4));
    out.flush();
    require(out.good(), Errc::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(Errc::io, "cannot move " + tmp.string() + " to " + path.string());
  }
}

}  // namespace saep

/*
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Reader/writer for the NPY container (format versions 1.0 and 2.0).
// Only little-endian f4/f8 in C order is accepted; everything else is a format error.

#pragma once

#include "unidim/error.hpp"
#include "unidim/types.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace unidim::npy {

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;  // C order
  int width = 64;            // bits per element on disk

  std::size_t size() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// Value text following `'key':` in the header dict, up to the next top-level comma.
inline std::string_view dict_value(std::string_view dict, std::string_view key, const std::string& path) {
  std::string quoted1 = "'" + std::string(key) + "'";
  std::string quoted2 = "\"" + std::string(key) + "\"";
  auto pos = dict.find(quoted1);
  std::size_t klen = quoted1.size();
  if (pos == std::string_view::npos) {
    pos = dict.find(quoted2);
    klen = quoted2.size();
  }
  require(pos != std::string_view::npos, ErrorKind::format, path + ": NPY header lacks key " + std::string(key));
  auto rest = dict.substr(pos + klen);
  rest = trim(rest);
  require(!rest.empty() && rest.front() == ':', ErrorKind::format, path + ": malformed NPY header near " + std::string(key));
  rest.remove_prefix(1);
  rest = trim(rest);
  int depth = 0;
  std::size_t end = 0;
  for (; end < rest.size(); ++end) {
    char c = rest[end];
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if ((c == ',' || c == '}') && depth == 0) break;
  }
  return trim(rest.substr(0, end));
}

inline std::vector<std::size_t> parse_shape(std::string_view v, const std::string& path) {
  require(v.size() >= 2 && v.front() == '(' && v.back() == ')', ErrorKind::format, path + ": malformed NPY shape");
  v = v.substr(1, v.size() - 2);
  std::vector<std::size_t> shape;
  std::size_t i = 0;
  while (i < v.size()) {
    while (i < v.size() && (std::isspace(static_cast<unsigned char>(v[i])) || v[i] == ',')) ++i;
    if (i >= v.size()) break;
    std::size_t start = i;
    while (i < v.size() && std::isdigit(static_cast<unsigned char>(v[i]))) ++i;
    require(i > start, ErrorKind::format, path + ": malformed NPY shape entry");
    shape.push_back(std::stoull(std::string(v.substr(start, i - start))));
  }
  return shape;
}

}  // namespace detail

inline Array read(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + p);

  char magic[6];
  in.read(magic, 6);
  require(in.gcount() == 6 && std::memcmp(magic, "\x93NUMPY", 6) == 0, ErrorKind::format, p + ": bad NPY magic");
  unsigned char ver[2];
  in.read(reinterpret_cast<char*>(ver), 2);
  require(in.gcount() == 2, ErrorKind::format, p + ": truncated NPY preamble");
  std::uint32_t header_len = 0;
  if (ver[0] == 1) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    require(in.gcount() == 2, ErrorKind::format, p + ": truncated NPY preamble");
    header_len = b[0] | (b[1] << 8);
  } else if (ver[0] == 2) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    require(in.gcount() == 4, ErrorKind::format, p + ": truncated NPY preamble");
    header_len = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  } else {
    throw Error(ErrorKind::format, p + ": unsupported NPY version " + std::to_string(ver[0]));
  }
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  require(static_cast<std::uint32_t>(in.gcount()) == header_len, ErrorKind::format, p + ": truncated NPY header");

  auto descr = detail::dict_value(header, "descr", p);
  auto fortran = detail::dict_value(header, "fortran_order", p);
  auto shape_text = detail::dict_value(header, "shape", p);

  Array out;
  if (descr == "'<f8'" || descr == "\"<f8\"") {
    out.width = 64;
  } else if (descr == "'<f4'" || descr == "\"<f4\"") {
    out.width = 32;
  } else {
    throw Error(ErrorKind::format, p + ": unsupported dtype " + std::string(descr));
  }
  require(fortran == "False", ErrorKind::format, p + ": fortran_order arrays are not accepted");
  out.shape = detail::parse_shape(shape_text, p);

  const std::size_t n = out.size();
  out.data.resize(n);
  if (out.width == 64) {
    in.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(n * 8));
    require(static_cast<std::size_t>(in.gcount()) == n * 8, ErrorKind::format, p + ": truncated NPY payload");
  } else {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    require(static_cast<std::size_t>(in.gcount()) == n * 4, ErrorKind::format, p + ": truncated NPY payload");
    for (std::size_t i = 0; i < n; ++i) out.data[i] = buf[i];
  }
  return out;
}

/// Reads a 2-D array (a 1-D array becomes a single column).
inline Matrix read_matrix(const std::filesystem::path& path, int* width = nullptr) {
  Array a = read(path);
  require(a.shape.size() == 1 || a.shape.size() == 2, ErrorKind::format,
          path.string() + ": expected a 1-D or 2-D array, got " + std::to_string(a.shape.size()) + "-D");
  const Index rows = static_cast<Index>(a.shape[0]);
  const Index cols = a.shape.size() == 2 ? static_cast<Index>(a.shape[1]) : 1;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = a.data[static_cast<std::size_t>(i * cols + j)];
  if (width) *width = a.width;
  return m;
}

inline void write(const std::filesystem::path& path, const Matrix& m, int width = 64, bool one_dimensional = false) {
  require(width == 32 || width == 64, ErrorKind::input, "NPY width must be 32 or 64");
  require(!one_dimensional || m.cols() == 1, ErrorKind::input, "1-D NPY output needs a single column");
  std::string dict = std::string("{'descr': '") + (width == 64 ? "<f8" : "<f4") + "', 'fortran_order': False, 'shape': (" +
                     std::to_string(m.rows()) + (one_dimensional ? ",), }" : ", " + std::to_string(m.cols()) + "), }");
  // 10-byte v1 preamble + header, padded with spaces to a multiple of 64 and ended by '\n'.
  std::size_t total = 10 + dict.size() + 1;
  std::size_t padded = (total + 63) / 64 * 64;
  dict.append(padded - total, ' ');
  dict.push_back('\n');
  require(dict.size() <= 0xffff, ErrorKind::input, "NPY header too long");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out.write("\x93NUMPY", 6);
  const char ver[2] = {1, 0};
  out.write(ver, 2);
  const unsigned char len[2] = {static_cast<unsigned char>(dict.size() & 0xff),
                                static_cast<unsigned char>((dict.size() >> 8) & 0xff)};
  out.write(reinterpret_cast<const char*>(len), 2);
  out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  const std::size_t n = static_cast<std::size_t>(m.size());
  if (width == 64) {
    std::vector<double> buf(n);
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) buf[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(n * 8));
  } else {
    std::vector<float> buf(n);
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) buf[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(n * 4));
  }
  require(static_cast<bool>(out), ErrorKind::io, "short write to " + path.string());
}

}  // namespace unidim::npy

// Copyright 2026 The dery Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dery/matrix_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dery/errors.hpp"

namespace dery {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

namespace {

void need(std::string_view in, std::size_t pos, std::size_t n) {
  if (pos + n > in.size()) fail(ErrorKind::kParse, "unexpected end of binary data");
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

float get_f32(std::string_view in, std::size_t& pos) {
  return std::bit_cast<float>(get_u32(in, pos));
}

std::string header_bytes(const char* magic, std::uint32_t rows, std::uint32_t cols) {
  std::string out(magic, 4);
  put_u32(out, rows);
  put_u32(out, cols);
  return out;
}

MatrixHeader parse_header(std::string_view bytes, const std::filesystem::path& path,
                          std::string_view expected_magic) {
  if (bytes.size() < 12) fail(ErrorKind::kParse, path.string() + ": truncated matrix header");
  MatrixHeader h;
  h.magic = std::string(bytes.substr(0, 4));
  if (!expected_magic.empty() && h.magic != expected_magic) {
    fail(ErrorKind::kParse, path.string() + ": bad magic '" + h.magic + "', expected '" +
                                std::string(expected_magic) + "'");
  }
  std::size_t pos = 4;
  h.rows = get_u32(bytes, pos);
  h.cols = get_u32(bytes, pos);
  return h;
}

}  // namespace

std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
  need(in, pos, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += 4;
  return v;
}

std::uint64_t get_u64(std::string_view in, std::size_t& pos) {
  need(in, pos, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += 8;
  return v;
}

double get_f64(std::string_view in, std::size_t& pos) {
  return std::bit_cast<double>(get_u64(in, pos));
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "short write to " + path.string());
}

MatrixHeader read_matrix_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  char buf[12];
  in.read(buf, sizeof(buf));
  const auto got = static_cast<std::size_t>(in.gcount());
  MatrixHeader h = parse_header(std::string_view(buf, got), path, "");
  if (h.magic != kFeatureMagic && h.magic != kCodeMagic) {
    fail(ErrorKind::kParse, path.string() + ": unknown matrix magic '" + h.magic + "'");
  }
  return h;
}

FeatureMatrix read_feature_matrix(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  const MatrixHeader h = parse_header(bytes, path, kFeatureMagic);
  const std::size_t count = std::size_t{h.rows} * h.cols;
  if (bytes.size() != 12 + 4 * count) {
    fail(ErrorKind::kParse, path.string() + ": payload size does not match " +
                                std::to_string(h.rows) + "x" + std::to_string(h.cols));
  }
  FeatureMatrix m{h.rows, h.cols, std::vector<float>(count)};
  std::size_t pos = 12;
  for (std::size_t i = 0; i < count; ++i) m.values[i] = get_f32(bytes, pos);
  return m;
}

void write_feature_matrix(const std::filesystem::path& path, const FeatureMatrix& m) {
  if (m.values.size() != std::size_t{m.rows} * m.cols) {
    fail(ErrorKind::kInvalidArgument, "feature matrix shape does not match its storage");
  }
  std::string out = header_bytes(kFeatureMagic, m.rows, m.cols);
  out.reserve(12 + 4 * m.values.size());
  for (float v : m.values) put_f32(out, v);
  write_file_bytes(path, out);
}

CodeMatrix read_code_matrix(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  const MatrixHeader h = parse_header(bytes, path, kCodeMagic);
  const std::size_t count = std::size_t{h.rows} * h.cols;
  if (bytes.size() != 12 + count) {
    fail(ErrorKind::kParse, path.string() + ": payload size does not match " +
                                std::to_string(h.rows) + "x" + std::to_string(h.cols));
  }
  CodeMatrix m{h.rows, h.cols, std::vector<std::uint8_t>(count)};
  for (std::size_t i = 0; i < count; ++i) {
    const auto b = static_cast<std::uint8_t>(bytes[12 + i]);
    if (b > 1) fail(ErrorKind::kParse, path.string() + ": code byte outside {0,1}");
    m.bits[i] = b;
  }
  return m;
}

void write_code_matrix(const std::filesystem::path& path, const CodeMatrix& m) {
  if (m.bits.size() != std::size_t{m.rows} * m.cols) {
    fail(ErrorKind::kInvalidArgument, "code matrix shape does not match its storage");
  }
  std::string out = header_bytes(kCodeMagic, m.rows, m.cols);
  for (std::uint8_t b : m.bits) {
    if (b > 1) fail(ErrorKind::kInvalidArgument, "code byte outside {0,1}");
    out.push_back(static_cast<char>(b));
  }
  write_file_bytes(path, out);
}

}  // namespace dery

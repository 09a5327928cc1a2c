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

#pragma once

// Binary containers for probe-batch activations.
//
//   FMX1: "FMX1" | u32 n | u32 d | n*d float32, row-major
//   BCX1: "BCX1" | u32 n | u32 d | n*d bytes in {0, 1}, row-major
//
// All integers and floats are little-endian regardless of host order.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dery {

struct MatrixHeader {
  std::string magic;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
};

// Rows are probe examples.
struct FeatureMatrix {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;

  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct CodeMatrix {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> bits;

  std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * cols + c]; }
  std::span<const std::uint8_t> row(std::size_t r) const {
    return {bits.data() + r * cols, cols};
  }
};

inline constexpr char kFeatureMagic[] = "FMX1";
inline constexpr char kCodeMagic[] = "BCX1";

// Reads only the 12-byte header; throws kParse on bad magic or truncation.
MatrixHeader read_matrix_header(const std::filesystem::path& path);

FeatureMatrix read_feature_matrix(const std::filesystem::path& path);
void write_feature_matrix(const std::filesystem::path& path, const FeatureMatrix& m);

CodeMatrix read_code_matrix(const std::filesystem::path& path);
void write_code_matrix(const std::filesystem::path& path, const CodeMatrix& m);

// Little-endian primitives shared with the similarity cache container.
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f64(std::string& out, double v);
std::uint32_t get_u32(std::string_view in, std::size_t& pos);
std::uint64_t get_u64(std::string_view in, std::size_t& pos);
double get_f64(std::string_view in, std::size_t& pos);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace dery

#pragma once

// Checksummed tensor container used by weight files, SAE checkpoints and
// match-table summaries.
//
//   bytes 0..7    magic "UNIVLAB\x01"
//   bytes 8..15   u64 LE header length H
//   next H bytes  JSON header {"meta": {...}, "tensors": [{name, shape, offset}]}
//   payload       f64 LE values, tensors back to back
//   last 8 bytes  u64 LE CRC-64/XZ over everything before it

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace univlab {

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

struct TensorFile {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(std::string_view name) const;
  bool has(std::string_view name) const;
};

std::uint64_t crc64(std::string_view bytes);
std::string crc64_hex(std::string_view bytes);

std::string encode_tensor_file(const TensorFile& file);
// Throws checksum error on a CRC mismatch or truncation, shape error on an
// inconsistent header.
TensorFile decode_tensor_file(std::string_view bytes);

// Atomic: writes a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void save_tensor_file(const TensorFile& file, const std::filesystem::path& path);
TensorFile load_tensor_file(const std::filesystem::path& path);

}  // namespace univlab

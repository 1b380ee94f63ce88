#include "univlab/tensor_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <boost/crc.hpp>

#include "univlab/error.hpp"

namespace univlab {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

constexpr char kMagic[8] = {'U', 'N', 'I', 'V', 'L', 'A', 'B', '\x01'};

using Crc64Xz = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v;
  std::memcpy(&v, in.data() + at, 8);
  return v;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

}  // namespace

const NamedTensor& TensorFile::get(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw Error(ErrorKind::shape, "tensor file: missing tensor '" + std::string(name) + "'");
}

bool TensorFile::has(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::uint64_t crc64(std::string_view bytes) {
  Crc64Xz crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

std::string crc64_hex(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(crc64(bytes)));
  return buf;
}

std::string encode_tensor_file(const TensorFile& file) {
  nlohmann::json header;
  header["meta"] = file.meta;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : file.tensors) {
    UNIV_CHECK(element_count(t.shape) == t.data.size(), shape,
               "tensor file: '" + t.name + "' shape does not match its data length");
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.data.size();
  }
  const std::string h = header.dump();
  std::string out(kMagic, 8);
  put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + offset * 8 + 8);
  for (const auto& t : file.tensors)
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  put_u64(out, crc64(out));
  return out;
}

TensorFile decode_tensor_file(std::string_view bytes) {
  UNIV_CHECK(bytes.size() >= 24, checksum, "tensor file: truncated (too short)");
  UNIV_CHECK(std::memcmp(bytes.data(), kMagic, 8) == 0, io, "tensor file: bad magic");
  const std::uint64_t stored = get_u64(bytes, bytes.size() - 8);
  UNIV_CHECK(crc64(bytes.substr(0, bytes.size() - 8)) == stored, checksum,
             "tensor file: CRC64 mismatch (truncated or corrupted)");
  const std::uint64_t hlen = get_u64(bytes, 8);
  UNIV_CHECK(16 + hlen + 8 <= bytes.size(), shape, "tensor file: header length exceeds file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::shape, std::string("tensor file: bad header: ") + e.what());
  }
  const std::size_t payload_at = 16 + hlen;
  const std::size_t payload_doubles = (bytes.size() - 8 - payload_at) / sizeof(double);
  UNIV_CHECK((bytes.size() - 8 - payload_at) % sizeof(double) == 0, shape, "tensor file: ragged payload");

  TensorFile file;
  file.meta = header.at("meta");
  std::size_t expected_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = element_count(t.shape);
    UNIV_CHECK(offset == expected_offset && offset + n <= payload_doubles, shape,
               "tensor file: tensor '" + t.name + "' lies outside the payload");
    t.data.resize(n);
    std::memcpy(t.data.data(), bytes.data() + payload_at + offset * sizeof(double), n * sizeof(double));
    expected_offset += n;
    file.tensors.push_back(std::move(t));
  }
  UNIV_CHECK(expected_offset == payload_doubles, shape, "tensor file: payload has trailing data");
  return file;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    UNIV_CHECK(out.good(), io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    UNIV_CHECK(out.good(), io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  UNIV_CHECK(!ec, io, "rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  UNIV_CHECK(in.good(), io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_tensor_file(const TensorFile& file, const std::filesystem::path& path) {
  write_file_atomic(path, encode_tensor_file(file));
}

TensorFile load_tensor_file(const std::filesystem::path& path) { return decode_tensor_file(read_file(path)); }

}  // namespace univlab

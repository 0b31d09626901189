#include "mfd/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace mfd {

namespace {

constexpr char kMagic[5] = {'M', 'F', 'D', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file (u32)");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file (u64)");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensorList& tensors,
                     const std::string& trailer_text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kVersion);
  for (const auto& [name, tensor] : tensors) {
    if (name.empty()) throw std::invalid_argument("checkpoint: tensor names must be non-empty");
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, tensor.rank());
    for (std::size_t d : tensor.shape()) put_u64(os, d);
    for (double v : tensor.values()) put_f64(os, v);
  }
  put_u32(os, 0);
  put_u64(os, trailer_text.size());
  os.write(trailer_text.data(), static_cast<std::streamsize>(trailer_text.size()));
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || !std::equal(magic, magic + 5, kMagic))
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint result;
  for (;;) {
    const std::uint32_t name_len = get_u32(is);
    if (name_len == 0) break;
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated tensor name");
    const std::uint64_t rank = get_u64(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get_u64(is));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = get_f64(is);
    result.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  const std::uint64_t trailer_len = get_u64(is);
  result.trailer.resize(trailer_len);
  is.read(result.trailer.data(), static_cast<std::streamsize>(trailer_len));
  if (!is) throw std::runtime_error("checkpoint: truncated trailer");
  return result;
}

}  // namespace mfd

#include "tps/pfm.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace tps {

static_assert(std::endian::native == std::endian::little, "PFM1 I/O assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'P', 'F', 'M', '1'};

void write_u32(std::ofstream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& is, const std::filesystem::path& path) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  require(is.good(), "truncated pixel file: " + path.string());
  return v;
}
}  // namespace

void write_pfm(const std::filesystem::path& path, const Tensor& pixels) {
  require(pixels.rank() == 3, "write_pfm: expected channels x height x width");
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot write pixel file: " + path.string());
  os.write(kMagic, 4);
  write_u32(os, static_cast<std::uint32_t>(pixels.dim(0)));
  write_u32(os, static_cast<std::uint32_t>(pixels.dim(1)));
  write_u32(os, static_cast<std::uint32_t>(pixels.dim(2)));
  os.write(reinterpret_cast<const char*>(pixels.data.data()),
           static_cast<std::streamsize>(pixels.numel() * sizeof(double)));
  require(os.good(), "failed writing pixel file: " + path.string());
}

Tensor read_pfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "missing pixel file: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  require(is.good() && std::memcmp(magic, kMagic, 4) == 0,
          "not a PFM1 pixel file: " + path.string());
  const std::uint32_t c = read_u32(is, path);
  const std::uint32_t h = read_u32(is, path);
  const std::uint32_t w = read_u32(is, path);
  Tensor pixels({c, h, w});
  is.read(reinterpret_cast<char*>(pixels.data.data()),
          static_cast<std::streamsize>(pixels.numel() * sizeof(double)));
  require(is.gcount() == static_cast<std::streamsize>(pixels.numel() * sizeof(double)),
          "truncated pixel file: " + path.string());
  return pixels;
}

}  // namespace tps

#include "tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "errors.hpp"

namespace polydet::nn {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files assume a little-endian host");

constexpr char kMagic[4] = {'D', 'K', 'T', '1'};

}  // namespace

void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  uint32_t rank = static_cast<uint32_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), 4);
  for (int i = 0; i < t.rank(); ++i) {
    uint32_t d = static_cast<uint32_t>(t.dim(i));
    out.write(reinterpret_cast<const char*>(&d), 4);
  }
  out.write(reinterpret_cast<const char*>(t.values().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!out) throw IoError("short write to '" + path + "'");
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("'" + path + "' is not a DKT1 tensor file");
  uint32_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), 4);
  if (!in || rank == 0 || rank > 8)
    throw IoError("'" + path + "': bad tensor rank");
  std::vector<int> shape(rank);
  size_t numel = 1;
  for (auto& d : shape) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in || v == 0) throw IoError("'" + path + "': bad dimension");
    d = static_cast<int>(v);
    numel *= v;
  }
  std::vector<double> values(numel);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(numel * sizeof(double)));
  if (!in) throw IoError("'" + path + "': truncated tensor data");
  return Tensor::constant(std::move(shape), std::move(values));
}

}  // namespace polydet::nn

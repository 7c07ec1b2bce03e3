#pragma once

// Binary parameter checkpoints. Layout (little-endian):
//   magic "BGCKPT1"
//   u64 parameter count
//   per parameter, in set order:
//     u32 path length, path bytes
//     u32 rank, u64 dims[rank]
//     f64 data[product(dims)]
// Round trips are bit-exact; loaders validate the magic and every length.

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "bg/layers.hpp"

namespace bg::nn {

namespace detail {

constexpr char kCkptMagic[7] = {'B', 'G', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), "checkpoint: truncated while reading " + what);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), "checkpoint: cannot open '" + path + "' for writing");
  os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_pod<uint64_t>(os, params.paths().size());
  for (const auto& p : params.paths()) {
    const Tensor& t = params.at(p);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(p.size()));
    os.write(p.data(), static_cast<std::streamsize>(p.size()));
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
    for (size_t d : t.shape) detail::write_pod<uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  require(static_cast<bool>(os), "checkpoint: write failed for '" + path + "'");
}

inline ParamSet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "checkpoint: cannot open '" + path + "'");
  char magic[sizeof(detail::kCkptMagic)];
  is.read(magic, sizeof(magic));
  require(static_cast<bool>(is) &&
              std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) == 0,
          "checkpoint: bad magic in '" + path + "'");
  const auto count = detail::read_pod<uint64_t>(is, "parameter count");
  ParamSet params;
  for (uint64_t i = 0; i < count; ++i) {
    const auto plen = detail::read_pod<uint32_t>(is, "path length");
    require(plen > 0 && plen < 4096, "checkpoint: implausible path length");
    std::string p(plen, '\0');
    is.read(p.data(), plen);
    require(static_cast<bool>(is), "checkpoint: truncated path");
    const auto rank = detail::read_pod<uint32_t>(is, "rank");
    require(rank <= 8, "checkpoint: implausible rank");
    std::vector<size_t> shape(rank);
    size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<size_t>(detail::read_pod<uint64_t>(is, "dim"));
      n *= d;
    }
    require(n < (1ULL << 32), "checkpoint: implausible tensor size");
    std::vector<double> data(n);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    require(static_cast<bool>(is), "checkpoint: truncated tensor data for '" + p + "'");
    params.add(p, Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

}  // namespace bg::nn

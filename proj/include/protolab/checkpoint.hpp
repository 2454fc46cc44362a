#pragma once

// Single-file binary model container (little-endian, 64-bit floats):
//
//   magic "PLABCKPT", u32 version
//   u32 image_h, image_w, image_c, latent_h, latent_w, latent_d,
//       classes, prototypes_per_class
//   f64 epsilon_stab, u32 distance_mode (0 squared, 1 euclidean)
//   u32 param_count, then per backbone parameter:
//     u32 name_len, name bytes, u32 ndims, u64 extents[ndims], f64 data[]
//   prototype bank: u32 m, u32 d, f64 vectors[m*d], u32 class_of[m],
//     per prototype: u8 filled, u64 image_index, u32 cell_i, u32 cell_j
//   last layer: u32 rows, u32 cols, f64 data[]
//
// Identical models serialize to identical bytes.

#include <cstring>
#include <filesystem>
#include <fstream>

#include "protolab/model.hpp"

namespace protolab {

namespace detail {

constexpr char kCheckpointMagic[8] = {'P', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

inline void put_tensor(std::ostream& out, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline Tensor get_tensor(std::istream& in) {
  const auto ndims = get<std::uint32_t>(in);
  std::vector<std::size_t> shape(ndims);
  for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(in));
  Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(double)));
  return t;
}

}  // namespace detail

inline void save_model(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  PROTOLAB_REQUIRE(out.good(), "save_model: cannot open ", path.string());
  using namespace detail;
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  const ModelConfig& c = model.config;
  for (std::size_t v : {c.image_h, c.image_w, c.image_c, c.latent_h,
                        c.latent_w, c.latent_d, c.classes,
                        c.prototypes_per_class})
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  put<double>(out, c.epsilon_stab);
  put<std::uint32_t>(out,
                     c.distance_mode == DistanceMode::squared ? 0u : 1u);

  std::vector<const Parameter*> backbone;
  for (const auto& p : model.params.entries())
    if (p.name != "prototypes" && p.name != "last_layer")
      backbone.push_back(&p);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(backbone.size()));
  for (const Parameter* p : backbone) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(),
              static_cast<std::streamsize>(p->name.size()));
    put_tensor(out, p->value);
  }

  const std::size_t m = model.proto_class.size();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.latent_d));
  out.write(reinterpret_cast<const char*>(model.prototypes().data()),
            static_cast<std::streamsize>(m * c.latent_d * sizeof(double)));
  for (std::size_t l = 0; l < m; ++l)
    put<std::uint32_t>(out, static_cast<std::uint32_t>(model.proto_class[l]));
  for (std::size_t l = 0; l < m; ++l) {
    const PrototypeProvenance& prov = model.provenance[l];
    put<std::uint8_t>(out, prov.filled ? 1 : 0);
    put<std::uint64_t>(out, prov.image_index);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(prov.cell.i));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(prov.cell.j));
  }

  const Tensor& last = model.last_layer();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(last.extent(0)));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(last.extent(1)));
  out.write(reinterpret_cast<const char*>(last.data()),
            static_cast<std::streamsize>(last.size() * sizeof(double)));
  PROTOLAB_REQUIRE(out.good(), "save_model: write failed for ", path.string());
}

inline Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  PROTOLAB_REQUIRE(in.good(), "load_model: cannot open ", path.string());
  using namespace detail;
  char magic[8];
  in.read(magic, sizeof magic);
  PROTOLAB_REQUIRE(std::memcmp(magic, kCheckpointMagic, 8) == 0,
                   "load_model: bad magic in ", path.string());
  const auto version = get<std::uint32_t>(in);
  PROTOLAB_REQUIRE(version == kCheckpointVersion,
                   "load_model: unsupported version ", version);

  ModelConfig c;
  c.image_h = get<std::uint32_t>(in);
  c.image_w = get<std::uint32_t>(in);
  c.image_c = get<std::uint32_t>(in);
  c.latent_h = get<std::uint32_t>(in);
  c.latent_w = get<std::uint32_t>(in);
  c.latent_d = get<std::uint32_t>(in);
  c.classes = get<std::uint32_t>(in);
  c.prototypes_per_class = get<std::uint32_t>(in);
  c.epsilon_stab = get<double>(in);
  c.distance_mode = get<std::uint32_t>(in) == 0 ? DistanceMode::squared
                                                : DistanceMode::euclidean;

  Model model;
  model.config = c;
  const auto param_count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < param_count; ++i) {
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    model.params.add(name, get_tensor(in));
  }

  const auto m = get<std::uint32_t>(in);
  const auto d = get<std::uint32_t>(in);
  PROTOLAB_REQUIRE(d == c.latent_d, "load_model: prototype depth ", d,
                   " does not match config ", c.latent_d);
  Tensor protos({m, d});
  in.read(reinterpret_cast<char*>(protos.data()),
          static_cast<std::streamsize>(protos.size() * sizeof(double)));
  model.params.add("prototypes", std::move(protos));
  model.proto_class.resize(m);
  for (std::uint32_t l = 0; l < m; ++l)
    model.proto_class[l] = get<std::uint32_t>(in);
  model.provenance.resize(m);
  for (std::uint32_t l = 0; l < m; ++l) {
    PrototypeProvenance prov;
    prov.filled = get<std::uint8_t>(in) != 0;
    prov.image_index = static_cast<std::size_t>(get<std::uint64_t>(in));
    prov.cell.i = get<std::uint32_t>(in);
    prov.cell.j = get<std::uint32_t>(in);
    model.provenance[l] = prov;
  }

  const auto rows = get<std::uint32_t>(in);
  const auto cols = get<std::uint32_t>(in);
  Tensor last({rows, cols});
  in.read(reinterpret_cast<char*>(last.data()),
          static_cast<std::streamsize>(last.size() * sizeof(double)));
  model.params.add("last_layer", std::move(last));
  PROTOLAB_REQUIRE(in.good(), "load_model: truncated file ", path.string());
  return model;
}

}  // namespace protolab

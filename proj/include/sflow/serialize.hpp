#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sflow/tensor.hpp"

namespace sflow {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'S', 'H', 'P', 'I'};
inline constexpr char kDatasetMagic[4] = {'S', 'H', 'D', 'S'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedTensorData {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

template <typename U>
void write_pod(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::istream& is, const char* what) {
  U v;
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is)
    throw std::runtime_error(std::string("truncated file while reading ") +
                             what);
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  const auto len = read_pod<std::uint32_t>(is, what);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is)
    throw std::runtime_error(std::string("truncated file while reading ") +
                             what);
  return s;
}

}  // namespace detail

inline void write_tensor_record(std::ostream& os, const NamedTensorData& t) {
  if (static_cast<std::int64_t>(t.data.size()) != shape_numel(t.shape))
    throw std::invalid_argument("tensor record '" + t.name +
                                "': data does not match shape " +
                                shape_str(t.shape));
  detail::write_string(os, t.name);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape)
    detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

inline NamedTensorData read_tensor_record(std::istream& is) {
  NamedTensorData t;
  t.name = detail::read_string(is, "tensor name");
  const auto rank = detail::read_pod<std::uint32_t>(is, "tensor rank");
  t.shape.resize(rank);
  for (auto& d : t.shape)
    d = static_cast<std::int64_t>(
        detail::read_pod<std::uint64_t>(is, "tensor dim"));
  const std::int64_t n = shape_numel(t.shape);
  t.data.resize(static_cast<std::size_t>(n));
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!is)
    throw std::runtime_error("truncated file while reading tensor '" + t.name +
                             "'");
  return t;
}

struct TensorFile {
  std::string config_json;
  std::vector<NamedTensorData> tensors;
};

inline void save_tensor_file(const std::string& path, const char magic[4],
                             const std::string& config_json,
                             const std::vector<NamedTensorData>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write(magic, 4);
  detail::write_pod<std::uint32_t>(os, kFormatVersion);
  detail::write_string(os, config_json);
  detail::write_pod<std::uint64_t>(os, tensors.size());
  for (const auto& t : tensors) write_tensor_record(os, t);
  if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

inline TensorFile load_tensor_file(const std::string& path,
                                   const char magic[4]) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  char got[4];
  is.read(got, 4);
  if (!is || std::memcmp(got, magic, 4) != 0)
    throw std::runtime_error("'" + path + "' has the wrong magic bytes");
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != kFormatVersion)
    throw std::runtime_error("'" + path + "' has unsupported version " +
                             std::to_string(version));
  TensorFile f;
  f.config_json = detail::read_string(is, "config");
  const auto count = detail::read_pod<std::uint64_t>(is, "tensor count");
  f.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i)
    f.tensors.push_back(read_tensor_record(is));
  return f;
}

inline void save_checkpoint(const std::string& path,
                            const std::string& config_json,
                            const std::vector<NamedTensorData>& tensors) {
  save_tensor_file(path, kCheckpointMagic, config_json, tensors);
}

inline TensorFile load_checkpoint(const std::string& path) {
  return load_tensor_file(path, kCheckpointMagic);
}

template <typename T>
NamedTensorData to_record(const std::string& name, const Tensor<T>& t) {
  NamedTensorData r;
  r.name = name;
  r.shape = t.shape();
  r.data.resize(t.values().size());
  for (std::size_t i = 0; i < r.data.size(); ++i)
    r.data[i] = static_cast<float>(t.values()[i]);
  return r;
}

template <typename T>
void from_record(const NamedTensorData& r, Tensor<T>& t) {
  if (t.shape() != r.shape)
    throw std::runtime_error("tensor '" + r.name + "' has shape " +
                             shape_str(r.shape) + ", expected " +
                             shape_str(t.shape()));
  for (std::size_t i = 0; i < r.data.size(); ++i)
    t.values()[i] = static_cast<T>(r.data[i]);
}

}  // namespace sflow

// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "core/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace avflow {

namespace {

constexpr char kMagic[8] = {'A', 'V', 'F', 'L', 'O', 'W', 'C', '1'};

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void Container::add(std::string name, Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw ContractError("container array '" + name + "': shape/data mismatch");
  if (has(name)) throw ContractError("container array '" + name + "' already present");
  arrays_.push_back({std::move(name), std::move(shape), std::move(data)});
}

void Container::add(const std::string& name, const Tensor& t) {
  add(name, t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
}

bool Container::has(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return true;
  return false;
}

const NamedArray& Container::get(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return a;
  throw ContractError("container array '" + name + "' not found");
}

Tensor Container::tensor(const std::string& name) const {
  const auto& a = get(name);
  return Tensor::from_values(a.shape, a.data);
}

void Container::save(const std::string& path) const {
  nlohmann::json header;
  header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  header["arrays"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& a : arrays_) {
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
    offset += a.data.size();
  }
  const std::string header_str = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ContractError("cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof kMagic);
  write_u64(os, header_str.size());
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& a : arrays_)
    os.write(reinterpret_cast<const char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size() * sizeof(double)));
  if (!os) throw ContractError("write failed for '" + path + "'");
}

Container Container::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw ContractError("'" + path + "' is not a container file");
  const uint64_t header_len = read_u64(is);
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw ContractError("truncated header in '" + path + "'");
  nlohmann::json header = nlohmann::json::parse(header_str);

  Container c;
  c.meta = header.at("meta");
  for (const auto& entry : header.at("arrays")) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<Shape>();
    a.data.resize(static_cast<size_t>(shape_numel(a.shape)));
    is.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (!is) throw ContractError("truncated payload in '" + path + "'");
    c.arrays_.push_back(std::move(a));
  }
  return c;
}

uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t hash_doubles(std::span<const double> values) {
  return fnv1a64({reinterpret_cast<const uint8_t*>(values.data()), values.size() * sizeof(double)});
}

std::string hash_hex(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace avflow

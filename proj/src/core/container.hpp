// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-file container for named float64 arrays plus a JSON metadata
// blob. Layout (all integers little-endian):
//
//   bytes 0..7    magic "AVFLOWC1"
//   bytes 8..15   u64 header length H
//   bytes 16..    H bytes of UTF-8 JSON:
//                   { "meta": <caller JSON>,
//                     "arrays": [ {"name","shape","offset"} ... ] }
//   then          payload: the arrays' float64 data, concatenated in
//                 header order; "offset" counts elements from the start
//                 of the payload.
//
// The layout is stable; readers reject unknown magic or versions.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "core/tensor.hpp"
#include "json.hpp"

namespace avflow {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

class Container {
 public:
  nlohmann::json meta;

  void add(std::string name, Shape shape, std::vector<double> data);
  void add(const std::string& name, const Tensor& t);
  bool has(const std::string& name) const;
  const NamedArray& get(const std::string& name) const;
  Tensor tensor(const std::string& name) const;
  const std::vector<NamedArray>& arrays() const { return arrays_; }

  void save(const std::string& path) const;
  static Container load(const std::string& path);

 private:
  std::vector<NamedArray> arrays_;
};

// FNV-1a over raw bytes; used for content addressing and checksums.
uint64_t fnv1a64(std::span<const uint8_t> bytes);
uint64_t hash_doubles(std::span<const double> values);
std::string hash_hex(uint64_t h);

}  // namespace avflow

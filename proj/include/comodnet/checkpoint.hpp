// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

// Array container file:
//
//   byte 0        format version (currently 1)
//   bytes 1..8    index length L, uint64 little-endian
//   next L bytes  index text, one line per array: "<name>\tf32\t<d0>x<d1>...\t<offset>\n"
//                 where offset is the byte offset of the array inside the payload
//   payload       raw little-endian IEEE-754 float32 values, arrays back to back

#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "comodnet/error.hpp"
#include "comodnet/tensor.hpp"

namespace comodnet {

inline constexpr std::uint8_t kContainerVersion = 1;

class Container {
 public:
  void put(const std::string& name, Tensor t) {
    if (name.empty() || name.find_first_of("\t\n") != std::string::npos) {
      throw std::invalid_argument("container: invalid array name '" + name + "'");
    }
    auto it = index_.find(name);
    if (it != index_.end()) {
      arrays_[it->second].second = std::move(t);
      return;
    }
    index_.emplace(name, arrays_.size());
    arrays_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("container: no array named '" + name + "'");
    return arrays_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& arrays() const { return arrays_; }
  std::size_t size() const { return arrays_.size(); }

  std::string serialize() const {
    std::ostringstream idx;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : arrays_) {
      idx << name << "\tf32\t";
      for (std::size_t i = 0; i < t.rank(); ++i) idx << (i ? "x" : "") << t.dim(i);
      idx << '\t' << offset << '\n';
      offset += 4 * t.size();
    }
    const std::string index = idx.str();
    std::string out;
    out.reserve(9 + index.size() + offset);
    out.push_back(static_cast<char>(kContainerVersion));
    put_u64(out, index.size());
    out += index;
    for (const auto& [name, t] : arrays_) {
      for (float v : t.data()) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
      }
    }
    return out;
  }

  static Container deserialize(const std::string& bytes, const std::string& origin = "<memory>") {
    auto fail = [&](const std::string& why) -> DataError {
      return DataError("container " + origin + ": " + why);
    };
    if (bytes.size() < 9) throw fail("truncated header");
    if (static_cast<std::uint8_t>(bytes[0]) != kContainerVersion) {
      throw fail("unsupported format version " + std::to_string(static_cast<unsigned char>(bytes[0])));
    }
    std::uint64_t index_len = 0;
    for (int b = 0; b < 8; ++b)
      index_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[1 + b])) << (8 * b);
    if (9 + index_len > bytes.size()) throw fail("index length exceeds file size");
    const std::size_t payload = 9 + static_cast<std::size_t>(index_len);
    std::istringstream idx(bytes.substr(9, static_cast<std::size_t>(index_len)));
    Container c;
    std::string line;
    while (std::getline(idx, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string name, dtype, dims, off;
      if (!std::getline(ls, name, '\t') || !std::getline(ls, dtype, '\t') ||
          !std::getline(ls, dims, '\t') || !std::getline(ls, off)) {
        throw fail("malformed index line '" + line + "'");
      }
      if (dtype != "f32") throw fail("unsupported dtype '" + dtype + "' for " + name);
      auto number = [&](const std::string& text) -> std::uint64_t {
        std::uint64_t v = 0;
        const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc{} || end != text.data() + text.size() || text.empty()) {
          throw fail("malformed number '" + text + "' in index line for " + name);
        }
        return v;
      };
      Shape shape;
      std::istringstream ds(dims);
      std::string d;
      while (std::getline(ds, d, 'x')) shape.push_back(number(d));
      const std::uint64_t offset = number(off);
      const std::size_t n = shape_numel(shape);
      if (n > bytes.size() || offset > bytes.size() || payload + offset + 4 * n > bytes.size()) {
        throw fail("array '" + name + "' truncated");
      }
      std::vector<float> data(n);
      const char* src = bytes.data() + payload + offset;
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
          bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
        data[i] = std::bit_cast<float>(bits);
      }
      c.put(name, Tensor(std::move(shape), std::move(data)));
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path.string());
    const std::string bytes = serialize();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("short write to " + path.string());
  }

  static Container load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str(), path.string());
  }

 private:
  static void put_u64(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
  }

  std::vector<std::pair<std::string, Tensor>> arrays_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace comodnet

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "modenorm/tensor.hpp"

namespace modenorm {

// Binary snapshot of named tensors plus a config echo, stored as MNCP:
//   "MNCP" | version u32 | tensor count u32
//   per tensor: name length u16, name bytes, rank u8, dims u32 each, f64 payload
//   config echo: line count u32, per line length u16 + "key=value" bytes
// All integers and floats are little-endian. Version is currently 1.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::pair<std::string, std::string>> config;

  void add(const std::string& name, const Tensor& t);
  const Tensor* find(const std::string& name) const;
  void set_config(const std::string& key, const std::string& value);
  const std::string* config_value(const std::string& key) const;
};

std::vector<unsigned char> checkpoint_serialize(const Checkpoint& ckpt);
Checkpoint checkpoint_parse(const std::vector<unsigned char>& bytes);

void checkpoint_save(const Checkpoint& ckpt, const std::string& path);
Checkpoint checkpoint_load(const std::string& path);

}  // namespace modenorm

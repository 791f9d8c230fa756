#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "misty/nn.hpp"

namespace misty {

// Self-describing parameter container. Layout (all integers and doubles
// little-endian):
//
//   bytes 0..7   magic "MSTYCKPT"
//   u32          format version (currently 1)
//   u64          config hash of the producing run
//   u32          array count
//   per array:   u32 name length, name bytes, u64 rows, u64 cols,
//                rows*cols f64 values in row-major order.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t config_hash = 0;

  void put(const std::string& name, const Matrix& m);
  const Matrix& get(const std::string& name) const;  // throws IoError if absent
  bool has(const std::string& name) const;

  void put_all(const NamedParams& params);
  // Loads values into params; every param name must be present with the
  // stored shape.
  void load_all(const NamedParams& params) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  const std::map<std::string, Matrix>& arrays() const { return arrays_; }

 private:
  std::map<std::string, Matrix> arrays_;
};

// FNV-1a over a byte string; used for config fingerprints.
std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace misty

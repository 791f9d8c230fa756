#include "misty/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace misty {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'T', 'Y', 'C', 'K', 'P', 'T'};

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(std::begin(buf), std::end(buf));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(std::begin(buf), std::end(buf));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void Checkpoint::put(const std::string& name, const Matrix& m) { arrays_[name] = m; }

const Matrix& Checkpoint::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw IoError("checkpoint: missing array '" + name + "'");
  return it->second;
}

bool Checkpoint::has(const std::string& name) const { return arrays_.count(name) > 0; }

void Checkpoint::put_all(const NamedParams& params) {
  for (auto& [name, p] : params) put(name, p->value);
}

void Checkpoint::load_all(const NamedParams& params) const {
  for (auto& [name, p] : params) {
    const Matrix& m = get(name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw IoError("checkpoint: shape mismatch for '" + name + "'");
    p->value = m;
  }
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot write " + path);
  os.write(kMagic, 8);
  write_le<std::uint32_t>(os, kVersion);
  write_le<std::uint64_t>(os, config_hash);
  write_le<std::uint32_t>(os, std::uint32_t(arrays_.size()));
  for (auto& [name, m] : arrays_) {
    write_le<std::uint32_t>(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_le<std::uint64_t>(os, std::uint64_t(m.rows()));
    write_le<std::uint64_t>(os, std::uint64_t(m.cols()));
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) write_le<double>(os, m(i, j));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot read " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  std::uint32_t version = read_le<std::uint32_t>(is);
  if (version != kVersion) throw IoError("checkpoint: unsupported version");
  Checkpoint ck;
  ck.config_hash = read_le<std::uint64_t>(is);
  std::uint32_t count = read_le<std::uint32_t>(is);
  for (std::uint32_t a = 0; a < count; ++a) {
    std::uint32_t len = read_le<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    auto rows = Index(read_le<std::uint64_t>(is));
    auto cols = Index(read_le<std::uint64_t>(is));
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = read_le<double>(is);
    if (!is) throw IoError("checkpoint: truncated file " + path);
    ck.arrays_[name] = std::move(m);
  }
  return ck;
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace misty

#include "modenorm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

namespace modenorm {
namespace {

constexpr char kMagic[4] = {'M', 'N', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

// Cursor over the byte stream; every read validates remaining length.
struct Reader {
  const unsigned char* p;
  std::size_t remaining;

  void need(std::size_t n) const {
    if (remaining < n) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    p += 2;
    remaining -= 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    remaining -= 4;
    return v;
  }
  unsigned char u8() {
    need(1);
    unsigned char v = *p;
    ++p;
    --remaining;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    remaining -= 8;
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    remaining -= n;
    return s;
  }
};

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
  for (const auto& [existing, tensor] : tensors) {
    (void)tensor;
    if (existing == name)
      throw std::invalid_argument("checkpoint: duplicate tensor name " + name);
  }
  tensors.emplace_back(name, t);
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void Checkpoint::set_config(const std::string& key, const std::string& value) {
  for (auto& [k, v] : config) {
    if (k == key) {
      v = value;
      return;
    }
  }
  config.emplace_back(key, value);
}

const std::string* Checkpoint::config_value(const std::string& key) const {
  for (const auto& [k, v] : config)
    if (k == key) return &v;
  return nullptr;
}

std::vector<unsigned char> checkpoint_serialize(const Checkpoint& ckpt) {
  std::vector<unsigned char> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: tensor name too long");
    if (tensor.rank() > 0xFF) throw std::invalid_argument("checkpoint: tensor rank too large");
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(tensor.rank()));
    for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < tensor.size(); ++i) put_f64(out, tensor[i]);
  }
  put_u32(out, static_cast<std::uint32_t>(ckpt.config.size()));
  for (const auto& [key, value] : ckpt.config) {
    const std::string line = key + "=" + value;
    if (line.size() > 0xFFFF) throw std::invalid_argument("checkpoint: config line too long");
    put_u16(out, static_cast<std::uint16_t>(line.size()));
    out.insert(out.end(), line.begin(), line.end());
  }
  return out;
}

Checkpoint checkpoint_parse(const std::vector<unsigned char>& bytes) {
  Reader r{bytes.data(), bytes.size()};
  r.need(4);
  if (std::memcmp(r.p, kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  r.p += 4;
  r.remaining -= 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ckpt;
  const std::uint32_t count = r.u32();
  std::unordered_set<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.str(r.u16());
    if (!seen.insert(name).second)
      throw std::runtime_error("checkpoint: duplicate tensor name " + name);
    const unsigned rank = r.u8();
    if (rank == 0) throw std::runtime_error("checkpoint: zero-rank tensor " + name);
    Shape shape(rank);
    for (unsigned d = 0; d < rank; ++d) shape[d] = r.u32();
    Tensor tensor(shape);
    for (std::size_t i = 0; i < tensor.size(); ++i) tensor[i] = r.f64();
    ckpt.tensors.emplace_back(name, std::move(tensor));
  }

  const std::uint32_t lines = r.u32();
  for (std::uint32_t i = 0; i < lines; ++i) {
    const std::string line = r.str(r.u16());
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("checkpoint: config line without '='");
    ckpt.config.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  if (r.remaining != 0) throw std::runtime_error("checkpoint: trailing bytes after config");
  return ckpt;
}

void checkpoint_save(const Checkpoint& ckpt, const std::string& path) {
  const std::vector<unsigned char> bytes = checkpoint_serialize(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint checkpoint_load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return checkpoint_parse(bytes);
}

}  // namespace modenorm

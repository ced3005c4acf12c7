#include "cachesteer/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "cachesteer/errors.hpp"

namespace cachesteer {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 4);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
  char buf[4];
  if (!is.read(buf, 4)) throw DataError("truncated checkpoint: " + path);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<uint32_t>(v)); }

float get_f32(std::istream& is, const std::string& path) {
  return std::bit_cast<float>(get_u32(is, path));
}

void put_bytes(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_bytes(std::istream& is, const std::string& path) {
  uint32_t n = get_u32(is, path);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) throw DataError("truncated checkpoint: " + path);
  return s;
}

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw DataError("checkpoint missing tensor '" + name + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint: " + path);
  os << ckpt.magic << '\n';
  put_bytes(os, ckpt.meta.dump());
  put_u32(os, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    put_bytes(os, name);
    put_u32(os, static_cast<uint32_t>(tensor.shape().size()));
    for (size_t dim : tensor.shape()) put_u32(os, static_cast<uint32_t>(dim));
    for (real v : tensor.data()) put_f32(os, static_cast<float>(v));
  }
  if (!os) throw DataError("write failed for checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path, const std::string& expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  Checkpoint ckpt;
  if (!std::getline(is, ckpt.magic)) throw DataError("empty checkpoint: " + path);
  if (ckpt.magic != expected_magic) {
    throw CompatibilityError("checkpoint " + path + " has version '" + ckpt.magic +
                             "', expected '" + expected_magic + "'");
  }
  std::string meta_json = get_bytes(is, path);
  try {
    ckpt.meta = nlohmann::json::parse(meta_json);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint metadata in " + path + ": " + e.what());
  }
  uint32_t count = get_u32(is, path);
  ckpt.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = get_bytes(is, path);
    uint32_t rank = get_u32(is, path);
    std::vector<size_t> shape(rank);
    size_t numel = 1;
    for (auto& d : shape) {
      d = get_u32(is, path);
      numel *= d;
    }
    std::vector<real> data(numel);
    for (auto& v : data) v = static_cast<real>(get_f32(is, path));
    ckpt.tensors.emplace_back(std::move(name), Tensor::constant(std::move(shape), std::move(data)));
  }
  return ckpt;
}

}  // namespace cachesteer

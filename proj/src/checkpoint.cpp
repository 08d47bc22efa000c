#include "ambs/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "ambs/error.hpp"

namespace ambs {

namespace {

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    out.append(bytes.rbegin(), bytes.rend());
  } else {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > b_.size()) throw DataError(std::string("checkpoint truncated while reading ") + what);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<T>(bytes);
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    if (pos_ + n > b_.size()) throw DataError(std::string("checkpoint truncated while reading ") + what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const TensorRefs& tensors) {
  std::set<std::string> seen;
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (!seen.insert(name).second) throw ContractError("checkpoint: duplicate tensor name " + name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (int d : t->shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    put<std::uint64_t>(out, offset);
    offset += t->size() * sizeof(float);
  }
  for (const auto& [name, t] : tensors)
    for (float x : t->data()) put<float>(out, x);
  return out;
}

TensorMap decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof kCheckpointMagic, "magic") != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw DataError("checkpoint: bad magic");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");

  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto len = r.get<std::uint32_t>("name length");
    e.name = r.bytes(len, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw DataError("checkpoint: implausible rank for " + e.name);
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<int>(r.get<std::uint32_t>("dims")));
    e.offset = r.get<std::uint64_t>("offset");
    entries.push_back(std::move(e));
  }
  const std::size_t payload = r.pos();
  TensorMap out;
  for (const auto& e : entries) {
    std::size_t n = 1;
    for (int d : e.shape) n *= static_cast<std::size_t>(d);
    if (payload + e.offset + n * sizeof(float) > bytes.size()) {
      throw DataError("checkpoint: payload for " + e.name + " runs past end of file");
    }
    std::string sub = bytes.substr(payload + e.offset, n * sizeof(float));
    Reader pr(sub);
    std::vector<float> data(n);
    for (auto& x : data) x = pr.get<float>("payload");
    if (!out.emplace(e.name, Tensor(e.shape, std::move(data))).second) {
      throw DataError("checkpoint: duplicate tensor " + e.name);
    }
  }
  return out;
}

void save_checkpoint(const std::string& path, const TensorRefs& tensors) {
  const std::string bytes = encode_checkpoint(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path);
}

TensorMap load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

void take_tensor(const TensorMap& m, const std::string& name, Tensor& dst) {
  auto it = m.find(name);
  if (it == m.end()) throw DataError("checkpoint: missing tensor " + name);
  if (!dst.empty() && !dst.same_shape(it->second)) {
    throw DimensionError("checkpoint: " + name + " has shape " + it->second.shape_string() + ", expected " +
                         dst.shape_string());
  }
  dst = it->second;
}

}  // namespace ambs

#include "vimq/container.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

namespace vimq {

namespace {

constexpr char kMagic[4] = {'V', 'I', 'M', 'Q'};

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    out_.insert(out_.end(), raw, raw + sizeof(T));
  }
  void put_bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw ValidationError("container truncated");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

bool known_dtype(std::uint8_t v) { return v <= static_cast<std::uint8_t>(DType::u8); }

}  // namespace

std::vector<std::uint8_t> write_container(std::span<const NamedTensor> entries) {
  std::unordered_set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.name).second) throw ValidationError("duplicate tensor name '" + e.name + "'");
    if (e.name.size() > 0xFFFF) throw ValidationError("tensor name too long");
    if (e.tensor.shape().size() > 0xFF) throw ValidationError("tensor rank too large");
    if (!known_dtype(static_cast<std::uint8_t>(e.tensor.dtype()))) throw ValidationError("unsupported dtype");
  }

  ByteWriter w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
  w.put<std::uint16_t>(kContainerVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes({reinterpret_cast<const std::uint8_t*>(e.name.data()), e.name.size()});
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.tensor.dtype()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.tensor.shape().size()));
    for (auto d : e.tensor.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    const std::uint64_t nbytes = e.tensor.bytes().size();
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(nbytes);
    offset += nbytes;
  }
  w.put<std::uint64_t>(offset);
  for (const auto& e : entries) w.put_bytes(e.tensor.bytes());
  return w.take();
}

std::vector<NamedTensor> read_container(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw ValidationError("not a VIMQ container (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kContainerVersion) throw ValidationError("unsupported container version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();

  struct Header {
    std::string name;
    DType dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t offset, nbytes;
  };
  std::vector<Header> headers;
  headers.reserve(std::min<std::size_t>(count, 1u << 16));
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    Header h;
    const auto name_len = r.get<std::uint16_t>();
    auto name = r.get_bytes(name_len);
    h.name.assign(name.begin(), name.end());
    if (!seen.insert(h.name).second) throw ValidationError("duplicate tensor name '" + h.name + "'");
    const auto dt = r.get<std::uint8_t>();
    if (!known_dtype(dt)) throw ValidationError("unsupported dtype code " + std::to_string(dt));
    h.dtype = static_cast<DType>(dt);
    const auto rank = r.get<std::uint8_t>();
    for (unsigned k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d > (1ull << 40)) throw ValidationError("implausible tensor dimension");
      h.shape.push_back(static_cast<std::int64_t>(d));
    }
    h.offset = r.get<std::uint64_t>();
    h.nbytes = r.get<std::uint64_t>();
    headers.push_back(std::move(h));
  }
  const auto payload_size = r.get<std::uint64_t>();
  if (payload_size != r.remaining()) throw ValidationError("container payload size mismatch");
  auto payload = r.get_bytes(payload_size);

  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  std::vector<NamedTensor> out;
  out.reserve(headers.size());
  for (auto& h : headers) {
    if (h.offset > payload_size || h.nbytes > payload_size - h.offset)
      throw ValidationError("tensor '" + h.name + "' lies outside the payload");
    ranges.emplace_back(h.offset, h.nbytes);
    auto slice = payload.subspan(h.offset, h.nbytes);
    out.push_back({h.name, Tensor::from_bytes(h.dtype, std::move(h.shape), {slice.begin(), slice.end()})});
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i)
    if (ranges[i - 1].first + ranges[i - 1].second > ranges[i].first)
      throw ValidationError("overlapping tensor ranges in container");
  return out;
}

void save_container(const std::filesystem::path& path, std::span<const NamedTensor> entries) {
  const auto bytes = write_container(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ValidationError("failed writing '" + path.string() + "'");
}

std::vector<NamedTensor> load_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return read_container(bytes);
}

TensorMap::TensorMap(std::vector<NamedTensor> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].name, i);
}

const Tensor* TensorMap::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second].tensor;
}

bool TensorMap::contains(const std::string& name) const { return find(name) != nullptr; }

const Tensor& TensorMap::at(const std::string& name) const {
  if (const auto* t = find(name)) return *t;
  throw ValidationError("missing tensor '" + name + "'");
}

}  // namespace vimq

#include "container.hpp"

#include <bit>
#include <cstring>

#include "eft/errors.hpp"

namespace eft::detail {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

constexpr char kMagic[4] = {'E', 'F', 'T', 'W'};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("weights container truncated");
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const Container& c) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.sizes.size()));
  for (auto s : c.sizes) put<std::uint32_t>(out, s);
  put<std::uint8_t>(out, c.tag);
  put<std::uint64_t>(out, c.values.size());
  for (double v : c.values) put<double>(out, v);
  return out;
}

Container decode_container(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad weights magic");
  Reader r(bytes);
  r.get<std::uint32_t>();  // magic
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) throw FormatError("unsupported weights version " + std::to_string(version));
  Container c;
  const auto n = r.get<std::uint32_t>();
  if (n > 1024) throw FormatError("implausible architecture descriptor");
  for (std::uint32_t i = 0; i < n; ++i) c.sizes.push_back(r.get<std::uint32_t>());
  c.tag = r.get<std::uint8_t>();
  const auto count = r.get<std::uint64_t>();
  if (count * sizeof(double) != r.remaining()) throw FormatError("weights container truncated or oversized");
  c.values.resize(count);
  for (auto& v : c.values) v = r.get<double>();
  return c;
}

}  // namespace eft::detail

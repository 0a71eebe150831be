#include "zonas/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "zonas/error.hpp"

namespace zonas {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'Z', 'N', 'S', 'C'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void doubles(double* out, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw FormatError(path_ + ": truncated container (need " + std::to_string(pos_ + n) + " bytes, have " +
                        std::to_string(bytes_.size()) + ")");
  }

  const std::string& bytes_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_container(const std::string& path, const std::vector<NamedTensor>& entries) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.shape().size()));
    for (std::size_t d : e.value.shape()) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(e.value.data().data()), e.value.numel() * sizeof(double));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("failed writing '" + path + "'");
}

std::vector<NamedTensor> read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open container '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path);
  if (r.str(4) != std::string(kMagic, 4)) throw FormatError(path + ": not a tensor container (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion)
    throw FormatError(path + ": unsupported container version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = r.str(r.get<std::uint32_t>());
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    e.value = Tensor(shape);
    r.doubles(e.value.data().data(), e.value.numel());
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError(path + ": trailing bytes after " + std::to_string(count) + " entries");
  return entries;
}

}  // namespace zonas

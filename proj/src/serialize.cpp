#include "advseg/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "advseg/errors.hpp"

namespace advseg {
namespace {

constexpr std::array<char, 5> kMagic = {'S', 'S', 'T', 'N', '1'};
constexpr std::uint32_t kMaxRank = 16;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_needed(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    std::reverse(b.begin(), b.end());
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
  }
}

void put_u32(std::ostream& os, std::uint32_t v) {
  v = byteswap_if_needed(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw FormatError("SSTN1: truncated header");
  }
  return byteswap_if_needed(v);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    for (double v : t.values()) {
      double s = byteswap_if_needed(v);
      os.write(reinterpret_cast<const char*>(&s), sizeof s);
    }
  }
  if (!os) throw FormatError("SSTN1: write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 5> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("SSTN1: bad magic");
  }
  const std::uint32_t rank = get_u32(is);
  if (rank > kMaxRank) throw FormatError("SSTN1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_u32(is);
  std::vector<double> data(shape_volume(shape));
  const auto bytes = static_cast<std::streamsize>(data.size() * sizeof(double));
  if (!is.read(reinterpret_cast<char*>(data.data()), bytes)) {
    throw FormatError("SSTN1: truncated payload, expected " + std::to_string(bytes) + " bytes");
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : data) v = byteswap_if_needed(v);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  write_text_file(path, os.str());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PathError("cannot open tensor file " + path.string());
  Tensor t = read_tensor(is);
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("SSTN1: trailing bytes in " + path.string());
  }
  return t;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw PathError("cannot open for writing: " + path.string());
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw PathError("write failed: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PathError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace advseg

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "voxscreen/volume.hpp"

using namespace voxscreen;
namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> header(const char* magic, uint32_t d, uint32_t h, uint32_t w) {
  std::vector<unsigned char> out(magic, magic + 4);
  for (uint32_t v : {d, h, w})
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  return out;
}

void append_floats(std::vector<unsigned char>& bytes, size_t n, float value) {
  const uint32_t u = std::bit_cast<uint32_t>(value);
  for (size_t k = 0; k < n; ++k)
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(u >> (8 * i)));
}

VolumeFormatError::Kind kind_of(const std::vector<unsigned char>& bytes) {
  try {
    decode_volume(bytes);
  } catch (const VolumeFormatError& e) {
    return e.kind();
  }
  FAIL("decode accepted malformed bytes");
  return VolumeFormatError::Kind::io;
}

}  // namespace

TEST_CASE("save then load is bit-exact") {
  const fs::path dir = fs::temp_directory_path() / "voxscreen_test_volume";
  fs::create_directories(dir);
  Volume v({2, 2, 2}, 0.5f);
  v.at(1, 0, 1) = -0.0f;
  v.at(0, 1, 0) = std::numeric_limits<float>::denorm_min();
  v.at(1, 1, 1) = 1234.5678f;
  save_volume(v, dir / "a.vol");
  const Volume r = load_volume(dir / "a.vol");
  CHECK(r.dims() == v.dims());
  CHECK(r.id() == "a");
  for (size_t i = 0; i < 8; ++i) {
    CHECK(std::bit_cast<uint32_t>(r.data()[i]) == std::bit_cast<uint32_t>(v.data()[i]));
  }
  fs::remove_all(dir);
}

TEST_CASE("encoded layout is the documented one") {
  Volume v({1, 1, 2}, std::vector<float>{1.0f, 2.0f});
  const auto bytes = encode_volume(v);
  auto expected = header("VOL1", 1, 1, 2);
  append_floats(expected, 1, 1.0f);
  append_floats(expected, 1, 2.0f);
  CHECK(bytes == expected);
}

TEST_CASE("malformed files raise distinct errors") {
  using K = VolumeFormatError::Kind;
  auto bytes = header("XXXX", 1, 1, 1);
  append_floats(bytes, 1, 0.0f);
  CHECK(kind_of(bytes) == K::bad_magic);

  bytes = header("VOL1", 3, 3, 3);
  append_floats(bytes, 26, 0.0f);
  CHECK(kind_of(bytes) == K::truncated);

  bytes = header("VOL1", 0xffffffffu, 0xffffffffu, 0xffffffffu);
  CHECK(kind_of(bytes) == K::dims_overflow);

  bytes = header("VOL1", 1, 1, 1);
  append_floats(bytes, 2, 0.0f);
  CHECK(kind_of(bytes) == K::trailing_bytes);

  bytes = header("VOL1", 1, 1, 1);
  append_floats(bytes, 1, std::numeric_limits<float>::quiet_NaN());
  CHECK(kind_of(bytes) == K::non_finite);

  CHECK(kind_of({'V', 'O', 'L', '1', 1, 0}) == K::truncated);
  CHECK(kind_of({'V', 'O'}) == K::bad_magic);
  CHECK_THROWS_AS(load_volume("/nonexistent/dir/x.vol"), VolumeFormatError);
}

TEST_CASE("volume construction validates") {
  CHECK_THROWS(Volume({2, 2, 2}, std::vector<float>(7)));
  CHECK_THROWS(Volume({0, 2, 2}));
  Volume v({2, 3, 4}, 1.0f);
  CHECK(v.index(1, 2, 3) == 23);
  CHECK(v.mean() == 1.0);
}

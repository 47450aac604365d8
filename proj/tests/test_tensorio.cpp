#include <bit>
#include <cmath>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "mgc/tensorio.hpp"
#include "support.hpp"

using namespace mgc;
using namespace mgc::tensorio;

namespace {

TensorBlob blob(std::vector<std::uint32_t> shape, std::vector<float> data) { return {std::move(shape), std::move(data)}; }

// Independent reader: pulls the header fields out of raw bytes without the codec.
struct RawHeader {
  std::string magic;
  int dtype = 0, ndim = 0;
  std::vector<std::uint32_t> dims;
};

RawHeader parse_raw(const std::vector<std::uint8_t>& b) {
  RawHeader h;
  h.magic.assign(b.begin(), b.begin() + 4);
  h.dtype = b[4];
  h.ndim = b[5];
  for (int i = 0; i < h.ndim; ++i) {
    const std::size_t o = 6 + 4 * i;
    h.dims.push_back(std::uint32_t(b[o]) | std::uint32_t(b[o + 1]) << 8 | std::uint32_t(b[o + 2]) << 16 |
                     std::uint32_t(b[o + 3]) << 24);
  }
  return h;
}

FormatErrorKind decode_error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_tensor(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("decode accepted malformed bytes");
  return FormatErrorKind::bad_header;
}

}  // namespace

TEST_CASE("tensor file layout for a 2x2 identity") {
  test::TempDir dir("io");
  const auto t = blob({2, 2}, {1, 0, 0, 1});
  write_tensor(dir / "eye.mgc", t);
  const auto bytes = read_file_bytes(dir / "eye.mgc");
  CHECK(bytes.size() == 30);
  const auto h = parse_raw(bytes);
  CHECK(h.magic == "MGC1");
  CHECK(h.dtype == 1);
  CHECK(h.ndim == 2);
  CHECK(h.dims == std::vector<std::uint32_t>{2, 2});
  const auto back = read_tensor(dir / "eye.mgc");
  CHECK(back.shape == t.shape);
  CHECK(back.data == t.data);
}

TEST_CASE("rgb clip header declares its dims") {
  Rng rng(3);
  TensorBlob t{{8, 3, 16, 16}, {}};
  t.data.resize(t.numel());
  for (auto& v : t.data) v = static_cast<float>(rng.uniform());
  const auto bytes = encode_tensor(t);
  const auto h = parse_raw(bytes);
  CHECK(h.ndim == 4);
  CHECK(h.dims == std::vector<std::uint32_t>{8, 3, 16, 16});
  CHECK(bytes.size() == 6 + 4 * 4 + 4 * t.numel());
}

TEST_CASE("random tensors up to five dims round-trip bit for bit") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    TensorBlob t;
    const int nd = 1 + static_cast<int>(rng.below(5));
    for (int d = 0; d < nd; ++d) t.shape.push_back(1 + static_cast<std::uint32_t>(rng.below(4)));
    t.data.resize(t.numel());
    for (auto& v : t.data) {
      // raw bit patterns cover denormals, signed zeros and extremes; NaN/inf are redrawn
      do {
        v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
      } while (!std::isfinite(v));
    }
    const auto bytes = encode_tensor(t);
    std::size_t used = 0;
    const auto back = decode_tensor(bytes, &used);
    CHECK(used == bytes.size());
    REQUIRE(back.shape == t.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      CHECK(std::bit_cast<std::uint32_t>(back.data[i]) == std::bit_cast<std::uint32_t>(t.data[i]));
    }
    CHECK(encode_tensor(back) == bytes);
  }
}

TEST_CASE("golden fixture decodes to its known values") {
  const auto path = std::filesystem::path(MGC_FIXTURE_DIR) / "golden_2x3.mgc";
  const auto t = read_tensor(path);
  CHECK(t.shape == std::vector<std::uint32_t>{2, 3});
  const std::vector<std::uint32_t> bits{0x3f800000, 0xc0200000, 0x3dcccccd, 0x7f7fffff, 0x00000001, 0x80000000};
  REQUIRE(t.data.size() == bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) CHECK(std::bit_cast<std::uint32_t>(t.data[i]) == bits[i]);
  CHECK(encode_tensor(t) == read_file_bytes(path));
}

TEST_CASE("malformed tensor files") {
  const auto good = encode_tensor(blob({2, 2}, {1, 0, 0, 1}));

  SUBCASE("bad magic") {
    auto b = good;
    std::copy_n("XXXX", 4, b.begin());
    CHECK(decode_error_kind(b) == FormatErrorKind::bad_magic);
  }
  SUBCASE("truncated payload") {
    auto b = good;
    b.resize(b.size() - 3);
    CHECK(decode_error_kind(b) == FormatErrorKind::truncated);
  }
  SUBCASE("truncated header") {
    std::vector<std::uint8_t> b(good.begin(), good.begin() + 8);
    CHECK(decode_error_kind(b) == FormatErrorKind::truncated);
  }
  SUBCASE("unknown dtype") {
    auto b = good;
    b[4] = 0x02;
    CHECK(decode_error_kind(b) == FormatErrorKind::unknown_dtype);
  }
  SUBCASE("zero dims") {
    auto b = good;
    b[6] = 0;
    CHECK(decode_error_kind(b) == FormatErrorKind::bad_header);
  }
  SUBCASE("trailing bytes in a whole-file read") {
    test::TempDir dir("trail");
    auto b = good;
    b.push_back(0);
    write_file_bytes(dir / "t.mgc", b);
    CHECK_THROWS_AS(read_tensor(dir / "t.mgc"), FormatError);
  }
  SUBCASE("missing file is an I/O error") {
    CHECK_THROWS_AS(read_tensor("/nonexistent/x.mgc"), IoError);
  }
}

TEST_CASE("non-finite data is rejected before writing") {
  test::TempDir dir("nan");
  CHECK_THROWS_AS(write_tensor(dir / "n.mgc", blob({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()})),
                  ValidationError);
  CHECK_THROWS_AS(encode_tensor(blob({1}, {std::numeric_limits<float>::infinity()})), ValidationError);
  CHECK_FALSE(std::filesystem::exists(dir / "n.mgc"));
}

TEST_CASE("shape/data mismatch is rejected") {
  CHECK_THROWS_AS(validate(blob({2, 2}, {1, 2, 3})), ValidationError);
  CHECK_THROWS_AS(validate(blob({}, {})), ValidationError);
}

TEST_CASE("f64 tensors narrow to f32 blobs") {
  Tensor t({3}, {0.1, -2.0, 1e-3});
  const auto b = to_blob(t);
  CHECK(b.shape == std::vector<std::uint32_t>{3});
  CHECK(b.data[0] == 0.1f);
  const auto back = from_blob(b);
  CHECK(back[1] == -2.0);
  CHECK(back[0] == static_cast<double>(0.1f));
}

TEST_CASE("manifest load, validation and round-trip") {
  test::TempDir dir("manifest");
  auto write_text = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
  };
  const std::string header = "num_classes 3\nclass 0 a\nclass 1 b\nclass 2 c\n";

  SUBCASE("two entries, three classes") {
    const auto p = write_text("m.txt", header + "clip x0 0 train rgb/x0.mgc pose/x0.mgc\n"
                                                "clip x1 2 test rgb/x1.mgc pose/x1.mgc\n");
    const auto m = load_manifest(p, false);
    CHECK(m.num_classes == 3);
    REQUIRE(m.entries.size() == 2);
    CHECK(m.entries[1].label == 2);
    CHECK(m.entries[1].split == Split::test);
    CHECK(m.split_entries(Split::train).size() == 1);

    save_manifest(m, dir / "again.txt");
    CHECK(load_manifest(dir / "again.txt", false) == m);
  }
  SUBCASE("label outside the class range") {
    const auto p = write_text("bad.txt", header + "clip x0 5 train rgb/x0.mgc pose/x0.mgc\n");
    CHECK_THROWS_AS(load_manifest(p, false), ValidationError);
  }
  SUBCASE("duplicate clip ids") {
    const auto p = write_text("dup.txt", header + "clip x0 0 train r p\nclip x0 1 val r p\n");
    CHECK_THROWS_AS(load_manifest(p, false), ValidationError);
  }
  SUBCASE("missing referenced file when paths are checked") {
    const auto p = write_text("miss.txt", header + "clip x0 0 train rgb/x0.mgc pose/x0.mgc\n");
    CHECK_THROWS_AS(load_manifest(p, true), ValidationError);
  }
  SUBCASE("unknown split") {
    const auto p = write_text("split.txt", header + "clip x0 0 holdout r p\n");
    CHECK_THROWS_AS(load_manifest(p, false), ValidationError);
  }
  SUBCASE("missing manifest") { CHECK_THROWS_AS(load_manifest(dir / "none.txt"), IoError); }
}

TEST_CASE("prediction files") {
  test::TempDir dir("pred");
  PredictionFile p{{"a", "clip_b"}, blob({2, 3}, {0.2f, 0.3f, 0.5f, 1.0f, 0.0f, 0.0f})};
  write_predictions(dir / "p.pred", p);
  const auto back = read_predictions(dir / "p.pred");
  CHECK(back.clip_ids == p.clip_ids);
  CHECK(back.probs.shape == p.probs.shape);
  CHECK(back.probs.data == p.probs.data);

  SUBCASE("rows must sum to one") {
    PredictionFile bad{{"a"}, blob({1, 2}, {0.5f, 0.6f})};
    CHECK_THROWS_AS(write_predictions(dir / "bad.pred", bad), ValidationError);
  }
  SUBCASE("row count must match ids") {
    PredictionFile bad{{"a", "b"}, blob({1, 2}, {0.5f, 0.5f})};
    CHECK_THROWS_AS(validate(bad), ValidationError);
  }
}

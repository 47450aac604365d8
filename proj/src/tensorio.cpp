#include "mgc/tensorio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace mgc::tensorio {

namespace {

constexpr std::uint8_t kMagic[4] = {'M', 'G', 'C', '1'};
constexpr std::uint8_t kPredMagic[4] = {'M', 'G', 'P', '1'};
constexpr std::uint8_t kDtypeF32 = 0x01;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(FormatErrorKind::truncated, std::string("truncated while reading ") + what);
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  std::span<const std::uint8_t> rest() const { return bytes_.subspan(pos_); }
  void skip(std::size_t n) { pos_ += n; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::size_t TensorBlob::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::bad_magic: return "bad-magic";
    case FormatErrorKind::truncated: return "truncated";
    case FormatErrorKind::unknown_dtype: return "unknown-dtype";
    case FormatErrorKind::bad_header: return "bad-header";
    case FormatErrorKind::trailing_bytes: return "trailing-bytes";
  }
  return "?";
}

FormatError::FormatError(FormatErrorKind kind, const std::string& what)
    : IoError(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

void validate(const TensorBlob& t) {
  if (t.shape.empty() || t.shape.size() > 255) throw ValidationError("tensor rank must be in [1,255]");
  for (auto d : t.shape) {
    if (d == 0) throw ValidationError("tensor dims must be positive");
  }
  if (t.data.size() != t.numel()) {
    throw ValidationError("tensor buffer holds " + std::to_string(t.data.size()) + " values, shape needs " +
                          std::to_string(t.numel()));
  }
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    if (!std::isfinite(t.data[i])) throw ValidationError("tensor value at flat index " + std::to_string(i) + " is not finite");
  }
}

std::vector<std::uint8_t> encode_tensor(const TensorBlob& t) {
  validate(t);
  std::vector<std::uint8_t> out;
  out.reserve(6 + 4 * t.shape.size() + 4 * t.data.size());
  for (auto b : kMagic) out.push_back(b);
  out.push_back(kDtypeF32);
  out.push_back(static_cast<std::uint8_t>(t.shape.size()));
  for (auto d : t.shape) put_u32(out, d);
  for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

TensorBlob decode_tensor(std::span<const std::uint8_t> bytes, std::size_t* consumed) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(FormatErrorKind::bad_magic, "expected \"MGC1\"");
  const std::uint8_t dtype = *r.take(1, "dtype");
  if (dtype != kDtypeF32) throw FormatError(FormatErrorKind::unknown_dtype, "dtype code " + std::to_string(dtype));
  const std::uint8_t ndim = *r.take(1, "ndim");
  if (ndim == 0) throw FormatError(FormatErrorKind::bad_header, "ndim is zero");
  TensorBlob t;
  t.shape.resize(ndim);
  std::uint64_t count = 1;
  for (auto& d : t.shape) {
    d = get_u32(r.take(4, "dims"));
    if (d == 0) throw FormatError(FormatErrorKind::bad_header, "zero dimension");
    count *= d;
    if (count > (std::uint64_t{1} << 34)) throw FormatError(FormatErrorKind::bad_header, "tensor too large");
  }
  const std::uint8_t* payload = r.take(4 * count, "payload");
  t.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) t.data[i] = std::bit_cast<float>(get_u32(payload + 4 * i));
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::isfinite(t.data[i])) throw ValidationError("decoded tensor holds a non-finite value at " + std::to_string(i));
  }
  if (consumed) *consumed = r.pos();
  return t;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_tensor(const std::filesystem::path& path, const TensorBlob& t) { write_file_bytes(path, encode_tensor(t)); }

TensorBlob read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t used = 0;
  TensorBlob t = decode_tensor(bytes, &used);
  if (used != bytes.size()) {
    throw FormatError(FormatErrorKind::trailing_bytes, path.string() + " has " + std::to_string(bytes.size() - used) +
                                                          " bytes past the payload");
  }
  return t;
}

TensorBlob to_blob(const Tensor& t) {
  TensorBlob b;
  b.shape.assign(t.shape().begin(), t.shape().end());
  b.data.resize(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) b.data[i] = static_cast<float>(t[i]);
  return b;
}

Tensor from_blob(const TensorBlob& b) {
  Shape shape(b.shape.begin(), b.shape.end());
  std::vector<double> data(b.data.begin(), b.data.end());
  return Tensor(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------- manifests

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "' (expected train, val or test)");
}

std::filesystem::path DatasetManifest::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<const ManifestEntry*> DatasetManifest::split_entries(Split s) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == s) out.push_back(&e);
  }
  return out;
}

void validate(const DatasetManifest& m, bool check_paths) {
  if (m.num_classes <= 0) throw ValidationError("manifest num_classes must be positive");
  if (static_cast<int>(m.class_names.size()) != m.num_classes) {
    throw ValidationError("manifest lists " + std::to_string(m.class_names.size()) + " class names for K=" +
                          std::to_string(m.num_classes));
  }
  std::set<std::string> ids;
  for (const auto& e : m.entries) {
    if (e.clip_id.empty() || e.clip_id.find_first_of(" \t\n") != std::string::npos) {
      throw ValidationError("clip id '" + e.clip_id + "' is empty or contains whitespace");
    }
    if (e.label < 0 || e.label >= m.num_classes) {
      throw ValidationError("clip " + e.clip_id + " has label " + std::to_string(e.label) + " outside [0," +
                            std::to_string(m.num_classes) + ")");
    }
    if (!ids.insert(e.clip_id).second) throw ValidationError("duplicate clip id " + e.clip_id);
    if (check_paths) {
      for (const auto* p : {&e.rgb_path, &e.pose_path}) {
        if (!std::filesystem::is_regular_file(m.resolve(*p))) {
          throw ValidationError("clip " + e.clip_id + " references missing file " + m.resolve(*p).string());
        }
      }
    }
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path, bool check_paths) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  std::string line;
  int lineno = 0;
  bool have_k = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    auto fail = [&](const std::string& why) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    if (key == "num_classes") {
      if (!(ss >> m.num_classes)) fail("num_classes needs an integer");
      have_k = true;
    } else if (key == "class") {
      int idx = -1;
      std::string name;
      if (!(ss >> idx >> name)) fail("class record needs <index> <name>");
      if (idx != static_cast<int>(m.class_names.size())) fail("class records must be listed in index order");
      m.class_names.push_back(name);
    } else if (key == "clip") {
      ManifestEntry e;
      std::string split, rgb, pose;
      if (!(ss >> e.clip_id >> e.label >> split >> rgb >> pose)) {
        fail("clip record needs <id> <label> <split> <rgb_path> <pose_path>");
      }
      e.split = parse_split(split);
      e.rgb_path = rgb;
      e.pose_path = pose;
      m.entries.push_back(std::move(e));
    } else {
      fail("unknown record '" + key + "'");
    }
    std::string extra;
    if (ss >> extra) fail("unexpected trailing token '" + extra + "'");
  }
  if (!have_k) throw ValidationError(path.string() + ": missing num_classes record");
  validate(m, check_paths);
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  validate(m, false);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << "# mgc dataset manifest v1\n";
  out << "num_classes " << m.num_classes << "\n";
  for (std::size_t k = 0; k < m.class_names.size(); ++k) out << "class " << k << " " << m.class_names[k] << "\n";
  for (const auto& e : m.entries) {
    out << "clip " << e.clip_id << " " << e.label << " " << to_string(e.split) << " " << e.rgb_path.generic_string()
        << " " << e.pose_path.generic_string() << "\n";
  }
  if (!out) throw IoError("write failed for " + path.string());
}

// --------------------------------------------------------------- predictions

void validate(const PredictionFile& p) {
  validate(p.probs);
  if (p.probs.shape.size() != 2 || p.probs.shape[0] != p.clip_ids.size()) {
    throw ValidationError("prediction probs must be (N,K) with N equal to the clip id count");
  }
  const std::size_t k = p.probs.shape[1];
  for (std::size_t i = 0; i < p.clip_ids.size(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const float v = p.probs.data[i * k + j];
      if (v < 0.0f || v > 1.0f) throw ValidationError("probability outside [0,1] for clip " + p.clip_ids[i]);
      sum += v;
    }
    if (std::abs(sum - 1.0) > kProbRowTolerance) {
      throw ValidationError("probability row for clip " + p.clip_ids[i] + " sums to " + std::to_string(sum));
    }
  }
}

void write_predictions(const std::filesystem::path& path, const PredictionFile& p) {
  validate(p);
  std::vector<std::uint8_t> out(std::begin(kPredMagic), std::end(kPredMagic));
  put_u32(out, static_cast<std::uint32_t>(p.clip_ids.size()));
  for (const auto& id : p.clip_ids) {
    if (id.size() > 0xFFFF) throw ValidationError("clip id too long");
    put_u16(out, static_cast<std::uint16_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
  }
  const auto tensor = encode_tensor(p.probs);
  out.insert(out.end(), tensor.begin(), tensor.end());
  write_file_bytes(path, out);
}

PredictionFile read_predictions(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), kPredMagic, 4) != 0) {
    throw FormatError(FormatErrorKind::bad_magic, path.string() + " is not a prediction file");
  }
  PredictionFile p;
  const std::uint32_t n = get_u32(r.take(4, "row count"));
  p.clip_ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint16_t len = get_u16(r.take(2, "id length"));
    const auto* s = r.take(len, "clip id");
    p.clip_ids.emplace_back(reinterpret_cast<const char*>(s), len);
  }
  std::size_t used = 0;
  p.probs = decode_tensor(r.rest(), &used);
  if (r.pos() + used != bytes.size()) throw FormatError(FormatErrorKind::trailing_bytes, path.string());
  validate(p);
  return p;
}

}  // namespace mgc::tensorio

#pragma once

// On-disk codec shared by every module and the CLI.
//
// Tensor file (".mgc"), little-endian throughout:
//   bytes 0..3   magic "MGC1"
//   byte  4      dtype code, 0x01 = f32 (the only supported dtype)
//   byte  5      ndim (>= 1)
//   ndim x u32   dims (each > 0)
//   payload      product(dims) x f32, row-major
//
// Prediction file (".pred"):
//   "MGP1", u32 N, N x (u16 byte length + UTF-8 clip id), then an embedded
//   tensor record of shape (N, K) in the format above.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mgc/errors.hpp"
#include "mgc/tensor.hpp"

namespace mgc::tensorio {

struct TensorBlob {
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  std::size_t numel() const;
};

enum class FormatErrorKind { bad_magic, truncated, unknown_dtype, bad_header, trailing_bytes };

const char* to_string(FormatErrorKind kind);

class FormatError : public IoError {
 public:
  FormatError(FormatErrorKind kind, const std::string& what);
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

// Throws ValidationError on empty/zero dims, length mismatch or non-finite data.
void validate(const TensorBlob& t);

std::vector<std::uint8_t> encode_tensor(const TensorBlob& t);
// Decodes one record from the front of `bytes`; `consumed` receives its length.
TensorBlob decode_tensor(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr);

void write_tensor(const std::filesystem::path& path, const TensorBlob& t);
TensorBlob read_tensor(const std::filesystem::path& path);

// Narrowing/widening between the on-disk f32 blob and the f64 compute tensor.
TensorBlob to_blob(const Tensor& t);
Tensor from_blob(const TensorBlob& b);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------- manifests

enum class Split { train, val, test };

const char* to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
  std::string clip_id;
  int label = 0;
  std::filesystem::path rgb_path;   // as written in the file (relative to the manifest directory)
  std::filesystem::path pose_path;
  Split split = Split::train;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  // Directory that relative entry paths resolve against; not serialized.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  std::vector<const ManifestEntry*> split_entries(Split s) const;
  bool operator==(const DatasetManifest& o) const {
    return num_classes == o.num_classes && class_names == o.class_names && entries == o.entries;
  }
};

// Checks labels, unique ids, class-name count; with `check_paths`, that every
// referenced tensor file exists.
void validate(const DatasetManifest& m, bool check_paths);

DatasetManifest load_manifest(const std::filesystem::path& path, bool check_paths = true);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// --------------------------------------------------------------- predictions

struct PredictionFile {
  std::vector<std::string> clip_ids;
  TensorBlob probs;  // (N, K)

  std::size_t num_rows() const { return clip_ids.size(); }
  std::size_t num_classes() const { return probs.shape.size() == 2 ? probs.shape[1] : 0; }
};

inline constexpr double kProbRowTolerance = 1e-5;

void validate(const PredictionFile& p);
void write_predictions(const std::filesystem::path& path, const PredictionFile& p);
PredictionFile read_predictions(const std::filesystem::path& path);

}  // namespace mgc::tensorio

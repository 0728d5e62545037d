#ifndef VIRDA_SAFETENSORS_HPP_
#define VIRDA_SAFETENSORS_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "virda/tensor.hpp"

namespace virda {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorRecord {
  std::string name;
  std::string dtype;  // "F32", "F64", "I64", ...
  std::vector<std::int64_t> shape;
  std::vector<char> bytes;

  std::int64_t element_count() const;
};

/// In-memory image of a safetensors file: an 8-byte little-endian header
/// length, a JSON header (tensor table plus a string-to-string
/// "__metadata__" map), then raw little-endian tensor bytes.
class TensorArchive {
 public:
  std::map<std::string, std::string> metadata;

  template <typename Scalar>
  void add(const std::string& name, const RowMatrix<Scalar>& value,
           std::vector<std::int64_t> shape = {});

  void add_record(TensorRecord record);

  bool contains(const std::string& name) const;
  const TensorRecord& record(const std::string& name) const;
  const std::vector<TensorRecord>& records() const { return tensors_; }

  /// Converts a stored F32/F64 tensor to a rows x cols matrix (rows = shape[0]).
  template <typename Scalar>
  RowMatrix<Scalar> get(const std::string& name) const;

 private:
  std::vector<TensorRecord> tensors_;
};

/// Writes to a sibling temporary file and renames it into place.
void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_safetensors(const std::filesystem::path& path);

}  // namespace virda

#endif  // VIRDA_SAFETENSORS_HPP_

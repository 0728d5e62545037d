#include "virda/safetensors.hpp"

#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace virda {

namespace {

template <typename Scalar>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() {
  return "F32";
}
template <>
constexpr const char* dtype_name<double>() {
  return "F64";
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F64" || dtype == "I64" || dtype == "U64") return 8;
  if (dtype == "F32" || dtype == "I32" || dtype == "U32") return 4;
  if (dtype == "F16" || dtype == "BF16" || dtype == "I16" || dtype == "U16") return 2;
  if (dtype == "I8" || dtype == "U8" || dtype == "BOOL") return 1;
  throw ArchiveError("unsupported tensor dtype '" + dtype + "'");
}

}  // namespace

std::int64_t TensorRecord::element_count() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

template <typename Scalar>
void TensorArchive::add(const std::string& name, const RowMatrix<Scalar>& value,
                        std::vector<std::int64_t> shape) {
  if (shape.empty()) shape = {value.rows(), value.cols()};
  TensorRecord rec;
  rec.name = name;
  rec.dtype = dtype_name<Scalar>();
  rec.shape = std::move(shape);
  if (rec.element_count() != value.size()) {
    throw ArchiveError("tensor '" + name + "': shape does not match value size");
  }
  rec.bytes.resize(static_cast<std::size_t>(value.size()) * sizeof(Scalar));
  std::memcpy(rec.bytes.data(), value.data(), rec.bytes.size());
  add_record(std::move(rec));
}

void TensorArchive::add_record(TensorRecord record) {
  if (contains(record.name)) throw ArchiveError("duplicate tensor '" + record.name + "'");
  tensors_.push_back(std::move(record));
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return true;
  return false;
}

const TensorRecord& TensorArchive::record(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw ArchiveError("tensor '" + name + "' not found in archive");
}

template <typename Scalar>
RowMatrix<Scalar> TensorArchive::get(const std::string& name) const {
  const TensorRecord& rec = record(name);
  const std::int64_t count = rec.element_count();
  const Index rows = rec.shape.empty() ? 1 : rec.shape.front();
  const Index cols = rows == 0 ? 0 : count / rows;
  RowMatrix<Scalar> out(rows, cols);
  if (rec.dtype == "F32") {
    const auto* src = reinterpret_cast<const float*>(rec.bytes.data());
    for (std::int64_t i = 0; i < count; ++i) out.data()[i] = static_cast<Scalar>(src[i]);
  } else if (rec.dtype == "F64") {
    const auto* src = reinterpret_cast<const double*>(rec.bytes.data());
    for (std::int64_t i = 0; i < count; ++i) out.data()[i] = static_cast<Scalar>(src[i]);
  } else {
    throw ArchiveError("tensor '" + name + "' has non-floating dtype " + rec.dtype);
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::ordered_json header;
  if (!archive.metadata.empty()) {
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : archive.metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::size_t offset = 0;
  for (const auto& t : archive.records()) {
    header[t.name] = {{"dtype", t.dtype},
                      {"shape", t.shape},
                      {"data_offsets", {offset, offset + t.bytes.size()}}};
    offset += t.bytes.size();
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  const std::uint64_t header_len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot open '" + tmp.string() + "' for writing");
    char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<char>((header_len >> (8 * i)) & 0xFF);
    out.write(len_bytes, 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : archive.records())
      out.write(t.bytes.data(), static_cast<std::streamsize>(t.bytes.size()));
    if (!out) throw ArchiveError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open '" + path.string() + "'");
  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  if (!in) throw ArchiveError("'" + path.string() + "' is truncated");
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= std::uint64_t(len_bytes[i]) << (8 * i);
  const auto file_size = std::filesystem::file_size(path);
  if (header_len > file_size - 8) throw ArchiveError("'" + path.string() + "' has a bad header");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError("'" + path.string() + "': malformed header: " + e.what());
  }
  const std::uint64_t data_size = file_size - 8 - header_len;
  std::vector<char> data(data_size);
  in.read(data.data(), static_cast<std::streamsize>(data_size));
  if (!in) throw ArchiveError("'" + path.string() + "' is truncated");

  TensorArchive archive;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == "__metadata__") {
      for (auto m = it.value().begin(); m != it.value().end(); ++m)
        archive.metadata[m.key()] = m.value().get<std::string>();
      continue;
    }
    const auto& entry = it.value();
    TensorRecord rec;
    rec.name = it.key();
    rec.dtype = entry.at("dtype").get<std::string>();
    rec.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto begin = entry.at("data_offsets").at(0).get<std::uint64_t>();
    const auto end = entry.at("data_offsets").at(1).get<std::uint64_t>();
    if (end < begin || end > data_size ||
        end - begin != static_cast<std::uint64_t>(rec.element_count()) * dtype_size(rec.dtype)) {
      throw ArchiveError("tensor '" + rec.name + "' has inconsistent offsets");
    }
    rec.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(begin),
                     data.begin() + static_cast<std::ptrdiff_t>(end));
    archive.add_record(std::move(rec));
  }
  return archive;
}

template void TensorArchive::add<float>(const std::string&, const RowMatrix<float>&,
                                        std::vector<std::int64_t>);
template void TensorArchive::add<double>(const std::string&, const RowMatrix<double>&,
                                         std::vector<std::int64_t>);
template RowMatrix<float> TensorArchive::get<float>(const std::string&) const;
template RowMatrix<double> TensorArchive::get<double>(const std::string&) const;

}  // namespace virda

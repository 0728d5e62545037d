#ifndef VIRDA_HASH_HPP_
#define VIRDA_HASH_HPP_

#include <cstddef>
#include <memory>
#include <string>

namespace virda {

/// Incremental SHA-256 with a lowercase hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t bytes);
  Sha256& update(const std::string& s) { return update(s.data(), s.size()); }
  template <typename T>
  Sha256& update_value(const T& v) {
    return update(&v, sizeof(T));
  }
  std::string hex_digest();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string sha256_file(const std::string& path);

}  // namespace virda

#endif  // VIRDA_HASH_HPP_

#ifndef VIRDA_DATA_HPP_
#define VIRDA_DATA_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "virda/augment.hpp"
#include "virda/backbone.hpp"
#include "virda/reprogram.hpp"
#include "virda/rng.hpp"
#include "virda/tensor.hpp"

namespace virda {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-channel statistics applied after augmentation, keyed by backbone.
struct Normalization {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.5, 0.5, 0.5};
};

Normalization normalization_for(Arch arch);

/// Labelled (or unlabelled) images of one domain and split. Images are held
/// in memory as RGB uint8, or listed as files decoded on access.
class DomainDataset {
 public:
  std::string name;
  Domain domain = Domain::source;
  std::string split = "train";
  int height = 32;
  int width = 32;
  int channels = 3;
  std::vector<std::string> class_names;
  std::vector<int> labels;
  std::vector<std::uint8_t> pixels;          // size() * height * width * channels
  std::vector<std::filesystem::path> files;  // lazily decoded images
  int load_size = 0;  // file images are resized to load_size^2 then cropped; 0: resize directly

  std::size_t size() const;
  bool has_labels() const { return !labels.empty(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  bool lazy() const { return !files.empty(); }

  /// Appends an in-memory RGB uint8 image of the dataset's shape.
  void add(const cv::Mat& rgb_u8, int label);

  /// RGB uint8 image. For file-backed datasets `crop_rng` selects a random
  /// crop and horizontal flip; without it the centre crop is used.
  cv::Mat image_u8(std::size_t i, Rng* crop_rng = nullptr) const;
  /// Float image in [0, 1].
  cv::Mat image(std::size_t i, Rng* crop_rng = nullptr) const;

  std::vector<int> class_histogram() const;
  /// SHA-256 over shape, class names, labels and pixels (or file paths).
  std::string checksum() const;
  void validate() const;
};

/// Throws unless both datasets carry the same class list.
void require_shared_label_space(const DomainDataset& a, const DomainDataset& b);

/// Float images to a normalized c x (n h w) batch.
template <typename Scalar>
FeatureMap<Scalar> to_feature_map(const std::vector<cv::Mat>& images, const Normalization& norm);

enum class View { plain, train, strong };

/// Gathers `indices` into a normalized batch. `train` applies the random crop
/// and flip of file-backed datasets, `strong` the strong augmentation; both
/// draw from per-sample generators derived from `seed`.
template <typename Scalar>
FeatureMap<Scalar> load_batch(const DomainDataset& ds, const std::vector<std::size_t>& indices,
                              const Normalization& norm, View view = View::plain,
                              std::uint64_t seed = 0, const AugmentPolicy& policy = {});

std::vector<int> gather_labels(const DomainDataset& ds, const std::vector<std::size_t>& indices);

/// MNIST (idx, optionally gzipped), USPS (libsvm text, optionally gzipped) or
/// SVHN (MATLAB v5 .mat). Looked up under root/<name>/ or root/.
DomainDataset load_digits(const std::string& name, const std::string& split,
                          const std::filesystem::path& root, Domain domain = Domain::source);

/// root/<domain>/<class>/<image>. Classes are the sorted directory names.
DomainDataset load_office(const std::filesystem::path& root, const std::string& domain_name,
                          Domain domain = Domain::source, int image_size = 224,
                          int load_size = 256);

/// Target-side transform of the synthetic pair.
// Default: a position-locked low-frequency texture plus mild blur. Colour
// inversion is available but pushes a source-trained backbone below chance.
struct ShiftSpec {
  bool invert = false;
  double texture_amplitude = 0.7;
  int texture_period = 16;
  double blur_sigma = 0.8;
  std::array<double, 3> tint{1.0, 1.0, 1.0};
};

struct SyntheticPair {
  DomainDataset source_train, source_test, target_train, target_test;
};

/// Ten rendered shape classes at 32x32x3. The target domain is an
/// independent rendering with the same label list, passed through `shift`.
SyntheticPair make_synthetic_pair(std::uint64_t seed, const ShiftSpec& shift = {},
                                  int train_per_domain = 2000, int test_per_domain = 500);

/// Clean renderings of the same shape classes, disjoint from every split of
/// make_synthetic_pair; used to pretrain the tiny backbone.
DomainDataset make_pretraining_set(std::uint64_t seed, int count = 2000);

/// Applies the synthetic shift to one float RGB image.
cv::Mat apply_shift(const cv::Mat& image, const ShiftSpec& shift);

/// Independent shuffled iterators over two datasets. An epoch is
/// ceil(max(N_s, N_t) / k) steps; the larger side visits each sample once per
/// epoch (its last batch is topped up from the start of the same permutation)
/// and the smaller side cycles through fresh permutations.
class PairedBatchStream {
 public:
  PairedBatchStream(std::size_t source_size, std::size_t target_size, int k, std::uint64_t seed);

  struct Pair {
    std::vector<std::size_t> source;
    std::vector<std::size_t> target;
  };

  int steps_per_epoch() const { return steps_per_epoch_; }
  int batch_size() const { return k_; }
  Pair next();
  int epoch() const { return epoch_; }

 private:
  struct Side {
    std::size_t size = 0;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    int shuffles = 0;
  };
  std::vector<std::size_t> take(Side& side, bool larger, int salt);
  void reshuffle(Side& side, int salt);

  std::size_t source_size_, target_size_;
  int k_;
  std::uint64_t seed_;
  int steps_per_epoch_;
  int step_in_epoch_ = 0;
  int epoch_ = 0;
  Side source_, target_;
};

PairedBatchStream paired_batches(const DomainDataset& src, const DomainDataset& tgt, int k,
                                 std::uint64_t seed);

}  // namespace virda

#endif  // VIRDA_DATA_HPP_

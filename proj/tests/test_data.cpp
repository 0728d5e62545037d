#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>
#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "virda/augment.hpp"
#include "virda/data.hpp"

using namespace virda;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

// Three 28x28 digits: image i is filled with 40 * (i + 1); labels 7, 0, 3.
void write_mnist(const fs::path& dir, bool compress) {
  std::vector<std::uint8_t> img, lab;
  put_be32(img, 2051);
  put_be32(img, 3);
  put_be32(img, 28);
  put_be32(img, 28);
  for (int i = 0; i < 3; ++i) img.insert(img.end(), 28 * 28, static_cast<std::uint8_t>(40 * (i + 1)));
  put_be32(lab, 2049);
  put_be32(lab, 3);
  lab.insert(lab.end(), {7, 0, 3});
  auto write = [&](const std::string& name, const std::vector<std::uint8_t>& bytes) {
    if (compress) {
      gzFile f = gzopen((dir / (name + ".gz")).string().c_str(), "wb");
      gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
      gzclose(f);
    } else {
      std::ofstream(dir / name, std::ios::binary)
          .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
  };
  write("train-images-idx3-ubyte", img);
  write("train-labels-idx1-ubyte", lab);
}

double mean_abs_difference(const DomainDataset& a, const DomainDataset& b) {
  // Mean over images first, so the per-image content cancels and only
  // systematic appearance differences remain.
  const std::size_t per = std::size_t(a.height) * a.width * a.channels;
  std::vector<double> ma(per, 0.0), mb(per, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < per; ++j) ma[j] += a.pixels[i * per + j] / 255.0 / a.size();
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < per; ++j) mb[j] += b.pixels[i * per + j] / 255.0 / b.size();
  double d = 0;
  for (std::size_t j = 0; j < per; ++j) d += std::abs(ma[j] - mb[j]);
  return d / per;
}

}  // namespace

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
  const auto a = make_synthetic_pair(5, {}, 100, 40);
  const auto b = make_synthetic_pair(5, {}, 100, 40);
  EXPECT_EQ(a.source_train.pixels, b.source_train.pixels);
  EXPECT_EQ(a.target_test.pixels, b.target_test.pixels);
  EXPECT_EQ(a.target_train.labels, b.target_train.labels);
  EXPECT_EQ(a.source_train.checksum(), b.source_train.checksum());
  const auto c = make_synthetic_pair(6, {}, 100, 40);
  EXPECT_NE(a.source_train.checksum(), c.source_train.checksum());
}

TEST(Synthetic, DefaultShapeAndSizes) {
  const auto p = make_synthetic_pair(0);
  EXPECT_EQ(p.source_train.size(), 2000u);
  EXPECT_EQ(p.source_test.size(), 500u);
  EXPECT_EQ(p.target_train.size(), 2000u);
  EXPECT_EQ(p.target_test.size(), 500u);
  EXPECT_EQ(p.source_train.num_classes(), 10);
  EXPECT_EQ(p.source_train.height, 32);
  EXPECT_EQ(p.source_train.channels, 3);
  EXPECT_EQ(p.source_train.class_names, p.target_train.class_names);
  EXPECT_NO_THROW(require_shared_label_space(p.source_train, p.target_test));
  for (int count : p.source_train.class_histogram()) EXPECT_GT(count, 150);
}

TEST(Synthetic, DomainGapExists) {
  const auto p = make_synthetic_pair(1, {}, 300, 300);
  const double across = mean_abs_difference(p.source_test, p.target_test);
  const double within = mean_abs_difference(p.source_test, p.source_train);
  EXPECT_GT(across, 0.1);
  EXPECT_GT(across, 5 * within);
}

TEST(Synthetic, NeutralShiftIsIdentity) {
  ShiftSpec none;
  none.invert = false;
  none.texture_amplitude = 0;
  none.blur_sigma = 0;
  cv::Mat img(8, 8, CV_32FC3);
  cv::randu(img, 0.0, 1.0);
  const cv::Mat out = apply_shift(img, none);
  EXPECT_EQ(cv::norm(out, img, cv::NORM_INF), 0.0);
  ShiftSpec inv = none;
  inv.invert = true;
  EXPECT_LT(cv::norm(apply_shift(img, inv) + img, cv::Mat(8, 8, CV_32FC3, cv::Scalar::all(1.0)),
                     cv::NORM_INF),
            1e-6);
}

TEST(Synthetic, PretrainingSetIsDisjointFromPair) {
  const auto pre = make_pretraining_set(0, 200);
  const auto pair = make_synthetic_pair(0, {}, 200, 50);
  EXPECT_NE(pre.checksum(), pair.source_train.checksum());
  std::set<std::vector<std::uint8_t>> seen;
  const std::size_t per = 32 * 32 * 3;
  for (std::size_t i = 0; i < pair.source_train.size(); ++i)
    seen.emplace(pair.source_train.pixels.begin() + long(i * per),
                 pair.source_train.pixels.begin() + long((i + 1) * per));
  for (std::size_t i = 0; i < pre.size(); ++i)
    EXPECT_EQ(seen.count(std::vector<std::uint8_t>(pre.pixels.begin() + long(i * per),
                                                   pre.pixels.begin() + long((i + 1) * per))),
              0u);
}

TEST(PairedBatches, EpochCoversLargerSide) {
  PairedBatchStream stream(50, 23, 8, 3);
  EXPECT_EQ(stream.steps_per_epoch(), 7);
  std::set<std::size_t> src;
  for (int s = 0; s < stream.steps_per_epoch(); ++s) {
    const auto p = stream.next();
    EXPECT_EQ(p.source.size(), 8u);
    EXPECT_EQ(p.target.size(), 8u);
    for (auto i : p.source) {
      EXPECT_LT(i, 50u);
      src.insert(i);
    }
    for (auto i : p.target) EXPECT_LT(i, 23u);
  }
  EXPECT_EQ(src.size(), 50u);
  EXPECT_EQ(stream.epoch(), 0);
  stream.next();
  EXPECT_EQ(stream.epoch(), 1);
}

TEST(PairedBatches, DeterministicBySeed) {
  PairedBatchStream a(40, 40, 5, 9), b(40, 40, 5, 9), c(40, 40, 5, 10);
  bool differs = false;
  for (int s = 0; s < 20; ++s) {
    const auto pa = a.next(), pb = b.next(), pc = c.next();
    EXPECT_EQ(pa.source, pb.source);
    EXPECT_EQ(pa.target, pb.target);
    differs = differs || pa.source != pc.source;
  }
  EXPECT_TRUE(differs);
}

TEST(PairedBatches, RejectsOversizedBatch) {
  EXPECT_THROW(PairedBatchStream(10, 4, 5, 0), ConfigError);
  EXPECT_THROW(PairedBatchStream(10, 10, 0, 0), ConfigError);
}

TEST(Batches, PlainViewIsNormalizedPixels) {
  const auto p = make_synthetic_pair(0, {}, 20, 10);
  const Normalization norm = normalization_for(Arch::resnet18);
  const auto x = load_batch<double>(p.source_train, {3, 7}, norm);
  ASSERT_EQ(x.n, 2);
  const cv::Mat u8 = p.source_train.image_u8(7);
  const auto px = u8.at<cv::Vec3b>(5, 9);
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR(x.at(c, 1, 5, 9), (px[c] / 255.0 - norm.mean[c]) / norm.std[c], 1e-6);
  EXPECT_EQ(gather_labels(p.source_train, {3, 7}),
            (std::vector<int>{p.source_train.labels[3], p.source_train.labels[7]}));
}

TEST(Augment, StrongViewIsSeededAndBounded) {
  cv::Mat img(32, 32, CV_32FC3);
  cv::randu(img, 0.0, 1.0);
  const cv::Mat a = strong_view(img, 4), b = strong_view(img, 4), c = strong_view(img, 5);
  EXPECT_EQ(cv::norm(a, b, cv::NORM_INF), 0.0);
  EXPECT_GT(cv::norm(a, c, cv::NORM_INF), 0.0);
  EXPECT_EQ(a.size(), img.size());
  double lo, hi;
  cv::minMaxLoc(a.reshape(1), &lo, &hi);
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
  EXPECT_EQ(&weak_view(img), &img);
}

class MnistFiles : public ::testing::TestWithParam<bool> {};

TEST_P(MnistFiles, LoadsIdxFiles) {
  TempDir dir("virda_mnist_test");
  fs::create_directories(dir.path / "mnist");
  write_mnist(dir.path / "mnist", GetParam());
  const auto ds = load_digits("mnist", "train", dir.path);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.labels, (std::vector<int>{7, 0, 3}));
  EXPECT_EQ(ds.height, 32);
  EXPECT_EQ(ds.channels, 3);
  const auto px = ds.image_u8(1).at<cv::Vec3b>(16, 16);
  EXPECT_EQ(px[0], 80);
  EXPECT_EQ(px[1], 80);
  EXPECT_EQ(px[2], 80);
  EXPECT_THROW(load_digits("mnist", "test", dir.path), DataError);
}

INSTANTIATE_TEST_SUITE_P(RawAndGzip, MnistFiles, ::testing::Bool());

TEST(DigitFiles, LoadsUspsLibsvm) {
  TempDir dir("virda_usps_test");
  std::ofstream(dir.path / "usps") << "3 1:1 2:-1 256:0\n\n10 17:1\n";
  const auto ds = load_digits("usps", "train", dir.path);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.labels, (std::vector<int>{2, 9}));
  std::ofstream(dir.path / "usps") << "3 1:1 300:1\n";
  EXPECT_THROW(load_digits("usps", "train", dir.path), DataError);
}

TEST(DigitFiles, ReportsMissingData) {
  EXPECT_THROW(load_digits("mnist", "train", "/nonexistent/virda"), DataError);
  TempDir dir("virda_empty_test");
  EXPECT_THROW(load_digits("mnist", "train", dir.path), DataError);
  EXPECT_THROW(load_digits("mnist", "val", dir.path), ConfigError);
  EXPECT_THROW(load_digits("emnist", "train", dir.path), ConfigError);
}

TEST(OfficeFolders, ClassesFromDirectories) {
  TempDir dir("virda_office_test");
  for (const char* cls : {"mug", "bike"}) {
    fs::create_directories(dir.path / "amazon" / "images" / cls);
    cv::Mat img(40, 30, CV_8UC3, cv::Scalar(10, 20, 30));
    cv::imwrite((dir.path / "amazon" / "images" / cls / "a.jpg").string(), img);
    cv::imwrite((dir.path / "amazon" / "images" / cls / "b.png").string(), img);
  }
  const auto ds = load_office(dir.path, "amazon", Domain::source, 32, 0);
  EXPECT_EQ(ds.class_names, (std::vector<std::string>{"bike", "mug"}));
  EXPECT_EQ(ds.size(), 4u);
  EXPECT_TRUE(ds.lazy());
  const cv::Mat img = ds.image_u8(0);
  EXPECT_EQ(img.rows, 32);
  EXPECT_EQ(img.cols, 32);
  EXPECT_THROW(load_office(dir.path, "webcam"), DataError);
}

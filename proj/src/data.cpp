#include "virda/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <zlib.h>

#include "virda/hash.hpp"

namespace virda {

namespace fs = std::filesystem;

Normalization normalization_for(Arch arch) {
  if (arch == Arch::tiny) return {};
  return {{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}};
}

// ---------------------------------------------------------------------------
// DomainDataset

std::size_t DomainDataset::size() const {
  if (lazy()) return files.size();
  const std::size_t per = static_cast<std::size_t>(height) * width * channels;
  return per == 0 ? 0 : pixels.size() / per;
}

void DomainDataset::add(const cv::Mat& rgb_u8, int label) {
  if (lazy()) throw DataError("cannot append in-memory images to a file-backed dataset");
  if (rgb_u8.type() != CV_8UC(channels) || rgb_u8.rows != height || rgb_u8.cols != width) {
    throw DataError("dataset '" + name + "' expects " + std::to_string(height) + "x" +
                    std::to_string(width) + "x" + std::to_string(channels) + " uint8 images");
  }
  cv::Mat m = rgb_u8.isContinuous() ? rgb_u8 : rgb_u8.clone();
  pixels.insert(pixels.end(), m.data, m.data + m.total() * m.elemSize());
  labels.push_back(label);
}

cv::Mat DomainDataset::image_u8(std::size_t i, Rng* crop_rng) const {
  if (i >= size()) throw DataError("image index out of range");
  if (!lazy()) {
    const std::size_t per = static_cast<std::size_t>(height) * width * channels;
    cv::Mat view(height, width, CV_8UC(channels), const_cast<std::uint8_t*>(pixels.data() + i * per));
    return view.clone();
  }
  cv::Mat bgr = cv::imread(files[i].string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot decode image '" + files[i].string() + "'");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  if (load_size <= 0) {
    cv::resize(rgb, rgb, cv::Size(width, height), 0, 0, cv::INTER_AREA);
    return rgb;
  }
  cv::resize(rgb, rgb, cv::Size(load_size, load_size), 0, 0, cv::INTER_AREA);
  int y0 = (load_size - height) / 2;
  int x0 = (load_size - width) / 2;
  bool flip = false;
  if (crop_rng != nullptr) {
    y0 = std::uniform_int_distribution<int>(0, load_size - height)(*crop_rng);
    x0 = std::uniform_int_distribution<int>(0, load_size - width)(*crop_rng);
    flip = std::bernoulli_distribution(0.5)(*crop_rng);
  }
  cv::Mat out = rgb(cv::Rect(x0, y0, width, height)).clone();
  if (flip) cv::flip(out, out, 1);
  return out;
}

cv::Mat DomainDataset::image(std::size_t i, Rng* crop_rng) const {
  cv::Mat f;
  image_u8(i, crop_rng).convertTo(f, CV_32F, 1.0 / 255.0);
  return f;
}

std::vector<int> DomainDataset::class_histogram() const {
  std::vector<int> hist(class_names.size(), 0);
  for (int y : labels) hist.at(static_cast<std::size_t>(y)) += 1;
  return hist;
}

std::string DomainDataset::checksum() const {
  Sha256 h;
  h.update_value(height).update_value(width).update_value(channels);
  for (const auto& c : class_names) h.update(c).update("\n");
  h.update(labels.data(), labels.size() * sizeof(int));
  h.update(pixels.data(), pixels.size());
  for (const auto& f : files) h.update(f.string()).update("\n");
  return h.hex_digest();
}

void DomainDataset::validate() const {
  if (class_names.empty()) throw DataError("dataset '" + name + "' has no classes");
  if (!lazy()) {
    const std::size_t per = static_cast<std::size_t>(height) * width * channels;
    if (per == 0 || pixels.size() % per != 0)
      throw DataError("dataset '" + name + "': pixel buffer does not hold whole images");
  }
  if (has_labels() && labels.size() != size())
    throw DataError("dataset '" + name + "': label count differs from image count");
  for (int y : labels) {
    if (y < 0 || y >= num_classes())
      throw DataError("dataset '" + name + "': label " + std::to_string(y) + " out of range");
  }
}

void require_shared_label_space(const DomainDataset& a, const DomainDataset& b) {
  if (a.class_names != b.class_names) {
    std::ostringstream msg;
    msg << "domains '" << a.name << "' and '" << b.name << "' have different class sets ("
        << a.class_names.size() << " vs " << b.class_names.size() << " classes";
    for (std::size_t i = 0; i < std::min(a.class_names.size(), b.class_names.size()); ++i) {
      if (a.class_names[i] != b.class_names[i]) {
        msg << ", first difference at index " << i << ": '" << a.class_names[i] << "' vs '"
            << b.class_names[i] << "'";
        break;
      }
    }
    msg << ")";
    throw DataError(msg.str());
  }
}

template <typename Scalar>
FeatureMap<Scalar> to_feature_map(const std::vector<cv::Mat>& images, const Normalization& norm) {
  if (images.empty()) throw DataError("empty batch");
  const int h = images[0].rows, w = images[0].cols, c = images[0].channels();
  if (c > 3) throw DataError("at most 3 channels are supported");
  FeatureMap<Scalar> out(static_cast<int>(images.size()), c, h, w);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const cv::Mat& img = images[i];
    if (img.rows != h || img.cols != w || img.channels() != c || img.depth() != CV_32F)
      throw DataError("batch images must share one float shape");
    for (int y = 0; y < h; ++y) {
      const float* row = img.ptr<float>(y);
      for (int x = 0; x < w; ++x) {
        for (int ch = 0; ch < c; ++ch) {
          const auto k = static_cast<std::size_t>(ch);
          out.at(ch, static_cast<int>(i), y, x) =
              static_cast<Scalar>((row[x * c + ch] - norm.mean[k]) / norm.std[k]);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> load_batch(const DomainDataset& ds, const std::vector<std::size_t>& indices,
                              const Normalization& norm, View view, std::uint64_t seed,
                              const AugmentPolicy& policy) {
  std::vector<cv::Mat> images;
  images.reserve(indices.size());
  for (std::size_t p = 0; p < indices.size(); ++p) {
    const std::uint64_t sample_seed = derive_seed(seed, p);
    if (view == View::plain) {
      images.push_back(ds.image(indices[p]));
      continue;
    }
    Rng crop(derive_seed(sample_seed, 1));
    cv::Mat img = ds.image(indices[p], &crop);
    if (view == View::strong) img = strong_view(img, derive_seed(sample_seed, 2), policy);
    images.push_back(std::move(img));
  }
  return to_feature_map<Scalar>(images, norm);
}

std::vector<int> gather_labels(const DomainDataset& ds, const std::vector<std::size_t>& indices) {
  if (!ds.has_labels()) throw DataError("dataset '" + ds.name + "' is unlabelled");
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(ds.labels.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// Digits

namespace {

std::vector<std::uint8_t> read_maybe_gz(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> buf(1 << 16);
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0)
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw DataError("corrupt compressed file '" + path.string() + "'");
  return out;
}

fs::path find_file(const fs::path& dir, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    if (fs::exists(dir / n)) return dir / n;
    if (fs::exists(dir / (n + ".gz"))) return dir / (n + ".gz");
  }
  std::string list;
  for (const auto& n : names) list += " " + n + "[.gz]";
  throw DataError("missing dataset file under '" + dir.string() + "': expected one of" + list);
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

std::vector<std::string> digit_classes() {
  std::vector<std::string> c;
  for (int i = 0; i < 10; ++i) c.push_back(std::to_string(i));
  return c;
}

void add_gray(DomainDataset& ds, const cv::Mat& gray_u8, int label) {
  cv::Mat resized, rgb;
  if (gray_u8.rows != ds.height || gray_u8.cols != ds.width) {
    cv::resize(gray_u8, resized, cv::Size(ds.width, ds.height), 0, 0, cv::INTER_LINEAR);
  } else {
    resized = gray_u8;
  }
  cv::cvtColor(resized, rgb, cv::COLOR_GRAY2RGB);
  ds.add(rgb, label);
}

void load_mnist(DomainDataset& ds, const fs::path& dir, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  const auto images = read_maybe_gz(find_file(dir, {prefix + "-images-idx3-ubyte",
                                                    prefix + "-images.idx3-ubyte"}));
  const auto labels = read_maybe_gz(find_file(dir, {prefix + "-labels-idx1-ubyte",
                                                    prefix + "-labels.idx1-ubyte"}));
  if (images.size() < 16 || be32(images.data()) != 0x00000803)
    throw DataError("MNIST image file under '" + dir.string() + "' is corrupt");
  if (labels.size() < 8 || be32(labels.data()) != 0x00000801)
    throw DataError("MNIST label file under '" + dir.string() + "' is corrupt");
  const std::uint32_t n = be32(images.data() + 4);
  const int rows = static_cast<int>(be32(images.data() + 8));
  const int cols = static_cast<int>(be32(images.data() + 12));
  if (be32(labels.data() + 4) != n || images.size() != 16 + std::size_t(n) * rows * cols ||
      labels.size() != 8 + std::size_t(n)) {
    throw DataError("MNIST files under '" + dir.string() + "' are truncated or inconsistent");
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    cv::Mat g(rows, cols, CV_8UC1,
              const_cast<std::uint8_t*>(images.data() + 16 + std::size_t(i) * rows * cols));
    const int y = labels[8 + i];
    if (y > 9) throw DataError("MNIST label out of range");
    add_gray(ds, g, y);
  }
}

void load_usps(DomainDataset& ds, const fs::path& dir, bool train) {
  const auto bytes = read_maybe_gz(find_file(dir, {train ? "usps" : "usps.t"}));
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    double label = 0;
    if (!(ls >> label)) throw DataError("USPS line " + std::to_string(line_no) + " is corrupt");
    cv::Mat g(16, 16, CV_8UC1, cv::Scalar(0));
    std::string tok;
    while (ls >> tok) {
      const auto colon = tok.find(':');
      if (colon == std::string::npos)
        throw DataError("USPS line " + std::to_string(line_no) + " is corrupt");
      const int idx = std::stoi(tok.substr(0, colon)) - 1;
      const double v = std::stod(tok.substr(colon + 1));
      if (idx < 0 || idx >= 256)
        throw DataError("USPS line " + std::to_string(line_no) + ": feature index out of range");
      g.at<std::uint8_t>(idx / 16, idx % 16) =
          cv::saturate_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
    }
    const int y = static_cast<int>(label) - 1;
    if (y < 0 || y > 9) throw DataError("USPS label out of range on line " + std::to_string(line_no));
    add_gray(ds, g, y);
  }
}

// Minimal MATLAB level-5 reader: numeric arrays, optionally zlib-compressed.
struct MatArray {
  std::string name;
  std::vector<std::int64_t> dims;
  std::uint32_t type = 0;
  std::vector<std::uint8_t> bytes;
};

constexpr std::uint32_t miINT8 = 1, miUINT8 = 2, miINT32 = 5, miUINT32 = 6, miDOUBLE = 9,
                        miMATRIX = 14, miCOMPRESSED = 15;

std::uint32_t le32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

std::vector<std::uint8_t> inflate_all(const std::uint8_t* data, std::size_t n) {
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) throw DataError("zlib initialisation failed");
  zs.next_in = const_cast<Bytef*>(data);
  zs.avail_in = static_cast<uInt>(n);
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> buf(1 << 18);
  int rc = Z_OK;
  do {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw DataError("corrupt compressed MATLAB element");
    }
    out.insert(out.end(), buf.begin(), buf.begin() + (buf.size() - zs.avail_out));
  } while (rc != Z_STREAM_END && (zs.avail_in > 0 || zs.avail_out == 0));
  inflateEnd(&zs);
  return out;
}

struct Element {
  std::uint32_t type;
  const std::uint8_t* data;
  std::size_t size;
  std::size_t consumed;
};

Element read_element(const std::uint8_t* p, std::size_t avail) {
  if (avail < 8) throw DataError("truncated MATLAB element");
  std::uint32_t type = le32(p);
  if ((type >> 16) != 0) {
    return {type & 0xFFFF, p + 4, type >> 16, 8};
  }
  const std::size_t size = le32(p + 4);
  if (size > avail - 8) throw DataError("truncated MATLAB element");
  std::size_t consumed = 8 + size;
  if (type != miCOMPRESSED) consumed = std::min(avail, (consumed + 7) / 8 * 8);
  return {type, p + 8, size, consumed};
}

void parse_mat_stream(const std::uint8_t* p, std::size_t n, std::vector<MatArray>& out) {
  std::size_t off = 0;
  while (off + 8 <= n) {
    Element e = read_element(p + off, n - off);
    off += e.consumed;
    if (e.type == miCOMPRESSED) {
      const auto raw = inflate_all(e.data, e.size);
      parse_mat_stream(raw.data(), raw.size(), out);
      continue;
    }
    if (e.type != miMATRIX) continue;
    MatArray arr;
    std::size_t sub = 0;
    Element flags = read_element(e.data, e.size);
    sub += flags.consumed;
    Element dims = read_element(e.data + sub, e.size - sub);
    sub += dims.consumed;
    for (std::size_t d = 0; d < dims.size / 4; ++d) arr.dims.push_back(le32(dims.data + 4 * d));
    Element name = read_element(e.data + sub, e.size - sub);
    sub += name.consumed;
    arr.name.assign(reinterpret_cast<const char*>(name.data), name.size);
    Element real = read_element(e.data + sub, e.size - sub);
    arr.type = real.type;
    arr.bytes.assign(real.data, real.data + real.size);
    out.push_back(std::move(arr));
  }
}

std::vector<MatArray> read_mat(const fs::path& path) {
  const auto bytes = read_maybe_gz(path);
  if (bytes.size() < 128 || bytes[126] != 'I' || bytes[127] != 'M')
    throw DataError("'" + path.string() + "' is not a little-endian MATLAB v5 file");
  std::vector<MatArray> out;
  parse_mat_stream(bytes.data() + 128, bytes.size() - 128, out);
  return out;
}

double mat_number(const MatArray& a, std::size_t i) {
  switch (a.type) {
    case miDOUBLE: {
      double v;
      std::memcpy(&v, a.bytes.data() + 8 * i, 8);
      return v;
    }
    case miUINT8: return a.bytes[i];
    case miINT8: return static_cast<std::int8_t>(a.bytes[i]);
    case miINT32: return static_cast<std::int32_t>(le32(a.bytes.data() + 4 * i));
    case miUINT32: return le32(a.bytes.data() + 4 * i);
    default: throw DataError("unsupported MATLAB numeric type " + std::to_string(a.type));
  }
}

void load_svhn(DomainDataset& ds, const fs::path& dir, bool train) {
  const fs::path path = find_file(dir, {train ? "train_32x32.mat" : "test_32x32.mat"});
  const auto arrays = read_mat(path);
  const MatArray* X = nullptr;
  const MatArray* y = nullptr;
  for (const auto& a : arrays) {
    if (a.name == "X") X = &a;
    if (a.name == "y") y = &a;
  }
  if (X == nullptr || y == nullptr) throw DataError("'" + path.string() + "' lacks X or y");
  if (X->type != miUINT8 || X->dims.size() != 4 || X->dims[0] != 32 || X->dims[1] != 32 ||
      X->dims[2] != 3) {
    throw DataError("'" + path.string() + "': X must be a 32x32x3xN uint8 array");
  }
  const std::size_t n = static_cast<std::size_t>(X->dims[3]);
  if (X->bytes.size() != n * 32 * 32 * 3) throw DataError("'" + path.string() + "' is truncated");
  cv::Mat rgb(32, 32, CV_8UC3);
  for (std::size_t i = 0; i < n; ++i) {
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c)
        for (int ch = 0; ch < 3; ++ch)
          rgb.at<cv::Vec3b>(r, c)[ch] = X->bytes[r + 32 * (c + 32 * (ch + 3 * i))];
    int label = static_cast<int>(std::lround(mat_number(*y, i)));
    if (label == 10) label = 0;
    if (label < 0 || label > 9) throw DataError("SVHN label out of range");
    ds.add(rgb, label);
  }
}

}  // namespace

DomainDataset load_digits(const std::string& name, const std::string& split, const fs::path& root,
                          Domain domain) {
  if (split != "train" && split != "test")
    throw ConfigError("digit split must be train or test, got '" + split + "'");
  if (!fs::is_directory(root)) throw DataError("dataset root '" + root.string() + "' not found");
  const fs::path dir = fs::is_directory(root / name) ? root / name : root;
  DomainDataset ds;
  ds.name = name;
  ds.domain = domain;
  ds.split = split;
  ds.class_names = digit_classes();
  const bool train = split == "train";
  if (name == "mnist") {
    load_mnist(ds, dir, train);
  } else if (name == "usps") {
    load_usps(ds, dir, train);
  } else if (name == "svhn") {
    load_svhn(ds, dir, train);
  } else {
    throw ConfigError("unknown digit dataset '" + name + "' (expected mnist|usps|svhn)");
  }
  if (ds.size() == 0) throw DataError("dataset '" + name + "' under '" + dir.string() + "' is empty");
  ds.validate();
  return ds;
}

DomainDataset load_office(const fs::path& root, const std::string& domain_name, Domain domain,
                          int image_size, int load_size) {
  const fs::path dir = root / domain_name;
  if (!fs::is_directory(dir)) throw DataError("office domain directory '" + dir.string() + "' not found");
  DomainDataset ds;
  ds.name = domain_name;
  ds.domain = domain;
  ds.split = "all";
  ds.height = ds.width = image_size;
  ds.load_size = load_size > image_size ? load_size : 0;
  // Some distributions nest the class folders under an "images" directory.
  const fs::path classes_dir = fs::is_directory(dir / "images") ? dir / "images" : dir;
  for (const auto& entry : fs::directory_iterator(classes_dir))
    if (entry.is_directory()) ds.class_names.push_back(entry.path().filename().string());
  std::sort(ds.class_names.begin(), ds.class_names.end());
  if (ds.class_names.empty()) throw DataError("no class directories under '" + classes_dir.string() + "'");
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    std::vector<fs::path> images;
    for (const auto& entry : fs::directory_iterator(classes_dir / ds.class_names[c])) {
      if (!entry.is_regular_file()) continue;
      std::string ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
      if (ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp") images.push_back(entry.path());
    }
    if (images.empty())
      throw DataError("class directory '" + (classes_dir / ds.class_names[c]).string() + "' is empty");
    std::sort(images.begin(), images.end());
    for (auto& p : images) {
      ds.files.push_back(std::move(p));
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic pair

namespace {

constexpr int kSynthSize = 32;
constexpr int kSynthScale = 4;  // rendered at 4x then area-downsampled

std::vector<cv::Point> transform_points(const std::vector<cv::Point2d>& pts, cv::Point2d centre,
                                        double size, double angle) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::vector<cv::Point> out;
  for (const auto& p : pts) {
    const double x = (p.x * ca - p.y * sa) * size + centre.x;
    const double y = (p.x * sa + p.y * ca) * size + centre.y;
    out.emplace_back(static_cast<int>(std::lround(x * kSynthScale)),
                     static_cast<int>(std::lround(y * kSynthScale)));
  }
  return out;
}

void fill(cv::Mat& canvas, const std::vector<cv::Point>& poly, const cv::Scalar& colour) {
  std::vector<std::vector<cv::Point>> polys{poly};
  cv::fillPoly(canvas, polys, colour, cv::LINE_AA);
}

std::vector<cv::Point2d> rect(double x0, double y0, double x1, double y1) {
  return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
}

void draw_shape(cv::Mat& canvas, int cls, cv::Point2d centre, double size, double angle,
                const cv::Scalar& colour) {
  auto put = [&](const std::vector<cv::Point2d>& pts) {
    fill(canvas, transform_points(pts, centre, size, angle), colour);
  };
  const double t = 0.32;  // stroke half-width in shape units
  switch (cls) {
    case 0: {  // disc
      cv::circle(canvas, transform_points({{0, 0}}, centre, size, angle)[0],
                 static_cast<int>(size * kSynthScale), colour, cv::FILLED, cv::LINE_AA);
      break;
    }
    case 1: put(rect(-0.85, -0.85, 0.85, 0.85)); break;  // square
    case 2: put({{0, -1}, {0.95, 0.8}, {-0.95, 0.8}}); break;  // triangle
    case 3:  // plus
      put(rect(-1, -t, 1, t));
      put(rect(-t, -1, t, 1));
      break;
    case 4:  // x
      put({{-0.8 - t * 0.7, -0.8 + t * 0.7}, {-0.8 + t * 0.7, -0.8 - t * 0.7},
           {0.8 + t * 0.7, 0.8 - t * 0.7}, {0.8 - t * 0.7, 0.8 + t * 0.7}});
      put({{0.8 - t * 0.7, -0.8 - t * 0.7}, {0.8 + t * 0.7, -0.8 + t * 0.7},
           {-0.8 + t * 0.7, 0.8 + t * 0.7}, {-0.8 - t * 0.7, 0.8 - t * 0.7}});
      break;
    case 5: {  // ring
      const cv::Point c = transform_points({{0, 0}}, centre, size, angle)[0];
      cv::circle(canvas, c, static_cast<int>(size * 0.8 * kSynthScale), colour,
                 static_cast<int>(size * 0.35 * kSynthScale), cv::LINE_AA);
      break;
    }
    case 6:  // two bars
      put(rect(-1, -0.8, 1, -0.8 + 2 * t));
      put(rect(-1, 0.8 - 2 * t, 1, 0.8));
      break;
    case 7:  // hollow square
      put(rect(-0.9, -0.9, 0.9, -0.9 + 2 * t * 0.8));
      put(rect(-0.9, 0.9 - 2 * t * 0.8, 0.9, 0.9));
      put(rect(-0.9, -0.9, -0.9 + 2 * t * 0.8, 0.9));
      put(rect(0.9 - 2 * t * 0.8, -0.9, 0.9, 0.9));
      break;
    case 8:  // L
      put(rect(-0.7, -1, -0.7 + 2 * t, 1));
      put(rect(-0.7, 1 - 2 * t, 0.8, 1));
      break;
    case 9: {  // half disc
      std::vector<cv::Point2d> pts;
      for (int i = 0; i <= 16; ++i) {
        const double a = M_PI * i / 16.0;
        pts.emplace_back(std::cos(a) * 0.95, std::sin(a) * 0.95 - 0.35);
      }
      put(pts);
      break;
    }
    default: throw DataError("synthetic class out of range");
  }
}

cv::Mat render_sample(int cls, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const cv::Scalar bg(0.35 * u(rng) * 255, 0.35 * u(rng) * 255, 0.35 * u(rng) * 255);
  const cv::Scalar fg((0.6 + 0.4 * u(rng)) * 255, (0.6 + 0.4 * u(rng)) * 255,
                      (0.6 + 0.4 * u(rng)) * 255);
  const int big = kSynthSize * kSynthScale;
  cv::Mat canvas(big, big, CV_8UC3, bg);
  const cv::Point2d centre(16 + (u(rng) - 0.5) * 6, 16 + (u(rng) - 0.5) * 6);
  const double size = 7.0 + 4.0 * u(rng);
  const double angle = (u(rng) - 0.5) * (30.0 * M_PI / 180.0);
  draw_shape(canvas, cls, centre, size, angle, fg);
  cv::Mat small;
  cv::resize(canvas, small, cv::Size(kSynthSize, kSynthSize), 0, 0, cv::INTER_AREA);
  cv::Mat f;
  small.convertTo(f, CV_32F, 1.0 / 255.0);
  std::normal_distribution<float> noise(0.0f, 0.03f);
  for (auto it = f.begin<cv::Vec3f>(); it != f.end<cv::Vec3f>(); ++it)
    for (int c = 0; c < 3; ++c) (*it)[c] = std::clamp((*it)[c] + noise(rng), 0.0f, 1.0f);
  return f;
}

DomainDataset render_split(const std::string& name, Domain domain, const std::string& split,
                           int count, std::uint64_t seed, const ShiftSpec* shift) {
  DomainDataset ds;
  ds.name = name;
  ds.domain = domain;
  ds.split = split;
  ds.height = ds.width = kSynthSize;
  for (int c = 0; c < 10; ++c) ds.class_names.push_back("shape" + std::to_string(c));
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    const int cls = i % 10;
    cv::Mat img = render_sample(cls, rng);
    if (shift != nullptr) img = apply_shift(img, *shift);
    cv::Mat u8;
    img.convertTo(u8, CV_8U, 255.0);
    ds.add(u8, cls);
  }
  return ds;
}

}  // namespace

cv::Mat apply_shift(const cv::Mat& image, const ShiftSpec& shift) {
  cv::Mat out = image.clone();
  if (shift.invert) out = cv::Scalar::all(1.0) - out;
  out = out.mul(cv::Scalar(shift.tint[0], shift.tint[1], shift.tint[2]));
  if (shift.texture_amplitude != 0.0 && shift.texture_period > 0) {
    const double w = 2.0 * M_PI / shift.texture_period;
    for (int y = 0; y < out.rows; ++y) {
      auto* row = out.ptr<cv::Vec3f>(y);
      for (int x = 0; x < out.cols; ++x) {
        for (int c = 0; c < 3; ++c) {
          const double v = std::sin(w * x + 2.0 * c) * std::sin(w * y + c);
          row[x][c] += static_cast<float>(shift.texture_amplitude * v);
        }
      }
    }
  }
  if (shift.blur_sigma > 0.0) cv::GaussianBlur(out, out, cv::Size(0, 0), shift.blur_sigma);
  cv::max(out, 0.0, out);
  cv::min(out, 1.0, out);
  return out;
}

SyntheticPair make_synthetic_pair(std::uint64_t seed, const ShiftSpec& shift, int train_per_domain,
                                  int test_per_domain) {
  if (train_per_domain < 1 || test_per_domain < 1)
    throw ConfigError("synthetic split sizes must be positive");
  SyntheticPair pair;
  pair.source_train =
      render_split("synth_source", Domain::source, "train", train_per_domain, derive_seed(seed, 1), nullptr);
  pair.source_test =
      render_split("synth_source", Domain::source, "test", test_per_domain, derive_seed(seed, 2), nullptr);
  pair.target_train =
      render_split("synth_target", Domain::target, "train", train_per_domain, derive_seed(seed, 3), &shift);
  pair.target_test =
      render_split("synth_target", Domain::target, "test", test_per_domain, derive_seed(seed, 4), &shift);
  return pair;
}

DomainDataset make_pretraining_set(std::uint64_t seed, int count) {
  if (count < 1) throw ConfigError("pretraining set size must be positive");
  return render_split("synth_pretrain", Domain::source, "pretrain", count, derive_seed(seed, 5),
                      nullptr);
}

// ---------------------------------------------------------------------------
// Paired batches

PairedBatchStream::PairedBatchStream(std::size_t source_size, std::size_t target_size, int k,
                                     std::uint64_t seed)
    : source_size_(source_size), target_size_(target_size), k_(k), seed_(seed) {
  if (k <= 0) throw ConfigError("batch size must be positive");
  if (static_cast<std::size_t>(k) > source_size || static_cast<std::size_t>(k) > target_size) {
    throw ConfigError("batch size " + std::to_string(k) + " exceeds a dataset size (" +
                      std::to_string(source_size) + ", " + std::to_string(target_size) + ")");
  }
  const std::size_t larger = std::max(source_size, target_size);
  steps_per_epoch_ = static_cast<int>((larger + k - 1) / k);
  source_.size = source_size;
  target_.size = target_size;
  reshuffle(source_, 0);
  reshuffle(target_, 1);
}

void PairedBatchStream::reshuffle(Side& side, int salt) {
  side.order.resize(side.size);
  std::iota(side.order.begin(), side.order.end(), std::size_t{0});
  Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(salt), static_cast<std::uint64_t>(side.shuffles)));
  std::shuffle(side.order.begin(), side.order.end(), rng);
  side.cursor = 0;
  side.shuffles += 1;
}

std::vector<std::size_t> PairedBatchStream::take(Side& side, bool larger, int salt) {
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(k_));
  if (larger) {
    for (int j = 0; j < k_; ++j) {
      const std::size_t pos = side.cursor + static_cast<std::size_t>(j);
      out.push_back(side.order[pos < side.size ? pos : pos - side.size]);
    }
    side.cursor += static_cast<std::size_t>(k_);
    return out;
  }
  while (out.size() < static_cast<std::size_t>(k_)) {
    if (side.cursor >= side.size) reshuffle(side, salt);
    out.push_back(side.order[side.cursor++]);
  }
  return out;
}

PairedBatchStream::Pair PairedBatchStream::next() {
  const bool source_larger = source_size_ >= target_size_;
  const bool target_larger = target_size_ >= source_size_;
  if (step_in_epoch_ == steps_per_epoch_) {
    step_in_epoch_ = 0;
    epoch_ += 1;
    if (source_larger) reshuffle(source_, 0);
    if (target_larger) reshuffle(target_, 1);
  }
  Pair p;
  p.source = take(source_, source_larger, 0);
  p.target = take(target_, target_larger, 1);
  step_in_epoch_ += 1;
  return p;
}

PairedBatchStream paired_batches(const DomainDataset& src, const DomainDataset& tgt, int k,
                                 std::uint64_t seed) {
  require_shared_label_space(src, tgt);
  return PairedBatchStream(src.size(), tgt.size(), k, seed);
}

template FeatureMap<float> to_feature_map(const std::vector<cv::Mat>&, const Normalization&);
template FeatureMap<double> to_feature_map(const std::vector<cv::Mat>&, const Normalization&);
template FeatureMap<float> load_batch(const DomainDataset&, const std::vector<std::size_t>&,
                                      const Normalization&, View, std::uint64_t,
                                      const AugmentPolicy&);
template FeatureMap<double> load_batch(const DomainDataset&, const std::vector<std::size_t>&,
                                       const Normalization&, View, std::uint64_t,
                                       const AugmentPolicy&);

}  // namespace virda

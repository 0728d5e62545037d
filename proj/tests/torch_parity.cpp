// Compares backbone features against torchvision on the same weights and input.
// Usage: virda_torch_parity <arch> <dir written by tools/torch_reference.py>
#include <cstdio>
#include <filesystem>
#include <string>

#include "virda/backbone.hpp"
#include "virda/safetensors.hpp"

using namespace virda;

int main(int argc, char** argv) {
  if (argc != 3) {
    std::fprintf(stderr, "usage: %s <arch> <dir>\n", argv[0]);
    return 2;
  }
  const Arch arch = parse_arch(argv[1]);
  const std::filesystem::path dir = argv[2];
  const auto backbone =
      load_backbone<double>(arch, dir / (std::string(argv[1]) + ".safetensors"));
  const TensorArchive ref = read_safetensors(dir / (std::string(argv[1]) + "_reference.safetensors"));

  const TensorRecord& in = ref.record("input");
  const int n = static_cast<int>(in.shape[0]), c = static_cast<int>(in.shape[1]);
  const int h = static_cast<int>(in.shape[2]), w = static_cast<int>(in.shape[3]);
  // NCHW rows -> channel-major feature map.
  const RowMatrix<double> flat = ref.get<double>("input");
  FeatureMap<double> x(n, c, h, w);
  const double* src = flat.data();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) x.at(ch, i, y, xx) = *src++;

  RowMatrix<double> expected = ref.get<double>("features");
  expected.resize(n, backbone.feature_dim());
  const RowMatrix<double> got = backbone.extract_features(x);
  const double rel = (got - expected).norm() / expected.norm();
  const bool ok = got.rows() == expected.rows() && rel < 1e-4;
  std::printf("%s %s feature parity with torchvision: relative error %.3e (tolerance 1e-4)\n",
              ok ? "PASS" : "FAIL", argv[1], rel);
  return ok ? 0 : 1;
}

#ifndef VIRDA_AUGMENT_HPP_
#define VIRDA_AUGMENT_HPP_

#include <cstdint>

#include <opencv2/core.hpp>

namespace virda {

/// Strong-view magnitudes. Images are float HxWxC in [0, 1].
struct AugmentPolicy {
  double rotation_deg = 15.0;
  double translation = 0.1;  // fraction of each axis
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;  // fraction of the hue circle
};

/// The weak view is the original image.
inline const cv::Mat& weak_view(const cv::Mat& x) { return x; }

/// Random affine (rotation, translation; zero fill) followed by colour jitter
/// in brightness, contrast, saturation, hue order, each clamped to [0, 1].
/// Deterministic in (x, seed). Accepts CV_32FC1 and CV_32FC3.
cv::Mat strong_view(const cv::Mat& x, std::uint64_t seed, const AugmentPolicy& policy = {});

}  // namespace virda

#endif  // VIRDA_AUGMENT_HPP_

#include "virda/augment.hpp"

#include <random>

#include <opencv2/imgproc.hpp>

#include "virda/rng.hpp"
#include "virda/tensor.hpp"

namespace virda {

namespace {

double draw(Rng& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

void clamp01(cv::Mat& m) {
  cv::max(m, 0.0, m);
  cv::min(m, 1.0, m);
}

cv::Mat gray_of(const cv::Mat& rgb) {
  cv::Mat gray;
  cv::cvtColor(rgb, gray, cv::COLOR_RGB2GRAY);
  return gray;
}

}  // namespace

cv::Mat strong_view(const cv::Mat& x, std::uint64_t seed, const AugmentPolicy& policy) {
  if (x.depth() != CV_32F || (x.channels() != 1 && x.channels() != 3)) {
    throw ConfigError("strong_view expects a float image with 1 or 3 channels");
  }
  Rng rng(derive_seed(seed, 0x5EED));
  const double angle = draw(rng, -policy.rotation_deg, policy.rotation_deg);
  const double tx = draw(rng, -policy.translation, policy.translation) * x.cols;
  const double ty = draw(rng, -policy.translation, policy.translation) * x.rows;
  const double b = draw(rng, std::max(0.0, 1.0 - policy.brightness), 1.0 + policy.brightness);
  const double c = draw(rng, std::max(0.0, 1.0 - policy.contrast), 1.0 + policy.contrast);
  const double s = draw(rng, std::max(0.0, 1.0 - policy.saturation), 1.0 + policy.saturation);
  const double h = draw(rng, -policy.hue, policy.hue);

  cv::Mat out;
  const cv::Point2f centre(static_cast<float>(x.cols - 1) / 2.0f,
                           static_cast<float>(x.rows - 1) / 2.0f);
  cv::Mat affine = cv::getRotationMatrix2D(centre, angle, 1.0);
  affine.at<double>(0, 2) += tx;
  affine.at<double>(1, 2) += ty;
  cv::warpAffine(x, out, affine, x.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar::all(0));

  out *= b;
  clamp01(out);

  const bool colour = out.channels() == 3;
  const double mean = cv::mean(colour ? gray_of(out) : out)[0];
  out = (out - cv::Scalar::all(mean)) * c + cv::Scalar::all(mean);
  clamp01(out);

  if (colour) {
    cv::Mat gray3;
    cv::cvtColor(gray_of(out), gray3, cv::COLOR_GRAY2RGB);
    cv::addWeighted(out, s, gray3, 1.0 - s, 0.0, out);
    clamp01(out);

    cv::Mat hsv;
    cv::cvtColor(out, hsv, cv::COLOR_RGB2HSV);  // H in [0, 360)
    std::vector<cv::Mat> planes;
    cv::split(hsv, planes);
    planes[0] += cv::Scalar(h * 360.0);
    for (int r = 0; r < planes[0].rows; ++r) {
      auto* p = planes[0].ptr<float>(r);
      for (int q = 0; q < planes[0].cols; ++q) {
        p[q] = std::fmod(p[q], 360.0f);
        if (p[q] < 0) p[q] += 360.0f;
      }
    }
    cv::merge(planes, hsv);
    cv::cvtColor(hsv, out, cv::COLOR_HSV2RGB);
    clamp01(out);
  }
  return out;
}

}  // namespace virda

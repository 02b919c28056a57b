#pragma once

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"

#include <memory>
#include <vector>

namespace nvs {

constexpr double kPsnrCap = 99.0;

/// Peak signal-to-noise ratio of [0, 1] images, capped for identical inputs.
double psnr(const Image& a, const Image& b);

/// Gaussian-window SSIM (11x11, sigma 1.5) over the valid region, averaged
/// over pixels and channels. Images smaller than the window use the largest
/// odd window that fits.
double ssim(const Image& a, const Image& b);

/// Feature network for distribution-level distances (an FID-style metric).
/// None is bundled; callers supply one.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  /// One feature row per image.
  virtual Features<double> extract(const std::vector<Image>& images) const = 0;
};

/// Frechet distance between Gaussian fits of two feature sets.
double frechet_distance(const Features<double>& a, const Features<double>& b);

double feature_distance(const FeatureExtractor& extractor, const std::vector<Image>& a, const std::vector<Image>& b);

}  // namespace nvs

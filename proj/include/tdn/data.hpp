#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "tdn/tensor.hpp"

namespace tdn {

using Image = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kNumClasses = 6;
inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "crazing", "inclusion", "patches", "pitted_surface", "rolled_in_scale", "scratches"};
inline constexpr std::array<std::string_view, kNumClasses> kClassPrefixes = {"Cr", "In", "Pa",
                                                                             "PS", "RS", "Sc"};

enum DefectClass : int {
  kCrazing = 0,
  kInclusion = 1,
  kPatches = 2,
  kPittedSurface = 3,
  kRolledInScale = 4,
  kScratches = 5,
};

/// Grayscale image with pixels in [0, 1].
struct LabeledImage {
  Image pixels;
  int label = 0;
  std::string source_id;
  /// Ground-truth defect region (synthetic data only); 1 inside.
  std::optional<Mask> mask;
};

struct DatasetSplit {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;
};

/// Class index for a file name prefix ("Sc_17.bmp" -> scratches) or a
/// directory name ("scratches", "Sc"); nullopt if unknown.
std::optional<int> class_from_name(std::string_view name);

struct LoadReport {
  std::vector<LabeledImage> images;
  /// Files that could not be decoded ("path: reason"); they are skipped.
  std::vector<std::string> failures;
};

/// Loads a NEU-style directory: one subdirectory per class, or flat files
/// prefixed Cr_/In_/Pa_/PS_/RS_/Sc_. Images are resized (bilinear) to
/// height x width when they differ.
LoadReport load_neu(const std::string& directory, int height = 200, int width = 200);

struct SplitOptions {
  int train_per_class = 240;
  int test_per_class = 60;
  /// Used when a class has fewer than train+test images.
  double train_fraction = 0.8;
};

/// Per class, sorts by source id; the first train_per_class go to train and
/// the next test_per_class to test.
DatasetSplit split_neu(std::vector<LabeledImage> images, const SplitOptions& options = {});

struct SynthConfig {
  int per_class = 300;
  int size = 200;
  std::uint64_t seed = 42;
  double train_fraction = 0.8;
};

/// Procedural six-class defect dataset with ground-truth masks.
DatasetSplit synth(const SynthConfig& cfg);
/// One synthetic image; depends only on (seed, label, index, size).
LabeledImage synth_image(std::uint64_t seed, int label, int index, int size);

struct MeanStd {
  double mean = 0;
  double std = 0;
};
MeanStd mean_std(const std::vector<LabeledImage>& images);

/// Writes <Prefix>_<index>.pgm, <Prefix>_<index>_mask.pgm and manifest.tsv.
void write_dataset(const DatasetSplit& split, const std::string& directory);
/// Reads a directory written by write_dataset (honours the manifest split).
DatasetSplit read_dataset(const std::string& directory);

/// Stacks images into an N x H x W x 1 tensor.
template <typename Scalar>
Tensor<Scalar> to_tensor(const std::vector<const LabeledImage*>& images) {
  if (images.empty()) return {};
  const int h = static_cast<int>(images[0]->pixels.rows());
  const int w = static_cast<int>(images[0]->pixels.cols());
  Tensor<Scalar> t(static_cast<int>(images.size()), h, w, 1);
  for (std::size_t n = 0; n < images.size(); ++n) {
    Eigen::Map<RowMatrix<Scalar>>(t.sample(static_cast<int>(n)), h, w) = images[n]->pixels.cast<Scalar>();
  }
  return t;
}

Image resize_bilinear(const Image& src, int height, int width);
/// Disk dilation with the given pixel radius.
Mask dilate(const Mask& mask, int radius);

/// Decodes PGM (P2/P5), BMP (8/24/32-bit) and, when built with the system
/// codecs, JPEG and PNG. Color is converted to luma; pixels scaled to [0, 1].
Image read_image(const std::string& path);
/// 8-bit binary PGM; values are clamped to [0, 1] and rounded.
void write_pgm(const std::string& path, const Image& image);
/// Mask written as 0 / 255.
void write_pgm(const std::string& path, const Mask& mask);

}  // namespace tdn

#pragma once

// Occlusion attribution: slide a baseline-filled patch over the image and
// record how much the target logit drops.

#include <string>
#include <variant>

#include "tdn/data.hpp"
#include "tdn/runtime.hpp"

namespace tdn {

struct DatasetMeanBaseline {
  double mean = 0.5;
};
struct ConstantBaseline {
  double value = 0.0;
};
using Baseline = std::variant<DatasetMeanBaseline, ConstantBaseline>;

struct OcclusionConfig {
  int patch = 16;
  int stride = 8;
  Baseline baseline = DatasetMeanBaseline{};
};

struct AttributionMap {
  Image values;  // H x W, upsampled from the grid
  Eigen::MatrixXd grid;
  int target_class = 0;
  double base_score = 0;  // target logit of the unoccluded image

  int grid_rows() const { return static_cast<int>(grid.rows()); }
  int grid_cols() const { return static_cast<int>(grid.cols()); }
};

/// Number of patch positions along one axis.
int occlusion_steps(int extent, int patch, int stride);

AttributionMap occlusion_map(const ExecutionPlan& plan, const Image& image, int target,
                             const OcclusionConfig& cfg = {});

/// Bilinear map from grid cells to pixels; cell (i, j) sits at the centre of its patch.
Image upsample_grid(const Eigen::MatrixXd& grid, int height, int width, int patch, int stride);

/// Share of the positive attribution among the top ceil(top_fraction*H*W)
/// pixels that falls inside the mask. Empty mask or no positive mass gives 0.
double mass_in_mask(const AttributionMap& map, const Mask& mask, double top_fraction);

/// Writes the input image and the min-max normalized attribution as 8-bit PGMs.
void render_overlay(const AttributionMap& map, const Image& image, const std::string& image_path,
                    const std::string& attribution_path);

/// Min-max normalized attribution; an all-equal map becomes all zero.
Image normalize_attribution(const Image& values);

}  // namespace tdn

#include "tdn/explain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tdn/error.hpp"

namespace tdn {

int occlusion_steps(int extent, int patch, int stride) { return (extent - patch) / stride + 1; }

Image upsample_grid(const Eigen::MatrixXd& grid, int height, int width, int patch, int stride) {
  Image out(height, width);
  const double centre = (patch - 1) / 2.0;
  auto locate = [&](int p, Eigen::Index cells, int& i0, int& i1, double& w) {
    const double t = std::clamp((p - centre) / stride, 0.0, static_cast<double>(cells - 1));
    i0 = static_cast<int>(t);
    i1 = std::min<int>(i0 + 1, static_cast<int>(cells) - 1);
    w = t - i0;
  };
  for (int y = 0; y < height; ++y) {
    int r0, r1;
    double wy;
    locate(y, grid.rows(), r0, r1, wy);
    for (int x = 0; x < width; ++x) {
      int c0, c1;
      double wx;
      locate(x, grid.cols(), c0, c1, wx);
      out(y, x) = static_cast<float>((1 - wy) * ((1 - wx) * grid(r0, c0) + wx * grid(r0, c1)) +
                                     wy * ((1 - wx) * grid(r1, c0) + wx * grid(r1, c1)));
    }
  }
  return out;
}

AttributionMap occlusion_map(const ExecutionPlan& plan, const Image& image, int target, const OcclusionConfig& cfg) {
  const int h = static_cast<int>(image.rows());
  const int w = static_cast<int>(image.cols());
  if (plan.input_shape.height != h || plan.input_shape.width != w || plan.input_shape.channels != 1) {
    throw ShapeError("image does not match the plan input");
  }
  if (cfg.stride < 1 || cfg.patch < cfg.stride || cfg.patch > std::min(h, w)) {
    throw ShapeError("occlusion needs 1 <= stride <= patch <= image size");
  }
  if (target < 0 || target >= static_cast<int>(plan.values[plan.logits_value].size())) {
    throw ShapeError("target class out of range");
  }
  const float fill = static_cast<float>(std::visit(
      [](const auto& b) {
        if constexpr (std::is_same_v<std::decay_t<decltype(b)>, DatasetMeanBaseline>) {
          return b.mean;
        } else {
          return b.value;
        }
      },
      cfg.baseline));

  const int rows = occlusion_steps(h, cfg.patch, cfg.stride);
  const int cols = occlusion_steps(w, cfg.patch, cfg.stride);
  const int positions = rows * cols;
  AttributionMap map;
  map.target_class = target;
  map.grid.resize(rows, cols);

  // Index 0 is the unoccluded image.
  constexpr int kChunk = 64;
  std::vector<double> scores(static_cast<std::size_t>(positions) + 1);
  for (int start = 0; start <= positions; start += kChunk) {
    const int n = std::min(kChunk, positions + 1 - start);
    Tensor<float> batch(n, h, w, 1);
    for (int b = 0; b < n; ++b) {
      Eigen::Map<RowMatrix<float>> px(batch.sample(b), h, w);
      px = image;
      const int g = start + b - 1;
      if (g >= 0) px.block((g / cols) * cfg.stride, (g % cols) * cfg.stride, cfg.patch, cfg.patch).setConstant(fill);
    }
    const RowMatrix<float> logits = infer_logits(plan, batch);
    for (int b = 0; b < n; ++b) scores[start + b] = logits(b, target);
  }
  map.base_score = scores[0];
  for (int g = 0; g < positions; ++g) map.grid(g / cols, g % cols) = scores[0] - scores[g + 1];
  map.values = upsample_grid(map.grid, h, w, cfg.patch, cfg.stride);
  return map;
}

double mass_in_mask(const AttributionMap& map, const Mask& mask, double top_fraction) {
  if (mask.rows() != map.values.rows() || mask.cols() != map.values.cols()) {
    throw ShapeError("mask and attribution map differ in size");
  }
  if (!(top_fraction > 0 && top_fraction <= 1)) throw ShapeError("top_fraction must be in (0, 1]");
  const Eigen::Index n = map.values.size();
  if (mask.cast<int>().sum() == 0) return 0.0;
  const auto k = std::min<Eigen::Index>(
      n, static_cast<Eigen::Index>(std::ceil(top_fraction * static_cast<double>(n) - 1e-9)));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const float* v = map.values.data();
  std::stable_sort(order.begin(), order.end(), [v](Eigen::Index a, Eigen::Index b) { return v[a] > v[b]; });
  double total = 0, inside = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    const double m = std::max(0.0f, v[order[i]]);
    total += m;
    if (mask.data()[order[i]]) inside += m;
  }
  return total > 0 ? inside / total : 0.0;
}

Image normalize_attribution(const Image& values) {
  const float lo = values.minCoeff();
  const float hi = values.maxCoeff();
  if (!(hi > lo)) return Image::Zero(values.rows(), values.cols());
  return (values.array() - lo) / (hi - lo);
}

void render_overlay(const AttributionMap& map, const Image& image, const std::string& image_path,
                    const std::string& attribution_path) {
  if (image.rows() != map.values.rows() || image.cols() != map.values.cols()) {
    throw ShapeError("image and attribution map differ in size");
  }
  write_pgm(image_path, image);
  write_pgm(attribution_path, normalize_attribution(map.values));
}

}  // namespace tdn

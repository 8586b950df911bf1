#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tlab/tensor.hpp"

namespace tlab {

/// Images in [0,1], NCHW, with one integer label per image.
struct LabeledDataset {
  Tensor<float> images;  // [N,C,H,W]
  std::vector<int32_t> labels;
  std::string source;

  int count() const { return images.defined() ? images.dim(0) : 0; }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
};

void validate_dataset(const LabeledDataset& data, int class_count);

/// IDX ubyte ingestion; pixel bytes map to [0,1] by /255.
LabeledDataset load_idx_dataset(const std::filesystem::path& images_path,
                                const std::filesystem::path& labels_path);

/// Writes [N,1,H,W] data back out as IDX ubyte files (pixels are
/// round(v*255)).
void save_idx_dataset(const LabeledDataset& data, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path);

/// Seeded fixed subset of n images (all of them when n >= count).
LabeledDataset subset(const LabeledDataset& data, int n, uint64_t seed);

/// Copy of image i as a [1,C,H,W] tensor.
Tensor<float> image_at(const LabeledDataset& data, int i);

Tensor<float> gather_images(const Tensor<float>& images, const std::vector<int>& idx);

/// Synthetic 28x28 grayscale 10-class digit corpus: glyphs with randomized
/// scale, placement, contrast and pixel noise. Balanced classes,
/// deterministic per seed.
LabeledDataset synth_digits(int count, uint64_t seed);

/// Bilinear plane resize (used by the digit generator and image transforms).
void resize_bilinear_plane(const float* src, int h, int w, float* dst, int oh, int ow);

}  // namespace tlab

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tlab/dataset.hpp"
#include "tlab/models.hpp"
#include "tlab/tensor.hpp"

namespace tlab {

/// Block-mask geometry. An image of height H is divided into non-overlapping
/// s-pixel patches; index u selects the patch starting at row s*u. With
/// include_identity the legal index set is {0..floor(H/s)}, whose endpoint is
/// an empty block (the unmasked image) whenever s divides H; without it the
/// set shrinks to {0..ceil(H/s)-1} so every index masks at least one pixel.
struct MaskSpec {
  int s = 7;
  enum class Mode { grid, diagonal };
  Mode mode = Mode::grid;
  bool include_identity = true;
};

/// Largest legal patch index for one spatial extent.
int mask_index_bound(const MaskSpec& spec, int extent);

/// Diagonal form: the masked rows and columns share the same index.
Tensor<float> make_mask(const MaskSpec& spec, int u, int H, int W);

/// Grid form: independent row and column patch indices.
Tensor<float> make_mask(const MaskSpec& spec, int u_row, int u_col, int H, int W);

struct TransformSpec {
  enum class Kind {
    identity,
    maskblock,
    gaussian_noise,
    resize_pad,
    translate,
    scale,
    admix,
    path_mix,
    ensemble,
  };

  Kind kind = Kind::identity;

  // maskblock
  MaskSpec mask;
  bool mask_enumerate = true;
  std::optional<int> fixed_u;  // pins the patch index (both axes in grid mode)

  // gaussian_noise
  double sigma = 0.05;

  // resize_pad
  double resize_prob = 0.7;
  double resize_lo = 0.85;

  // translate
  int translate_max = 3;

  // scale: divide by 2^i, i in {0..scale_levels}
  int scale_levels = 4;

  // admix: x + gamma * reference
  double admix_gamma = 0.2;
  std::shared_ptr<const Tensor<float>> admix_pool;  // [P,C,H,W]

  // path_mix: beta * x with beta in {1/m,...,1}
  int path_steps = 4;

  // ensemble
  std::vector<TransformSpec> members;
  std::vector<double> weights;
};

TransformSpec identity_transform();
TransformSpec maskblock_transform(int s, MaskSpec::Mode mode = MaskSpec::Mode::grid,
                                  bool include_identity = true, bool enumerate = true);

/// Weighted mixture of samplers: each draw first picks a member by weight,
/// then applies it with the unchanged draw seed.
TransformSpec ensemble(std::vector<TransformSpec> members, std::vector<double> weights);

/// One draw from q(x') around x. Shape preserving; output clamped to [0,1].
/// A single draw is shared by every image in the batch.
Tensor<float> apply(const TransformSpec& spec, const Tensor<float>& x, uint64_t draw_seed);

/// N draws. Enumerating maskblock specs cycle deterministically through the
/// legal index set; everything else derives one seed per sample index.
std::vector<Tensor<float>> draw_batch(const TransformSpec& spec, const Tensor<float>& x, int N,
                                      uint64_t base_seed);

/// Size of the deterministic draw cycle, or 0 when the spec is stochastic.
int enumeration_count(const TransformSpec& spec, int H, int W);

/// Recursively wires a reference pool into admix members.
void set_admix_pool(TransformSpec& spec, std::shared_ptr<const Tensor<float>> pool);

/// Parses "kind:key=val,key=val"; throws ConfigError echoing the bad token.
TransformSpec parse_transform(const std::string& text);

std::string transform_to_string(const TransformSpec& spec);

struct LossCurveRow {
  int s = 0;
  double masked_loss = 0;
  double clean_loss = 0;
};

/// Mean NLL over randomly masked copies of each image, per patch size, next
/// to the clean loss. s=0 rows reuse the clean loss exactly.
std::vector<LossCurveRow> loss_preservation_curve(const Network<float>& net,
                                                  const LabeledDataset& data,
                                                  const std::vector<int>& sizes,
                                                  int draws_per_image, uint64_t seed);

}  // namespace tlab

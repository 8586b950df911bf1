#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tlab/models.hpp"
#include "tlab/tensor.hpp"
#include "tlab/transforms.hpp"

namespace tlab {

struct AttackSpec {
  enum class Method { fgsm, bim, pgd, mi, vt };
  enum class Loss { nll, cw_margin };

  Method method = Method::bim;
  Loss loss = Loss::nll;
  float epsilon = 0.1f;    // L-inf budget in [0,1] pixel units
  float alpha = 0.0125f;   // step size
  int iters = 10;          // T
  TransformSpec transform;
  int samples = 0;         // N per iteration; 0 resolves automatically
  float mu = 1.0f;         // momentum decay (mi)
  float vt_beta = 1.5f;    // probe radius factor (vt)
  int vt_k = 5;            // probe count (vt)
  float kappa = 0.0f;      // margin (cw_margin)
  bool pgd_random_init = true;
  uint64_t seed = 0;
  std::string name;        // roster label; defaulted when empty
};

const char* method_name(AttackSpec::Method m);
AttackSpec::Method parse_method(const std::string& name);
const char* loss_name(AttackSpec::Loss l);
AttackSpec::Loss parse_loss(const std::string& name);

/// Validates ranges and canonicalizes (fgsm forces T=1, alpha=epsilon; an
/// empty name gets a roster default). Throws ConfigError.
AttackSpec normalized(AttackSpec spec);

/// N per iteration: the explicit value if set, else the enumeration size of
/// the transform when it has one, else 5.
int resolve_samples(const AttackSpec& spec, int H, int W);

/// Worst feasibility figures observed across every iteration of a craft run.
struct FeasibilityStats {
  float max_linf = 0.0f;       // max |delta| seen after any iteration
  long range_violations = 0;   // elements with x+delta outside [0,1]
  long iterations = 0;
};

struct AdversarialBatch {
  Tensor<float> originals;  // [B,C,H,W]
  Tensor<float> deltas;     // [B,C,H,W]
  std::vector<int32_t> labels;
  AttackSpec spec;
  std::string proxy_hash;
  FeasibilityStats stats;

  Tensor<float> adversarials() const;  // originals + deltas
};

/// Elementwise sign with sign(0) = 0.
Tensor<float> sign(const Tensor<float>& t);
float l1_norm(const Tensor<float>& t);
float linf_norm(const Tensor<float>& t);

/// Componentwise clamp of delta to [-eps, eps], then to the box that keeps
/// x+delta inside [0,1]. Feasible components pass through bit-identically.
Tensor<float> project_linf(const Tensor<float>& delta, float eps, const Tensor<float>& x);

/// mu * m_prev + g / ||g||_1. A zero gradient flags a degenerate step and
/// returns mu * m_prev.
Tensor<float> momentum_update(const Tensor<float>& m_prev, const Tensor<float>& g, float mu,
                              bool* degenerate = nullptr);

/// Builds the ascended attack loss from logits on whatever tape the logits
/// live on: mean NLL of the true class, or the negated clipped logit margin.
Tensor<float> attack_loss(const Tensor<float>& logits, const std::vector<int32_t>& labels,
                          AttackSpec::Loss loss, float kappa);

/// Per-image gradient of the Monte-Carlo objective: for each image b,
/// d/d(delta_b) of (1/N) sum_i L(net(clamp(x'_bi + delta_b)), y_b) where the
/// x'_bi are transform draws around x_b. The clamp into [0,1] backpropagates
/// straight through. Draw seeds derive from (seed, image index, sample index).
Tensor<float> mc_gradient(const Network<float>& net, const Tensor<float>& x,
                          const std::vector<int32_t>& y, const Tensor<float>& delta,
                          const TransformSpec& transform, int N, AttackSpec::Loss loss,
                          uint64_t seed, float kappa = 0.0f);

/// Optional per-iteration observer; called on worker threads, one image at a
/// time, with disjoint image indices.
struct CraftHooks {
  std::function<void(int image, int iter, const Tensor<float>& delta,
                     const Tensor<float>& direction)>
      on_iteration;
};

/// Iterative sign ascent under the L-inf budget. Images are attacked
/// independently (their RNG streams derive from the seed and image index),
/// so results are bit-reproducible for any thread count.
AdversarialBatch craft(const AttackSpec& spec, const Network<float>& net, const Tensor<float>& x,
                       const std::vector<int32_t>& y, const CraftHooks* hooks = nullptr);

/// Recomputed feasibility of a finished batch.
FeasibilityStats batch_feasibility(const AdversarialBatch& batch);

// Adversarial batch file: "TADV" magic, u32 LE version, u32 LE header
// length, JSON header, float32 LE originals then deltas, int32 LE labels,
// u32 LE CRC32 over originals+deltas+labels.
void save_batch(const AdversarialBatch& batch, const std::filesystem::path& path);
AdversarialBatch load_batch(const std::filesystem::path& path);

}  // namespace tlab

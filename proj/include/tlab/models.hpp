#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "tlab/dataset.hpp"
#include "tlab/tensor.hpp"

namespace tlab {

struct LayerSpec {
  enum class Kind { conv, relu, maxpool, avgpool, linear };
  Kind kind = Kind::relu;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int pool = 2;
  int out_features = 0;

  static LayerSpec Conv(int out_channels, int kernel, int stride = 1, int padding = 0) {
    LayerSpec l;
    l.kind = Kind::conv;
    l.out_channels = out_channels;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    return l;
  }
  static LayerSpec Relu() {
    LayerSpec l;
    l.kind = Kind::relu;
    return l;
  }
  static LayerSpec MaxPool(int k) {
    LayerSpec l;
    l.kind = Kind::maxpool;
    l.pool = k;
    return l;
  }
  static LayerSpec AvgPool(int k) {
    LayerSpec l;
    l.kind = Kind::avgpool;
    l.pool = k;
    return l;
  }
  static LayerSpec Dense(int out_features) {
    LayerSpec l;
    l.kind = Kind::linear;
    l.out_features = out_features;
    return l;
  }
};

struct ArchSpec {
  std::string name;
  std::array<int, 3> input_shape{1, 28, 28};  // C,H,W
  int class_count = 10;
  std::vector<LayerSpec> layers;
};

/// Two-block CNN: 8/16 channels, 3x3 kernels, max pooling.
ArchSpec cnn_a();
/// Three-block CNN with distinct widths, kernels and pooling from cnn_a.
ArchSpec cnn_b();
ArchSpec arch_by_name(const std::string& name);
std::vector<std::string> arch_names();

struct ParamInfo {
  std::string name;
  Shape shape;
};

/// Checks that consecutive layer shapes compose and that the final layer is
/// a linear map onto class_count logits. Throws ArchError otherwise.
void validate_arch(const ArchSpec& arch);

std::vector<ParamInfo> param_manifest(const ArchSpec& arch);

struct TrainMeta {
  uint64_t seed = 0;
  int epochs = 0;
  double train_acc = -1.0;
  double test_acc = -1.0;
};

template <typename T>
struct Network {
  ArchSpec arch;
  std::vector<Tensor<T>> params;  // manifest order
  TrainMeta meta;

  /// Logits [B, class_count]. Records on a tape when the input or any
  /// parameter is attached to one.
  Tensor<T> forward(const Tensor<T>& x) const;

  template <typename U>
  Network<U> cast() const {
    Network<U> out;
    out.arch = arch;
    out.meta = meta;
    out.params.reserve(params.size());
    for (const auto& p : params) out.params.push_back(p.template cast<U>());
    return out;
  }
};

/// Seeded uniform fan-in initialization; identical seeds give bit-identical
/// parameters.
template <typename T>
Network<T> build(const ArchSpec& arch, uint64_t seed);

template <typename T>
struct PredictResult {
  std::vector<int32_t> labels;
  Tensor<T> log_probs;
};

/// Argmax of log-softmax over logits; ties break toward the lowest class.
template <typename T>
PredictResult<T> predict(const Network<T>& net, const Tensor<T>& images);

/// Minibatch SGD with momentum 0.9 minimizing the mean negative
/// log-likelihood. Fully deterministic for fixed seeds.
Network<float> train(Network<float> net, const LabeledDataset& data, int epochs, double lr,
                     int batch, uint64_t seed, const LabeledDataset* eval = nullptr);

double accuracy(const Network<float>& net, const LabeledDataset& data);

/// FNV-1a over the float32 parameter payload, hex encoded.
std::string param_hash(const Network<float>& net);

// Checkpoint file: "TLAB" magic, u32 LE version, u32 LE header length, JSON
// header, float32 LE payload in manifest order, u32 LE CRC32 of the payload.
void save_checkpoint(const Network<float>& net, const std::filesystem::path& path);
Network<float> load_checkpoint(const std::filesystem::path& path);

struct CheckpointInfo {
  std::string arch_name;
  std::array<int, 3> input_shape;
  int class_count = 0;
  TrainMeta meta;
  std::vector<ParamInfo> manifest;
};

/// Reads magic, version and header only; never touches the payload.
CheckpointInfo inspect_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Template definitions.
// ---------------------------------------------------------------------------

namespace detail {
std::vector<Shape> stage_shapes(const ArchSpec& arch);  // per-layer output C,H,W / features
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x) const {
  if (x.ndim() != 4 || x.dim(1) != arch.input_shape[0] || x.dim(2) != arch.input_shape[1] ||
      x.dim(3) != arch.input_shape[2])
    throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match arch " +
                     arch.name + " input [B," + std::to_string(arch.input_shape[0]) + "," +
                     std::to_string(arch.input_shape[1]) + "," +
                     std::to_string(arch.input_shape[2]) + "]");
  Tensor<T> cur = x;
  size_t pi = 0;
  for (const LayerSpec& l : arch.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::conv:
        cur = ops::conv2d(cur, params[pi], params[pi + 1], l.stride, l.padding);
        pi += 2;
        break;
      case LayerSpec::Kind::relu:
        cur = ops::relu(cur);
        break;
      case LayerSpec::Kind::maxpool:
        cur = ops::maxpool2d(cur, l.pool);
        break;
      case LayerSpec::Kind::avgpool:
        cur = ops::avgpool2d(cur, l.pool);
        break;
      case LayerSpec::Kind::linear: {
        if (cur.ndim() != 2)
          cur = ops::reshape(cur, {cur.dim(0), static_cast<int>(cur.size() / cur.dim(0))});
        cur = ops::linear(cur, params[pi], params[pi + 1]);
        pi += 2;
        break;
      }
    }
  }
  return cur;
}

template <typename T>
Network<T> build(const ArchSpec& arch, uint64_t seed) {
  validate_arch(arch);
  Network<T> net;
  net.arch = arch;
  net.meta.seed = seed;
  const auto manifest = param_manifest(arch);
  net.params.reserve(manifest.size());
  for (size_t pi = 0; pi < manifest.size(); ++pi) {
    const Shape& shape = manifest[pi].shape;
    // fan-in: everything but the leading output dimension of the weight;
    // biases reuse their layer's weight fan-in.
    int64_t fan_in;
    if (shape.size() > 1) {
      fan_in = numel(shape) / shape[0];
    } else {
      fan_in = numel(manifest[pi - 1].shape) / manifest[pi - 1].shape[0];
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    RngStream rng(rng_derive({seed, rngtag::param_init, static_cast<uint64_t>(pi)}));
    Tensor<T> p = Tensor<T>::zeros(shape);
    for (auto& v : p.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    net.params.push_back(std::move(p));
  }
  return net;
}

template <typename T>
PredictResult<T> predict(const Network<T>& net, const Tensor<T>& images) {
  PredictResult<T> out;
  out.log_probs = ops::log_softmax(net.forward(images));
  const int B = out.log_probs.dim(0), K = out.log_probs.dim(1);
  out.labels.resize(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    const T* row = out.log_probs.data() + static_cast<size_t>(b) * K;
    int best = 0;
    for (int j = 1; j < K; ++j)
      if (row[j] > row[best]) best = j;
    out.labels[static_cast<size_t>(b)] = best;
  }
  return out;
}

}  // namespace tlab

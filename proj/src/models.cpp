#include "tlab/models.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace tlab {

using nlohmann::json;

ArchSpec cnn_a() {
  ArchSpec a;
  a.name = "cnn_a";
  a.layers = {LayerSpec::Conv(8, 3, 1, 1),  LayerSpec::Relu(), LayerSpec::MaxPool(2),
              LayerSpec::Conv(16, 3, 1, 1), LayerSpec::Relu(), LayerSpec::MaxPool(2),
              LayerSpec::Dense(10)};
  return a;
}

ArchSpec cnn_b() {
  ArchSpec a;
  a.name = "cnn_b";
  a.layers = {LayerSpec::Conv(6, 5, 1, 2),  LayerSpec::Relu(), LayerSpec::AvgPool(2),
              LayerSpec::Conv(12, 3, 1, 1), LayerSpec::Relu(), LayerSpec::MaxPool(2),
              LayerSpec::Conv(24, 3, 1, 0), LayerSpec::Relu(), LayerSpec::Dense(10)};
  return a;
}

ArchSpec arch_by_name(const std::string& name) {
  if (name == "cnn_a") return cnn_a();
  if (name == "cnn_b") return cnn_b();
  throw ConfigError("unknown architecture '" + name + "'; known: cnn_a, cnn_b");
}

std::vector<std::string> arch_names() { return {"cnn_a", "cnn_b"}; }

namespace detail {

std::vector<Shape> stage_shapes(const ArchSpec& arch) {
  std::vector<Shape> out;
  Shape cur = {arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]};
  bool flat = false;
  int li = 0;
  for (const LayerSpec& l : arch.layers) {
    ++li;
    switch (l.kind) {
      case LayerSpec::Kind::conv: {
        if (flat)
          throw ArchError("arch " + arch.name + ": conv layer " + std::to_string(li) +
                          " after flatten");
        const int C = cur[0], H = cur[1], W = cur[2];
        if (l.kernel < 1 || l.out_channels < 1 || l.stride < 1 || l.padding < 0)
          throw ArchError("arch " + arch.name + ": bad conv parameters at layer " +
                          std::to_string(li));
        if (l.kernel > H + 2 * l.padding || l.kernel > W + 2 * l.padding)
          throw ArchError("arch " + arch.name + ": kernel exceeds input at layer " +
                          std::to_string(li));
        if ((H + 2 * l.padding - l.kernel) % l.stride != 0 ||
            (W + 2 * l.padding - l.kernel) % l.stride != 0)
          throw ArchError("arch " + arch.name + ": inexact conv output at layer " +
                          std::to_string(li));
        cur = {l.out_channels, (H + 2 * l.padding - l.kernel) / l.stride + 1,
               (W + 2 * l.padding - l.kernel) / l.stride + 1};
        break;
      }
      case LayerSpec::Kind::relu:
        break;
      case LayerSpec::Kind::maxpool:
      case LayerSpec::Kind::avgpool: {
        if (flat)
          throw ArchError("arch " + arch.name + ": pool layer " + std::to_string(li) +
                          " after flatten");
        if (l.pool < 1 || cur[1] % l.pool != 0 || cur[2] % l.pool != 0)
          throw ArchError("arch " + arch.name + ": pool window does not divide " +
                          std::to_string(cur[1]) + "x" + std::to_string(cur[2]) + " at layer " +
                          std::to_string(li));
        cur = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
        break;
      }
      case LayerSpec::Kind::linear: {
        int features = flat ? cur[0] : cur[0] * cur[1] * cur[2];
        if (l.out_features < 1)
          throw ArchError("arch " + arch.name + ": bad linear width at layer " + std::to_string(li));
        (void)features;
        cur = {l.out_features};
        flat = true;
        break;
      }
    }
    out.push_back(cur);
  }
  if (out.empty() || arch.layers.back().kind != LayerSpec::Kind::linear ||
      out.back() != Shape{arch.class_count})
    throw ArchError("arch " + arch.name + ": must end in a linear layer emitting " +
                    std::to_string(arch.class_count) + " logits");
  return out;
}

}  // namespace detail

void validate_arch(const ArchSpec& arch) {
  if (arch.layers.empty()) throw ArchError("arch " + arch.name + ": empty layer list");
  if (arch.class_count < 2) throw ArchError("arch " + arch.name + ": needs at least 2 classes");
  for (int d : arch.input_shape)
    if (d < 1) throw ArchError("arch " + arch.name + ": bad input shape");
  detail::stage_shapes(arch);
}

std::vector<ParamInfo> param_manifest(const ArchSpec& arch) {
  std::vector<ParamInfo> out;
  Shape cur = {arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]};
  bool flat = false;
  int conv_n = 0, fc_n = 0;
  for (const LayerSpec& l : arch.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::conv: {
        ++conv_n;
        const std::string base = "conv" + std::to_string(conv_n);
        out.push_back({base + ".weight", {l.out_channels, cur[0], l.kernel, l.kernel}});
        out.push_back({base + ".bias", {l.out_channels}});
        cur = {l.out_channels, (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1,
               (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1};
        break;
      }
      case LayerSpec::Kind::relu:
        break;
      case LayerSpec::Kind::maxpool:
      case LayerSpec::Kind::avgpool:
        cur = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
        break;
      case LayerSpec::Kind::linear: {
        ++fc_n;
        const int features = flat ? cur[0] : cur[0] * cur[1] * cur[2];
        const std::string base = "fc" + std::to_string(fc_n);
        out.push_back({base + ".weight", {l.out_features, features}});
        out.push_back({base + ".bias", {l.out_features}});
        cur = {l.out_features};
        flat = true;
        break;
      }
    }
  }
  return out;
}

double accuracy(const Network<float>& net, const LabeledDataset& data) {
  const int n = data.count();
  const int chunk = 256;
  long correct = 0;
  for (int lo = 0; lo < n; lo += chunk) {
    const int hi = std::min(n, lo + chunk);
    std::vector<int> idx(static_cast<size_t>(hi - lo));
    for (int i = lo; i < hi; ++i) idx[static_cast<size_t>(i - lo)] = i;
    auto pred = predict(net, gather_images(data.images, idx));
    for (int i = lo; i < hi; ++i)
      if (pred.labels[static_cast<size_t>(i - lo)] == data.labels[static_cast<size_t>(i)])
        ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

Network<float> train(Network<float> net, const LabeledDataset& data, int epochs, double lr,
                     int batch, uint64_t seed, const LabeledDataset* eval) {
  if (epochs < 0 || batch < 1) throw ConfigError("train: bad epochs/batch");
  validate_dataset(data, net.arch.class_count);
  const int n = data.count();
  const float momentum = 0.9f;
  const float flr = static_cast<float>(lr);

  std::vector<std::vector<float>> velocity(net.params.size());
  for (size_t p = 0; p < net.params.size(); ++p)
    velocity[p].assign(net.params[p].values().size(), 0.0f);

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    RngStream rng(rng_derive({seed, rngtag::shuffle, static_cast<uint64_t>(epoch)}));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);

    for (int lo = 0, step = 0; lo < n; lo += batch, ++step) {
      const int hi = std::min(n, lo + batch);
      std::vector<int> idx(order.begin() + lo, order.begin() + hi);
      Tensor<float> images = gather_images(data.images, idx);
      std::vector<int32_t> labels(idx.size());
      for (size_t k = 0; k < idx.size(); ++k)
        labels[k] = data.labels[static_cast<size_t>(idx[k])];

      Tape<float> tape;
      for (auto& p : net.params) tape.watch(p);
      Tensor<float> loss = ops::nll_loss(ops::log_softmax(net.forward(images)), labels);
      const float loss_v = loss.values()[0];
      if (!std::isfinite(loss_v))
        throw TrainingError("training diverged (non-finite loss) at epoch " +
                            std::to_string(epoch + 1) + ", step " + std::to_string(step + 1));
      tape.backward(loss);

      for (size_t p = 0; p < net.params.size(); ++p) {
        Tensor<float> updated = Tensor<float>::zeros(net.params[p].shape());
        const float* grad =
            net.params[p].has_grad() ? net.params[p].grad().data() : nullptr;
        const auto& old = net.params[p].values();
        auto& vel = velocity[p];
        auto& val = updated.values();
        for (size_t i = 0; i < val.size(); ++i) {
          vel[i] = momentum * vel[i] + (grad ? grad[i] : 0.0f);
          val[i] = old[i] - flr * vel[i];
        }
        net.params[p] = std::move(updated);
      }
    }
  }

  net.meta.seed = seed;
  net.meta.epochs = epochs;
  net.meta.train_acc = accuracy(net, data);
  if (eval) net.meta.test_acc = accuracy(net, *eval);
  return net;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization.
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kMagic[4] = {'T', 'L', 'A', 'B'};

void append_le32(std::string& out, uint32_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 24) & 0xff));
}

uint32_t read_le32(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

json layer_to_json(const LayerSpec& l) {
  switch (l.kind) {
    case LayerSpec::Kind::conv:
      return {{"kind", "conv"}, {"out", l.out_channels}, {"k", l.kernel},
              {"stride", l.stride}, {"pad", l.padding}};
    case LayerSpec::Kind::relu:
      return {{"kind", "relu"}};
    case LayerSpec::Kind::maxpool:
      return {{"kind", "maxpool"}, {"pool", l.pool}};
    case LayerSpec::Kind::avgpool:
      return {{"kind", "avgpool"}, {"pool", l.pool}};
    case LayerSpec::Kind::linear:
      return {{"kind", "linear"}, {"out", l.out_features}};
  }
  throw ContractError("unreachable layer kind");
}

LayerSpec layer_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "conv")
    return LayerSpec::Conv(j.at("out").get<int>(), j.at("k").get<int>(), j.at("stride").get<int>(),
                           j.at("pad").get<int>());
  if (kind == "relu") return LayerSpec::Relu();
  if (kind == "maxpool") return LayerSpec::MaxPool(j.at("pool").get<int>());
  if (kind == "avgpool") return LayerSpec::AvgPool(j.at("pool").get<int>());
  if (kind == "linear") return LayerSpec::Dense(j.at("out").get<int>());
  throw LoadError(LoadError::Kind::malformed_header, "unknown layer kind '" + kind + "'");
}

json header_json(const Network<float>& net) {
  json arch;
  arch["name"] = net.arch.name;
  arch["input_shape"] = net.arch.input_shape;
  arch["class_count"] = net.arch.class_count;
  arch["layers"] = json::array();
  for (const auto& l : net.arch.layers) arch["layers"].push_back(layer_to_json(l));

  json manifest = json::array();
  for (const auto& info : param_manifest(net.arch))
    manifest.push_back(json::array({info.name, info.shape}));

  return json{{"arch", arch},
              {"seed", net.meta.seed},
              {"epochs", net.meta.epochs},
              {"train_acc", net.meta.train_acc},
              {"test_acc", net.meta.test_acc},
              {"manifest", manifest}};
}

struct ParsedHeader {
  CheckpointInfo info;
  ArchSpec arch;
};

ParsedHeader parse_header(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw LoadError(LoadError::Kind::malformed_header, std::string("bad header JSON: ") + e.what());
  }
  try {
    ParsedHeader out;
    out.arch.name = j.at("arch").at("name").get<std::string>();
    const auto ishape = j.at("arch").at("input_shape").get<std::vector<int>>();
    if (ishape.size() != 3)
      throw LoadError(LoadError::Kind::malformed_header, "input_shape must have 3 dims");
    std::copy(ishape.begin(), ishape.end(), out.arch.input_shape.begin());
    out.arch.class_count = j.at("arch").at("class_count").get<int>();
    for (const auto& l : j.at("arch").at("layers")) out.arch.layers.push_back(layer_from_json(l));

    out.info.arch_name = out.arch.name;
    out.info.input_shape = out.arch.input_shape;
    out.info.class_count = out.arch.class_count;
    out.info.meta.seed = j.at("seed").get<uint64_t>();
    out.info.meta.epochs = j.at("epochs").get<int>();
    out.info.meta.train_acc = j.at("train_acc").get<double>();
    out.info.meta.test_acc = j.at("test_acc").get<double>();
    for (const auto& m : j.at("manifest"))
      out.info.manifest.push_back({m.at(0).get<std::string>(), m.at(1).get<Shape>()});
    return out;
  } catch (const json::exception& e) {
    throw LoadError(LoadError::Kind::malformed_header,
                    std::string("incomplete header JSON: ") + e.what());
  }
}

// Shared by load and inspect: validates magic/version and returns the header
// text plus the offset of the payload.
std::pair<std::string, size_t> read_header(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw LoadError(LoadError::Kind::bad_magic, "not a TLAB checkpoint: " + origin);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint32_t version = read_le32(p + 4);
  if (version != kCheckpointVersion)
    throw LoadError(LoadError::Kind::version_mismatch,
                    "checkpoint version " + std::to_string(version) + " unsupported (want " +
                        std::to_string(kCheckpointVersion) + "): " + origin);
  const uint32_t header_len = read_le32(p + 8);
  if (bytes.size() < 12 + size_t(header_len))
    throw LoadError(LoadError::Kind::truncated, "checkpoint header truncated: " + origin);
  return {bytes.substr(12, header_len), 12 + size_t(header_len)};
}

}  // namespace

std::string param_hash(const Network<float>& net) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : net.params)
    h = fnv1a64(p.data(), p.values().size() * sizeof(float), h);
  return to_hex(h);
}

void save_checkpoint(const Network<float>& net, const std::filesystem::path& path) {
  const std::string header = header_json(net).dump();
  std::string bytes;
  bytes.append(kMagic, 4);
  append_le32(bytes, kCheckpointVersion);
  append_le32(bytes, static_cast<uint32_t>(header.size()));
  bytes += header;

  const size_t payload_off = bytes.size();
  for (const auto& p : net.params)
    bytes.append(reinterpret_cast<const char*>(p.data()), p.values().size() * sizeof(float));
  const uint32_t crc =
      crc32_ieee(bytes.data() + payload_off, bytes.size() - payload_off);
  append_le32(bytes, crc);
  write_file_atomic(path, bytes);
}

Network<float> load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  auto [header_text, payload_off] = read_header(bytes, path.string());
  ParsedHeader h = parse_header(header_text);
  validate_arch(h.arch);

  const auto manifest = param_manifest(h.arch);
  if (manifest.size() != h.info.manifest.size())
    throw LoadError(LoadError::Kind::malformed_header,
                    "manifest does not match architecture: " + path.string());
  size_t payload = 0;
  for (size_t i = 0; i < manifest.size(); ++i) {
    if (manifest[i].name != h.info.manifest[i].name ||
        manifest[i].shape != h.info.manifest[i].shape)
      throw LoadError(LoadError::Kind::malformed_header,
                      "manifest entry '" + h.info.manifest[i].name +
                          "' does not match architecture: " + path.string());
    payload += static_cast<size_t>(numel(manifest[i].shape)) * sizeof(float);
  }
  if (bytes.size() < payload_off + payload + 4)
    throw LoadError(LoadError::Kind::truncated, "checkpoint payload truncated: " + path.string());

  const uint32_t want_crc =
      read_le32(reinterpret_cast<const unsigned char*>(bytes.data() + payload_off + payload));
  const uint32_t got_crc = crc32_ieee(bytes.data() + payload_off, payload);
  if (want_crc != got_crc)
    throw LoadError(LoadError::Kind::checksum, "checkpoint payload CRC mismatch: " + path.string());

  Network<float> net;
  net.arch = h.arch;
  net.meta = h.info.meta;
  size_t off = payload_off;
  for (const auto& info : manifest) {
    Tensor<float> p = Tensor<float>::zeros(info.shape);
    std::memcpy(p.data(), bytes.data() + off, p.values().size() * sizeof(float));
    off += p.values().size() * sizeof(float);
    net.params.push_back(std::move(p));
  }
  return net;
}

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path.string());
  char head[12];
  in.read(head, 12);
  if (in.gcount() != 12) throw LoadError(LoadError::Kind::truncated, "file too short: " + path.string());
  if (std::memcmp(head, kMagic, 4) != 0)
    throw LoadError(LoadError::Kind::bad_magic, "not a TLAB checkpoint: " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(head);
  const uint32_t version = read_le32(p + 4);
  if (version != kCheckpointVersion)
    throw LoadError(LoadError::Kind::version_mismatch,
                    "checkpoint version " + std::to_string(version) + " unsupported: " +
                        path.string());
  const uint32_t header_len = read_le32(p + 8);
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (in.gcount() != std::streamsize(header_len))
    throw LoadError(LoadError::Kind::truncated, "checkpoint header truncated: " + path.string());
  return parse_header(header).info;
}

}  // namespace tlab

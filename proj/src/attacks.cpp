#include "tlab/attacks.hpp"

#include <cmath>
#include <cstring>
#include <mutex>

#include "json.hpp"

namespace tlab {

using nlohmann::json;

const char* method_name(AttackSpec::Method m) {
  switch (m) {
    case AttackSpec::Method::fgsm: return "fgsm";
    case AttackSpec::Method::bim: return "bim";
    case AttackSpec::Method::pgd: return "pgd";
    case AttackSpec::Method::mi: return "mi";
    case AttackSpec::Method::vt: return "vt";
  }
  return "?";
}

AttackSpec::Method parse_method(const std::string& name) {
  if (name == "fgsm") return AttackSpec::Method::fgsm;
  if (name == "bim") return AttackSpec::Method::bim;
  if (name == "pgd") return AttackSpec::Method::pgd;
  if (name == "mi") return AttackSpec::Method::mi;
  if (name == "vt") return AttackSpec::Method::vt;
  throw ConfigError("unknown attack method '" + name + "' (fgsm, bim, pgd, mi, vt)");
}

const char* loss_name(AttackSpec::Loss l) {
  return l == AttackSpec::Loss::nll ? "nll" : "cw_margin";
}

AttackSpec::Loss parse_loss(const std::string& name) {
  if (name == "nll") return AttackSpec::Loss::nll;
  if (name == "cw_margin" || name == "cw") return AttackSpec::Loss::cw_margin;
  throw ConfigError("unknown attack loss '" + name + "' (nll, cw_margin)");
}

AttackSpec normalized(AttackSpec spec) {
  if (!(spec.epsilon >= 0.0f && spec.epsilon <= 1.0f))
    throw ConfigError("epsilon must lie in [0,1], got " + std::to_string(spec.epsilon));
  if (spec.method == AttackSpec::Method::fgsm) {
    spec.iters = 1;
    spec.alpha = spec.epsilon;
  }
  if (spec.epsilon > 0.0f && !(spec.alpha > 0.0f && spec.alpha <= spec.epsilon))
    throw ConfigError("alpha must satisfy 0 < alpha <= epsilon, got alpha=" +
                      std::to_string(spec.alpha) + " epsilon=" + std::to_string(spec.epsilon));
  if (spec.iters < 1) throw ConfigError("iteration count must be >= 1");
  if (spec.samples < 0) throw ConfigError("sample count must be >= 0 (0 = auto)");
  if (spec.vt_k < 1) throw ConfigError("vt probe count must be >= 1");
  if (spec.mu < 0.0f) throw ConfigError("momentum decay must be >= 0");
  if (spec.name.empty()) {
    if (spec.transform.kind == TransformSpec::Kind::identity)
      spec.name = method_name(spec.method);
    else if (spec.method == AttackSpec::Method::bim)
      spec.name = transform_to_string(spec.transform).substr(
          0, transform_to_string(spec.transform).find(':'));
    else
      spec.name = std::string(method_name(spec.method)) + "+" +
                  transform_to_string(spec.transform).substr(
                      0, transform_to_string(spec.transform).find(':'));
  }
  return spec;
}

int resolve_samples(const AttackSpec& spec, int H, int W) {
  if (spec.samples > 0) return spec.samples;
  const int ec = enumeration_count(spec.transform, H, W);
  return ec > 0 ? ec : 5;
}

Tensor<float> AdversarialBatch::adversarials() const {
  Tensor<float> out = Tensor<float>::zeros(originals.shape());
  for (int64_t i = 0; i < originals.size(); ++i)
    out.values()[static_cast<size_t>(i)] =
        originals.values()[static_cast<size_t>(i)] + deltas.values()[static_cast<size_t>(i)];
  return out;
}

Tensor<float> sign(const Tensor<float>& t) {
  Tensor<float> out = Tensor<float>::zeros(t.shape());
  for (int64_t i = 0; i < t.size(); ++i) {
    const float v = t.values()[static_cast<size_t>(i)];
    out.values()[static_cast<size_t>(i)] = v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f);
  }
  return out;
}

float l1_norm(const Tensor<float>& t) {
  double acc = 0;
  for (float v : t.values()) acc += std::abs(static_cast<double>(v));
  return static_cast<float>(acc);
}

float linf_norm(const Tensor<float>& t) {
  float m = 0.0f;
  for (float v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

Tensor<float> project_linf(const Tensor<float>& delta, float eps, const Tensor<float>& x) {
  ops::check_same_shape(delta, x, "project_linf");
  Tensor<float> out = Tensor<float>::zeros(delta.shape());
  for (int64_t i = 0; i < delta.size(); ++i) {
    const float xv = x.values()[static_cast<size_t>(i)];
    float c = std::min(eps, std::max(-eps, delta.values()[static_cast<size_t>(i)]));
    const float s = xv + c;
    if (s < 0.0f)
      c = -xv;
    else if (s > 1.0f)
      c = 1.0f - xv;
    out.values()[static_cast<size_t>(i)] = c;
  }
  return out;
}

Tensor<float> momentum_update(const Tensor<float>& m_prev, const Tensor<float>& g, float mu,
                              bool* degenerate) {
  ops::check_same_shape(m_prev, g, "momentum_update");
  const float n1 = l1_norm(g);
  Tensor<float> out = Tensor<float>::zeros(m_prev.shape());
  if (n1 == 0.0f) {
    if (degenerate) *degenerate = true;
    for (int64_t i = 0; i < out.size(); ++i)
      out.values()[static_cast<size_t>(i)] = mu * m_prev.values()[static_cast<size_t>(i)];
    return out;
  }
  if (degenerate) *degenerate = false;
  const float inv = 1.0f / n1;
  for (int64_t i = 0; i < out.size(); ++i)
    out.values()[static_cast<size_t>(i)] = mu * m_prev.values()[static_cast<size_t>(i)] +
                                           g.values()[static_cast<size_t>(i)] * inv;
  return out;
}

Tensor<float> attack_loss(const Tensor<float>& logits, const std::vector<int32_t>& labels,
                          AttackSpec::Loss loss, float kappa) {
  if (loss == AttackSpec::Loss::nll)
    return ops::nll_loss(ops::log_softmax(logits), labels);
  // Ascending the negative clipped margin drives the true-class logit below
  // the runner-up until the margin reaches kappa.
  Tensor<float> target = ops::gather_classes(logits, labels);
  Tensor<float> rival = ops::max_excluding(logits, labels);
  Tensor<float> margin = ops::clamp_min(ops::sub(target, rival), -kappa);
  return ops::mul_scalar(ops::mean(margin), -1.0f);
}

namespace {

Tensor<float> slice_image(const Tensor<float>& batch, int b) {
  Shape shape = batch.shape();
  shape[0] = 1;
  const size_t inner = static_cast<size_t>(numel(shape));
  Tensor<float> out = Tensor<float>::zeros(shape);
  std::memcpy(out.data(), batch.data() + static_cast<size_t>(b) * inner, inner * sizeof(float));
  return out;
}

void write_image(Tensor<float>& batch, int b, const Tensor<float>& img) {
  const size_t inner = img.values().size();
  std::memcpy(batch.data() + static_cast<size_t>(b) * inner, img.data(), inner * sizeof(float));
}

Tensor<float> stack_draws(const std::vector<Tensor<float>>& draws) {
  Shape shape = draws.front().shape();
  shape[0] = static_cast<int>(draws.size());
  Tensor<float> out = Tensor<float>::zeros(shape);
  const size_t inner = draws.front().values().size();
  for (size_t i = 0; i < draws.size(); ++i)
    std::memcpy(out.data() + i * inner, draws[i].data(), inner * sizeof(float));
  return out;
}

// Gradient of the MC objective for a single [1,C,H,W] image.
Tensor<float> mc_gradient_single(const Network<float>& net, const Tensor<float>& x_b, int32_t y_b,
                                 const Tensor<float>& delta_b, const TransformSpec& transform,
                                 int N, AttackSpec::Loss loss, uint64_t seed, float kappa) {
  const auto draws = draw_batch(transform, x_b, N, seed);
  const Tensor<float> stacked = stack_draws(draws);

  Tape<float> tape;
  Tensor<float> leaf = delta_b.clone();
  tape.watch(leaf);
  Tensor<float> x_in =
      ops::clamp_straight_through(ops::add_broadcast_batch(stacked, leaf), 0.0f, 1.0f);
  const std::vector<int32_t> labels(static_cast<size_t>(N), y_b);
  Tensor<float> loss_t = attack_loss(net.forward(x_in), labels, loss, kappa);
  tape.backward(loss_t);
  return Tensor<float>::from(delta_b.shape(), leaf.grad());
}

}  // namespace

Tensor<float> mc_gradient(const Network<float>& net, const Tensor<float>& x,
                          const std::vector<int32_t>& y, const Tensor<float>& delta,
                          const TransformSpec& transform, int N, AttackSpec::Loss loss,
                          uint64_t seed, float kappa) {
  ops::check_same_shape(x, delta, "mc_gradient");
  if (x.ndim() != 4) throw ShapeError("mc_gradient: want [B,C,H,W], got " + shape_str(x.shape()));
  if (static_cast<int>(y.size()) != x.dim(0))
    throw ShapeError("mc_gradient: label count mismatch");
  if (N < 1) throw ContractError("mc_gradient: N must be >= 1");

  Tensor<float> g = Tensor<float>::zeros(x.shape());
  for (int b = 0; b < x.dim(0); ++b) {
    const Tensor<float> gb = mc_gradient_single(
        net, slice_image(x, b), y[static_cast<size_t>(b)], slice_image(delta, b), transform, N,
        loss, rng_derive({seed, static_cast<uint64_t>(b)}), kappa);
    write_image(g, b, gb);
  }
  return g;
}

AdversarialBatch craft(const AttackSpec& raw_spec, const Network<float>& net,
                       const Tensor<float>& x, const std::vector<int32_t>& y,
                       const CraftHooks* hooks) {
  const AttackSpec spec = normalized(raw_spec);
  if (x.ndim() != 4) throw ShapeError("craft: want [B,C,H,W], got " + shape_str(x.shape()));
  if (static_cast<int>(y.size()) != x.dim(0)) throw ShapeError("craft: label count mismatch");
  for (float v : x.values())
    if (v < 0.0f || v > 1.0f)
      throw ConfigError("craft: input pixels must lie in [0,1]");

  const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int N = resolve_samples(spec, H, W);

  AdversarialBatch batch;
  batch.originals = x.clone();
  batch.deltas = Tensor<float>::zeros(x.shape());
  batch.labels = y;
  batch.spec = spec;
  batch.proxy_hash = param_hash(net);

  if (spec.epsilon == 0.0f) return batch;

  std::vector<FeasibilityStats> stats(static_cast<size_t>(B));
  std::mutex hook_mu;

  parallel_for(B, [&](long long bi) {
    const int b = static_cast<int>(bi);
    const Tensor<float> x_b = slice_image(x, b);
    const int32_t y_b = y[static_cast<size_t>(b)];
    FeasibilityStats& st = stats[static_cast<size_t>(b)];

    Tensor<float> delta = Tensor<float>::zeros(x_b.shape());
    if (spec.method == AttackSpec::Method::pgd && spec.pgd_random_init) {
      RngStream rng(rng_derive({spec.seed, rngtag::attack_init, static_cast<uint64_t>(b)}));
      for (auto& v : delta.values())
        v = static_cast<float>(rng.uniform(-spec.epsilon, spec.epsilon));
      delta = project_linf(delta, spec.epsilon, x_b);
    }

    Tensor<float> momentum = Tensor<float>::zeros(x_b.shape());
    Tensor<float> variance = Tensor<float>::zeros(x_b.shape());

    for (int t = 0; t < spec.iters; ++t) {
      const uint64_t grad_seed =
          rng_derive({spec.seed, rngtag::attack_grad, static_cast<uint64_t>(b),
                      static_cast<uint64_t>(t)});
      const Tensor<float> g = mc_gradient_single(net, x_b, y_b, delta, spec.transform, N,
                                                 spec.loss, grad_seed, spec.kappa);
      if (!g.all_finite())
        throw AttackError("non-finite gradient at iteration " + std::to_string(t + 1) +
                          " (image " + std::to_string(b) + ")");

      Tensor<float> direction;
      switch (spec.method) {
        case AttackSpec::Method::fgsm:
        case AttackSpec::Method::bim:
        case AttackSpec::Method::pgd:
          direction = g;
          break;
        case AttackSpec::Method::mi:
          momentum = momentum_update(momentum, g, spec.mu);
          direction = momentum;
          break;
        case AttackSpec::Method::vt: {
          direction = Tensor<float>::zeros(g.shape());
          for (int64_t i = 0; i < g.size(); ++i)
            direction.values()[static_cast<size_t>(i)] =
                g.values()[static_cast<size_t>(i)] + variance.values()[static_cast<size_t>(i)];
          // Refresh the variance term from probes around the current iterate.
          Tensor<float> probe_mean = Tensor<float>::zeros(g.shape());
          const float radius = spec.vt_beta * spec.epsilon;
          for (int k = 0; k < spec.vt_k; ++k) {
            RngStream rng(rng_derive({spec.seed, rngtag::vt_probe, static_cast<uint64_t>(b),
                                      static_cast<uint64_t>(t), static_cast<uint64_t>(k)}));
            Tensor<float> probe = Tensor<float>::zeros(delta.shape());
            for (int64_t i = 0; i < probe.size(); ++i)
              probe.values()[static_cast<size_t>(i)] =
                  delta.values()[static_cast<size_t>(i)] +
                  static_cast<float>(rng.uniform(-radius, radius));
            const Tensor<float> gk = mc_gradient_single(
                net, x_b, y_b, probe, spec.transform, N, spec.loss,
                rng_derive({grad_seed, rngtag::vt_probe, static_cast<uint64_t>(k)}), spec.kappa);
            for (int64_t i = 0; i < gk.size(); ++i)
              probe_mean.values()[static_cast<size_t>(i)] += gk.values()[static_cast<size_t>(i)];
          }
          const float inv_k = 1.0f / static_cast<float>(spec.vt_k);
          for (int64_t i = 0; i < variance.size(); ++i)
            variance.values()[static_cast<size_t>(i)] =
                probe_mean.values()[static_cast<size_t>(i)] * inv_k -
                g.values()[static_cast<size_t>(i)];
          break;
        }
      }

      const Tensor<float> step = sign(direction);
      for (int64_t i = 0; i < delta.size(); ++i)
        delta.values()[static_cast<size_t>(i)] += spec.alpha * step.values()[static_cast<size_t>(i)];
      delta = project_linf(delta, spec.epsilon, x_b);

      st.iterations += 1;
      st.max_linf = std::max(st.max_linf, linf_norm(delta));
      for (int64_t i = 0; i < delta.size(); ++i) {
        const float s = x_b.values()[static_cast<size_t>(i)] + delta.values()[static_cast<size_t>(i)];
        if (s < 0.0f || s > 1.0f) st.range_violations += 1;
      }

      if (hooks && hooks->on_iteration) {
        std::lock_guard<std::mutex> lock(hook_mu);
        hooks->on_iteration(b, t, delta, direction);
      }
    }

    write_image(batch.deltas, b, delta);
  });

  for (const auto& st : stats) {
    batch.stats.max_linf = std::max(batch.stats.max_linf, st.max_linf);
    batch.stats.range_violations += st.range_violations;
    batch.stats.iterations += st.iterations;
  }
  return batch;
}

FeasibilityStats batch_feasibility(const AdversarialBatch& batch) {
  FeasibilityStats st;
  st.max_linf = linf_norm(batch.deltas);
  for (int64_t i = 0; i < batch.deltas.size(); ++i) {
    const float s = batch.originals.values()[static_cast<size_t>(i)] +
                    batch.deltas.values()[static_cast<size_t>(i)];
    if (s < 0.0f || s > 1.0f) st.range_violations += 1;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Serialization.
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kBatchVersion = 1;
constexpr char kBatchMagic[4] = {'T', 'A', 'D', 'V'};

void append_le32(std::string& out, uint32_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 24) & 0xff));
}

uint32_t read_le32(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

}  // namespace

void save_batch(const AdversarialBatch& batch, const std::filesystem::path& path) {
  json spec_j{{"method", method_name(batch.spec.method)},
              {"loss", loss_name(batch.spec.loss)},
              {"eps", batch.spec.epsilon},
              {"alpha", batch.spec.alpha},
              {"iters", batch.spec.iters},
              {"samples", batch.spec.samples},
              {"mu", batch.spec.mu},
              {"vt_beta", batch.spec.vt_beta},
              {"vt_k", batch.spec.vt_k},
              {"kappa", batch.spec.kappa},
              {"pgd_random_init", batch.spec.pgd_random_init},
              {"seed", batch.spec.seed},
              {"transform", transform_to_string(batch.spec.transform)},
              {"name", batch.spec.name}};
  json header{{"spec", spec_j},
              {"proxy_hash", batch.proxy_hash},
              {"count", batch.originals.dim(0)},
              {"image_shape", Shape{batch.originals.dim(1), batch.originals.dim(2),
                                    batch.originals.dim(3)}},
              {"stats",
               {{"max_linf", batch.stats.max_linf},
                {"range_violations", batch.stats.range_violations},
                {"iterations", batch.stats.iterations}}}};
  const std::string header_text = header.dump();

  std::string bytes;
  bytes.append(kBatchMagic, 4);
  append_le32(bytes, kBatchVersion);
  append_le32(bytes, static_cast<uint32_t>(header_text.size()));
  bytes += header_text;

  const size_t payload_off = bytes.size();
  bytes.append(reinterpret_cast<const char*>(batch.originals.data()),
               batch.originals.values().size() * sizeof(float));
  bytes.append(reinterpret_cast<const char*>(batch.deltas.data()),
               batch.deltas.values().size() * sizeof(float));
  bytes.append(reinterpret_cast<const char*>(batch.labels.data()),
               batch.labels.size() * sizeof(int32_t));
  append_le32(bytes, crc32_ieee(bytes.data() + payload_off, bytes.size() - payload_off));
  write_file_atomic(path, bytes);
}

AdversarialBatch load_batch(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kBatchMagic, 4) != 0)
    throw LoadError(LoadError::Kind::bad_magic, "not a TADV batch file: " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint32_t version = read_le32(p + 4);
  if (version != kBatchVersion)
    throw LoadError(LoadError::Kind::version_mismatch,
                    "batch version " + std::to_string(version) + " unsupported: " + path.string());
  const uint32_t header_len = read_le32(p + 8);
  if (bytes.size() < 12 + size_t(header_len))
    throw LoadError(LoadError::Kind::truncated, "batch header truncated: " + path.string());

  json header;
  try {
    header = json::parse(bytes.substr(12, header_len));
  } catch (const json::exception& e) {
    throw LoadError(LoadError::Kind::malformed_header,
                    std::string("bad batch header JSON: ") + e.what());
  }

  AdversarialBatch batch;
  try {
    const json& spec_j = header.at("spec");
    batch.spec.method = parse_method(spec_j.at("method").get<std::string>());
    batch.spec.loss = parse_loss(spec_j.at("loss").get<std::string>());
    batch.spec.epsilon = spec_j.at("eps").get<float>();
    batch.spec.alpha = spec_j.at("alpha").get<float>();
    batch.spec.iters = spec_j.at("iters").get<int>();
    batch.spec.samples = spec_j.at("samples").get<int>();
    batch.spec.mu = spec_j.at("mu").get<float>();
    batch.spec.vt_beta = spec_j.at("vt_beta").get<float>();
    batch.spec.vt_k = spec_j.at("vt_k").get<int>();
    batch.spec.kappa = spec_j.at("kappa").get<float>();
    batch.spec.pgd_random_init = spec_j.at("pgd_random_init").get<bool>();
    batch.spec.seed = spec_j.at("seed").get<uint64_t>();
    batch.spec.transform = parse_transform(spec_j.at("transform").get<std::string>());
    batch.spec.name = spec_j.at("name").get<std::string>();
    batch.proxy_hash = header.at("proxy_hash").get<std::string>();
    batch.stats.max_linf = header.at("stats").at("max_linf").get<float>();
    batch.stats.range_violations = header.at("stats").at("range_violations").get<long>();
    batch.stats.iterations = header.at("stats").at("iterations").get<long>();

    const int count = header.at("count").get<int>();
    const Shape img = header.at("image_shape").get<Shape>();
    if (img.size() != 3 || count < 1)
      throw LoadError(LoadError::Kind::malformed_header, "bad batch geometry: " + path.string());

    const size_t plane = static_cast<size_t>(count) * img[0] * img[1] * img[2];
    const size_t payload = 2 * plane * sizeof(float) + static_cast<size_t>(count) * sizeof(int32_t);
    const size_t payload_off = 12 + header_len;
    if (bytes.size() < payload_off + payload + 4)
      throw LoadError(LoadError::Kind::truncated, "batch payload truncated: " + path.string());
    const uint32_t want_crc =
        read_le32(reinterpret_cast<const unsigned char*>(bytes.data() + payload_off + payload));
    if (want_crc != crc32_ieee(bytes.data() + payload_off, payload))
      throw LoadError(LoadError::Kind::checksum, "batch payload CRC mismatch: " + path.string());

    batch.originals = Tensor<float>::zeros({count, img[0], img[1], img[2]});
    batch.deltas = Tensor<float>::zeros({count, img[0], img[1], img[2]});
    std::memcpy(batch.originals.data(), bytes.data() + payload_off, plane * sizeof(float));
    std::memcpy(batch.deltas.data(), bytes.data() + payload_off + plane * sizeof(float),
                plane * sizeof(float));
    batch.labels.resize(static_cast<size_t>(count));
    std::memcpy(batch.labels.data(), bytes.data() + payload_off + 2 * plane * sizeof(float),
                static_cast<size_t>(count) * sizeof(int32_t));
  } catch (const json::exception& e) {
    throw LoadError(LoadError::Kind::malformed_header,
                    std::string("incomplete batch header: ") + e.what());
  }
  return batch;
}

}  // namespace tlab

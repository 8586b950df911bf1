#include "tlab/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <sstream>

namespace tlab {

namespace {

void validate_mask_spec(const MaskSpec& spec, int H, int W) {
  if (spec.s <= 0)
    throw ConfigError("maskblock patch size must be positive, got s=" + std::to_string(spec.s));
  if (spec.s > H || spec.s > W)
    throw ConfigError("maskblock patch size s=" + std::to_string(spec.s) +
                      " exceeds image extent " + std::to_string(H) + "x" + std::to_string(W));
}

void check_mask_index(const MaskSpec& spec, int u, int extent, const char* axis) {
  const int bound = mask_index_bound(spec, extent);
  if (u < 0 || u > bound)
    throw IndexError("mask index " + std::string(axis) + "=" + std::to_string(u) +
                     " outside legal set {0.." + std::to_string(bound) + "}");
}

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

}  // namespace

int mask_index_bound(const MaskSpec& spec, int extent) {
  if (spec.include_identity) return extent / spec.s;
  return (extent + spec.s - 1) / spec.s - 1;
}

Tensor<float> make_mask(const MaskSpec& spec, int u, int H, int W) {
  return make_mask(spec, u, u, H, W);
}

Tensor<float> make_mask(const MaskSpec& spec, int u_row, int u_col, int H, int W) {
  validate_mask_spec(spec, H, W);
  if (spec.mode == MaskSpec::Mode::diagonal && u_row != u_col)
    throw ContractError("diagonal masks use a single index for rows and columns");
  check_mask_index(spec, u_row, H, "u_row");
  check_mask_index(spec, u_col, W, "u_col");

  const int r0 = spec.s * u_row, r1 = std::min(spec.s * (u_row + 1), H);
  const int c0 = spec.s * u_col, c1 = std::min(spec.s * (u_col + 1), W);
  Tensor<float> mask = Tensor<float>::filled({1, 1, H, W}, 1.0f);
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) mask.values()[static_cast<size_t>(r) * W + c] = 0.0f;
  return mask;
}

TransformSpec identity_transform() { return TransformSpec{}; }

TransformSpec maskblock_transform(int s, MaskSpec::Mode mode, bool include_identity,
                                  bool enumerate) {
  TransformSpec t;
  t.kind = TransformSpec::Kind::maskblock;
  t.mask.s = s;
  t.mask.mode = mode;
  t.mask.include_identity = include_identity;
  t.mask_enumerate = enumerate;
  if (s <= 0)
    throw ConfigError("maskblock patch size must be positive, got s=" + std::to_string(s));
  return t;
}

TransformSpec ensemble(std::vector<TransformSpec> members, std::vector<double> weights) {
  if (members.empty()) throw ConfigError("ensemble needs at least one member transform");
  if (weights.size() != members.size())
    throw ConfigError("ensemble has " + std::to_string(members.size()) + " members but " +
                      std::to_string(weights.size()) + " weights");
  double sum = 0;
  for (double w : weights) {
    if (w < 0) throw ConfigError("ensemble weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("ensemble weights must sum to 1, got " + std::to_string(sum));
  TransformSpec t;
  t.kind = TransformSpec::Kind::ensemble;
  t.members = std::move(members);
  t.weights = std::move(weights);
  return t;
}

namespace {

std::vector<std::pair<int, int>> mask_enumeration(const MaskSpec& spec, int H, int W) {
  std::vector<std::pair<int, int>> out;
  if (spec.mode == MaskSpec::Mode::diagonal) {
    const int bound = std::min(mask_index_bound(spec, H), mask_index_bound(spec, W));
    for (int u = 0; u <= bound; ++u) out.emplace_back(u, u);
  } else {
    const int br = mask_index_bound(spec, H), bc = mask_index_bound(spec, W);
    for (int ur = 0; ur <= br; ++ur)
      for (int uc = 0; uc <= bc; ++uc) out.emplace_back(ur, uc);
  }
  return out;
}

Tensor<float> apply_mask(const Tensor<float>& x, const Tensor<float>& mask) {
  const int B = x.dim(0), C = x.dim(1);
  const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
  Tensor<float> out = Tensor<float>::zeros(x.shape());
  const float* m = mask.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* src = x.data() + (static_cast<size_t>(b) * C + c) * plane;
      float* dst = out.data() + (static_cast<size_t>(b) * C + c) * plane;
      for (size_t i = 0; i < plane; ++i) dst[i] = src[i] * m[i];
    }
  return out;
}

Tensor<float> apply_maskblock(const TransformSpec& spec, const Tensor<float>& x,
                              uint64_t draw_seed) {
  const int H = x.dim(2), W = x.dim(3);
  validate_mask_spec(spec.mask, H, W);
  int ur, uc;
  if (spec.fixed_u) {
    ur = uc = *spec.fixed_u;
  } else {
    RngStream rng(draw_seed);
    if (spec.mask.mode == MaskSpec::Mode::diagonal) {
      const int bound = std::min(mask_index_bound(spec.mask, H), mask_index_bound(spec.mask, W));
      ur = uc = static_cast<int>(rng.uniform_int(0, bound));
    } else {
      ur = static_cast<int>(rng.uniform_int(0, mask_index_bound(spec.mask, H)));
      uc = static_cast<int>(rng.uniform_int(0, mask_index_bound(spec.mask, W)));
    }
  }
  return apply_mask(x, make_mask(spec.mask, ur, uc, H, W));
}

Tensor<float> apply_gaussian_noise(const TransformSpec& spec, const Tensor<float>& x,
                                   uint64_t draw_seed) {
  RngStream rng(draw_seed);
  Tensor<float> out = Tensor<float>::zeros(x.shape());
  const float sigma = static_cast<float>(spec.sigma);
  for (int64_t i = 0; i < x.size(); ++i)
    out.values()[static_cast<size_t>(i)] =
        clamp01(x.values()[static_cast<size_t>(i)] + sigma * static_cast<float>(rng.normal()));
  return out;
}

Tensor<float> apply_resize_pad(const TransformSpec& spec, const Tensor<float>& x,
                               uint64_t draw_seed) {
  RngStream rng(draw_seed);
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (rng.uniform() >= spec.resize_prob) return x;
  const int rlo = std::max(1, static_cast<int>(std::ceil(spec.resize_lo * H)));
  const int rh = static_cast<int>(rng.uniform_int(std::min(rlo, H), H));
  const int rw = std::max(1, static_cast<int>(std::lround(static_cast<double>(W) * rh / H)));
  if (rh == H && rw == W) return x;
  const int dr = static_cast<int>(rng.uniform_int(0, H - rh));
  const int dc = static_cast<int>(rng.uniform_int(0, W - rw));

  Tensor<float> out = Tensor<float>::zeros(x.shape());
  std::vector<float> small(static_cast<size_t>(rh) * rw);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* src = x.data() + (static_cast<size_t>(b) * C + c) * H * W;
      float* dst = out.data() + (static_cast<size_t>(b) * C + c) * H * W;
      resize_bilinear_plane(src, H, W, small.data(), rh, rw);
      for (int r = 0; r < rh; ++r)
        for (int q = 0; q < rw; ++q)
          dst[(dr + r) * W + (dc + q)] = clamp01(small[static_cast<size_t>(r) * rw + q]);
    }
  return out;
}

Tensor<float> apply_translate(const TransformSpec& spec, const Tensor<float>& x,
                              uint64_t draw_seed) {
  RngStream rng(draw_seed);
  const int t = spec.translate_max;
  const int dy = static_cast<int>(rng.uniform_int(-t, t));
  const int dx = static_cast<int>(rng.uniform_int(-t, t));
  if (dx == 0 && dy == 0) return x;
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<float> out = Tensor<float>::zeros(x.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* src = x.data() + (static_cast<size_t>(b) * C + c) * H * W;
      float* dst = out.data() + (static_cast<size_t>(b) * C + c) * H * W;
      for (int r = 0; r < H; ++r) {
        const int sr = r - dy;
        if (sr < 0 || sr >= H) continue;
        for (int q = 0; q < W; ++q) {
          const int sq = q - dx;
          if (sq >= 0 && sq < W) dst[r * W + q] = src[sr * W + sq];
        }
      }
    }
  return out;
}

Tensor<float> apply_scale(const TransformSpec& spec, const Tensor<float>& x, uint64_t draw_seed) {
  RngStream rng(draw_seed);
  const int i = static_cast<int>(rng.uniform_int(0, spec.scale_levels));
  if (i == 0) return x;
  const float factor = std::ldexp(1.0f, -i);
  Tensor<float> out = Tensor<float>::zeros(x.shape());
  for (int64_t k = 0; k < x.size(); ++k)
    out.values()[static_cast<size_t>(k)] = x.values()[static_cast<size_t>(k)] * factor;
  return out;
}

Tensor<float> apply_admix(const TransformSpec& spec, const Tensor<float>& x, uint64_t draw_seed) {
  if (!spec.admix_pool || spec.admix_pool->dim(0) < 1)
    throw ConfigError("admix transform has no reference pool configured");
  const Tensor<float>& pool = *spec.admix_pool;
  if (pool.dim(1) != x.dim(1) || pool.dim(2) != x.dim(2) || pool.dim(3) != x.dim(3))
    throw ShapeError("admix pool images " + shape_str(pool.shape()) + " do not match input " +
                     shape_str(x.shape()));
  RngStream rng(draw_seed);
  const int ref = static_cast<int>(rng.uniform_int(0, pool.dim(0) - 1));
  const float gamma = static_cast<float>(spec.admix_gamma);
  const size_t inner = static_cast<size_t>(x.size() / x.dim(0));
  const float* rp = pool.data() + static_cast<size_t>(ref) * inner;
  Tensor<float> out = Tensor<float>::zeros(x.shape());
  for (int b = 0; b < x.dim(0); ++b) {
    const float* src = x.data() + static_cast<size_t>(b) * inner;
    float* dst = out.data() + static_cast<size_t>(b) * inner;
    for (size_t i = 0; i < inner; ++i) dst[i] = clamp01(src[i] + gamma * rp[i]);
  }
  return out;
}

Tensor<float> apply_path_mix(const TransformSpec& spec, const Tensor<float>& x,
                             uint64_t draw_seed) {
  RngStream rng(draw_seed);
  const int m = spec.path_steps;
  const int j = static_cast<int>(rng.uniform_int(1, m));
  if (j == m) return x;  // beta == 1
  const float beta = static_cast<float>(j) / static_cast<float>(m);
  // baseline is the all-zeros image, so the mix collapses to beta * x
  Tensor<float> out = Tensor<float>::zeros(x.shape());
  for (int64_t k = 0; k < x.size(); ++k)
    out.values()[static_cast<size_t>(k)] = x.values()[static_cast<size_t>(k)] * beta;
  return out;
}

}  // namespace

Tensor<float> apply(const TransformSpec& spec, const Tensor<float>& x, uint64_t draw_seed) {
  if (x.ndim() != 4) throw ShapeError("transforms expect [B,C,H,W], got " + shape_str(x.shape()));
  switch (spec.kind) {
    case TransformSpec::Kind::identity:
      return x;
    case TransformSpec::Kind::maskblock:
      return apply_maskblock(spec, x, draw_seed);
    case TransformSpec::Kind::gaussian_noise:
      return apply_gaussian_noise(spec, x, draw_seed);
    case TransformSpec::Kind::resize_pad:
      return apply_resize_pad(spec, x, draw_seed);
    case TransformSpec::Kind::translate:
      return apply_translate(spec, x, draw_seed);
    case TransformSpec::Kind::scale:
      return apply_scale(spec, x, draw_seed);
    case TransformSpec::Kind::admix:
      return apply_admix(spec, x, draw_seed);
    case TransformSpec::Kind::path_mix:
      return apply_path_mix(spec, x, draw_seed);
    case TransformSpec::Kind::ensemble: {
      if (spec.members.empty()) throw ConfigError("ensemble has no members");
      RngStream rng(rng_derive({draw_seed, rngtag::ensemble_pick}));
      const double r = rng.uniform();
      double cdf = 0;
      size_t pick = spec.members.size() - 1;
      for (size_t i = 0; i < spec.members.size(); ++i) {
        cdf += spec.weights[i];
        if (r < cdf) {
          pick = i;
          break;
        }
      }
      return apply(spec.members[pick], x, draw_seed);
    }
  }
  throw ContractError("unreachable transform kind");
}

int enumeration_count(const TransformSpec& spec, int H, int W) {
  if (spec.kind == TransformSpec::Kind::identity) return 1;
  if (spec.kind != TransformSpec::Kind::maskblock || !spec.mask_enumerate) return 0;
  if (spec.fixed_u) return 1;
  return static_cast<int>(mask_enumeration(spec.mask, H, W).size());
}

std::vector<Tensor<float>> draw_batch(const TransformSpec& spec, const Tensor<float>& x, int N,
                                      uint64_t base_seed) {
  if (N < 1) throw ContractError("draw_batch: N must be >= 1");
  std::vector<Tensor<float>> out;
  out.reserve(static_cast<size_t>(N));
  if (spec.kind == TransformSpec::Kind::maskblock && spec.mask_enumerate && !spec.fixed_u) {
    const int H = x.dim(2), W = x.dim(3);
    validate_mask_spec(spec.mask, H, W);
    const auto cells = mask_enumeration(spec.mask, H, W);
    for (int i = 0; i < N; ++i) {
      const auto& [ur, uc] = cells[static_cast<size_t>(i) % cells.size()];
      out.push_back(apply_mask(x, make_mask(spec.mask, ur, uc, H, W)));
    }
    return out;
  }
  for (int i = 0; i < N; ++i)
    out.push_back(apply(spec, x, rng_derive({base_seed, rngtag::draw, static_cast<uint64_t>(i)})));
  return out;
}

void set_admix_pool(TransformSpec& spec, std::shared_ptr<const Tensor<float>> pool) {
  if (spec.kind == TransformSpec::Kind::admix) spec.admix_pool = pool;
  for (auto& m : spec.members) set_admix_pool(m, pool);
}

// ---------------------------------------------------------------------------
// Parsing and formatting.
// ---------------------------------------------------------------------------

namespace {

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

std::vector<std::pair<std::string, std::string>> split_params(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t eq = item.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("bad transform parameter token '" + item + "' (want key=value)");
    out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  return out;
}

TransformSpec base_transform_of_kind(const std::string& kind) {
  TransformSpec t;
  if (kind == "identity") {
    t.kind = TransformSpec::Kind::identity;
  } else if (kind == "maskblock") {
    t.kind = TransformSpec::Kind::maskblock;
  } else if (kind == "gaussian_noise" || kind == "noise") {
    t.kind = TransformSpec::Kind::gaussian_noise;
  } else if (kind == "resize_pad") {
    t.kind = TransformSpec::Kind::resize_pad;
  } else if (kind == "translate") {
    t.kind = TransformSpec::Kind::translate;
  } else if (kind == "scale") {
    t.kind = TransformSpec::Kind::scale;
  } else if (kind == "admix") {
    t.kind = TransformSpec::Kind::admix;
  } else if (kind == "path_mix") {
    t.kind = TransformSpec::Kind::path_mix;
  } else if (kind == "ensemble") {
    t.kind = TransformSpec::Kind::ensemble;
  } else {
    throw ConfigError("unrecognized transform kind '" + kind + "'");
  }
  return t;
}

std::vector<TransformSpec> default_ensemble_members() {
  std::vector<TransformSpec> m;
  m.push_back(maskblock_transform(7));
  for (const char* k : {"gaussian_noise", "resize_pad", "translate", "scale", "admix", "path_mix"})
    m.push_back(base_transform_of_kind(k));
  return m;
}

const char* kind_name(TransformSpec::Kind k) {
  switch (k) {
    case TransformSpec::Kind::identity: return "identity";
    case TransformSpec::Kind::maskblock: return "maskblock";
    case TransformSpec::Kind::gaussian_noise: return "gaussian_noise";
    case TransformSpec::Kind::resize_pad: return "resize_pad";
    case TransformSpec::Kind::translate: return "translate";
    case TransformSpec::Kind::scale: return "scale";
    case TransformSpec::Kind::admix: return "admix";
    case TransformSpec::Kind::path_mix: return "path_mix";
    case TransformSpec::Kind::ensemble: return "ensemble";
  }
  return "?";
}

}  // namespace

TransformSpec parse_transform(const std::string& text) {
  if (text.empty()) throw ConfigError("empty transform string");
  const size_t colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  TransformSpec t = base_transform_of_kind(kind);
  const std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);

  if (t.kind == TransformSpec::Kind::ensemble) {
    std::vector<TransformSpec> members;
    for (const auto& [key, val] : split_params(rest)) {
      if (key == "members") {
        std::stringstream ss(val);
        std::string item;
        while (std::getline(ss, item, '+')) {
          if (item == "maskblock")
            members.push_back(maskblock_transform(7));
          else
            members.push_back(base_transform_of_kind(item));
        }
      } else {
        throw ConfigError("unrecognized key '" + key + "' for ensemble");
      }
    }
    if (members.empty()) members = default_ensemble_members();
    std::vector<double> weights(members.size(), 1.0 / static_cast<double>(members.size()));
    // Renormalize so the sum is exactly 1 regardless of member count.
    double sum = 0;
    for (size_t i = 0; i + 1 < weights.size(); ++i) sum += weights[i];
    weights.back() = 1.0 - sum;
    return ensemble(std::move(members), std::move(weights));
  }

  for (const auto& [key, val] : split_params(rest)) {
    switch (t.kind) {
      case TransformSpec::Kind::maskblock:
        if (key == "s") {
          t.mask.s = parse_int(key, val);
          if (t.mask.s <= 0)
            throw ConfigError("maskblock patch size must be positive (s=0 is expressed as the "
                              "identity transform), got '" + key + "=" + val + "'");
        } else if (key == "mode") {
          if (val == "grid")
            t.mask.mode = MaskSpec::Mode::grid;
          else if (val == "diagonal")
            t.mask.mode = MaskSpec::Mode::diagonal;
          else
            throw ConfigError("bad maskblock mode '" + val + "' (grid or diagonal)");
        } else if (key == "identity") {
          t.mask.include_identity = parse_bool(key, val);
        } else if (key == "enumerate") {
          t.mask_enumerate = parse_bool(key, val);
        } else if (key == "u") {
          t.fixed_u = parse_int(key, val);
        } else {
          throw ConfigError("unrecognized key '" + key + "' for maskblock");
        }
        break;
      case TransformSpec::Kind::gaussian_noise:
        if (key == "sigma")
          t.sigma = parse_double(key, val);
        else
          throw ConfigError("unrecognized key '" + key + "' for gaussian_noise");
        break;
      case TransformSpec::Kind::resize_pad:
        if (key == "p")
          t.resize_prob = parse_double(key, val);
        else if (key == "lo")
          t.resize_lo = parse_double(key, val);
        else
          throw ConfigError("unrecognized key '" + key + "' for resize_pad");
        break;
      case TransformSpec::Kind::translate:
        if (key == "t")
          t.translate_max = parse_int(key, val);
        else
          throw ConfigError("unrecognized key '" + key + "' for translate");
        break;
      case TransformSpec::Kind::scale:
        if (key == "m")
          t.scale_levels = parse_int(key, val);
        else
          throw ConfigError("unrecognized key '" + key + "' for scale");
        break;
      case TransformSpec::Kind::admix:
        if (key == "gamma")
          t.admix_gamma = parse_double(key, val);
        else
          throw ConfigError("unrecognized key '" + key + "' for admix");
        break;
      case TransformSpec::Kind::path_mix:
        if (key == "m") {
          t.path_steps = parse_int(key, val);
          if (t.path_steps < 1) throw ConfigError("path_mix m must be >= 1, got '" + val + "'");
        } else {
          throw ConfigError("unrecognized key '" + key + "' for path_mix");
        }
        break;
      case TransformSpec::Kind::identity:
        throw ConfigError("identity transform takes no parameters, got '" + key + "=" + val + "'");
      default:
        throw ConfigError("unrecognized key '" + key + "'");
    }
  }

  if (t.kind == TransformSpec::Kind::translate && t.translate_max < 0)
    throw ConfigError("translate t must be >= 0");
  if (t.kind == TransformSpec::Kind::gaussian_noise && t.sigma < 0)
    throw ConfigError("gaussian_noise sigma must be >= 0");
  if (t.kind == TransformSpec::Kind::scale && t.scale_levels < 0)
    throw ConfigError("scale m must be >= 0");
  if (t.kind == TransformSpec::Kind::resize_pad &&
      (t.resize_prob < 0 || t.resize_prob > 1 || t.resize_lo <= 0 || t.resize_lo > 1))
    throw ConfigError("resize_pad wants p in [0,1] and lo in (0,1]");
  return t;
}

std::string transform_to_string(const TransformSpec& spec) {
  std::ostringstream os;
  os << kind_name(spec.kind);
  switch (spec.kind) {
    case TransformSpec::Kind::identity:
      break;
    case TransformSpec::Kind::maskblock:
      os << ":s=" << spec.mask.s
         << ",mode=" << (spec.mask.mode == MaskSpec::Mode::grid ? "grid" : "diagonal")
         << ",identity=" << (spec.mask.include_identity ? "true" : "false");
      if (!spec.mask_enumerate) os << ",enumerate=false";
      if (spec.fixed_u) os << ",u=" << *spec.fixed_u;
      break;
    case TransformSpec::Kind::gaussian_noise:
      os << ":sigma=" << format_g(spec.sigma);
      break;
    case TransformSpec::Kind::resize_pad:
      os << ":p=" << format_g(spec.resize_prob) << ",lo=" << format_g(spec.resize_lo);
      break;
    case TransformSpec::Kind::translate:
      os << ":t=" << spec.translate_max;
      break;
    case TransformSpec::Kind::scale:
      os << ":m=" << spec.scale_levels;
      break;
    case TransformSpec::Kind::admix:
      os << ":gamma=" << format_g(spec.admix_gamma);
      break;
    case TransformSpec::Kind::path_mix:
      os << ":m=" << spec.path_steps;
      break;
    case TransformSpec::Kind::ensemble: {
      os << ":members=";
      for (size_t i = 0; i < spec.members.size(); ++i)
        os << (i ? "+" : "") << kind_name(spec.members[i].kind);
      break;
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Loss preservation diagnostic.
// ---------------------------------------------------------------------------

namespace {

// Sum of per-sample NLL of the true class over a [D,...] batch of variants
// of one image.
double nll_sum(const Network<float>& net, const Tensor<float>& batch, int32_t label) {
  auto pred = predict(net, batch);
  const int D = pred.log_probs.dim(0), K = pred.log_probs.dim(1);
  double acc = 0;
  for (int d = 0; d < D; ++d)
    acc -= pred.log_probs.values()[static_cast<size_t>(d) * K + label];
  return acc;
}

Tensor<float> stack(const std::vector<Tensor<float>>& parts) {
  Shape shape = parts.front().shape();
  const size_t inner = static_cast<size_t>(numel(shape)) / static_cast<size_t>(shape[0]);
  int total = 0;
  for (const auto& p : parts) total += p.dim(0);
  shape[0] = total;
  Tensor<float> out = Tensor<float>::zeros(shape);
  size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off, p.data(), p.values().size() * sizeof(float));
    off += p.values().size();
  }
  return out;
}

}  // namespace

std::vector<LossCurveRow> loss_preservation_curve(const Network<float>& net,
                                                  const LabeledDataset& data,
                                                  const std::vector<int>& sizes,
                                                  int draws_per_image, uint64_t seed) {
  if (sizes.empty()) throw ConfigError("loss curve needs at least one size");
  if (draws_per_image < 1) throw ConfigError("loss curve needs draws_per_image >= 1");
  validate_dataset(data, net.arch.class_count);
  const int n = data.count();
  const int H = data.height();

  double clean_sum = 0;
  for (int i = 0; i < n; ++i)
    clean_sum += nll_sum(net, image_at(data, i), data.labels[static_cast<size_t>(i)]);
  const double clean_loss = clean_sum / n;

  std::vector<LossCurveRow> rows;
  for (int s : sizes) {
    LossCurveRow row;
    row.s = s;
    row.clean_loss = clean_loss;
    if (s == 0) {
      row.masked_loss = clean_loss;
    } else {
      if (s < 0 || s > H)
        throw ConfigError("loss curve size s=" + std::to_string(s) + " outside (0," +
                          std::to_string(H) + "]");
      MaskSpec mask;
      mask.s = s;
      mask.mode = MaskSpec::Mode::grid;
      mask.include_identity = false;  // every draw masks at least one pixel
      TransformSpec tf;
      tf.kind = TransformSpec::Kind::maskblock;
      tf.mask = mask;
      tf.mask_enumerate = false;
      double masked_sum = 0;
      for (int i = 0; i < n; ++i) {
        const Tensor<float> x = image_at(data, i);
        std::vector<Tensor<float>> draws;
        draws.reserve(static_cast<size_t>(draws_per_image));
        for (int d = 0; d < draws_per_image; ++d)
          draws.push_back(apply(tf, x,
                                rng_derive({seed, rngtag::curve, static_cast<uint64_t>(s),
                                            static_cast<uint64_t>(i), static_cast<uint64_t>(d)})));
        masked_sum += nll_sum(net, stack(draws), data.labels[static_cast<size_t>(i)]);
      }
      row.masked_loss = masked_sum / (static_cast<double>(n) * draws_per_image);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace tlab

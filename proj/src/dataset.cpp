#include "tlab/dataset.hpp"

#include <algorithm>
#include <cstring>

namespace tlab {

namespace {

uint32_t read_be32(const unsigned char* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_be32(std::string& out, uint32_t v) {
  out.push_back(char((v >> 24) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char(v & 0xff));
}

}  // namespace

void validate_dataset(const LabeledDataset& data, int class_count) {
  if (data.count() == 0) throw ConfigError("dataset is empty");
  if (static_cast<int>(data.labels.size()) != data.count())
    throw ConfigError("dataset has " + std::to_string(data.count()) + " images but " +
                      std::to_string(data.labels.size()) + " labels");
  for (int32_t y : data.labels)
    if (y < 0 || y >= class_count)
      throw ConfigError("dataset label " + std::to_string(y) + " outside [0," +
                        std::to_string(class_count) + ")");
}

LabeledDataset load_idx_dataset(const std::filesystem::path& images_path,
                                const std::filesystem::path& labels_path) {
  const std::string img = read_file_bytes(images_path);
  const std::string lab = read_file_bytes(labels_path);
  const auto* ip = reinterpret_cast<const unsigned char*>(img.data());
  const auto* lp = reinterpret_cast<const unsigned char*>(lab.data());

  if (img.size() < 16 || read_be32(ip) != 0x00000803u)
    throw IoError("not an IDX3 image file: " + images_path.string());
  if (lab.size() < 8 || read_be32(lp) != 0x00000801u)
    throw IoError("not an IDX1 label file: " + labels_path.string());

  const uint32_t n = read_be32(ip + 4);
  const uint32_t rows = read_be32(ip + 8);
  const uint32_t cols = read_be32(ip + 12);
  const uint32_t nl = read_be32(lp + 4);
  if (n != nl)
    throw ConfigError("image/label counts differ: " + std::to_string(n) + " vs " +
                      std::to_string(nl));
  const size_t want = 16 + size_t(n) * rows * cols;
  if (img.size() < want) throw IoError("truncated IDX image file: " + images_path.string());
  if (lab.size() < 8 + size_t(n)) throw IoError("truncated IDX label file: " + labels_path.string());

  LabeledDataset data;
  data.images = Tensor<float>::zeros({int(n), 1, int(rows), int(cols)});
  float* out = data.images.data();
  const unsigned char* px = ip + 16;
  const size_t total = size_t(n) * rows * cols;
  for (size_t i = 0; i < total; ++i) out[i] = float(px[i]) / 255.0f;
  data.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) data.labels[i] = int32_t(lp[8 + i]);
  data.source = images_path.string() + "+" + labels_path.string() +
                " crc32=" + to_hex(crc32_ieee(img.data(), img.size()));
  return data;
}

void save_idx_dataset(const LabeledDataset& data, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  if (data.channels() != 1)
    throw ConfigError("IDX export supports single-channel images only");
  const int n = data.count(), h = data.height(), w = data.width();

  std::string img;
  img.reserve(16 + size_t(n) * h * w);
  append_be32(img, 0x00000803u);
  append_be32(img, uint32_t(n));
  append_be32(img, uint32_t(h));
  append_be32(img, uint32_t(w));
  const float* px = data.images.data();
  for (size_t i = 0; i < size_t(n) * h * w; ++i) {
    const float v = std::min(1.0f, std::max(0.0f, px[i]));
    img.push_back(char(static_cast<unsigned char>(std::lround(v * 255.0f))));
  }

  std::string lab;
  lab.reserve(8 + size_t(n));
  append_be32(lab, 0x00000801u);
  append_be32(lab, uint32_t(n));
  for (int32_t y : data.labels) lab.push_back(char(static_cast<unsigned char>(y)));

  write_file_atomic(images_path, img);
  write_file_atomic(labels_path, lab);
}

LabeledDataset subset(const LabeledDataset& data, int n, uint64_t seed) {
  const int total = data.count();
  if (n >= total) return data;
  std::vector<int> idx(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) idx[static_cast<size_t>(i)] = i;
  RngStream rng(rng_derive({seed, rngtag::subset}));
  for (int i = total - 1; i > 0; --i)
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(rng.uniform_int(0, i))]);
  idx.resize(static_cast<size_t>(n));

  LabeledDataset out;
  out.images = gather_images(data.images, idx);
  out.labels.reserve(idx.size());
  for (int i : idx) out.labels.push_back(data.labels[static_cast<size_t>(i)]);
  out.source = data.source + " subset(n=" + std::to_string(n) + ",seed=" + std::to_string(seed) + ")";
  return out;
}

Tensor<float> image_at(const LabeledDataset& data, int i) {
  return gather_images(data.images, {i});
}

Tensor<float> gather_images(const Tensor<float>& images, const std::vector<int>& idx) {
  const size_t inner = static_cast<size_t>(images.size() / images.dim(0));
  Shape shape = images.shape();
  shape[0] = static_cast<int>(idx.size());
  Tensor<float> out = Tensor<float>::zeros(shape);
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= images.dim(0)) throw IndexError("gather_images: index out of range");
    std::memcpy(out.data() + k * inner, images.data() + static_cast<size_t>(idx[k]) * inner,
                inner * sizeof(float));
  }
  return out;
}

void resize_bilinear_plane(const float* src, int h, int w, float* dst, int oh, int ow) {
  const float sy = float(h) / float(oh);
  const float sx = float(w) / float(ow);
  for (int y = 0; y < oh; ++y) {
    float fy = (float(y) + 0.5f) * sy - 0.5f;
    fy = std::min(float(h - 1), std::max(0.0f, fy));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(h - 1, y0 + 1);
    const float wy = fy - float(y0);
    for (int x = 0; x < ow; ++x) {
      float fx = (float(x) + 0.5f) * sx - 0.5f;
      fx = std::min(float(w - 1), std::max(0.0f, fx));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(w - 1, x0 + 1);
      const float wx = fx - float(x0);
      const float top = src[y0 * w + x0] * (1.0f - wx) + src[y0 * w + x1] * wx;
      const float bot = src[y1 * w + x0] * (1.0f - wx) + src[y1 * w + x1] * wx;
      dst[y * ow + x] = top * (1.0f - wy) + bot * wy;
    }
  }
}

namespace {

// 5x7 digit glyphs, one row per string, '#' marks ink.
const char* const kGlyphs[10][7] = {
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
};

}  // namespace

LabeledDataset synth_digits(int count, uint64_t seed) {
  if (count <= 0) throw ConfigError("synth_digits: count must be positive");
  const int H = 28, W = 28;
  LabeledDataset data;
  data.images = Tensor<float>::zeros({count, 1, H, W});
  data.labels.resize(static_cast<size_t>(count));
  data.source = "synth(count=" + std::to_string(count) + ",seed=" + std::to_string(seed) + ")";

  float glyph[7 * 5];
  std::vector<float> scaled;
  for (int i = 0; i < count; ++i) {
    const int digit = i % 10;
    data.labels[static_cast<size_t>(i)] = digit;
    RngStream rng(rng_derive({seed, rngtag::synth, static_cast<uint64_t>(i)}));

    for (int r = 0; r < 7; ++r)
      for (int c = 0; c < 5; ++c) glyph[r * 5 + c] = kGlyphs[digit][r][c] == '#' ? 1.0f : 0.0f;

    const double f = rng.uniform(2.0, 3.0);
    const int gh = std::max(10, static_cast<int>(std::lround(7 * f)));
    const int gw = std::max(7, static_cast<int>(std::lround(5 * f)));
    scaled.resize(static_cast<size_t>(gh) * gw);
    resize_bilinear_plane(glyph, 7, 5, scaled.data(), gh, gw);

    const float intensity = static_cast<float>(rng.uniform(0.65, 1.0));
    const int r0 = static_cast<int>(rng.uniform_int(1, H - gh - 1));
    const int c0 = static_cast<int>(rng.uniform_int(1, W - gw - 1));
    const float sigma = static_cast<float>(rng.uniform(0.05, 0.13));

    float* img = data.images.data() + static_cast<size_t>(i) * H * W;
    for (int r = 0; r < gh; ++r)
      for (int c = 0; c < gw; ++c)
        img[(r0 + r) * W + (c0 + c)] = scaled[static_cast<size_t>(r) * gw + c] * intensity;
    for (int p = 0; p < H * W; ++p) {
      const float v = img[p] + sigma * static_cast<float>(rng.normal());
      img[p] = std::min(1.0f, std::max(0.0f, v));
    }
  }
  return data;
}

}  // namespace tlab

#include "dnd/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"
#include "dnd/errors.hpp"
#include "dnd/rng.hpp"

namespace dnd {

namespace {

// 12x12 digit glyphs with a two-pixel margin so +/-2 shifts stay in frame.
constexpr std::array<const char*, kGlyphClasses * kGlyphSide> kGlyphRows = {
    // 0
    "............", "............", "....####....", "...#....#...", "...#....#...", "...#....#...",
    "...#....#...", "...#....#...", "...#....#...", "....####....", "............", "............",
    // 1
    "............", "............", ".....##.....", "....###.....", "...#.##.....", ".....##.....",
    ".....##.....", ".....##.....", ".....##.....", "...######...", "............", "............",
    // 2
    "............", "............", "...#####....", "........#...", "........#...", ".......#....",
    ".....##.....", "....#.......", "...#........", "...######...", "............", "............",
    // 3
    "............", "............", "...#####....", "........#...", "........#...", "....####....",
    "........#...", "........#...", "........#...", "...#####....", "............", "............",
    // 4
    "............", "............", "...#....#...", "...#....#...", "...#....#...", "...######...",
    "........#...", "........#...", "........#...", "........#...", "............", "............",
    // 5
    "............", "............", "...######...", "...#........", "...#........", "...#####....",
    "........#...", "........#...", "........#...", "...#####....", "............", "............",
    // 6
    "............", "............", "....####....", "...#........", "...#........", "...#####....",
    "...#....#...", "...#....#...", "...#....#...", "....####....", "............", "............",
    // 7
    "............", "............", "...######...", "........#...", ".......#....", ".......#....",
    "......#.....", "......#.....", ".....#......", ".....#......", "............", "............",
    // 8
    "............", "............", "....####....", "...#....#...", "...#....#...", "....####....",
    "...#....#...", "...#....#...", "...#....#...", "....####....", "............", "............",
    // 9
    "............", "............", "....####....", "...#....#...", "...#....#...", "...#....#...",
    "....#####...", "........#...", "........#...", "....####....", "............", "............",
};

std::array<Tensor, kGlyphClasses> build_templates() {
  std::array<Tensor, kGlyphClasses> out;
  for (std::size_t c = 0; c < kGlyphClasses; ++c) {
    Tensor t({1, kGlyphSide, kGlyphSide});
    for (std::size_t r = 0; r < kGlyphSide; ++r) {
      const char* row = kGlyphRows[c * kGlyphSide + r];
      for (std::size_t col = 0; col < kGlyphSide; ++col) t[r * kGlyphSide + col] = row[col] == '#' ? 1.0 : 0.0;
    }
    out[c] = std::move(t);
  }
  return out;
}

Tensor augment(const Tensor& glyph, const DataConfig& cfg, Rng& rng) {
  const int s = std::max(cfg.shift, 0);
  const int dy = static_cast<int>(rng.range(-s, s));
  const int dx = static_cast<int>(rng.range(-s, s));
  const double gain = cfg.jitter ? rng.uniform(0.8, 1.0) : 1.0;
  const int side = static_cast<int>(kGlyphSide);
  Tensor img({1, kGlyphSide, kGlyphSide});
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const int sr = r - dy;
      const int sc = c - dx;
      double v = 0.0;
      if (sr >= 0 && sr < side && sc >= 0 && sc < side) v = glyph[static_cast<std::size_t>(sr * side + sc)];
      v *= gain;
      if (cfg.noise_p > 0.0 && rng.bernoulli(cfg.noise_p)) v = 1.0 - v;
      // Stored at f32 precision so the binary format round-trips exactly.
      img[static_cast<std::size_t>(r * side + c)] = static_cast<double>(static_cast<float>(v));
    }
  }
  return img;
}

}  // namespace

const std::array<Tensor, kGlyphClasses>& glyph_templates() {
  static const std::array<Tensor, kGlyphClasses> templates = build_templates();
  return templates;
}

void Dataset::validate() const {
  if (images.size() != labels.size()) {
    throw ValidationError("dataset has " + std::to_string(images.size()) + " images but " +
                          std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                            " outside [0, " + std::to_string(num_classes) + ")");
    }
    if (images[i].shape != images.front().shape) throw ValidationError("dataset images have ragged shapes");
  }
}

Dataset Dataset::subset(std::size_t begin, std::size_t count) const {
  Dataset out;
  out.num_classes = num_classes;
  out.split = split;
  const std::size_t end = std::min(size(), begin + count);
  for (std::size_t i = begin; i < end; ++i) {
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

Dataset gen_synthetic_dataset(const DataConfig& cfg, std::size_t count, Split split, std::uint64_t seed) {
  if (cfg.noise_p < 0.0 || cfg.noise_p > 1.0) throw ValidationError("noise_p must be in [0, 1]");
  Rng rng(seed);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % kGlyphClasses);
  rng.shuffle(std::span<int>(labels));

  Dataset ds;
  ds.split = split;
  ds.labels = labels;
  ds.images.reserve(count);
  const auto& templates = glyph_templates();
  for (int label : labels) ds.images.push_back(augment(templates[static_cast<std::size_t>(label)], cfg, rng));
  return ds;
}

std::pair<Dataset, Dataset> gen_train_test(const DataConfig& cfg, std::uint64_t seed) {
  return {gen_synthetic_dataset(cfg, cfg.n_train, Split::train, derive_seed(seed, "data/train")),
          gen_synthetic_dataset(cfg, cfg.n_test, Split::test, derive_seed(seed, "data/test"))};
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const Shape shape = ds.empty() ? Shape{1, kGlyphSide, kGlyphSide} : ds.sample_shape();
  if (shape.size() != 3 || shape[0] != 1) throw ValidationError("dataset format stores single-channel images only");
  detail::write_bytes(os, "DND1");
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.size()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape[1]));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape[2]));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(ds.labels[i]));
    for (double v : ds.images[i].data) detail::write_le<float>(os, static_cast<float>(v));
  }
  if (!os) throw IoError("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path, Split split) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  if (detail::read_bytes(is, 4, "magic") != "DND1") throw IoError(path.string() + ": bad dataset magic");
  const auto count = detail::read_le<std::uint32_t>(is, "count");
  const auto h = detail::read_le<std::uint32_t>(is, "height");
  const auto w = detail::read_le<std::uint32_t>(is, "width");
  const auto classes = detail::read_le<std::uint32_t>(is, "classes");
  Dataset ds;
  ds.split = split;
  ds.num_classes = classes;
  ds.images.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ds.labels.push_back(detail::read_le<std::uint8_t>(is, "label"));
    Tensor img({1, h, w});
    for (double& v : img.data) v = detail::read_le<float>(is, "pixel");
    ds.images.push_back(std::move(img));
  }
  ds.validate();
  return ds;
}

}  // namespace dnd

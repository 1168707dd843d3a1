#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dnd/tensor.hpp"

namespace dnd {

inline constexpr std::size_t kGlyphSide = 12;
inline constexpr std::size_t kGlyphClasses = 10;

enum class Split { train, test };

/// Labeled single-channel images. Images are [1 x h x w] with values in [0, 1].
struct Dataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::size_t num_classes = kGlyphClasses;
  Split split = Split::train;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
  Shape sample_shape() const { return images.empty() ? Shape{} : images.front().shape; }

  /// Throws ValidationError on length mismatch, bad labels or ragged shapes.
  void validate() const;
  Dataset subset(std::size_t begin, std::size_t count) const;
};

struct DataConfig {
  std::size_t n_train = 4000;
  std::size_t n_test = 1000;
  double noise_p = 0.05;
  int shift = 2;
  bool jitter = true;
};

/// The fixed 12x12 digit glyphs, row-major, values 0 or 1.
const std::array<Tensor, kGlyphClasses>& glyph_templates();

/// Augmented glyph samples, class-stratified (count/10 per class, remainder
/// spread over the lowest labels) and shuffled.
Dataset gen_synthetic_dataset(const DataConfig& cfg, std::size_t count, Split split, std::uint64_t seed);

/// Train and test splits with disjoint derived seeds.
std::pair<Dataset, Dataset> gen_train_test(const DataConfig& cfg, std::uint64_t seed);

/// Binary dataset format: "DND1", u32 count, u32 h, u32 w, u32 classes, then
/// per sample u8 label followed by h*w little-endian f32 pixels.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path, Split split = Split::train);

}  // namespace dnd

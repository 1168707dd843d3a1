#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dnd/models.hpp"

namespace dnd {

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Binary weights file:
///   "DNDW" | u16 version | u32 header length | header JSON (sorted keys)
///   | u32 tensor count | per tensor: u32 rank, u32 dims..., f64 data
/// All integers and floats little-endian.
struct Checkpoint {
  Json header;
  std::vector<Tensor> params;
};

std::string encode_checkpoint(const Json& header, std::span<const Tensor> params);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Json& header, std::span<const Tensor> params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_classifier(const std::filesystem::path& path, const Classifier& model);
Classifier load_classifier(const std::filesystem::path& path);
Classifier classifier_from_checkpoint(Checkpoint ck);

void save_autoencoder(const std::filesystem::path& path, const DenoisingAutoencoder& ae);
DenoisingAutoencoder load_autoencoder(const std::filesystem::path& path);

void save_vae(const std::filesystem::path& path, const VariationalAutoencoder& vae);
VariationalAutoencoder load_vae(const std::filesystem::path& path);

void save_sequence_detector(const std::filesystem::path& path, const SequenceDetector& det);
SequenceDetector load_sequence_detector(const std::filesystem::path& path);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace dnd

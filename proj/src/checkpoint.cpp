#include "dnd/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "dnd/errors.hpp"

namespace dnd {

std::string encode_checkpoint(const Json& header, std::span<const Tensor> params) {
  std::ostringstream os(std::ios::binary);
  const std::string text = header.dump();
  detail::write_bytes(os, "DNDW");
  detail::write_le<std::uint16_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  detail::write_bytes(os, text);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const Tensor& t : params) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.data) detail::write_le<double>(os, v);
  }
  return os.str();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  if (detail::read_bytes(is, 4, "magic") != "DNDW") throw IoError("not a DNDW checkpoint");
  const auto version = detail::read_le<std::uint16_t>(is, "version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::read_le<std::uint32_t>(is, "header length");
  Checkpoint ck;
  try {
    ck.header = Json::parse(detail::read_bytes(is, len, "header"));
  } catch (const Json::parse_error& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const auto count = detail::read_le<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = detail::read_le<std::uint32_t>(is, "rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::read_le<std::uint32_t>(is, "dim"));
    Tensor t(shape);
    for (double& v : t.data) v = detail::read_le<double>(is, "tensor data");
    ck.params.push_back(std::move(t));
  }
  return ck;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    os.flush();
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Json& header, std::span<const Tensor> params) {
  write_file_atomic(path, encode_checkpoint(header, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

namespace {
void expect_kind(const Json& h, const char* kind, const std::filesystem::path& path) {
  if (h.value("kind", std::string()) != kind) {
    throw IoError(path.string() + ": expected a '" + kind + "' checkpoint, found '" + h.value("kind", std::string("?")) +
                  "'");
  }
}
}  // namespace

void save_classifier(const std::filesystem::path& path, const Classifier& model) {
  save_checkpoint(path, model.spec().to_json(), model.params());
}

Classifier classifier_from_checkpoint(Checkpoint ck) {
  return Classifier(ArchitectureSpec::from_json(ck.header), std::move(ck.params));
}

Classifier load_classifier(const std::filesystem::path& path) {
  return classifier_from_checkpoint(load_checkpoint(path));
}

void save_autoencoder(const std::filesystem::path& path, const DenoisingAutoencoder& ae) {
  save_checkpoint(path, ae.header(), ae.params());
}

DenoisingAutoencoder load_autoencoder(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  expect_kind(ck.header, "dae", path);
  DenoisingAutoencoder ae(ck.header.at("input_shape").get<Shape>(), ck.header.at("hidden").get<std::size_t>(),
                          ck.header.at("bottleneck").get<std::size_t>(), std::move(ck.params));
  ae.noise_level = ck.header.value("noise_level", 0.0);
  return ae;
}

void save_vae(const std::filesystem::path& path, const VariationalAutoencoder& vae) {
  save_checkpoint(path, vae.header(), vae.params());
}

VariationalAutoencoder load_vae(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  expect_kind(ck.header, "vae", path);
  return VariationalAutoencoder(ck.header.at("input_shape").get<Shape>(), ck.header.at("hidden").get<std::size_t>(),
                                ck.header.at("latent").get<std::size_t>(), std::move(ck.params));
}

void save_sequence_detector(const std::filesystem::path& path, const SequenceDetector& det) {
  save_checkpoint(path, det.header(), det.params());
}

SequenceDetector load_sequence_detector(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  expect_kind(ck.header, "lstm", path);
  SequenceDetector det(ck.header.at("feature_dim").get<std::size_t>(), ck.header.at("hidden").get<std::size_t>(),
                       std::move(ck.params));
  det.feature_scale = ck.header.value("feature_scale", std::vector<double>(det.feature_dim(), 1.0));
  return det;
}

}  // namespace dnd

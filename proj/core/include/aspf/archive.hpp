#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aspf/model.hpp"

// Model archive layout (all integers little-endian):
//
//   "ASPF" | u32 version | u32 header length | header JSON | payload
//
// The header is canonical JSON (sorted keys, no whitespace) holding the model
// spec and a tensor table; table offsets are relative to the payload start.
namespace aspf {

inline constexpr std::uint32_t kArchiveVersion = 1;
inline constexpr char kArchiveMagic[4] = {'A', 'S', 'P', 'F'};

enum class DType { kF32, kI8 };

struct QuantParams {
  float scale = 1.0f;
  int zero_point = 0;

  bool operator==(const QuantParams&) const = default;
};

struct TensorEntry {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::uint64_t offset = 0;
  std::optional<QuantParams> quant;  // i8 only

  std::size_t byte_size() const;
  bool operator==(const TensorEntry&) const = default;
};

struct ModelArchive {
  ModelSpec spec;
  std::vector<TensorEntry> tensors;
  std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> encode_archive(const ModelArchive& archive);
// Total over malformed input: every failure is an Error with kBadMagic,
// kVersionMismatch, kHeaderParse, kTruncatedPayload or kTensorTable.
ModelArchive decode_archive(std::span<const std::uint8_t> bytes);

ModelArchive read_archive(const std::filesystem::path& path);
void write_archive(const std::filesystem::path& path, const ModelArchive& archive);

// Float archive holding every parameter and running statistic.
ModelArchive archive_model(const Model& model);
// Rebuilds the model; int8 tensors are dequantized (q * scale).
Model model_from_archive(const ModelArchive& archive);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// Per-tensor symmetric scheme: scale = max|x| / 127 (1.0 for an all-zero
// tensor), zero point 0, q = clamp(round(x / scale), -127, 127).
QuantParams symmetric_quant_params(std::span<const float> values);
std::vector<std::int8_t> quantize_values(std::span<const float> values, const QuantParams& params);
std::vector<float> dequantize_values(std::span<const std::int8_t> values, const QuantParams& params);

// Conv kernels and dense weights become int8; biases, normalization
// parameters and running statistics stay float.
ModelArchive quantize_model(const Model& model);

struct SizeReport {
  std::uint64_t float_bytes = 0;
  std::uint64_t quant_bytes = 0;
  std::uint64_t float_payload = 0;
  std::uint64_t quant_payload = 0;
  std::size_t float_parameters = 0;
  std::size_t quant_parameters = 0;
  double ratio = 1.0;  // quant_bytes / float_bytes
  std::vector<std::string> warnings;

  std::string to_text() const;
};

SizeReport size_report(const std::filesystem::path& float_path, const std::filesystem::path& quant_path);

// Parameter count from a tensor table (running statistics excluded).
std::size_t archive_parameter_count(const ModelArchive& archive);

}  // namespace aspf

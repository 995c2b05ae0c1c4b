#include "aspf/archive.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <set>

namespace aspf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kPreambleSize = 12;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  return v;
}

void put_f32(std::uint8_t* out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out[i] = static_cast<std::uint8_t>(bits >> (8 * i));
}

float get_f32(const std::uint8_t* in) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(in[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

bool is_running_stat(const std::string& name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

bool is_quantized_weight(const std::string& name) {
  return name.ends_with(".kernels") || name.ends_with(".weights");
}

[[noreturn]] void header_error(const std::string& what) { throw Error(ErrorCode::kHeaderParse, what); }

TensorEntry entry_from_json(const json& j) {
  if (!j.is_object()) header_error("tensor entry is not an object");
  static const std::set<std::string> kKeys{"name", "dtype", "shape", "offset", "scale", "zero_point"};
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) header_error("unknown tensor key '" + key + "'");
  }
  TensorEntry e;
  try {
    e.name = j.at("name").get<std::string>();
    const auto dtype = j.at("dtype").get<std::string>();
    if (dtype == "f32") {
      e.dtype = DType::kF32;
    } else if (dtype == "i8") {
      e.dtype = DType::kI8;
    } else {
      header_error("unknown dtype '" + dtype + "'");
    }
    const auto& shape = j.at("shape");
    if (!shape.is_array() || shape.empty()) header_error(e.name + ": shape must be a non-empty array");
    for (const auto& d : shape) {
      if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0 || d.get<std::uint64_t>() > (1ULL << 32)) {
        header_error(e.name + ": bad shape extent");
      }
      e.shape.push_back(d.get<std::size_t>());
    }
    if (!j.at("offset").is_number_unsigned()) header_error(e.name + ": offset must be a non-negative integer");
    e.offset = j.at("offset").get<std::uint64_t>();
    if (e.dtype == DType::kI8) {
      if (!j.at("scale").is_number() || !j.at("zero_point").is_number_integer()) {
        header_error(e.name + ": i8 tensors need numeric scale and zero_point");
      }
      QuantParams q{j.at("scale").get<float>(), j.at("zero_point").get<int>()};
      if (!(q.scale > 0) || !std::isfinite(q.scale)) header_error(e.name + ": scale must be positive");
      if (q.zero_point < -128 || q.zero_point > 127) header_error(e.name + ": zero_point out of range");
      e.quant = q;
    } else if (j.contains("scale") || j.contains("zero_point")) {
      header_error(e.name + ": f32 tensors carry no quantization parameters");
    }
  } catch (const json::exception& ex) {
    header_error(std::string("tensor entry: ") + ex.what());
  }
  return e;
}

json entry_to_json(const TensorEntry& e) {
  json j{{"name", e.name}, {"dtype", e.dtype == DType::kF32 ? "f32" : "i8"}, {"shape", e.shape}, {"offset", e.offset}};
  if (e.quant) {
    j["scale"] = e.quant->scale;
    j["zero_point"] = e.quant->zero_point;
  }
  return j;
}

void append_f32(ModelArchive& a, const std::string& name, const TensorF& t) {
  TensorEntry e{name, DType::kF32, t.shape(), a.payload.size(), std::nullopt};
  const std::size_t at = a.payload.size();
  a.payload.resize(at + t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) put_f32(&a.payload[at + i * 4], t[i]);
  a.tensors.push_back(std::move(e));
}

}  // namespace

std::size_t TensorEntry::byte_size() const { return shape_size(shape) * (dtype == DType::kF32 ? 4 : 1); }

std::vector<std::uint8_t> encode_archive(const ModelArchive& archive) {
  json table = json::array();
  for (const auto& e : archive.tensors) table.push_back(entry_to_json(e));
  const json header{{"spec", json::parse(model_spec_to_json(archive.spec))}, {"tensors", table}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kArchiveMagic, kArchiveMagic + 4);
  put_u32(out, kArchiveVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), archive.payload.begin(), archive.payload.end());
  return out;
}

ModelArchive decode_archive(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) {
    throw Error(ErrorCode::kBadMagic, "not an ASPF archive");
  }
  if (bytes.size() < kPreambleSize) header_error("truncated preamble");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kArchiveVersion) {
    throw Error(ErrorCode::kVersionMismatch,
                "archive version " + std::to_string(version) + ", expected " + std::to_string(kArchiveVersion));
  }
  const std::uint64_t header_len = get_u32(bytes, 8);
  if (header_len > bytes.size() - kPreambleSize) header_error("header length exceeds file size");

  json header;
  try {
    header = json::parse(bytes.begin() + kPreambleSize, bytes.begin() + static_cast<std::ptrdiff_t>(kPreambleSize + header_len));
  } catch (const json::exception& e) {
    header_error(std::string("invalid header JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("spec") || !header.contains("tensors") || header.size() != 2 ||
      !header["tensors"].is_array()) {
    header_error("header must hold exactly 'spec' and 'tensors'");
  }
  ModelArchive archive;
  try {
    archive.spec = model_spec_from_json(header["spec"].dump());
  } catch (const Error& e) {
    header_error(std::string("spec: ") + e.what());
  }
  for (const auto& j : header["tensors"]) archive.tensors.push_back(entry_from_json(j));

  const auto payload = bytes.subspan(kPreambleSize + header_len);
  std::set<std::string> names;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  std::uint64_t declared = 0;
  for (const auto& e : archive.tensors) {
    if (!names.insert(e.name).second) throw Error(ErrorCode::kTensorTable, "duplicate tensor '" + e.name + "'");
    const std::uint64_t size = e.byte_size();
    if (e.offset > std::numeric_limits<std::uint64_t>::max() - size) {
      throw Error(ErrorCode::kTensorTable, e.name + ": offset overflow");
    }
    if (e.offset + size > payload.size()) {
      throw Error(ErrorCode::kTruncatedPayload, e.name + " ends at byte " + std::to_string(e.offset + size) +
                                                    " of a " + std::to_string(payload.size()) + "-byte payload");
    }
    ranges.emplace_back(e.offset, e.offset + size);
    declared += size;
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) throw Error(ErrorCode::kTensorTable, "overlapping tensor ranges");
  }
  if (declared != payload.size()) {
    throw Error(ErrorCode::kTensorTable, "tensor table covers " + std::to_string(declared) + " of " +
                                             std::to_string(payload.size()) + " payload bytes");
  }
  archive.payload.assign(payload.begin(), payload.end());
  return archive;
}

ModelArchive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

void write_archive(const fs::path& path, const ModelArchive& archive) {
  const auto bytes = encode_archive(archive);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

ModelArchive archive_model(const Model& model) {
  ModelArchive a;
  a.spec = model.spec();
  for (const auto& nt : model.all_tensors()) append_f32(a, nt.name, nt.tensor);
  return a;
}

Model model_from_archive(const ModelArchive& archive) {
  Model model = build_model(archive.spec, 0);
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : archive.tensors) by_name[e.name] = &e;
  const auto tensors = model.all_tensors();
  if (tensors.size() != archive.tensors.size()) {
    throw Error(ErrorCode::kTensorTable, "archive holds " + std::to_string(archive.tensors.size()) +
                                             " tensors, model expects " + std::to_string(tensors.size()));
  }
  for (const auto& nt : tensors) {
    const auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw Error(ErrorCode::kTensorTable, "archive lacks tensor '" + nt.name + "'");
    const TensorEntry& e = *it->second;
    if (e.shape != nt.tensor.shape()) {
      throw Error(ErrorCode::kTensorTable, nt.name + ": archive shape " + shape_string(e.shape) + ", model expects " +
                                               shape_string(nt.tensor.shape()));
    }
    if (e.offset + e.byte_size() > archive.payload.size()) throw Error(ErrorCode::kTruncatedPayload, nt.name);
    TensorF dst = nt.tensor;
    auto values = dst.values();
    const std::uint8_t* src = archive.payload.data() + e.offset;
    if (e.dtype == DType::kF32) {
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f32(src + i * 4);
    } else {
      const QuantParams q = e.quant.value_or(QuantParams{});
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = static_cast<float>(static_cast<std::int8_t>(src[i]) - q.zero_point) * q.scale;
      }
    }
  }
  return model;
}

void save_model(const Model& model, const fs::path& path) { write_archive(path, archive_model(model)); }

Model load_model(const fs::path& path) { return model_from_archive(read_archive(path)); }

QuantParams symmetric_quant_params(std::span<const float> values) {
  float peak = 0;
  for (const float v : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "cannot quantize a non-finite tensor");
    peak = std::max(peak, std::abs(v));
  }
  return {peak > 0 ? peak / 127.0f : 1.0f, 0};
}

std::vector<std::int8_t> quantize_values(std::span<const float> values, const QuantParams& params) {
  std::vector<std::int8_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const long q = std::lround(values[i] / params.scale) + params.zero_point;
    out[i] = static_cast<std::int8_t>(std::clamp(q, -127L, 127L));
  }
  return out;
}

std::vector<float> dequantize_values(std::span<const std::int8_t> values, const QuantParams& params) {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<float>(values[i] - params.zero_point) * params.scale;
  }
  return out;
}

ModelArchive quantize_model(const Model& model) {
  ModelArchive a;
  a.spec = model.spec();
  for (const auto& nt : model.all_tensors()) {
    if (!is_quantized_weight(nt.name)) {
      append_f32(a, nt.name, nt.tensor);
      continue;
    }
    const auto params = symmetric_quant_params(nt.tensor.values());
    const auto q = quantize_values(nt.tensor.values(), params);
    a.tensors.push_back(TensorEntry{nt.name, DType::kI8, nt.tensor.shape(), a.payload.size(), params});
    for (const auto v : q) a.payload.push_back(static_cast<std::uint8_t>(v));
  }
  return a;
}

std::size_t archive_parameter_count(const ModelArchive& archive) {
  std::size_t total = 0;
  for (const auto& e : archive.tensors) {
    if (!is_running_stat(e.name)) total += shape_size(e.shape);
  }
  return total;
}

SizeReport size_report(const fs::path& float_path, const fs::path& quant_path) {
  const auto f = read_archive(float_path);
  const auto q = read_archive(quant_path);
  SizeReport r;
  r.float_bytes = fs::file_size(float_path);
  r.quant_bytes = fs::file_size(quant_path);
  r.float_payload = f.payload.size();
  r.quant_payload = q.payload.size();
  r.float_parameters = archive_parameter_count(f);
  r.quant_parameters = archive_parameter_count(q);
  if (r.float_payload == 0) {
    r.ratio = 1.0;
    r.warnings.emplace_back("float archive has an empty payload; ratio reported as 1.0");
  } else {
    r.ratio = static_cast<double>(r.quant_bytes) / static_cast<double>(r.float_bytes);
  }
  if (r.float_parameters != r.quant_parameters) r.warnings.emplace_back("archives hold different parameter counts");
  return r;
}

std::string SizeReport::to_text() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "float archive:     %llu bytes (payload %llu), %zu parameters\n"
                "quantized archive: %llu bytes (payload %llu), %zu parameters\n"
                "compression ratio: %.4f (%.2fx smaller)\n",
                static_cast<unsigned long long>(float_bytes), static_cast<unsigned long long>(float_payload),
                float_parameters, static_cast<unsigned long long>(quant_bytes),
                static_cast<unsigned long long>(quant_payload), quant_parameters, ratio, ratio > 0 ? 1.0 / ratio : 0.0);
  std::string out = buf;
  for (const auto& w : warnings) out += "warning: " + w + "\n";
  return out;
}

}  // namespace aspf

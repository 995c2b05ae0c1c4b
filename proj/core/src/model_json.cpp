#include <json.hpp>
#include <set>

#include "aspf/model.hpp"

namespace aspf {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::kConfig, what); }

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) config_error(where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) config_error("unknown key '" + key + "' in " + where);
  }
}

template <class V>
V get_or(const json& obj, const char* key, V fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception&) {
    config_error("bad value for '" + std::string(key) + "' in " + where);
  }
}

json block_to_json(const BlockSpec& b) {
  return json{{"kind", to_string(b.kind)},     {"out_channels", b.out_channels}, {"stride", b.stride},
              {"expansion", b.expansion},      {"kernel", b.kernel},             {"activation", to_string(b.activation)}};
}

BlockSpec block_from_json(const json& j) {
  const std::string where = "backbone block";
  reject_unknown(j, {"kind", "out_channels", "stride", "expansion", "kernel", "activation"}, where);
  BlockSpec b;
  const auto kind = get_or<std::string>(j, "kind", std::string(to_string(b.kind)), where);
  if (kind == "plain_conv") {
    b.kind = BlockKind::kPlainConv;
  } else if (kind == "inverted_residual") {
    b.kind = BlockKind::kInvertedResidual;
  } else {
    config_error("unknown block kind '" + kind + "'");
  }
  b.out_channels = get_or(j, "out_channels", b.out_channels, where);
  b.stride = get_or(j, "stride", b.stride, where);
  b.expansion = get_or(j, "expansion", b.expansion, where);
  b.kernel = get_or(j, "kernel", b.kernel, where);
  b.activation = parse_activation(get_or<std::string>(j, "activation", std::string(to_string(b.activation)), where));
  return b;
}

ModelSpec preset(const std::string& name) {
  if (name == "light_full") return light_full_spec();
  if (name == "light_tiny") return light_tiny_spec();
  if (name == "heavy_b0") return heavy_b0_spec();
  if (name == "heavy_tiny") return heavy_tiny_spec();
  config_error("unknown preset '" + name + "'");
}

}  // namespace

std::string model_spec_to_json(const ModelSpec& spec) {
  json backbone = json::array();
  for (const auto& b : spec.backbone) backbone.push_back(block_to_json(b));
  json head = json::array();
  for (const auto& h : spec.head) head.push_back(json{{"units", h.units}, {"activation", to_string(h.activation)}});
  const json j{{"architecture", to_string(spec.architecture)},
               {"input_shape", {spec.height, spec.width, spec.channels}},
               {"alpha", spec.alpha},
               {"divisor", spec.divisor},
               {"backbone", backbone},
               {"head", head},
               {"dropconnect_rate", spec.dropconnect_rate},
               {"norm",
                {{"kind", to_string(spec.norm.kind)},
                 {"groups", spec.norm.groups},
                 {"eps", spec.norm.eps},
                 {"momentum", spec.norm.momentum}}}};
  return j.dump();
}

ModelSpec model_spec_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    config_error(std::string("model spec is not valid JSON: ") + e.what());
  }
  const std::string where = "model";
  reject_unknown(j, {"preset", "architecture", "input_shape", "alpha", "divisor", "backbone", "head",
                     "dropconnect_rate", "norm"},
                 where);
  ModelSpec spec = j.contains("preset") ? preset(get_or<std::string>(j, "preset", "", where)) : ModelSpec{};
  if (j.contains("architecture")) {
    const auto arch = get_or<std::string>(j, "architecture", "", where);
    if (arch == "light") {
      spec.architecture = Architecture::kLight;
    } else if (arch == "heavy") {
      spec.architecture = Architecture::kHeavy;
    } else {
      config_error("unknown architecture '" + arch + "'");
    }
  }
  if (j.contains("input_shape")) {
    const auto shape = get_or<std::vector<int>>(j, "input_shape", {}, where);
    if (shape.size() != 3) config_error("input_shape must be [H, W, C]");
    spec.height = shape[0];
    spec.width = shape[1];
    spec.channels = shape[2];
  }
  spec.alpha = get_or(j, "alpha", spec.alpha, where);
  spec.divisor = get_or(j, "divisor", spec.divisor, where);
  if (j.contains("backbone")) {
    if (!j["backbone"].is_array()) config_error("backbone must be an array");
    spec.backbone.clear();
    for (const auto& b : j["backbone"]) spec.backbone.push_back(block_from_json(b));
  }
  if (j.contains("head")) {
    if (!j["head"].is_array()) config_error("head must be an array");
    spec.head.clear();
    for (const auto& h : j["head"]) {
      reject_unknown(h, {"units", "activation"}, "head layer");
      HeadLayer layer;
      layer.units = get_or(h, "units", layer.units, "head layer");
      layer.activation = parse_activation(get_or<std::string>(h, "activation", "linear", "head layer"));
      spec.head.push_back(layer);
    }
  }
  spec.dropconnect_rate = get_or(j, "dropconnect_rate", spec.dropconnect_rate, where);
  if (j.contains("norm")) {
    const auto& n = j["norm"];
    reject_unknown(n, {"kind", "groups", "eps", "momentum"}, "norm");
    const auto kind = get_or<std::string>(n, "kind", std::string(to_string(spec.norm.kind)), "norm");
    if (kind == "batch") {
      spec.norm.kind = NormKind::kBatch;
    } else if (kind == "group") {
      spec.norm.kind = NormKind::kGroup;
    } else {
      config_error("unknown norm kind '" + kind + "'");
    }
    spec.norm.groups = get_or(n, "groups", spec.norm.groups, "norm");
    spec.norm.eps = get_or(n, "eps", spec.norm.eps, "norm");
    spec.norm.momentum = get_or(n, "momentum", spec.norm.momentum, "norm");
  }
  validate(spec);
  return spec;
}

}  // namespace aspf

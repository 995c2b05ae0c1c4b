#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>

#include "aspf/archive.hpp"
#include "aspf/data.hpp"
#include "aspf/explain.hpp"
#include "aspf/image.hpp"

namespace aspf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

RunConfig parse_run_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "model" && key != "train") throw Error(ErrorCode::kConfig, "unknown config key '" + key + "'");
  }
  if (!j.contains("model")) throw Error(ErrorCode::kConfig, "config needs a 'model' section");
  RunConfig cfg;
  cfg.model = model_spec_from_json(j["model"].dump());
  if (j.contains("train")) cfg.train = train_config_from_json(j["train"].dump());
  return cfg;
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

std::set<int> parse_ids(const std::string& text) {
  std::set<int> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int id = 0;
    try {
      id = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || id < 1) {
      throw CLI::ValidationError("--holdout", "expected comma-separated positive subject ids, got '" + text + "'");
    }
    ids.insert(id);
  }
  if (ids.empty()) throw CLI::ValidationError("--holdout", "no subject ids given");
  return ids;
}

void print_inspect(const fs::path& path, std::ostream& out) {
  const auto archive = read_archive(path);
  out << "file:       " << path.string() << " (" << fs::file_size(path) << " bytes, payload " << archive.payload.size()
      << ")\n";
  out << "spec:       " << model_spec_to_json(archive.spec) << "\n";
  out << "parameters: " << archive_parameter_count(archive) << "\n";
  out << "tensors:    " << archive.tensors.size() << "\n";
  for (const auto& e : archive.tensors) {
    out << "  " << std::left << std::setw(36) << e.name << std::setw(4) << (e.dtype == DType::kF32 ? "f32" : "i8")
        << std::setw(18) << shape_string(e.shape) << "offset " << e.offset;
    if (e.quant) out << "  scale " << e.quant->scale << " zero_point " << e.quant->zero_point;
    out << "\n";
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Face anti-spoofing toolkit", "aspf"};
  app.require_subcommand(1);

  // prep
  std::string prep_source, prep_out, prep_policy = "reject_multi";
  std::size_t prep_size = 96, prep_stride = 1;
  auto* prep = app.add_subcommand("prep", "Extract frames, crop faces and write a manifest");
  prep->add_option("--source", prep_source, "Source tree <subject>/<real|fake>/<attack>/<video>/frames")->required();
  prep->add_option("--out", prep_out, "Output crop directory")->required();
  prep->add_option("--policy", prep_policy, "Multi-face policy")->check(CLI::IsMember({"reject_multi", "largest_only"}));
  prep->add_option("--size", prep_size, "Crop edge in pixels")->check(CLI::PositiveNumber);
  prep->add_option("--stride", prep_stride, "Keep every n-th frame")->check(CLI::PositiveNumber);

  // split
  std::string split_manifest_path, split_holdout;
  double split_frac = 0.8;
  std::uint64_t split_seed = 0;
  auto* split = app.add_subcommand("split", "Subject-disjoint train/val/test split");
  split->add_option("--manifest", split_manifest_path, "Manifest JSONL")->required();
  split->add_option("--holdout", split_holdout, "Comma-separated test subject ids")->required();
  split->add_option("--train-frac", split_frac, "Train share of the remaining records")->check(CLI::Range(0.0, 1.0));
  split->add_option("--seed", split_seed, "Shuffle seed");

  // train
  std::string train_config, train_data, train_out;
  auto* train_cmd = app.add_subcommand("train", "Train a model from train.jsonl/val.jsonl");
  train_cmd->add_option("--config", train_config, "CONFIG.json with model and train sections")->required();
  train_cmd->add_option("--data", train_data, "Directory holding train.jsonl and val.jsonl")->required();
  train_cmd->add_option("--out", train_out, "Output archive")->required();

  // eval
  std::string eval_model, eval_manifest, eval_heatmap;
  double eval_threshold = 0.5;
  auto* eval = app.add_subcommand("eval", "Score a manifest");
  eval->add_option("--model", eval_model, "Model archive")->required();
  eval->add_option("--manifest", eval_manifest, "Manifest JSONL")->required();
  eval->add_option("--threshold", eval_threshold, "Decision threshold (light models)")->check(CLI::Range(0.0, 1.0));
  eval->add_option("--heatmap", eval_heatmap, "Write the confusion matrix as a PPM");

  // explain
  std::string ex_model, ex_image, ex_method, ex_out, ex_layer;
  std::size_t ex_class = 1, ex_scale = 8;
  double ex_alpha = 0.5;
  auto* explain = app.add_subcommand("explain", "Grad-CAM, saliency or kernel visualisation");
  explain->add_option("--model", ex_model, "Model archive")->required();
  explain->add_option("--image", ex_image, "Input PPM/PGM (not needed for kernels)");
  explain->add_option("--method", ex_method, "Attribution method")
      ->required()
      ->check(CLI::IsMember({"gradcam", "saliency", "kernels"}));
  explain->add_option("--out", ex_out, "Output PPM")->required();
  explain->add_option("--layer", ex_layer, "Feature map (gradcam) or conv unit (kernels)");
  explain->add_option("--class", ex_class, "Target class: 1 = real, 0 = fake");
  explain->add_option("--alpha", ex_alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0));
  explain->add_option("--scale", ex_scale, "Kernel tile pixels per tap")->check(CLI::PositiveNumber);

  // quantize
  std::string q_model, q_out;
  auto* quantize = app.add_subcommand("quantize", "Int8 per-tensor symmetric quantization");
  quantize->add_option("--model", q_model, "Float model archive")->required();
  quantize->add_option("--out", q_out, "Quantized archive")->required();

  // inspect
  std::string in_model;
  auto* inspect = app.add_subcommand("inspect", "Print an archive's header and tensor table");
  inspect->add_option("--model", in_model, "Archive")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (explain->parsed() && ex_method != "kernels" && ex_image.empty()) {
      throw CLI::RequiredError("--image is required for " + ex_method);
    }
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (prep->parsed()) {
      PrepOptions opts{parse_crop_policy(prep_policy), prep_size, prep_stride};
      const auto result = prepare_dataset(prep_source, prep_out, CenteredStubDetector{}, opts);
      out << "frames " << result.report.frames_in << ", crops " << result.report.crops_out << ", rejected "
          << result.report.rejections.size() << "\n";
      out << "manifest: " << (fs::path(prep_out) / "manifest.jsonl").string() << "\n";
    } else if (split->parsed()) {
      std::set<int> holdout;
      try {
        holdout = parse_ids(split_holdout);
      } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
      }
      const auto manifest = read_manifest(split_manifest_path);
      const auto parts = split_manifest(manifest, holdout, split_frac, split_seed);
      const fs::path dir = manifest.root();
      write_manifest(dir / "train.jsonl", parts.train);
      write_manifest(dir / "val.jsonl", parts.val);
      write_manifest(dir / "test.jsonl", parts.test);
      out << "train " << parts.train.size() << ", val " << parts.val.size() << ", test " << parts.test.size()
          << " -> " << dir.string() << "\n";
    } else if (train_cmd->parsed()) {
      const auto cfg = parse_run_config(read_text(train_config));
      const auto train_m = read_manifest(fs::path(train_data) / "train.jsonl");
      const auto val_m = read_manifest(fs::path(train_data) / "val.jsonl");
      Model model = build_model(cfg.model, cfg.train.seed);
      const auto result = train(model, train_m, val_m, cfg.train, [&](const EpochRecord& r) {
        out << "epoch " << r.epoch << " train_loss " << r.train_loss << " val_loss " << r.val_loss << " train_f1 "
            << r.train_f1 << " val_f1 " << r.val_f1 << "\n";
        return true;
      });
      const Model& keep = result.best ? *result.best : model;
      save_model(keep, train_out);
      fs::path history = train_out;
      history.replace_extension(".history.csv");
      write_text(history, history_csv(result.history));
      out << "saved " << train_out << " (best epoch " << result.best_epoch << ", val F1 " << result.best_val_f1
          << "); history " << history.string() << "\n";
    } else if (eval->parsed()) {
      const Model model = load_model(eval_model);
      const auto manifest = read_manifest(eval_manifest);
      const auto ev = evaluate(model, manifest, eval_threshold);
      out << confusion_matrix_text(ev.report);
      if (!eval_heatmap.empty()) write_pnm(eval_heatmap, confusion_matrix_heatmap(ev.report));
    } else if (explain->parsed()) {
      const Model model = load_model(ex_model);
      if (ex_method == "kernels") {
        const std::string layer = ex_layer.empty() ? model.conv_layer_names().front() : ex_layer;
        const auto grid = dump_kernels(model, layer, ex_scale);
        write_pnm(ex_out, grid.image);
        out << grid.tiles << " kernels from " << layer << " -> " << ex_out << "\n";
      } else {
        const Image image = read_pnm(ex_image);
        const auto& spec = model.spec();
        const TensorF input = image_to_tensor(image, spec.height, spec.width);
        const Heatmap map =
            ex_method == "gradcam" ? grad_cam(model, input, ex_layer, ex_class) : saliency(model, input, ex_class);
        write_pnm(ex_out, overlay(map, image, ex_alpha));
        out << ex_method << " (" << map.source_layer << ", class " << ex_class << ") -> " << ex_out << "\n";
      }
    } else if (quantize->parsed()) {
      const Model model = load_model(q_model);
      write_archive(q_out, quantize_model(model));
      out << size_report(q_model, q_out).to_text();
    } else if (inspect->parsed()) {
      print_inspect(in_model, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace aspf::cli

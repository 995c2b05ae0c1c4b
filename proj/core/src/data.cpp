#include "aspf/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "aspf/error.hpp"
#include "aspf/rng.hpp"

namespace aspf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<std::pair<AttackType, std::string_view>, 6> kAttackNames{{
    {AttackType::kGenuine, "genuine"},
    {AttackType::kMaskCrop, "mask_crop"},
    {AttackType::kMaskFull, "mask_full"},
    {AttackType::kMaskUpper, "mask_upper"},
    {AttackType::kPaperPrint, "paper_print"},
    {AttackType::kReplay, "replay"},
}};

bool is_image_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".ppm" || ext == ".pgm";
}

std::vector<fs::directory_entry> sorted_entries(const fs::path& dir) {
  std::vector<fs::directory_entry> entries;
  for (const auto& e : fs::directory_iterator(dir)) entries.push_back(e);
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.path().filename().string() < b.path().filename().string(); });
  return entries;
}

std::optional<int> parse_positive_int(const std::string& text) {
  if (text.empty() || text.size() > 9) return std::nullopt;
  for (char c : text) {
    if (c < '0' || c > '9') return std::nullopt;
  }
  const int v = std::stoi(text);
  if (v < 1) return std::nullopt;
  return v;
}

// "<video>_f<index>" -> (video, index); anything else -> (stem, 0).
std::pair<std::string, int> parse_frame_name(const std::string& stem) {
  const auto pos = stem.rfind("_f");
  if (pos != std::string::npos && pos > 0) {
    const std::string digits = stem.substr(pos + 2);
    if (!digits.empty() && digits.size() <= 9 &&
        std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      return {stem.substr(0, pos), std::stoi(digits)};
    }
  }
  return {stem, 0};
}

}  // namespace

std::string_view to_string(Label label) { return label == Label::kReal ? "real" : "fake"; }

std::string_view to_string(AttackType attack) {
  for (const auto& [a, name] : kAttackNames) {
    if (a == attack) return name;
  }
  return "?";
}

Label parse_label(std::string_view text) {
  if (text == "real") return Label::kReal;
  if (text == "fake") return Label::kFake;
  throw Error(ErrorCode::kManifestRecord, "unknown label '" + std::string(text) + "'");
}

AttackType parse_attack_type(std::string_view text) {
  for (const auto& [a, name] : kAttackNames) {
    if (name == text) return a;
  }
  throw Error(ErrorCode::kManifestRecord, "unknown attack type '" + std::string(text) + "'");
}

void validate(const SampleRecord& r) {
  if (r.crop_path.empty()) throw Error(ErrorCode::kManifestRecord, "empty crop_path");
  if (r.subject_id < 1) throw Error(ErrorCode::kManifestRecord, r.crop_path + ": subject_id must be >= 1");
  if (r.frame_index < 0) throw Error(ErrorCode::kManifestRecord, r.crop_path + ": negative frame_index");
  if ((r.label == Label::kReal) != (r.attack_type == AttackType::kGenuine)) {
    throw Error(ErrorCode::kManifestRecord, r.crop_path + ": label " + std::string(to_string(r.label)) +
                                                " with attack type " + std::string(to_string(r.attack_type)));
  }
}

void Manifest::add(SampleRecord record) {
  validate(record);
  if (!paths_.insert(record.crop_path).second) {
    throw Error(ErrorCode::kDuplicatePath, record.crop_path);
  }
  records_.push_back(std::move(record));
}

ManifestSummary Manifest::summary() const {
  ManifestSummary s;
  for (const auto& r : records_) {
    ++s.per_label[std::string(to_string(r.label))];
    ++s.per_subject[r.subject_id];
    ++s.per_attack[std::string(to_string(r.attack_type))];
  }
  return s;
}

std::set<int> Manifest::subjects() const {
  std::set<int> out;
  for (const auto& r : records_) out.insert(r.subject_id);
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines

std::string record_to_json_line(const SampleRecord& r) {
  const json j{{"crop_path", r.crop_path},
               {"label", to_string(r.label)},
               {"subject_id", r.subject_id},
               {"attack_type", to_string(r.attack_type)},
               {"source_video", r.source_video},
               {"frame_index", r.frame_index}};
  return j.dump();
}

SampleRecord record_from_json_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kManifestRecord, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::kManifestRecord, "record is not an object");
  static const std::set<std::string> kKeys{"crop_path", "label", "subject_id", "attack_type", "source_video",
                                           "frame_index"};
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw Error(ErrorCode::kManifestRecord, "unknown key '" + key + "'");
  }
  for (const auto& key : kKeys) {
    if (!j.contains(key)) throw Error(ErrorCode::kManifestRecord, "missing key '" + key + "'");
  }
  auto string_field = [&](const char* key) {
    if (!j[key].is_string()) throw Error(ErrorCode::kManifestRecord, std::string(key) + " must be a string");
    return j[key].get<std::string>();
  };
  auto int_field = [&](const char* key) {
    if (!j[key].is_number_integer()) throw Error(ErrorCode::kManifestRecord, std::string(key) + " must be an integer");
    const auto v = j[key].get<std::int64_t>();
    if (v < INT32_MIN || v > INT32_MAX) throw Error(ErrorCode::kManifestRecord, std::string(key) + " out of range");
    return static_cast<int>(v);
  };
  SampleRecord r;
  r.crop_path = string_field("crop_path");
  r.label = parse_label(string_field("label"));
  r.subject_id = int_field("subject_id");
  r.attack_type = parse_attack_type(string_field("attack_type"));
  r.source_video = string_field("source_video");
  r.frame_index = int_field("frame_index");
  validate(r);
  return r;
}

std::string manifest_to_jsonl(const Manifest& manifest) {
  std::string out;
  for (const auto& r : manifest.records()) {
    out += record_to_json_line(r);
    out += '\n';
  }
  return out;
}

Manifest manifest_from_jsonl(std::string_view text, fs::path root) {
  Manifest manifest(std::move(root));
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const auto line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    try {
      manifest.add(record_from_json_line(line));
    } catch (const Error& e) {
      throw Error(e.code(), "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return manifest;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << manifest_to_jsonl(manifest);
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return manifest_from_jsonl(ss.str(), path.parent_path());
}

// ---------------------------------------------------------------------------
// Manifest construction and splitting

Manifest build_manifest(const fs::path& crops_root) {
  if (!fs::is_directory(crops_root)) throw Error(ErrorCode::kIo, "no such directory " + crops_root.string());
  auto layout_error = [](const fs::path& p, const std::string& why) {
    return Error(ErrorCode::kLayout, p.string() + ": " + why);
  };
  std::vector<SampleRecord> records;
  for (const auto& subject_entry : sorted_entries(crops_root)) {
    const auto subject_name = subject_entry.path().filename().string();
    if (subject_entry.is_regular_file() && (subject_name == "manifest.jsonl" || subject_name == "rejections.csv")) {
      continue;
    }
    if (!subject_entry.is_directory()) throw layout_error(subject_entry.path(), "expected a subject directory");
    const auto subject = parse_positive_int(subject_name);
    if (!subject) throw layout_error(subject_entry.path(), "subject directory must be a positive integer");
    for (const auto& label_entry : sorted_entries(subject_entry.path())) {
      const auto label_name = label_entry.path().filename().string();
      if (!label_entry.is_directory() || (label_name != "real" && label_name != "fake")) {
        throw layout_error(label_entry.path(), "expected 'real' or 'fake' directory");
      }
      for (const auto& attack_entry : sorted_entries(label_entry.path())) {
        if (!attack_entry.is_directory()) throw layout_error(attack_entry.path(), "expected an attack-type directory");
        AttackType attack;
        try {
          attack = parse_attack_type(attack_entry.path().filename().string());
        } catch (const Error&) {
          throw layout_error(attack_entry.path(), "unknown attack type directory");
        }
        for (const auto& file : sorted_entries(attack_entry.path())) {
          if (!file.is_regular_file() || !is_image_file(file.path())) {
            throw layout_error(file.path(), "expected a .ppm or .pgm frame");
          }
          SampleRecord r;
          r.crop_path = fs::relative(file.path(), crops_root).generic_string();
          r.label = parse_label(label_name);
          r.subject_id = *subject;
          r.attack_type = attack;
          std::tie(r.source_video, r.frame_index) = parse_frame_name(file.path().stem().string());
          records.push_back(std::move(r));
        }
      }
    }
  }
  std::sort(records.begin(), records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.crop_path < b.crop_path; });
  Manifest manifest(crops_root);
  for (auto& r : records) manifest.add(std::move(r));
  return manifest;
}

Split split_manifest(const Manifest& manifest, const std::set<int>& holdout_subjects, double train_fraction,
                     std::uint64_t seed) {
  if (holdout_subjects.empty()) throw Error(ErrorCode::kInvalidArgument, "holdout subject set is empty");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "train fraction must be in [0,1]");
  }
  const auto present = manifest.subjects();
  for (const int s : holdout_subjects) {
    if (!present.count(s)) throw Error(ErrorCode::kUnknownSubject, "subject " + std::to_string(s));
  }
  Split split{Manifest(manifest.root()), Manifest(manifest.root()), Manifest(manifest.root())};
  std::vector<const SampleRecord*> rest;
  for (const auto& r : manifest.records()) {
    if (holdout_subjects.count(r.subject_id)) {
      split.test.add(r);
    } else {
      rest.push_back(&r);
    }
  }
  if (rest.empty()) throw Error(ErrorCode::kEmptyInput, "no records left after removing holdout subjects");
  Rng rng(seed);
  rng.shuffle(rest.begin(), rest.end());
  // The small epsilon keeps exact products such as 0.8 * 15 from landing just
  // below the integer.
  const auto n_train = static_cast<std::size_t>(
      std::floor(static_cast<long double>(train_fraction) * static_cast<long double>(rest.size()) + 1e-9L));
  for (std::size_t i = 0; i < rest.size(); ++i) (i < n_train ? split.train : split.val).add(*rest[i]);
  return split;
}

// ---------------------------------------------------------------------------
// Frames and cropping

FrameStream::FrameStream(const fs::path& source, std::size_t stride) : source_(source) {
  if (stride < 1) throw Error(ErrorCode::kInvalidArgument, "frame stride must be >= 1");
  if (!fs::is_directory(source)) throw Error(ErrorCode::kIo, "missing source " + source.string());
  std::vector<fs::path> files;
  for (const auto& e : sorted_entries(source)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  if (files.empty()) throw Error(ErrorCode::kEmptyInput, "no frames in " + source.string());
  for (std::size_t i = 0; i < files.size(); i += stride) selected_.emplace_back(i, files[i]);
}

std::optional<Frame> FrameStream::next() {
  if (cursor_ >= selected_.size()) return std::nullopt;
  const auto& [index, path] = selected_[cursor_++];
  return Frame{index, path.filename().string(), read_pnm(path)};
}

FrameStream extract_frames(const fs::path& source, std::size_t stride) { return FrameStream(source, stride); }

std::vector<FaceBox> CenteredStubDetector::detect(const Image& frame) const {
  const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(frame.width * 0.6)));
  const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(frame.height * 0.6)));
  return {FaceBox{(frame.width - w) / 2, (frame.height - h) / 2, w, h, 1.0}};
}

std::string_view to_string(CropPolicy policy) {
  return policy == CropPolicy::kLargestOnly ? "largest_only" : "reject_multi";
}

CropPolicy parse_crop_policy(std::string_view text) {
  if (text == "largest_only") return CropPolicy::kLargestOnly;
  if (text == "reject_multi") return CropPolicy::kRejectMulti;
  throw Error(ErrorCode::kInvalidArgument, "unknown crop policy '" + std::string(text) + "'");
}

std::string RejectionReport::to_csv() const {
  std::string out = "source,frame_index,reason\n";
  for (const auto& r : rejections) out += r.source + "," + std::to_string(r.frame_index) + "," + r.reason + "\n";
  return out;
}

std::optional<Image> detect_and_crop(const Frame& frame, const FaceDetector& detector, CropPolicy policy,
                                     std::size_t out_height, std::size_t out_width, RejectionReport& report,
                                     std::string_view source) {
  if (out_height == 0 || out_width == 0) throw Error(ErrorCode::kInvalidArgument, "crop size must be positive");
  std::vector<FaceBox> boxes;
  try {
    boxes = detector.detect(frame.image);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kDetectorFailure, "frame " + std::to_string(frame.index) + ": " + e.what());
  }
  for (const auto& b : boxes) {
    if (b.width == 0 || b.height == 0 || b.x + b.width > frame.image.width || b.y + b.height > frame.image.height ||
        !(b.confidence >= 0.0 && b.confidence <= 1.0)) {
      throw Error(ErrorCode::kDetectorFailure, "frame " + std::to_string(frame.index) + ": box outside frame bounds");
    }
  }
  ++report.frames_in;
  auto reject = [&](const char* reason) {
    report.rejections.push_back({std::string(source), frame.index, reason});
    return std::nullopt;
  };
  if (boxes.empty()) return reject("no_face");
  if (boxes.size() > 1 && policy == CropPolicy::kRejectMulti) return reject("multiple_faces");
  // Largest area wins; ties keep the earliest box.
  const auto best = std::max_element(boxes.begin(), boxes.end(),
                                     [](const FaceBox& a, const FaceBox& b) { return a.area() < b.area(); });
  ++report.crops_out;
  return resize_bilinear(crop(frame.image, best->x, best->y, best->width, best->height), out_width, out_height);
}

PrepResult prepare_dataset(const fs::path& source, const fs::path& out, const FaceDetector& detector,
                           const PrepOptions& options) {
  if (!fs::is_directory(source)) throw Error(ErrorCode::kIo, "missing source " + source.string());
  PrepResult result;
  fs::create_directories(out);
  for (const auto& subject : sorted_entries(source)) {
    if (!subject.is_directory() || !parse_positive_int(subject.path().filename().string())) {
      throw Error(ErrorCode::kLayout, subject.path().string() + ": expected a subject directory");
    }
    for (const auto& label : sorted_entries(subject.path())) {
      const auto label_name = label.path().filename().string();
      if (!label.is_directory() || (label_name != "real" && label_name != "fake")) {
        throw Error(ErrorCode::kLayout, label.path().string() + ": expected 'real' or 'fake'");
      }
      for (const auto& attack : sorted_entries(label.path())) {
        if (!attack.is_directory()) throw Error(ErrorCode::kLayout, attack.path().string() + ": expected a directory");
        for (const auto& video : sorted_entries(attack.path())) {
          if (!video.is_directory()) throw Error(ErrorCode::kLayout, video.path().string() + ": expected a video directory");
          const auto rel = fs::relative(video.path(), source).generic_string();
          const auto target_dir = out / subject.path().filename() / label.path().filename() / attack.path().filename();
          fs::create_directories(target_dir);
          auto frames = extract_frames(video.path(), options.frame_stride);
          while (auto frame = frames.next()) {
            auto cropped = detect_and_crop(*frame, detector, options.policy, options.size, options.size, result.report, rel);
            if (!cropped) continue;
            write_pnm(target_dir / (video.path().filename().string() + "_f" + std::to_string(frame->index) + ".ppm"),
                      *cropped);
          }
        }
      }
    }
  }
  result.manifest = build_manifest(out);
  write_manifest(out / "manifest.jsonl", result.manifest);
  std::ofstream csv(out / "rejections.csv", std::ios::binary);
  csv << result.report.to_csv();
  return result;
}

// ---------------------------------------------------------------------------
// Batches

TensorF image_to_tensor(const Image& image, std::size_t height, std::size_t width) {
  const Image rgb = resize_bilinear(to_rgb(image), width, height);
  TensorF t({1, height, width, 3});
  auto v = t.values();
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) v[i] = static_cast<float>(rgb.pixels[i]) / 255.0f;
  return t;
}

Batch load_batch(const Manifest& manifest, std::span<const std::size_t> indices, std::size_t out_height,
                 std::size_t out_width) {
  if (indices.empty()) throw Error(ErrorCode::kEmptyInput, "empty batch");
  const std::size_t per = out_height * out_width * 3;
  Batch batch{TensorF({indices.size(), out_height, out_width, 3}), TensorF({indices.size(), 1})};
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= manifest.size()) throw Error(ErrorCode::kInvalidArgument, "batch index out of range");
    const auto& record = manifest[indices[b]];
    const TensorF one = image_to_tensor(read_pnm(manifest.resolve(record)), out_height, out_width);
    std::copy(one.values().begin(), one.values().end(), batch.images.values().begin() + static_cast<std::ptrdiff_t>(b * per));
    batch.labels[b] = record.label == Label::kReal ? 1.0f : 0.0f;
  }
  return batch;
}

ManifestSource::ManifestSource(Manifest manifest, std::size_t height, std::size_t width)
    : manifest_(std::move(manifest)), height_(height), width_(width), cache_(manifest_.size()) {
  if (manifest_.empty()) throw Error(ErrorCode::kEmptyInput, "empty manifest");
}

Batch ManifestSource::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw Error(ErrorCode::kEmptyInput, "empty batch");
  const std::size_t per = height_ * width_ * 3;
  Batch out{TensorF({indices.size(), height_, width_, 3}), TensorF({indices.size(), 1})};
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t i = indices[b];
    if (i >= manifest_.size()) throw Error(ErrorCode::kInvalidArgument, "batch index out of range");
    if (cache_[i].empty()) {
      const std::size_t one[] = {i};
      const auto loaded = load_batch(manifest_, one, height_, width_);
      cache_[i].assign(loaded.images.values().begin(), loaded.images.values().end());
    }
    std::copy(cache_[i].begin(), cache_[i].end(), out.images.values().begin() + static_cast<std::ptrdiff_t>(b * per));
    out.labels[b] = manifest_[i].label == Label::kReal ? 1.0f : 0.0f;
  }
  return out;
}

TensorSource::TensorSource(TensorF images, std::vector<Label> labels)
    : images_(std::move(images)), labels_(std::move(labels)) {
  if (images_.rank() != 4 || images_.dim(0) != labels_.size()) {
    throw Error(ErrorCode::kShapeMismatch, "TensorSource needs [N,H,W,C] images and N labels");
  }
}

Batch TensorSource::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw Error(ErrorCode::kEmptyInput, "empty batch");
  const std::size_t h = images_.dim(1), w = images_.dim(2), c = images_.dim(3), per = h * w * c;
  Batch out{TensorF({indices.size(), h, w, c}), TensorF({indices.size(), 1})};
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t i = indices[b];
    if (i >= labels_.size()) throw Error(ErrorCode::kInvalidArgument, "batch index out of range");
    const auto src = images_.values().subspan(i * per, per);
    std::copy(src.begin(), src.end(), out.images.values().begin() + static_cast<std::ptrdiff_t>(b * per));
    out.labels[b] = labels_[i] == Label::kReal ? 1.0f : 0.0f;
  }
  return out;
}

}  // namespace aspf

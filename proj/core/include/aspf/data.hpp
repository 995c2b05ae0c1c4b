#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aspf/image.hpp"
#include "aspf/tensor.hpp"

namespace aspf {

// Positive class is "real".
enum class Label { kFake = 0, kReal = 1 };
enum class AttackType { kGenuine, kMaskCrop, kMaskFull, kMaskUpper, kPaperPrint, kReplay };

std::string_view to_string(Label label);
std::string_view to_string(AttackType attack);
Label parse_label(std::string_view text);
AttackType parse_attack_type(std::string_view text);

struct SampleRecord {
  std::string crop_path;  // relative to the manifest root, '/'-separated
  Label label = Label::kFake;
  int subject_id = 1;
  AttackType attack_type = AttackType::kPaperPrint;
  std::string source_video;
  int frame_index = 0;

  bool operator==(const SampleRecord&) const = default;
};

// Throws kManifestRecord if label and attack type disagree or subject_id < 1.
void validate(const SampleRecord& record);

struct ManifestSummary {
  std::map<std::string, std::size_t> per_label;
  std::map<int, std::size_t> per_subject;
  std::map<std::string, std::size_t> per_attack;

  bool operator==(const ManifestSummary&) const = default;
};

class Manifest {
 public:
  Manifest() = default;
  explicit Manifest(std::filesystem::path root) : root_(std::move(root)) {}

  // Validates the record and rejects duplicate crop paths (kDuplicatePath).
  void add(SampleRecord record);

  const std::vector<SampleRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const SampleRecord& operator[](std::size_t i) const { return records_[i]; }

  // Directory that crop paths are relative to.
  const std::filesystem::path& root() const { return root_; }
  void set_root(std::filesystem::path root) { root_ = std::move(root); }
  std::filesystem::path resolve(const SampleRecord& record) const { return root_ / record.crop_path; }

  ManifestSummary summary() const;
  std::set<int> subjects() const;

 private:
  std::filesystem::path root_;
  std::vector<SampleRecord> records_;
  std::set<std::string> paths_;
};

// JSON Lines: one object per line with keys crop_path, label, subject_id,
// attack_type, source_video, frame_index. LF terminated, keys sorted.
std::string record_to_json_line(const SampleRecord& record);
SampleRecord record_from_json_line(std::string_view line);
std::string manifest_to_jsonl(const Manifest& manifest);
Manifest manifest_from_jsonl(std::string_view text, std::filesystem::path root);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
// The manifest root becomes the file's parent directory.
Manifest read_manifest(const std::filesystem::path& path);

// Walks <root>/<subject_id>/<real|fake>/<attack_type>/<frame>.ppm|pgm into a
// manifest sorted by path. Frame names of the form <video>_f<index> fill
// source_video and frame_index; anything else uses the stem and index 0.
// manifest.jsonl and rejections.csv at the root are ignored.
Manifest build_manifest(const std::filesystem::path& crops_root);

struct Split {
  Manifest train;
  Manifest val;
  Manifest test;
};

// Test receives every record of the holdout subjects; the rest is shuffled by
// `seed` and cut at floor(train_fraction * R) into train and val.
Split split_manifest(const Manifest& manifest, const std::set<int>& holdout_subjects, double train_fraction,
                     std::uint64_t seed);

// ---------------------------------------------------------------------------
// Frames and face cropping

struct Frame {
  std::size_t index = 0;
  std::string name;
  Image image;
};

// Every stride-th image of a directory, in lexicographic file-name order.
class FrameStream {
 public:
  FrameStream(const std::filesystem::path& source, std::size_t stride);

  std::optional<Frame> next();
  std::size_t frame_count() const { return selected_.size(); }
  const std::filesystem::path& source() const { return source_; }

 private:
  std::filesystem::path source_;
  std::vector<std::pair<std::size_t, std::filesystem::path>> selected_;
  std::size_t cursor_ = 0;
};

FrameStream extract_frames(const std::filesystem::path& source, std::size_t stride);

struct FaceBox {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  double confidence = 1.0;

  std::size_t area() const { return width * height; }
};

class FaceDetector {
 public:
  virtual ~FaceDetector() = default;
  virtual std::vector<FaceBox> detect(const Image& frame) const = 0;
};

// Deterministic stand-in: one box over the central 60% of the frame.
class CenteredStubDetector final : public FaceDetector {
 public:
  std::vector<FaceBox> detect(const Image& frame) const override;
};

enum class CropPolicy { kLargestOnly, kRejectMulti };
std::string_view to_string(CropPolicy policy);
CropPolicy parse_crop_policy(std::string_view text);

struct Rejection {
  std::string source;
  std::size_t frame_index = 0;
  std::string reason;
};

struct RejectionReport {
  std::size_t frames_in = 0;
  std::size_t crops_out = 0;
  std::vector<Rejection> rejections;

  // CSV with header: source,frame_index,reason
  std::string to_csv() const;
};

// Returns the resized crop, or nothing when the frame is rejected (no face, or
// several faces under kRejectMulti). Every call updates `report`.
std::optional<Image> detect_and_crop(const Frame& frame, const FaceDetector& detector, CropPolicy policy,
                                     std::size_t out_height, std::size_t out_width, RejectionReport& report,
                                     std::string_view source = {});

struct PrepOptions {
  CropPolicy policy = CropPolicy::kRejectMulti;
  std::size_t size = 96;
  std::size_t frame_stride = 1;
};

struct PrepResult {
  Manifest manifest;
  RejectionReport report;
};

// Source layout: <source>/<subject>/<real|fake>/<attack>/<video>/<frames>.
// Crops land in <out>/<subject>/<label>/<attack>/<video>_f<index>.ppm, with
// manifest.jsonl and rejections.csv written to <out>.
PrepResult prepare_dataset(const std::filesystem::path& source, const std::filesystem::path& out,
                           const FaceDetector& detector, const PrepOptions& options);

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  TensorF images;  // [B,H,W,3] in [0,1]
  TensorF labels;  // [B,1], 1 = real
};

// Decodes, resizes and scales the selected records.
Batch load_batch(const Manifest& manifest, std::span<const std::size_t> indices, std::size_t out_height,
                 std::size_t out_width);

// Anything that can serve labelled batches by index.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual Label label(std::size_t index) const = 0;
  virtual Batch batch(std::span<const std::size_t> indices) const = 0;
};

// Manifest-backed source; decoded images are cached after first use.
class ManifestSource final : public SampleSource {
 public:
  ManifestSource(Manifest manifest, std::size_t height, std::size_t width);

  std::size_t size() const override { return manifest_.size(); }
  Label label(std::size_t index) const override { return manifest_[index].label; }
  Batch batch(std::span<const std::size_t> indices) const override;
  const Manifest& manifest() const { return manifest_; }

 private:
  Manifest manifest_;
  std::size_t height_;
  std::size_t width_;
  mutable std::vector<std::vector<float>> cache_;
};

// In-memory source over an [N,H,W,3] tensor and per-sample labels.
class TensorSource final : public SampleSource {
 public:
  TensorSource(TensorF images, std::vector<Label> labels);

  std::size_t size() const override { return labels_.size(); }
  Label label(std::size_t index) const override { return labels_[index]; }
  Batch batch(std::span<const std::size_t> indices) const override;

 private:
  TensorF images_;
  std::vector<Label> labels_;
};

// Converts an RGB/gray image to a [1,H,W,3] tensor in [0,1] at the given size.
TensorF image_to_tensor(const Image& image, std::size_t height, std::size_t width);

}  // namespace aspf

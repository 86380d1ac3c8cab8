#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dprune/tensor.hpp"

namespace dprune::data {

// Pixel-space box, x2/y2 exclusive.
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0f; }
  bool operator==(const Box&) const = default;
};

float iou(const Box& a, const Box& b);

enum class ShapeKind : int { kCircle = 0, kSquare, kTriangle, kCross, kRing, kDiamond, kFrame, kSaltire };
inline constexpr int kMaxClasses = 8;
const char* shape_name(ShapeKind kind);

// Geometry of one rendered shape; class id == static_cast<int>(kind).
struct ShapeGeometry {
  ShapeKind kind = ShapeKind::kCircle;
  float cx = 0, cy = 0;  // center in pixels
  float size = 0;        // outer extent in pixels
  bool operator==(const ShapeGeometry&) const = default;
};

// True when the point (px, py) lies inside the shape.
bool shape_contains(const ShapeGeometry& g, float px, float py);

struct DetectionObject {
  Box box;
  int class_id = 0;
  ShapeGeometry shape;
  bool operator==(const DetectionObject&) const = default;
};

struct DetectionSample {
  Tensor image;  // [3,H,W], values in [0,1]
  std::vector<DetectionObject> objects;
  std::int64_t index = 0;
};

struct DatasetConfig {
  int image_size = 64;
  int num_classes = 4;
  int min_objects = 1;
  int max_objects = 3;
  float min_object_size = 10.0f;
  float max_object_size = 36.0f;
  int min_box_side = 8;
  float noise = 0.08f;
  float max_overlap_iou = 0.2f;
  int n_train = 1024;
  int n_val = 256;
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const DatasetConfig&) const = default;
};

enum class Split { kTrain, kVal };

// Fully determined by (config.seed, index).
DetectionSample generate_sample(const DatasetConfig& config, std::int64_t index);

std::vector<DetectionSample> generate_split(const DatasetConfig& config, Split split);

// Stacks images of samples[first, first+count) into [count,3,H,W].
Tensor stack_images(const std::vector<DetectionSample>& samples, std::size_t first, std::size_t count);

// images.bin: u32 count, channels, height, width (LE) + f32 payload;
// annotations.txt: "index class x1 y1 x2 y2" per object.
void export_samples(const std::vector<DetectionSample>& samples, const std::filesystem::path& dir);

// Counter-based generator: every (seed, index, stream) triple names an
// independent, reproducible sequence.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t index, std::uint64_t stream);
  std::uint64_t next();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi);  // inclusive range

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace dprune::data

#include "dprune/synthdet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dprune::data {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum Stream : std::uint64_t { kLayout = 1, kColor = 2, kNoise = 3 };

}  // namespace

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t index, std::uint64_t stream)
    : key_(splitmix64(splitmix64(splitmix64(seed) ^ index) ^ (stream * 0xd1b54a32d192ed03ULL))) {}

std::uint64_t CounterRng::next() { return splitmix64(key_ ^ splitmix64(counter_++)); }

double CounterRng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

int CounterRng::uniform_int(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(next() % span);
}

float iou(const Box& a, const Box& b) {
  const float ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const float iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0f;
  const float inter = ix * iy;
  const float uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

const char* shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kDiamond: return "diamond";
    case ShapeKind::kFrame: return "frame";
    case ShapeKind::kSaltire: return "saltire";
  }
  return "unknown";
}

bool shape_contains(const ShapeGeometry& g, float px, float py) {
  const float h = 0.5f * g.size;
  const float dx = px - g.cx, dy = py - g.cy;
  const float ax = std::abs(dx), ay = std::abs(dy);
  switch (g.kind) {
    case ShapeKind::kCircle: return dx * dx + dy * dy <= h * h;
    case ShapeKind::kSquare: return ax <= 0.8f * h && ay <= 0.8f * h;
    case ShapeKind::kTriangle: return dy >= -h && dy <= h && ax <= 0.5f * (dy + h);
    case ShapeKind::kCross: {
      const float t = h / 3.0f;
      return (ax <= t && ay <= h) || (ay <= t && ax <= h);
    }
    case ShapeKind::kRing: {
      const float r2 = dx * dx + dy * dy;
      return r2 <= h * h && r2 >= 0.3f * h * h;
    }
    case ShapeKind::kDiamond: return ax + ay <= h;
    case ShapeKind::kFrame: {
      const float m = std::max(ax, ay);
      return m <= 0.8f * h && m >= 0.45f * h;
    }
    case ShapeKind::kSaltire: {
      const float t = 0.25f * h;
      return ax <= 0.75f * h && ay <= 0.75f * h && (std::abs(dx - dy) <= t || std::abs(dx + dy) <= t);
    }
  }
  return false;
}

void DatasetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("dataset config: " + m); };
  if (image_size < 16) fail("image_size must be >= 16");
  if (num_classes < 2 || num_classes > kMaxClasses) fail("num_classes must be in [2, 8]");
  if (min_objects < 0 || max_objects < min_objects) fail("object count range is invalid");
  if (min_box_side < 1) fail("min_box_side must be >= 1");
  if (min_object_size < static_cast<float>(min_box_side) || max_object_size < min_object_size)
    fail("object size range is invalid");
  if (max_object_size > static_cast<float>(image_size)) fail("max_object_size exceeds image_size");
  if (noise < 0.0f || noise > 0.5f) fail("noise must be in [0, 0.5]");
  if (max_overlap_iou < 0.0f || max_overlap_iou > 1.0f) fail("max_overlap_iou must be in [0, 1]");
  if (n_train < 0 || n_val < 0) fail("split sizes must be >= 0");
}

namespace {

// Pixel coverage of a shape (pixel centers tested) and its tight bounds.
struct Raster {
  std::vector<int> pixels;
  Box bounds;
};

Raster rasterize(const ShapeGeometry& g, int size) {
  Raster r;
  const float h = 0.5f * g.size;
  const int x0 = std::max(0, static_cast<int>(std::floor(g.cx - h)) - 1);
  const int x1 = std::min(size - 1, static_cast<int>(std::ceil(g.cx + h)) + 1);
  const int y0 = std::max(0, static_cast<int>(std::floor(g.cy - h)) - 1);
  const int y1 = std::min(size - 1, static_cast<int>(std::ceil(g.cy + h)) + 1);
  int bx1 = size, by1 = size, bx2 = -1, by2 = -1;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (!shape_contains(g, x + 0.5f, y + 0.5f)) continue;
      r.pixels.push_back(y * size + x);
      bx1 = std::min(bx1, x);
      by1 = std::min(by1, y);
      bx2 = std::max(bx2, x);
      by2 = std::max(by2, y);
    }
  }
  if (!r.pixels.empty()) {
    r.bounds = Box{static_cast<float>(bx1), static_cast<float>(by1), static_cast<float>(bx2 + 1),
                   static_cast<float>(by2 + 1)};
  }
  return r;
}

}  // namespace

DetectionSample generate_sample(const DatasetConfig& config, std::int64_t index) {
  if (index < 0) throw std::invalid_argument("generate_sample: index must be >= 0");
  const int size = config.image_size;
  const auto uindex = static_cast<std::uint64_t>(index);
  CounterRng layout(config.seed, uindex, kLayout);
  CounterRng color(config.seed, uindex, kColor);
  CounterRng noise(config.seed, uindex, kNoise);

  DetectionSample sample;
  sample.index = index;
  const int wanted = layout.uniform_int(config.min_objects, config.max_objects);

  std::vector<Raster> rasters;
  for (int n = 0; n < wanted; ++n) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      ShapeGeometry g;
      g.kind = static_cast<ShapeKind>(layout.uniform_int(0, config.num_classes - 1));
      g.size = static_cast<float>(layout.uniform(config.min_object_size, config.max_object_size));
      const float h = 0.5f * g.size;
      g.cx = static_cast<float>(layout.uniform(h, size - h));
      g.cy = static_cast<float>(layout.uniform(h, size - h));
      Raster r = rasterize(g, size);
      if (r.pixels.empty() || r.bounds.width() < config.min_box_side || r.bounds.height() < config.min_box_side)
        continue;
      const bool overlaps = std::any_of(sample.objects.begin(), sample.objects.end(), [&](const DetectionObject& o) {
        return iou(o.box, r.bounds) > config.max_overlap_iou;
      });
      if (overlaps) continue;
      sample.objects.push_back(DetectionObject{r.bounds, static_cast<int>(g.kind), g});
      rasters.push_back(std::move(r));
      break;
    }
  }

  const std::size_t plane = static_cast<std::size_t>(size) * size;
  std::vector<float> img(3 * plane);
  for (int c = 0; c < 3; ++c) {
    const float bg = static_cast<float>(color.uniform(0.0, 0.35));
    std::fill(img.begin() + c * plane, img.begin() + (c + 1) * plane, bg);
  }
  for (const Raster& r : rasters) {
    float rgb[3];
    for (float& v : rgb) v = static_cast<float>(color.uniform(0.45, 1.0));
    for (int c = 0; c < 3; ++c)
      for (int p : r.pixels) img[c * plane + p] = rgb[c];
  }
  for (float& v : img) {
    v += static_cast<float>(noise.uniform(-config.noise, config.noise));
    v = std::clamp(v, 0.0f, 1.0f);
  }
  sample.image = Tensor({3, size, size}, std::move(img));
  return sample;
}

std::vector<DetectionSample> generate_split(const DatasetConfig& config, Split split) {
  config.validate();
  const std::int64_t first = split == Split::kTrain ? 0 : config.n_train;
  const std::int64_t count = split == Split::kTrain ? config.n_train : config.n_val;
  std::vector<DetectionSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(generate_sample(config, first + i));
  return out;
}

Tensor stack_images(const std::vector<DetectionSample>& samples, std::size_t first, std::size_t count) {
  if (first + count > samples.size()) throw std::out_of_range("stack_images: range exceeds sample count");
  if (count == 0) throw std::invalid_argument("stack_images: empty batch");
  const Shape& s = samples[first].image.shape();
  std::vector<float> data;
  data.reserve(count * samples[first].image.numel());
  for (std::size_t i = first; i < first + count; ++i) {
    if (samples[i].image.shape() != s) throw std::invalid_argument("stack_images: image shapes differ");
    const auto d = samples[i].image.data();
    data.insert(data.end(), d.begin(), d.end());
  }
  return Tensor({static_cast<int>(count), s[0], s[1], s[2]}, std::move(data));
}

namespace {

void put_u32(std::ofstream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

void export_samples(const std::vector<DetectionSample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / "images.bin", std::ios::binary);
  std::ofstream ann(dir / "annotations.txt");
  if (!bin || !ann) throw std::runtime_error("export_samples: cannot write to " + dir.string());
  const Shape s = samples.empty() ? Shape{3, 0, 0} : samples.front().image.shape();
  put_u32(bin, static_cast<std::uint32_t>(samples.size()));
  for (int d : s) put_u32(bin, static_cast<std::uint32_t>(d));
  for (const auto& smp : samples) {
    for (float v : smp.image.data()) put_u32(bin, std::bit_cast<std::uint32_t>(v));
    for (const auto& o : smp.objects) {
      ann << smp.index << ' ' << o.class_id << ' ' << o.box.x1 << ' ' << o.box.y1 << ' ' << o.box.x2 << ' '
          << o.box.y2 << '\n';
    }
  }
}

}  // namespace dprune::data

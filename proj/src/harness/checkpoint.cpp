#include "dprune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dprune::harness {

namespace {

constexpr char kMagic[4] = {'L', 'D', 'T', 'C'};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  std::size_t pos() const { return pos_; }

  void need(std::size_t n) const {
    if (n > b_.size() - pos_) throw CheckpointError("unexpected end at byte " + std::to_string(b_.size()));
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  int i32() { return static_cast<int>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(b_.begin() + pos_, b_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  // Element count for a following array of `elem`-byte items.
  std::size_t count(std::size_t elem) {
    const std::uint64_t n = u64();
    if (elem > 0) need(n > (b_.size() - pos_) / elem ? b_.size() : n * elem);
    return static_cast<std::size_t>(n);
  }
  [[noreturn]] void corrupt(std::size_t at, const std::string& what) const {
    throw CheckpointError("corrupt checkpoint at byte " + std::to_string(at) + ": " + what);
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

void write_graph(Writer& w, const det::ModelGraph& g) {
  w.u64(g.convs.size());
  for (const auto& c : g.convs) {
    w.str(c.name);
    w.i32(c.in_channels);
    w.i32(c.out_channels);
    w.i32(c.kernel);
    w.i32(c.stride);
  }
  w.u64(g.layers.size());
  for (const auto& l : g.layers) {
    w.str(l.name);
    w.i32(static_cast<int>(l.kind));
    w.u64(l.inputs.size());
    for (int in : l.inputs) w.i32(in);
    w.i32(l.conv);
    w.i32(l.channels);
    w.i32(l.stride);
  }
  w.u64(g.scales.size());
  for (const auto& s : g.scales) {
    w.i32(s.neck_layer);
    w.i32(s.cls_layer);
    w.i32(s.box_layer);
    w.i32(s.stride);
  }
  w.i32(g.num_classes);
}

det::ModelGraph read_graph(Reader& r) {
  det::ModelGraph g;
  const std::size_t start = r.pos();
  g.convs.resize(r.count(8 + 16));
  for (auto& c : g.convs) {
    c.name = r.str();
    c.in_channels = r.i32();
    c.out_channels = r.i32();
    c.kernel = r.i32();
    c.stride = r.i32();
  }
  g.layers.resize(r.count(8 + 4 + 8 + 12));
  for (auto& l : g.layers) {
    l.name = r.str();
    const std::size_t at = r.pos();
    const int kind = r.i32();
    if (kind < 0 || kind > static_cast<int>(det::LayerKind::kAdd)) r.corrupt(at, "bad layer kind");
    l.kind = static_cast<det::LayerKind>(kind);
    l.inputs.resize(r.count(4));
    for (int& in : l.inputs) in = r.i32();
    l.conv = r.i32();
    l.channels = r.i32();
    l.stride = r.i32();
  }
  g.scales.resize(r.count(16));
  for (auto& s : g.scales) {
    s.neck_layer = r.i32();
    s.cls_layer = r.i32();
    s.box_layer = r.i32();
    s.stride = r.i32();
  }
  g.num_classes = r.i32();
  try {
    g.validate();
  } catch (const std::exception& e) {
    r.corrupt(start, std::string("invalid graph: ") + e.what());
  }
  return g;
}

void write_tensor(Writer& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.u64(t.numel());
  for (float v : t.data()) w.f32(v);
}

Tensor read_tensor(Reader& r, const std::string& expect_name, const Shape& expect_shape) {
  const std::size_t at = r.pos();
  const std::string name = r.str();
  if (name != expect_name) r.corrupt(at, "expected tensor '" + expect_name + "', found '" + name + "'");
  const std::uint32_t rank = r.u32();
  if (rank > 8) r.corrupt(at, "tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<int>(r.u32());
  if (shape != expect_shape) r.corrupt(at, "tensor '" + name + "' has shape " + shape_str(shape));
  const std::size_t n = r.count(4);
  if (n != shape_numel(shape)) r.corrupt(at, "tensor '" + name + "' payload size");
  std::vector<float> data(n);
  for (auto& v : data) v = r.f32();
  return Tensor(std::move(shape), std::move(data));
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.numel() == 0 || std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  det::check_parameters(ck.model.graph, ck.model.params);
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.str(render_config(ck.config));
  write_graph(w, ck.model.graph);
  const auto& g = ck.model.graph;
  w.u64(2 * g.convs.size());
  for (std::size_t k = 0; k < g.convs.size(); ++k) {
    write_tensor(w, g.convs[k].name + ".weight", ck.model.params.weights[k]);
    write_tensor(w, g.convs[k].name + ".bias", ck.model.params.biases[k]);
  }
  w.i32(ck.epoch);
  w.u8(ck.ldt_trained ? 1 : 0);
  w.u64(ck.optimizer.momentum.size());
  for (const auto& m : ck.optimizer.momentum) {
    w.u64(m.size());
    for (float v : m) w.f32(v);
  }
  w.u64(ck.prune_history.size());
  for (const auto& mask : ck.prune_history) {
    w.u64(mask.keep.size());
    for (const auto& k : mask.keep) {
      w.u64(k.size());
      for (char c : k) w.u8(static_cast<std::uint8_t>(c));
    }
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  for (std::size_t i = 0; i < 4 && i < bytes.size(); ++i)
    if (bytes[i] != static_cast<std::uint8_t>(kMagic[i])) throw CheckpointError("not a checkpoint");
  Reader r(bytes);
  r.need(4);
  for (int i = 0; i < 4; ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported version " + std::to_string(version));
  Checkpoint ck;
  std::size_t at = r.pos();
  const std::string cfg = r.str();
  try {
    ck.config = parse_config(cfg);
  } catch (const ConfigError& e) {
    r.corrupt(at, e.what());
  }
  ck.model.graph = read_graph(r);
  const auto& g = ck.model.graph;
  at = r.pos();
  if (r.count(0) != 2 * g.convs.size()) r.corrupt(at, "parameter tensor count does not match the graph");
  for (const auto& c : g.convs) {
    ck.model.params.weights.push_back(
        read_tensor(r, c.name + ".weight", {c.out_channels, c.in_channels, c.kernel, c.kernel}));
    ck.model.params.biases.push_back(read_tensor(r, c.name + ".bias", {c.out_channels}));
  }
  ck.epoch = r.i32();
  at = r.pos();
  const std::uint8_t flag = r.u8();
  if (flag > 1) r.corrupt(at, "bad training flag");
  ck.ldt_trained = flag == 1;
  at = r.pos();
  ck.optimizer.momentum.resize(r.count(8));
  if (!ck.optimizer.momentum.empty() && ck.optimizer.momentum.size() != 2 * g.convs.size())
    r.corrupt(at, "optimizer state does not match the graph");
  for (std::size_t i = 0; i < ck.optimizer.momentum.size(); ++i) {
    at = r.pos();
    const auto& expect = i < g.convs.size() ? ck.model.params.weights[i] : ck.model.params.biases[i - g.convs.size()];
    auto& m = ck.optimizer.momentum[i];
    m.resize(r.count(4));
    if (m.size() != expect.numel()) r.corrupt(at, "momentum buffer size");
    for (auto& v : m) v = r.f32();
  }
  ck.prune_history.resize(r.count(8));
  for (auto& mask : ck.prune_history) {
    mask.keep.resize(r.count(8));
    for (auto& k : mask.keep) {
      k.resize(r.count(1));
      for (auto& c : k) {
        at = r.pos();
        const std::uint8_t v = r.u8();
        if (v > 1) r.corrupt(at, "bad keep flag");
        c = static_cast<char>(v);
      }
    }
  }
  if (r.pos() != bytes.size()) r.corrupt(r.pos(), "trailing bytes");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  if (!(a.config == b.config) || !(a.model.graph == b.model.graph) || a.epoch != b.epoch ||
      a.ldt_trained != b.ldt_trained || !(a.prune_history == b.prune_history))
    return false;
  if (a.optimizer.momentum.size() != b.optimizer.momentum.size()) return false;
  for (std::size_t i = 0; i < a.optimizer.momentum.size(); ++i) {
    const auto& x = a.optimizer.momentum[i];
    const auto& y = b.optimizer.momentum[i];
    if (x.size() != y.size() || (!x.empty() && std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0))
      return false;
  }
  const auto& pa = a.model.params;
  const auto& pb = b.model.params;
  if (pa.weights.size() != pb.weights.size() || pa.biases.size() != pb.biases.size()) return false;
  for (std::size_t i = 0; i < pa.weights.size(); ++i)
    if (!bits_equal(pa.weights[i], pb.weights[i])) return false;
  for (std::size_t i = 0; i < pa.biases.size(); ++i)
    if (!bits_equal(pa.biases[i], pb.biases[i])) return false;
  return true;
}

}  // namespace dprune::harness

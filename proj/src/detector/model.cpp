#include "dprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dprune/ops.hpp"
#include "dprune/synthdet.hpp"

namespace dprune::det {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kInput: return "input";
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kPool: return "pool";
    case LayerKind::kUpsample: return "upsample";
    case LayerKind::kAdd: return "add";
  }
  return "unknown";
}

void ArchConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("arch config: " + m); };
  if (backbone_widths.empty()) fail("backbone_widths must not be empty");
  for (int w : backbone_widths)
    if (w <= 0) fail("backbone widths must be > 0");
  if (neck_channels <= 0) fail("neck_channels must be > 0");
  if (num_scales < 1 || num_scales > static_cast<int>(backbone_widths.size()))
    fail("num_scales must be in [1, number of backbone stages]");
  if (head_convs < 0) fail("head_convs must be >= 0");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (in_channels <= 0) fail("in_channels must be > 0");
}

namespace {

class GraphBuilder {
 public:
  ModelGraph g;

  int input(int channels) {
    g.layers.push_back(Layer{"input", LayerKind::kInput, {}, -1, channels, 1});
    return 0;
  }
  int conv_spec(const std::string& name, int cin, int cout, int k, int stride) {
    g.convs.push_back(ConvSpec{name, cin, cout, k, stride});
    return static_cast<int>(g.convs.size()) - 1;
  }
  int apply_conv(const std::string& name, int spec, int in) {
    const ConvSpec& c = g.convs[spec];
    return push(Layer{name, LayerKind::kConv, {in}, spec, c.out_channels, stride(in) * c.stride});
  }
  int conv(const std::string& name, int in, int cout, int k, int stride = 1) {
    return apply_conv(name, conv_spec(name, channels(in), cout, k, stride), in);
  }
  int relu(const std::string& name, int in) {
    return push(Layer{name, LayerKind::kRelu, {in}, -1, channels(in), stride(in)});
  }
  int pool(const std::string& name, int in) {
    return push(Layer{name, LayerKind::kPool, {in}, -1, channels(in), stride(in) * 2});
  }
  int upsample(const std::string& name, int in) {
    return push(Layer{name, LayerKind::kUpsample, {in}, -1, channels(in), stride(in) / 2});
  }
  int add(const std::string& name, int a, int b) {
    return push(Layer{name, LayerKind::kAdd, {a, b}, -1, channels(a), stride(a)});
  }

 private:
  int channels(int layer) const { return g.layers[layer].channels; }
  int stride(int layer) const { return g.layers[layer].stride; }
  int push(Layer l) {
    g.layers.push_back(std::move(l));
    return static_cast<int>(g.layers.size()) - 1;
  }
};

}  // namespace

ModelGraph build_graph(const ArchConfig& arch) {
  arch.validate();
  GraphBuilder b;
  int x = b.input(arch.in_channels);
  std::vector<int> stage_out;
  for (std::size_t i = 0; i < arch.backbone_widths.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i);
    x = b.conv(p + ".conv", x, arch.backbone_widths[i], 3, i == 0 ? 2 : 1);
    x = b.relu(p + ".relu", x);
    x = b.pool(p + ".pool", x);
    stage_out.push_back(x);
  }

  const int num_stages = static_cast<int>(stage_out.size());
  const int first = num_stages - arch.num_scales;
  std::vector<int> merged(arch.num_scales);
  for (int s = arch.num_scales - 1; s >= 0; --s) {
    const std::string p = "neck." + std::to_string(s);
    const int lateral = b.conv(p + ".lateral", stage_out[first + s], arch.neck_channels, 1);
    if (s == arch.num_scales - 1) {
      merged[s] = lateral;
    } else {
      const int up = b.upsample(p + ".upsample", merged[s + 1]);
      merged[s] = b.add(p + ".merge", lateral, up);
    }
  }

  std::vector<int> head_specs;
  for (int k = 0; k < arch.head_convs; ++k) {
    const std::string n = "head.conv" + std::to_string(k);
    head_specs.push_back(b.conv_spec(n, arch.neck_channels, arch.neck_channels, 3, 1));
  }
  const int cls_spec = b.conv_spec("head.cls", arch.neck_channels, arch.num_classes, 1, 1);
  const int box_spec = b.conv_spec("head.box", arch.neck_channels, 4, 1, 1);

  for (int s = 0; s < arch.num_scales; ++s) {
    const std::string p = "neck." + std::to_string(s);
    int y = b.conv(p + ".smooth", merged[s], arch.neck_channels, 3);
    y = b.relu(p + ".out", y);
    ScaleOutput so;
    so.neck_layer = y;
    so.stride = b.g.layers[y].stride;
    int h = y;
    for (int k = 0; k < arch.head_convs; ++k) {
      const std::string n = "head.conv" + std::to_string(k) + "@" + std::to_string(s);
      h = b.apply_conv(n, head_specs[k], h);
      h = b.relu("head.relu" + std::to_string(k) + "@" + std::to_string(s), h);
    }
    so.cls_layer = b.apply_conv("head.cls@" + std::to_string(s), cls_spec, h);
    so.box_layer = b.apply_conv("head.box@" + std::to_string(s), box_spec, h);
    b.g.scales.push_back(so);
  }
  b.g.num_classes = arch.num_classes;
  b.g.validate();
  return b.g;
}

void ModelGraph::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model graph: " + m); };
  if (layers.empty() || layers[0].kind != LayerKind::kInput) fail("layer 0 must be the input");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    for (int in : l.inputs)
      if (in < 0 || in >= static_cast<int>(i)) fail("layer '" + l.name + "' consumes a later or unknown layer");
    auto in_ch = [&](int k) { return layers[l.inputs[k]].channels; };
    switch (l.kind) {
      case LayerKind::kInput:
        if (i != 0) fail("only layer 0 may be an input");
        break;
      case LayerKind::kConv: {
        if (l.inputs.size() != 1 || l.conv < 0 || l.conv >= static_cast<int>(convs.size()))
          fail("conv layer '" + l.name + "' is malformed");
        const ConvSpec& c = convs[l.conv];
        if (c.in_channels != in_ch(0))
          fail("conv '" + l.name + "' expects " + std::to_string(c.in_channels) + " channels, producer has " +
               std::to_string(in_ch(0)));
        if (c.out_channels != l.channels) fail("conv '" + l.name + "' output channel count mismatch");
        if (c.in_channels <= 0 || c.out_channels <= 0) fail("conv '" + l.name + "' has an empty channel set");
        break;
      }
      case LayerKind::kRelu:
      case LayerKind::kPool:
      case LayerKind::kUpsample:
        if (l.inputs.size() != 1 || l.channels != in_ch(0)) fail("layer '" + l.name + "' channel mismatch");
        break;
      case LayerKind::kAdd:
        if (l.inputs.size() != 2 || in_ch(0) != in_ch(1) || l.channels != in_ch(0))
          fail("add '" + l.name + "' joins tensors with different channel counts");
        break;
    }
  }
  for (const ScaleOutput& s : scales) {
    for (int id : {s.neck_layer, s.cls_layer, s.box_layer})
      if (id < 0 || id >= static_cast<int>(layers.size())) fail("scale output refers to an unknown layer");
    if (layers[s.neck_layer].channels != layers[scales[0].neck_layer].channels)
      fail("neck outputs must share one channel count");
  }
}

int ModelGraph::find_conv(const std::string& name) const {
  for (std::size_t i = 0; i < convs.size(); ++i)
    if (convs[i].name == name) return static_cast<int>(i);
  return -1;
}

int ModelGraph::max_stride() const {
  int m = 1;
  for (const Layer& l : layers) m = std::max(m, l.stride);
  return m;
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (const ConvSpec& c : convs)
    n += static_cast<std::size_t>(c.out_channels) * (static_cast<std::size_t>(c.in_channels) * c.kernel * c.kernel + 1);
  return n;
}

std::size_t ModelGraph::macs(int height, int width) const {
  std::size_t n = 0;
  for (const Layer& l : layers) {
    if (l.kind != LayerKind::kConv) continue;
    const ConvSpec& c = convs[l.conv];
    const std::size_t cells = static_cast<std::size_t>(height / l.stride) * static_cast<std::size_t>(width / l.stride);
    n += cells * c.out_channels * c.in_channels * c.kernel * c.kernel;
  }
  return n;
}

Parameters<float> init_parameters(const ModelGraph& graph, std::uint64_t seed) {
  Parameters<float> p;
  for (std::size_t i = 0; i < graph.convs.size(); ++i) {
    const ConvSpec& c = graph.convs[i];
    const int fan_in = c.in_channels * c.kernel * c.kernel;
    const double bound = std::sqrt(6.0 / fan_in);
    data::CounterRng rng(seed, i, 0x1417);
    std::vector<float> w(static_cast<std::size_t>(c.out_channels) * fan_in);
    for (float& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
    p.weights.emplace_back(Shape{c.out_channels, c.in_channels, c.kernel, c.kernel}, std::move(w));
    const float b0 = c.name == "head.cls" ? static_cast<float>(-std::log(99.0)) : 0.0f;
    p.biases.push_back(Tensor::full({c.out_channels}, b0));
  }
  return p;
}

void check_parameters(const ModelGraph& graph, const Parameters<float>& params) {
  if (params.weights.size() != graph.convs.size() || params.biases.size() != graph.convs.size())
    throw std::invalid_argument("parameters: expected " + std::to_string(graph.convs.size()) + " convs");
  for (std::size_t i = 0; i < graph.convs.size(); ++i) {
    const ConvSpec& c = graph.convs[i];
    if (params.weights[i].shape() != Shape{c.out_channels, c.in_channels, c.kernel, c.kernel} ||
        params.biases[i].shape() != Shape{c.out_channels})
      throw std::invalid_argument("parameters: shape mismatch for conv '" + c.name + "'");
  }
}

Model build_model(const ArchConfig& arch) {
  Model m;
  m.graph = build_graph(arch);
  m.params = init_parameters(m.graph, arch.seed);
  return m;
}

template <typename T>
ForwardResult<T> forward(const ModelGraph& graph, const Parameters<T>& params, const BasicTensor<T>& images,
                         const LayerHook<T>& hook) {
  if (images.rank() != 4 || images.dim(1) != graph.layers[0].channels)
    throw std::invalid_argument("forward: images must be [N," + std::to_string(graph.layers[0].channels) +
                                ",H,W], got " + shape_str(images.shape()));
  const int ms = graph.max_stride();
  if (images.dim(2) % ms != 0 || images.dim(3) % ms != 0)
    throw std::invalid_argument("forward: image size " + shape_str(images.shape()) +
                                " is not divisible by the largest stride " + std::to_string(ms));
  if (params.weights.size() != graph.convs.size()) throw std::invalid_argument("forward: parameter count mismatch");

  ForwardResult<T> r;
  r.layers.resize(graph.layers.size());
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const Layer& l = graph.layers[i];
    BasicTensor<T> out;
    switch (l.kind) {
      case LayerKind::kInput: out = images; break;
      case LayerKind::kConv: {
        const ConvSpec& c = graph.convs[l.conv];
        out = conv2d(r.layers[l.inputs[0]], params.weights[l.conv], params.biases[l.conv],
                     Conv2dOptions{c.stride, c.kernel / 2});
        break;
      }
      case LayerKind::kRelu: out = relu(r.layers[l.inputs[0]]); break;
      case LayerKind::kPool: out = max_pool2(r.layers[l.inputs[0]]); break;
      case LayerKind::kUpsample: out = upsample2(r.layers[l.inputs[0]]); break;
      case LayerKind::kAdd: out = add(r.layers[l.inputs[0]], r.layers[l.inputs[1]]); break;
    }
    if (hook) out = hook(static_cast<int>(i), out);
    r.layers[i] = std::move(out);
  }
  for (const ScaleOutput& s : graph.scales) {
    r.neck.push_back(r.layers[s.neck_layer]);
    r.cls.push_back(r.layers[s.cls_layer]);
    r.box.push_back(r.layers[s.box_layer]);
  }
  return r;
}

template ForwardResult<float> forward<float>(const ModelGraph&, const Parameters<float>&, const Tensor&,
                                             const LayerHook<float>&);
template ForwardResult<double> forward<double>(const ModelGraph&, const Parameters<double>&, const TensorD&,
                                               const LayerHook<double>&);

}  // namespace dprune::det

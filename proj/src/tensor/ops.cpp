#include "dprune/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <limits>
#include <sstream>

namespace dprune {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRow = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRow = Eigen::Map<const RowMat<T>>;

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

struct ConvGeom {
  int n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  int k() const { return cin * kh * kw; }
  int p() const { return n * ho * wo; }
};

template <typename T>
void im2col(const T* in, const ConvGeom& g, T* cols) {
  const int plane = g.ho * g.wo;
  const int p_total = g.p();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = cols + static_cast<std::size_t>((ci * g.kh + ky) * g.kw + kx) * p_total;
        for (int n = 0; n < g.n; ++n) {
          const T* src = in + (static_cast<std::size_t>(n) * g.cin + ci) * g.h * g.w;
          T* dst = row + n * plane;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            T* drow = dst + oy * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(drow, drow + g.wo, T(0));
              continue;
            }
            const T* srow = src + iy * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* in_grad) {
  const int plane = g.ho * g.wo;
  const int p_total = g.p();
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + static_cast<std::size_t>((ci * g.kh + ky) * g.kw + kx) * p_total;
        for (int n = 0; n < g.n; ++n) {
          T* dst = in_grad + (static_cast<std::size_t>(n) * g.cin + ci) * g.h * g.w;
          const T* src = row + n * plane;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            T* drow = dst + iy * g.w;
            const T* srow = src + oy * g.wo;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dOptions opts) {
  require(input.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be [Cout,Cin,kH,kW], got " + shape_str(weight.shape()));
  require(input.dim(1) == weight.dim(1), "conv2d: input has " + std::to_string(input.dim(1)) +
                                             " channels but weight expects " + std::to_string(weight.dim(1)));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
          "conv2d: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(weight.dim(0)) +
              " output channels");
  require(weight.dim(2) % 2 == 1 && weight.dim(3) % 2 == 1, "conv2d: kernel sizes must be odd");
  require(opts.stride >= 1 && opts.pad >= 0, "conv2d: stride must be >= 1 and pad >= 0");

  ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
             weight.dim(3), opts.stride, opts.pad, 0, 0};
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw,
          "conv2d: kernel larger than padded input " + shape_str(input.shape()));
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const int k = g.k();
  const int p = g.p();
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(k) * p);
  im2col(input.data().data(), g, cols->data());

  RowMat<T> out_mat(g.cout, p);
  if (k > 0 && p > 0) {
    out_mat.noalias() = CMapRow<T>(weight.data().data(), g.cout, k) * CMapRow<T>(cols->data(), k, p);
  } else {
    out_mat.setZero();
  }

  const int plane = g.ho * g.wo;
  std::vector<T> out(static_cast<std::size_t>(g.n) * g.cout * plane);
  const auto b = bias.data();
  for (int n = 0; n < g.n; ++n) {
    for (int co = 0; co < g.cout; ++co) {
      const T* src = out_mat.data() + static_cast<std::size_t>(co) * p + n * plane;
      T* dst = out.data() + (static_cast<std::size_t>(n) * g.cout + co) * plane;
      for (int i = 0; i < plane; ++i) dst[i] = src[i] + b[co];
    }
  }

  auto backward = [g, cols, input, weight](std::span<const T> gout, std::span<std::span<T>> gin) {
    const int k = g.k();
    const int p = g.p();
    const int plane = g.ho * g.wo;
    RowMat<T> gmat(g.cout, p);
    for (int n = 0; n < g.n; ++n) {
      for (int co = 0; co < g.cout; ++co) {
        const T* src = gout.data() + (static_cast<std::size_t>(n) * g.cout + co) * plane;
        std::copy(src, src + plane, gmat.data() + static_cast<std::size_t>(co) * p + n * plane);
      }
    }
    if (!gin[1].empty()) {
      MapRow<T>(gin[1].data(), g.cout, k).noalias() += gmat * CMapRow<T>(cols->data(), k, p).transpose();
    }
    if (!gin[2].empty()) {
      for (int co = 0; co < g.cout; ++co) gin[2][co] += gmat.row(co).sum();
    }
    if (!gin[0].empty()) {
      RowMat<T> dcols(k, p);
      dcols.noalias() = CMapRow<T>(weight.data().data(), g.cout, k).transpose() * gmat;
      col2im_add(dcols.data(), g, gin[0].data());
    }
  };
  return make_result<T>({input, weight, bias}, {g.n, g.cout, g.ho, g.wo}, std::move(out), backward);
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] > T(0) ? xs[i] : T(0);
  return make_result<T>({x}, x.shape(), std::move(out), [x](std::span<const T> g, std::span<std::span<T>> gin) {
    const auto xs = x.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xs[i] > T(0)) gin[0][i] += g[i];
  });
}

template <typename T>
BasicTensor<T> max_pool2(const BasicTensor<T>& x) {
  require(x.rank() >= 2, "max_pool2: need at least 2 dims");
  const int h = x.dim(-2), w = x.dim(-1);
  require(h >= 2 && w >= 2, "max_pool2: spatial dims must be >= 2, got " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  const std::size_t planes = x.numel() / (static_cast<std::size_t>(h) * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = ho;
  shape[shape.size() - 1] = wo;
  std::vector<T> out(planes * ho * wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto xs = x.data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const std::size_t base = pl * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        std::size_t best = base + static_cast<std::size_t>(2 * oy) * w + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t c : cand)
          if (xs[c] > xs[best]) best = c;
        const std::size_t o = (pl * ho + oy) * wo + ox;
        out[o] = xs[best];
        (*argmax)[o] = best;
      }
    }
  }
  return make_result<T>({x}, std::move(shape), std::move(out),
                        [argmax](std::span<const T> g, std::span<std::span<T>> gin) {
                          for (std::size_t i = 0; i < g.size(); ++i) gin[0][(*argmax)[i]] += g[i];
                        });
}

template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& x) {
  require(x.rank() >= 2, "upsample2: need at least 2 dims");
  const int h = x.dim(-2), w = x.dim(-1);
  const std::size_t planes = h * w == 0 ? 0 : x.numel() / (static_cast<std::size_t>(h) * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = 2 * h;
  shape[shape.size() - 1] = 2 * w;
  std::vector<T> out(planes * 4 * h * w);
  const auto xs = x.data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(pl * 2 * h + y) * 2 * w + xx] = xs[(pl * h + y / 2) * w + xx / 2];
  return make_result<T>({x}, std::move(shape), std::move(out),
                        [planes, h, w](std::span<const T> g, std::span<std::span<T>> gin) {
                          for (std::size_t pl = 0; pl < planes; ++pl)
                            for (int y = 0; y < 2 * h; ++y)
                              for (int xx = 0; xx < 2 * w; ++xx)
                                gin[0][(pl * h + y / 2) * w + xx / 2] += g[(pl * 2 * h + y) * 2 * w + xx];
                        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  const auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  return make_result<T>({a, b}, a.shape(), std::move(out), [](std::span<const T> g, std::span<std::span<T>> gin) {
    for (int k = 0; k < 2; ++k)
      if (!gin[k].empty())
        for (std::size_t i = 0; i < g.size(); ++i) gin[k][i] += g[i];
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  const auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  return make_result<T>({a, b}, a.shape(), std::move(out), [](std::span<const T> g, std::span<std::span<T>> gin) {
    if (!gin[0].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    if (!gin[1].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  const auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  return make_result<T>({a, b}, a.shape(), std::move(out),
                        [a, b](std::span<const T> g, std::span<std::span<T>> gin) {
                          const auto as = a.data(), bs = b.data();
                          if (!gin[0].empty())
                            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * bs[i];
                          if (!gin[1].empty())
                            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * as[i];
                        });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * factor;
  return make_result<T>({x}, x.shape(), std::move(out),
                        [factor](std::span<const T> g, std::span<std::span<T>> gin) {
                          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * factor;
                        });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] + value;
  return make_result<T>({x}, x.shape(), std::move(out), [](std::span<const T> g, std::span<std::span<T>> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return make_result<T>({x}, {}, {static_cast<T>(acc)}, [](std::span<const T> g, std::span<std::span<T>> gin) {
    for (auto& v : gin[0]) v += g[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  require(x.numel() > 0, "mean: empty tensor");
  const T inv = T(1) / static_cast<T>(x.numel());
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return make_result<T>({x}, {}, {static_cast<T>(acc / x.numel())},
                        [inv](std::span<const T> g, std::span<std::span<T>> gin) {
                          for (auto& v : gin[0]) v += g[0] * inv;
                        });
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
  if (k > 0) MapRow<T>(out.data(), m, n).noalias() = CMapRow<T>(a.data().data(), m, k) * CMapRow<T>(b.data().data(), k, n);
  return make_result<T>({a, b}, {m, n}, std::move(out),
                        [a, b, m, k, n](std::span<const T> g, std::span<std::span<T>> gin) {
                          CMapRow<T> gm(g.data(), m, n);
                          if (!gin[0].empty())
                            MapRow<T>(gin[0].data(), m, k).noalias() += gm * CMapRow<T>(b.data().data(), k, n).transpose();
                          if (!gin[1].empty())
                            MapRow<T>(gin[1].data(), k, n).noalias() += CMapRow<T>(a.data().data(), m, k).transpose() * gm;
                        });
}

template <typename T>
void masked_max_kernel(const T* features, int channels, int height, int width, const std::vector<int>& cells,
                       T* out_values, int* out_argmax) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c) {
    const T* f = features + c * plane;
    int best = cells.front();
    for (int cell : cells)
      if (f[cell] > f[best]) best = cell;
    out_values[c] = f[best];
    out_argmax[c] = best;
  }
}

template <typename T>
BasicTensor<T> masked_spatial_max(const BasicTensor<T>& features, const BasicTensor<T>& mask) {
  require(features.rank() == 3, "masked_spatial_max: features must be [C,H,W], got " + shape_str(features.shape()));
  require(mask.rank() == 2 && mask.dim(0) == features.dim(1) && mask.dim(1) == features.dim(2),
          "masked_spatial_max: mask " + shape_str(mask.shape()) + " does not match features " +
              shape_str(features.shape()));
  const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
  std::vector<int> cells;
  const auto ms = mask.data();
  for (int i = 0; i < h * w; ++i)
    if (ms[i] != T(0)) cells.push_back(i);
  require(!cells.empty(), "masked_spatial_max: mask selects no cells");
  std::vector<T> out(c);
  auto argmax = std::make_shared<std::vector<int>>(c);
  masked_max_kernel(features.data().data(), c, h, w, cells, out.data(), argmax->data());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  return make_result<T>({features, mask}, {c}, std::move(out),
                        [argmax, plane](std::span<const T> g, std::span<std::span<T>> gin) {
                          if (gin[0].empty()) return;
                          for (std::size_t ch = 0; ch < g.size(); ++ch) gin[0][ch * plane + (*argmax)[ch]] += g[ch];
                        });
}

#define DPRUNE_INSTANTIATE_OPS(T)                                                                     \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                    Conv2dOptions);                                                   \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                             \
  template BasicTensor<T> max_pool2<T>(const BasicTensor<T>&);                                        \
  template BasicTensor<T> upsample2<T>(const BasicTensor<T>&);                                        \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                         \
  template BasicTensor<T> add_scalar<T>(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                              \
  template BasicTensor<T> mean<T>(const BasicTensor<T>&);                                             \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> masked_spatial_max<T>(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template void masked_max_kernel<T>(const T*, int, int, int, const std::vector<int>&, T*, int*);

DPRUNE_INSTANTIATE_OPS(float)
DPRUNE_INSTANTIATE_OPS(double)

}  // namespace dprune

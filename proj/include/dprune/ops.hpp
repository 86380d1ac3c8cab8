#pragma once

#include <vector>

#include "dprune/tape.hpp"
#include "dprune/tensor.hpp"

namespace dprune {

// Records `data` as the output of an op over `inputs` when any input is on a
// tape; otherwise returns a plain tensor and drops `backward`.
template <typename T>
BasicTensor<T> make_result(const std::vector<BasicTensor<T>>& inputs, Shape shape, std::vector<T> data,
                           typename Tape<T>::BackwardFn backward) {
  Tape<T>* tape = nullptr;
  for (const auto& in : inputs) {
    if (in.tape() == nullptr) continue;
    if (tape != nullptr && tape != in.tape()) {
      throw std::logic_error("tape: operation mixes tensors from different tapes");
    }
    tape = in.tape();
  }
  if (tape == nullptr) return BasicTensor<T>(std::move(shape), std::move(data));
  return tape->record(std::move(shape), std::move(data), inputs, std::move(backward));
}

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
};

// Cross-correlation of input[N,Cin,H,W] with weight[Cout,Cin,kH,kW] plus
// bias[Cout]. Output spatial size is (H + 2*pad - kH) / stride + 1.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dOptions opts = {});

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

// 2x2 max pooling with stride 2 over the last two dims; odd trailing
// rows/cols are dropped. Ties go to the first element in scan order.
template <typename T>
BasicTensor<T> max_pool2(const BasicTensor<T>& x);

// Nearest-neighbour x2 upsampling over the last two dims.
template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

// a[m,k] x b[k,n] -> [m,n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Per-channel maximum of features[C,H,W] over cells where mask[H,W] != 0.
// The gradient flows to the argmax cell; ties go to the lowest i*W+j.
template <typename T>
BasicTensor<T> masked_spatial_max(const BasicTensor<T>& features, const BasicTensor<T>& mask);

// Kernel shared with batched callers: per-channel max over the masked cells
// of a [C,H,W] block at `features`, writing values and flat argmax indices.
template <typename T>
void masked_max_kernel(const T* features, int channels, int height, int width, const std::vector<int>& cells,
                       T* out_values, int* out_argmax);

}  // namespace dprune

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "contseg/tensor.hpp"

namespace contseg {

// Reverse-mode tape over dense tensors.
//
// Operations execute eagerly and append one node each; backward() walks the
// node list in exact reverse construction order, so gradient accumulation for
// fan-out is correct by construction. A Graph and the tensors it produced are
// confined to one thread during forward/backward.
class Graph {
 public:
  // Cross-correlation with stride 1 and zero padding of k/2, so spatial
  // extents are preserved. input [N,C,spatial...], kernel [F,C,k...] with odd
  // extents, bias [F]; spatial rank 2 or 3.
  Tensor conv(const Tensor& input, const Tensor& kernel, const Tensor& bias);

  Tensor relu(const Tensor& x);

  // y = relu(x) / max(relu(x)), the max taken per sample (dim 0) over all
  // remaining dims; all-zero samples stay zero. The max is differentiated as
  // a function of the input; ties route the derivative to the first maximal
  // element in row-major order.
  Tensor normalized_relu(const Tensor& x);

  Tensor add(const Tensor& a, const Tensor& b);   // same shape
  Tensor mul(const Tensor& a, const Tensor& b);   // same shape, elementwise
  Tensor div(const Tensor& num, const Tensor& den);  // same shape, elementwise

  // Concatenation along dim 1 of [N,C,spatial...] tensors.
  Tensor concat_channels(const Tensor& a, const Tensor& b);

  // Stride-2, window-2 max pooling over the spatial dims of [N,C,spatial...];
  // requires even spatial extents. Ties keep the first maximal element in
  // row-major window order.
  Tensor max_pool(const Tensor& x);

  // Nearest-neighbour x2 upsampling of the spatial dims of [N,C,spatial...].
  Tensor upsample_nearest(const Tensor& x);

  Tensor sum(const Tensor& x);  // full reduction to a [1] scalar

  Tensor affine(const Tensor& x, double scale, double shift);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every tensor on
  // the gradient path. loss must be a scalar produced by this graph.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor output;
    std::function<void()> backprop;
  };

  Tensor record(const std::vector<Tensor>& inputs, Tensor output,
                std::function<void()> backprop);

  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::size_t> producer_;
};

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool pass = true;
};

// Relative error metric used by check_gradients: |a - n| scaled by the larger
// magnitude, floored so that finite-difference noise around zero gradients
// does not blow up the ratio.
double gradcheck_relative_error(double analytic, double numeric);

// Compares analytic gradients of a scalar forward function against central
// finite differences at up to samples_per_param random coordinates of each
// parameter. forward must rebuild its computation on every call and read the
// parameter tensors' current values.
GradCheckReport check_gradients(
    const std::function<Tensor(Graph&)>& forward,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double tolerance = 1e-4, int samples_per_param = 20, double step = 1e-5,
    std::uint64_t seed = 0);

}  // namespace contseg

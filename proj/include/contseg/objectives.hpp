#pragma once

#include "contseg/autodiff.hpp"
#include "contseg/tensor.hpp"

namespace contseg {

// Soft Dice loss over all voxels of the batch:
//   1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)
// Squared-denominator V-Net form; differentiable w.r.t. pred through the
// graph. Both inputs must share a shape and lie in [0, 1].
Tensor dice_loss(Graph& graph, const Tensor& pred, const Tensor& target,
                 double epsilon = 1e-5);

// Hard Dice score: binarize both masks at the threshold (strictly greater)
// and return 2|A∩B| / (|A|+|B|). Two empty masks score 1.0: a correct
// all-negative prediction counts as a success.
double dice_score(const Tensor& pred, const Tensor& target,
                  double threshold = 0.5);

}  // namespace contseg

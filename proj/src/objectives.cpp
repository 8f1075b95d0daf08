#include "contseg/objectives.hpp"

#include "contseg/errors.hpp"

namespace contseg {

namespace {

void require_unit_range(const Tensor& t, const char* what) {
  for (const double v : t.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DomainError(std::string(what) + ": values must lie in [0,1]");
    }
  }
}

}  // namespace

Tensor dice_loss(Graph& graph, const Tensor& pred, const Tensor& target,
                 double epsilon) {
  if (!pred.defined() || !target.defined()) {
    throw ContractError("dice_loss: undefined input");
  }
  if (pred.shape() != target.shape()) {
    throw ShapeError("dice_loss: shape mismatch " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  if (!(epsilon > 0.0)) throw ConfigError("dice_loss: epsilon must be > 0");
  require_unit_range(pred, "dice_loss pred");
  require_unit_range(target, "dice_loss target");

  const Tensor intersection = graph.sum(graph.mul(pred, target));
  const Tensor pred_sq = graph.sum(graph.mul(pred, pred));
  const Tensor target_sq = graph.sum(graph.mul(target, target));
  const Tensor numerator = graph.affine(intersection, 2.0, epsilon);
  const Tensor denominator = graph.affine(graph.add(pred_sq, target_sq), 1.0, epsilon);
  return graph.affine(graph.div(numerator, denominator), -1.0, 1.0);
}

double dice_score(const Tensor& pred, const Tensor& target, double threshold) {
  if (!pred.defined() || !target.defined()) {
    throw ContractError("dice_score: undefined input");
  }
  if (pred.shape() != target.shape()) {
    throw ShapeError("dice_score: shape mismatch " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("dice_score: threshold must lie in (0,1)");
  }
  const auto pv = pred.values();
  const auto tv = target.values();
  std::int64_t a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const bool pa = pv[i] > threshold;
    const bool tb = tv[i] > threshold;
    a += pa;
    b += tb;
    inter += pa && tb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

}  // namespace contseg

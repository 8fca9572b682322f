#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cmrseg/tensor.hpp"

namespace cmrseg {

/// Rows are voxels, columns are classes; column 0 is background.
using ClassMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ClassWeights {
  std::vector<double> weights;

  /// 0.1 for background, 0.3 for each foreground class.
  static ClassWeights defaults(int num_classes = 4);
  void validate(int num_classes) const;
};

enum class LossKind { CrossEntropy, WeightedCrossEntropy, Dice };

const char* loss_name(LossKind k);  // "ce", "wce", "dice"
LossKind parse_loss(const std::string& name);

ClassMatrix one_hot(std::span<const std::uint8_t> labels, int num_classes);
ClassMatrix softmax_rows(const ClassMatrix& scores);

/// Mean over voxels of -log p(true class).
double cross_entropy(const ClassMatrix& probabilities, const ClassMatrix& target);

/// Mean over voxels of -w(true class) * log p(true class).
double weighted_cross_entropy(const ClassMatrix& probabilities, const ClassMatrix& target,
                              const ClassWeights& weights);

/// 1 - sum_fg(t*y) / sum_fg(t + y), summing over voxels and the foreground
/// classes only. There is no factor of two, so a perfect prediction scores
/// 0.5. Targets without any foreground add 1e-7 to numerator and denominator.
double soft_dice_loss(const ClassMatrix& probabilities, const ClassMatrix& target);

struct LossAndGradient {
  double value = 0.0;
  ClassMatrix d_scores;  // dL / d(pre-softmax scores)
};

/// Evaluates the chosen loss on softmax(scores) and differentiates it with
/// respect to the scores.
LossAndGradient loss_from_scores(LossKind kind, const ClassMatrix& scores, const ClassMatrix& target,
                                 const ClassWeights& weights);

/// Network-facing wrapper: scores (n, K, spatial) against per-voxel labels
/// laid out like one score channel per sample. Writes dL/dscores.
double tensor_loss(LossKind kind, const Tensor& scores, std::span<const std::uint8_t> labels,
                   const ClassWeights& weights, Tensor* d_scores);

}  // namespace cmrseg

#include "cmrseg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace cmrseg {
namespace {

constexpr double kDiceSmoothing = 1e-7;

void check_pair(const ClassMatrix& a, const ClassMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("loss shape mismatch: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  if (a.rows() == 0 || a.cols() < 2) throw std::invalid_argument("loss needs at least one voxel and two classes");
}

// Shared by the plain and weighted forms so unit weights reproduce the
// plain loss bit for bit.
double ce_impl(const ClassMatrix& p, const ClassMatrix& t, const double* w) {
  double sum = 0.0;
  for (Eigen::Index n = 0; n < p.rows(); ++n) {
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      const double tk = t(n, k);
      if (tk == 0.0) continue;
      const double wt = w ? w[k] * tk : tk;
      sum += wt * -std::log(p(n, k));
    }
  }
  return sum / static_cast<double>(p.rows());
}

struct DiceTerms {
  double numerator = 0.0;
  double denominator = 0.0;
  bool smoothed = false;
};

DiceTerms dice_terms(const ClassMatrix& y, const ClassMatrix& t) {
  DiceTerms d;
  double target_fg = 0.0;
  for (Eigen::Index n = 0; n < y.rows(); ++n) {
    for (Eigen::Index k = 1; k < y.cols(); ++k) {
      d.numerator += t(n, k) * y(n, k);
      d.denominator += t(n, k) + y(n, k);
      target_fg += t(n, k);
    }
  }
  if (target_fg == 0.0) {
    d.numerator += kDiceSmoothing;
    d.denominator += kDiceSmoothing;
    d.smoothed = true;
  }
  return d;
}

}  // namespace

ClassWeights ClassWeights::defaults(int num_classes) {
  ClassWeights w;
  w.weights.assign(static_cast<std::size_t>(num_classes), 0.3);
  w.weights[0] = 0.1;
  return w;
}

void ClassWeights::validate(int num_classes) const {
  if (weights.size() != static_cast<std::size_t>(num_classes))
    throw std::invalid_argument("expected " + std::to_string(num_classes) + " class weights, got " +
                                std::to_string(weights.size()));
  bool positive = false;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("class weights must be finite and >= 0");
    positive = positive || w > 0.0;
  }
  if (!positive) throw std::invalid_argument("at least one class weight must be positive");
}

const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::CrossEntropy: return "ce";
    case LossKind::WeightedCrossEntropy: return "wce";
    case LossKind::Dice: return "dice";
  }
  return "?";
}

LossKind parse_loss(const std::string& name) {
  if (name == "ce") return LossKind::CrossEntropy;
  if (name == "wce") return LossKind::WeightedCrossEntropy;
  if (name == "dice") return LossKind::Dice;
  throw std::invalid_argument("unknown loss '" + name + "' (expected ce, wce or dice)");
}

ClassMatrix one_hot(std::span<const std::uint8_t> labels, int num_classes) {
  ClassMatrix t = ClassMatrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= num_classes) throw std::invalid_argument("label " + std::to_string(labels[n]) + " out of range");
    t(static_cast<Eigen::Index>(n), labels[n]) = 1.0;
  }
  return t;
}

ClassMatrix softmax_rows(const ClassMatrix& s) {
  ClassMatrix y(s.rows(), s.cols());
  for (Eigen::Index n = 0; n < s.rows(); ++n) {
    const double mx = s.row(n).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k < s.cols(); ++k) {
      y(n, k) = std::exp(s(n, k) - mx);
      sum += y(n, k);
    }
    y.row(n) /= sum;
  }
  return y;
}

double cross_entropy(const ClassMatrix& probabilities, const ClassMatrix& target) {
  check_pair(probabilities, target);
  return ce_impl(probabilities, target, nullptr);
}

double weighted_cross_entropy(const ClassMatrix& probabilities, const ClassMatrix& target,
                              const ClassWeights& weights) {
  check_pair(probabilities, target);
  weights.validate(static_cast<int>(target.cols()));
  return ce_impl(probabilities, target, weights.weights.data());
}

double soft_dice_loss(const ClassMatrix& probabilities, const ClassMatrix& target) {
  check_pair(probabilities, target);
  const DiceTerms d = dice_terms(probabilities, target);
  return 1.0 - d.numerator / d.denominator;
}

LossAndGradient loss_from_scores(LossKind kind, const ClassMatrix& scores, const ClassMatrix& target,
                                 const ClassWeights& weights) {
  check_pair(scores, target);
  const Eigen::Index N = scores.rows();
  const Eigen::Index K = scores.cols();
  LossAndGradient out;
  out.d_scores.resize(N, K);
  const ClassMatrix y = softmax_rows(scores);

  if (kind == LossKind::Dice) {
    const DiceTerms d = dice_terms(y, target);
    out.value = 1.0 - d.numerator / d.denominator;
    const double inv_b2 = 1.0 / (d.denominator * d.denominator);
    Eigen::VectorXd g(K);
    for (Eigen::Index n = 0; n < N; ++n) {
      g(0) = 0.0;
      for (Eigen::Index k = 1; k < K; ++k) g(k) = -(target(n, k) * d.denominator - d.numerator) * inv_b2;
      const double dot = y.row(n).dot(g);
      for (Eigen::Index j = 0; j < K; ++j) out.d_scores(n, j) = y(n, j) * (g(j) - dot);
    }
    return out;
  }

  const bool weighted = kind == LossKind::WeightedCrossEntropy;
  if (weighted) weights.validate(static_cast<int>(K));
  const double* w = weighted ? weights.weights.data() : nullptr;
  // log-sum-exp form: -log y_k = lse(s) - s_k.
  double sum = 0.0;
  for (Eigen::Index n = 0; n < N; ++n) {
    const double mx = scores.row(n).maxCoeff();
    const double lse = mx + std::log((scores.row(n).array() - mx).exp().sum());
    double row_weight = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) {
      const double tk = target(n, k);
      if (tk == 0.0) continue;
      const double wt = w ? w[k] * tk : tk;
      sum += wt * (lse - scores(n, k));
      row_weight += wt;
    }
    for (Eigen::Index j = 0; j < K; ++j) {
      const double tj = w ? w[j] * target(n, j) : target(n, j);
      out.d_scores(n, j) = (row_weight * y(n, j) - tj) / static_cast<double>(N);
    }
  }
  out.value = sum / static_cast<double>(N);
  return out;
}

double tensor_loss(LossKind kind, const Tensor& scores, std::span<const std::uint8_t> labels,
                   const ClassWeights& weights, Tensor* d_scores) {
  const std::size_t plane = scores.plane();
  const auto N = static_cast<Eigen::Index>(plane * static_cast<std::size_t>(scores.n));
  if (labels.size() != static_cast<std::size_t>(N))
    throw std::invalid_argument("label count " + std::to_string(labels.size()) + " does not match score grid " +
                                scores.shape_string());
  ClassMatrix s(N, scores.c);
  for (int i = 0; i < scores.n; ++i) {
    for (int k = 0; k < scores.c; ++k) {
      const float* src = scores.channel(i, k);
      for (std::size_t j = 0; j < plane; ++j) s(static_cast<Eigen::Index>(i * plane + j), k) = src[j];
    }
  }
  const LossAndGradient r = loss_from_scores(kind, s, one_hot(labels, scores.c), weights);
  if (d_scores) {
    *d_scores = Tensor(scores.n, scores.c, scores.spatial);
    for (int i = 0; i < scores.n; ++i) {
      for (int k = 0; k < scores.c; ++k) {
        float* dst = d_scores->channel(i, k);
        for (std::size_t j = 0; j < plane; ++j)
          dst[j] = static_cast<float>(r.d_scores(static_cast<Eigen::Index>(i * plane + j), k));
      }
    }
  }
  return r.value;
}

}  // namespace cmrseg

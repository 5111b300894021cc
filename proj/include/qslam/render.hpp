#pragma once

#include <cmath>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "qslam/common.hpp"

namespace qslam {

/// Transmittance-weighted sample contributions for one ray.
struct RayWeights {
  Eigen::VectorXd alpha;  // 1 - exp(-sigma * delta)
  Eigen::VectorXd trans;  // T_i, transmittance reaching sample i
  Eigen::VectorXd w;      // alpha_i * T_i
};

/// Standard over-compositing weights. deltas[i] spans sample i to i+1; the
/// last sample spans to d_far (a zero last delta is fine).
///
/// The transmittance is tracked as 1 minus the opacity accumulated so far
/// rather than as a running product. With round-to-nearest this keeps the
/// left-to-right sum of the weights <= 1 exactly, not just up to rounding:
/// w_i <= t_i because alpha_i <= 1, and acc + fl(1 - acc) never rounds
/// past 1.
inline RayWeights compute_weights(const Eigen::VectorXd& sigma,
                                  const Eigen::VectorXd& deltas) {
  int n = static_cast<int>(sigma.size());
  require(deltas.size() == n, ErrorKind::ContractViolation,
          "sigma/delta size mismatch");
  RayWeights rw;
  rw.alpha.resize(n);
  rw.trans.resize(n);
  rw.w.resize(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    double t = 1.0 - acc;
    double e = std::exp(-sigma(i) * deltas(i));
    rw.alpha(i) = 1.0 - e;
    rw.trans(i) = t;
    rw.w(i) = rw.alpha(i) * t;
    acc += rw.w(i);
  }
  return rw;
}

/// dL/dsigma from per-weight gradients, using the suffix-sum form
/// dL/dsigma_k = delta_k * (T_{k+1} dL/dw_k - sum_{i>k} dL/dw_i * w_i).
inline Eigen::VectorXd weights_backward(const Eigen::VectorXd& sigma,
                                        const Eigen::VectorXd& deltas,
                                        const RayWeights& rw,
                                        const Eigen::VectorXd& d_w) {
  int n = static_cast<int>(sigma.size());
  Eigen::VectorXd d_sigma(n);
  double suffix = 0.0;  // sum over i > k of d_w_i * w_i
  for (int k = n - 1; k >= 0; --k) {
    double t_next = rw.trans(k) * (1.0 - rw.alpha(k));
    d_sigma(k) = deltas(k) * (d_w(k) * t_next - suffix);
    suffix += d_w(k) * rw.w(k);
  }
  return d_sigma;
}

struct RenderOutput {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  Eigen::VectorXd sem_probs;   // softmax of the aggregated logits
  Eigen::VectorXd agg_logits;  // sum_i w_i * logits_i
  RayWeights weights;
};

/// Composite one ray: color and depth are weight sums, semantics softmax
/// the weight-aggregated logits.
inline RenderOutput render_ray(const Eigen::VectorXd& sigma,
                               const Eigen::MatrixXd& rgb,
                               const Eigen::MatrixXd& logits,
                               const Eigen::VectorXd& t_values,
                               const Eigen::VectorXd& deltas) {
  int n = static_cast<int>(sigma.size());
  require(rgb.rows() == n && logits.rows() == n && t_values.size() == n,
          ErrorKind::ContractViolation, "render input size mismatch");
  RenderOutput out;
  out.weights = compute_weights(sigma, deltas);
  out.color = rgb.transpose() * out.weights.w;
  out.depth = t_values.dot(out.weights.w);
  out.agg_logits = logits.transpose() * out.weights.w;
  Eigen::ArrayXd shifted = out.agg_logits.array() - out.agg_logits.maxCoeff();
  Eigen::ArrayXd e = shifted.exp();
  out.sem_probs = (e / e.sum()).matrix();
  return out;
}

/// Push gradients on (color, depth, aggregated logits) back to the
/// per-sample quantities.
inline void render_ray_backward(const Eigen::VectorXd& sigma,
                                const Eigen::MatrixXd& rgb,
                                const Eigen::MatrixXd& logits,
                                const Eigen::VectorXd& t_values,
                                const Eigen::VectorXd& deltas,
                                const RenderOutput& out, const Vec3& d_color,
                                double d_depth,
                                const Eigen::VectorXd& d_agg_logits,
                                Eigen::VectorXd& d_sigma,
                                Eigen::MatrixXd& d_rgb,
                                Eigen::MatrixXd& d_logits) {
  Eigen::VectorXd d_w = rgb * d_color + t_values * d_depth + logits * d_agg_logits;
  d_sigma = weights_backward(sigma, deltas, out.weights, d_w);
  d_rgb = out.weights.w * d_color.transpose();
  d_logits = out.weights.w * d_agg_logits.transpose();
}

// ---- batch loss ----

struct LossConfig {
  double lambda1 = 0.1;   // depth term weight
  double lambda2 = 0.05;  // semantic term weight
  double eps0 = 1e-4;     // fitting-error floor, m^2
};

struct LossTerms {
  double l_c = 0.0;
  double l_d = 0.0;
  double l_s = 0.0;
  double total = 0.0;
};

/// Supervision for one rendered ray.
struct RayTarget {
  int frame_index = 0;
  int segment_id = 0;
  double epsilon = -1.0;  // fitting error of the segment, <= 0 if unfitted
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  int sem_class = 0;
};

/// Fitting-error weight: segments with better quadric fits (smaller
/// epsilon) count more, saturating at 1 for epsilon <= eps0.
inline double fit_weight(double epsilon, double eps0) {
  double e = (epsilon > 0.0) ? std::max(epsilon, eps0) : eps0;
  return eps0 / e;
}

/// Color and depth losses are grouped by (frame, segment): each group's
/// mean absolute error is scaled by its fit weight, then groups are
/// averaged. The semantic cross-entropy is a plain mean over rays.
inline LossTerms compute_loss(const std::vector<RenderOutput>& outputs,
                              const std::vector<RayTarget>& targets,
                              const LossConfig& cfg,
                              std::vector<Vec3>* d_color = nullptr,
                              std::vector<double>* d_depth = nullptr,
                              std::vector<Eigen::VectorXd>* d_agg_logits = nullptr) {
  size_t m = outputs.size();
  require(m > 0 && targets.size() == m, ErrorKind::InvalidInput,
          "loss needs matching outputs and targets");

  std::map<std::pair<int, int>, std::vector<size_t>> groups;
  for (size_t i = 0; i < m; ++i)
    groups[{targets[i].frame_index, targets[i].segment_id}].push_back(i);
  double n_groups = static_cast<double>(groups.size());

  if (d_color) d_color->assign(m, Vec3::Zero());
  if (d_depth) d_depth->assign(m, 0.0);
  if (d_agg_logits) d_agg_logits->assign(m, Eigen::VectorXd());

  LossTerms lt;
  for (const auto& [key, idx] : groups) {
    double u = fit_weight(targets[idx.front()].epsilon, cfg.eps0);
    double inv = 1.0 / static_cast<double>(idx.size());
    double gc = 0.0, gd = 0.0;
    for (size_t i : idx) {
      Vec3 rc = targets[i].color - outputs[i].color;
      gc += rc.cwiseAbs().mean();
      gd += std::abs(targets[i].depth - outputs[i].depth);
      if (d_color) {
        // d/dC_hat of mean_ch |C - C_hat|, carried through all scalings.
        Vec3 s(rc.x() > 0 ? 1.0 : (rc.x() < 0 ? -1.0 : 0.0),
               rc.y() > 0 ? 1.0 : (rc.y() < 0 ? -1.0 : 0.0),
               rc.z() > 0 ? 1.0 : (rc.z() < 0 ? -1.0 : 0.0));
        (*d_color)[i] = -s * (u * inv / (3.0 * n_groups));
      }
      if (d_depth) {
        double rd = targets[i].depth - outputs[i].depth;
        double s = rd > 0 ? 1.0 : (rd < 0 ? -1.0 : 0.0);
        (*d_depth)[i] = -s * (cfg.lambda1 * u * inv / n_groups);
      }
    }
    lt.l_c += u * gc * inv;
    lt.l_d += u * gd * inv;
  }
  lt.l_c /= n_groups;
  lt.l_d /= n_groups;

  for (size_t i = 0; i < m; ++i) {
    const Eigen::VectorXd& p = outputs[i].sem_probs;
    int cls = targets[i].sem_class;
    require(cls >= 0 && cls < p.size(), ErrorKind::InvalidInput,
            "semantic class out of range");
    lt.l_s += -std::log(std::max(p(cls), 1e-300));
    if (d_agg_logits) {
      // Softmax + cross-entropy: probs minus one-hot.
      Eigen::VectorXd g = p;
      g(cls) -= 1.0;
      (*d_agg_logits)[i] = g * (cfg.lambda2 / static_cast<double>(m));
    }
  }
  lt.l_s /= static_cast<double>(m);

  lt.total = lt.l_c + cfg.lambda1 * lt.l_d + cfg.lambda2 * lt.l_s;
  return lt;
}

}  // namespace qslam

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "endodepth/annotations.hpp"
#include "endodepth/autodiff.hpp"
#include "endodepth/layers.hpp"

namespace endodepth {

/// Weighted scale-invariant log loss over the annotated pixels:
///   L = sum(w d^2) / sum(w) - (sum(w d))^2 / sum(w)^2,   d = log y - log y*.
/// Pixels with w = 0 do not contribute. Invariant to any positive rescaling of y and of w.
inline Tensor scale_invariant_weighted_loss(const Tensor& prediction, const SparseDepthMap& sparse, const SoftMask& mask) {
  Tape& tape = prediction.tape();
  const Shape s = prediction.shape();
  if (s.c != 1 || s.h != mask.raster.height() || s.w != mask.raster.width() || s.h != sparse.raster.height() ||
      s.w != sparse.raster.width())
    throw ShapeError("scale_invariant_weighted_loss: prediction " + s.str() + " does not match annotation rasters");

  double weight_sum = 0.0;
  std::vector<double> log_target(s.numel(), 0.0);
  std::vector<double> safe_pred(s.numel(), 1.0);
  std::vector<double> select(s.numel(), 0.0);
  auto y = prediction.values();
  for (std::size_t i = 0; i < s.numel(); ++i) {
    const double w = mask.raster[i];
    if (!(w > 0.0)) continue;
    if (!(y[i] > 0.0)) throw NumericalError("scale_invariant_weighted_loss: prediction " + std::to_string(y[i]) + " <= 0 at annotated pixel " + std::to_string(i));
    if (!(sparse.raster[i] > 0.0)) throw NumericalError("scale_invariant_weighted_loss: annotated pixel " + std::to_string(i) + " has no sparse depth");
    weight_sum += w;
    log_target[i] = std::log(sparse.raster[i]);
    select[i] = 1.0;
  }
  if (!(weight_sum > 0.0)) throw EmptyAnnotation("scale_invariant_weighted_loss: soft mask of frame " + std::to_string(mask.frame_id) + " is empty");

  // Unannotated pixels are replaced by 1 before the log (they carry zero weight), so the loss
  // stays defined even where the prediction is not constrained.
  for (std::size_t i = 0; i < s.numel(); ++i) safe_pred[i] = select[i] > 0.0 ? 0.0 : 1.0;
  const Tensor masked = ops::add(ops::mul(prediction, tape.constant(s, select)), tape.constant(s, safe_pred));
  const Tensor d = ops::sub(ops::log(masked), tape.constant(s, log_target));
  const Tensor w = tape.constant(mask.raster);
  const Tensor inv_sum = tape.scalar(1.0 / weight_sum);
  const Tensor first = ops::mul(ops::weighted_sum(ops::square(d), w), inv_sum);
  const Tensor second = ops::square(ops::mul(ops::weighted_sum(d, w), inv_sum));
  return ops::sub(first, second);
}

/// Mean absolute difference between a warped map and the target-frame map over the valid region.
inline Tensor depth_consistency_loss(const Tensor& warped, const BinaryMask& validity, const Tensor& target) {
  if (!(warped.shape() == target.shape()) || warped.shape().h != validity.height() || warped.shape().w != validity.width())
    throw ShapeError("depth_consistency_loss: shape mismatch " + warped.shape().str() + " vs " + target.shape().str());
  const std::size_t n = count_nonzero(validity);
  if (n == 0) throw WarpOutOfView("depth_consistency_loss: empty valid region");
  std::vector<double> sel(validity.size());
  for (std::size_t i = 0; i < sel.size(); ++i) sel[i] = validity[i] ? 1.0 : 0.0;
  Tape& tape = warped.tape();
  const Tensor diff = ops::abs(ops::sub(warped, target));
  return ops::scale_constant(ops::weighted_sum(diff, tape.constant(warped.shape(), std::move(sel))),
                             1.0 / static_cast<double>(n));
}

struct LossBreakdown {
  double sparse_j = 0.0;
  double sparse_k = 0.0;
  double consist_jk = 0.0;
  double consist_kj = 0.0;
  double total = 0.0;
  double omega = 0.0;
};

/// One pair's annotations and relative pose, as consumed by the combined loss.
struct PairAnnotations {
  SparseDepthMap sparse_j, sparse_k;
  SoftMask mask_j, mask_k;
  RigidTransform k_from_j;
  CameraIntrinsics intrinsics;
};

struct PairLoss {
  Tensor total;
  LossBreakdown breakdown;
  ScaledDepth scaled_j, scaled_k;
};

/// Combined two-frame objective:
///   L = Ls(Yj) + Ls(Yk) + omega * (Lc(j,k) + Lc(k,j)).
/// The sparse terms use the raw predictions; the consistency terms use the scaled predictions,
/// each warped into the other frame. With omega = 0 the warps are skipped entirely.
inline PairLoss total_loss(const PairAnnotations& pair, const Tensor& pred_j, const Tensor& pred_k, double omega) {
  if (!(omega >= 0.0)) throw InvalidArgument("omega must be non-negative");
  PairLoss out;
  const Tensor sj = scale_invariant_weighted_loss(pred_j, pair.sparse_j, pair.mask_j);
  const Tensor sk = scale_invariant_weighted_loss(pred_k, pair.sparse_k, pair.mask_k);
  out.breakdown.omega = omega;
  out.breakdown.sparse_j = sj.item();
  out.breakdown.sparse_k = sk.item();
  Tensor total = ops::add(sj, sk);

  if (omega > 0.0) {
    out.scaled_j = depth_scaling_layer(pred_j, pair.sparse_j, pair.mask_j);
    out.scaled_k = depth_scaling_layer(pred_k, pair.sparse_k, pair.mask_k);
    const WarpResult jk = depth_warping_layer(out.scaled_j.depth, pair.k_from_j, pair.intrinsics);
    const WarpResult kj = depth_warping_layer(out.scaled_k.depth, pair.k_from_j.inverse(), pair.intrinsics);
    const Tensor cjk = depth_consistency_loss(jk.warped, jk.validity, out.scaled_k.depth);
    const Tensor ckj = depth_consistency_loss(kj.warped, kj.validity, out.scaled_j.depth);
    out.breakdown.consist_jk = cjk.item();
    out.breakdown.consist_kj = ckj.item();
    total = ops::add(total, ops::scale_constant(ops::add(cjk, ckj), omega));
  }
  out.total = total;
  out.breakdown.total = total.item();
  return out;
}

}  // namespace endodepth

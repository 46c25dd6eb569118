#pragma once

// Training objective: label-smoothed cross entropy over the decoder's
// per-step distributions plus an optional connectionist temporal
// classification term computed from per-frame encoder projections.  The CTC
// forward pass runs in log space directly on tape scalars, so its gradient
// comes out of the same machinery as everything else.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "attnlab/tensor.hpp"

namespace attnlab {

struct LossConfig {
  real label_smoothing = 0.1;
  real ctc_weight = 0.5;
  bool smoothing_enabled = true;

  real effective_smoothing() const { return smoothing_enabled ? label_smoothing : 0.0; }
};

// -sum_c q_c log p_c with q = (1-eps) one-hot + eps/V.  eps = 0 reduces to
// the plain negative log likelihood of the target exactly.
inline Tensor ce_label_smoothed(Tape& t, const Tensor& dist, int target, real eps) {
  if (dist.rank() != 1) throw DimError("ce_label_smoothed: rank-1 distribution required");
  if (eps < 0.0 || eps >= 1.0) throw DimError("ce_label_smoothed: smoothing must be in [0,1)");
  size_t V = dist.numel();
  if (target < 0 || static_cast<size_t>(target) >= V)
    throw DimError("ce_label_smoothed: target out of range");
  Tensor lp = log(t, dist);
  Tensor loss = scale(t, slice(t, lp, static_cast<size_t>(target), 1), -(1.0 - eps));
  if (eps > 0.0) loss = add(t, loss, scale(t, sum(t, lp), -eps / static_cast<real>(V)));
  return loss;
}

struct CtcResult {
  Tensor loss;      // scalar; +inf and detached from the tape when unrealizable
  bool realizable = true;
};

// Standard log-space forward algorithm over the blank-augmented target
// [blank y1 blank y2 ... yL blank].  Cells that no complete path passes
// through are never materialized, which keeps every logaddexp finite.
inline CtcResult ctc_loss(Tape& t, const std::vector<Tensor>& frame_dists,
                          const std::vector<int>& target, int blank) {
  size_t T = frame_dists.size();
  if (T == 0) throw DimError("ctc_loss: at least one frame required");
  size_t V = frame_dists[0].numel();
  if (blank < 0 || static_cast<size_t>(blank) >= V) throw DimError("ctc_loss: blank id out of range");
  for (const Tensor& d : frame_dists)
    if (d.rank() != 1 || d.numel() != V) throw DimError("ctc_loss: inconsistent frame distributions");
  for (int y : target) {
    if (y < 0 || static_cast<size_t>(y) >= V) throw DimError("ctc_loss: target id out of range");
    if (y == blank) throw DimError("ctc_loss: blank cannot appear in the target");
  }

  size_t L = target.size();
  size_t S = 2 * L + 1;
  std::vector<int> ext(S, blank);
  for (size_t i = 0; i < L; ++i) ext[2 * i + 1] = target[i];

  std::vector<Tensor> lp(T);
  for (size_t f = 0; f < T; ++f) lp[f] = log(t, frame_dists[f]);
  auto lp_at = [&](size_t f, size_t s) {
    return slice(t, lp[f], static_cast<size_t>(ext[s]), 1);
  };

  // alpha[s] is the log probability of emitting ext[0..s] within the first
  // t+1 frames; an undefined tensor marks an unreachable cell.
  std::vector<Tensor> alpha(S);
  alpha[0] = lp_at(0, 0);
  if (S > 1) alpha[1] = lp_at(0, 1);
  for (size_t f = 1; f < T; ++f) {
    std::vector<Tensor> next(S);
    for (size_t s = 0; s < S; ++s) {
      std::vector<Tensor> preds;
      if (alpha[s].defined()) preds.push_back(alpha[s]);
      if (s >= 1 && alpha[s - 1].defined()) preds.push_back(alpha[s - 1]);
      if (s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] && alpha[s - 2].defined())
        preds.push_back(alpha[s - 2]);
      if (preds.empty()) continue;
      Tensor combined = preds.size() == 1 ? preds[0] : logaddexp(t, preds);
      next[s] = add(t, combined, lp_at(f, s));
    }
    alpha = std::move(next);
  }

  std::vector<Tensor> finals;
  if (alpha[S - 1].defined()) finals.push_back(alpha[S - 1]);
  if (S >= 2 && alpha[S - 2].defined()) finals.push_back(alpha[S - 2]);
  if (finals.empty())
    return {Tensor::scalar(std::numeric_limits<real>::infinity()), false};
  Tensor total = finals.size() == 1 ? finals[0] : logaddexp(t, finals);
  return {scale(t, total, -1.0), true};
}

// mean-per-label cross entropy plus weighted mean-per-utterance CTC; the
// CTC part drops out when no utterance contributed a realizable term.
inline Tensor total_loss(Tape& t, const Tensor& ce_sum, size_t label_count, const Tensor& ctc_sum,
                         size_t ctc_count, const LossConfig& cfg) {
  if (label_count == 0) throw DimError("total_loss: at least one label required");
  Tensor out = scale(t, ce_sum, 1.0 / static_cast<real>(label_count));
  if (ctc_sum.defined() && ctc_count > 0 && cfg.ctc_weight != 0.0)
    out = add(t, out, scale(t, ctc_sum, cfg.ctc_weight / static_cast<real>(ctc_count)));
  return out;
}

}  // namespace attnlab

#pragma once

#include "refusion/ops.hpp"

namespace refusion::losses {

struct LossConfig {
  double alpha1 = 1.0;  // gradient-term weight in the fusion loss
  double alpha2 = 1.0;  // gradient-term weight in the reconstruction loss
};

struct GradField {
  ad::Value gx;
  ad::Value gy;
};

struct WeightMaps {
  ad::Value wa, wb;  // intensity preference, wa + wb = 1 per pixel
  ad::Value va, vb;  // gradient preference, va + vb = 1 per pixel
};

// 3x3 Sobel responses with replicate padding; output shape equals input.
// Requires H,W >= 3 per the operator's contract.
GradField sobel_gradient(const ad::Value& img);

// Same operator without the size gate: replicate padding makes it well
// defined (and zero) down to 1x1, which the loss terms rely on.
GradField sobel_raw(const ad::Value& img);

// L_f = L_int + alpha1 * L_grad, weighted per pixel by the proposal maps.
// Images are [B,C,H,W]; maps broadcast across channels. Differentiable in
// ifused and the maps.
ad::Value fusion_loss(const ad::Value& ia, const ad::Value& ib, const ad::Value& ifused,
                      const WeightMaps& maps, const LossConfig& cfg);

// L_r = L_int + alpha2 * L_grad with a pixel-wise max over the two branches.
// Ties take the first branch's subgradient.
ad::Value reconstruction_loss(const ad::Value& ia, const ad::Value& ib,
                              const ad::Value& ra, const ad::Value& rb,
                              const LossConfig& cfg);

void check_weight_constraint(const WeightMaps& maps, double tol = 1e-6);

}  // namespace refusion::losses

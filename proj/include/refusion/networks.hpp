#pragma once

#include "refusion/losses.hpp"
#include "refusion/params.hpp"

namespace refusion::nets {

// Deterministic initialization for the three networks. The proposal module's
// final projection is zero-initialized so the first proposed maps are exactly
// uniform (0.5 everywhere).
ParameterCollection init_params(Role role, const NetConfig& cfg, uint64_t seed);

// P(I_a, I_b, |gx_a|, |gy_a|, |gx_b|, |gy_b|) -> (W_a, W_b, V_a, V_b).
// The pairwise sum-to-one constraints are structural (two-way softmax).
losses::WeightMaps proposal_forward(const ParamValues& theta_p, const ad::Value& ia,
                                    const ad::Value& ib, const losses::GradField& ga,
                                    const losses::GradField& gb);

// Convenience: computes the Sobel fields internally.
losses::WeightMaps proposal_forward(const ParamValues& theta_p, const ad::Value& ia,
                                    const ad::Value& ib);

// Fused image in [0,1]: per-source encoders -> adaptive fusion (cross
// attention + gated refinement) -> channel-attention transformer blocks ->
// decoder. Honors every ablation in theta_f's NetConfig, including the
// decision-level variant.
ad::Value fusion_forward(const ParamValues& theta_f, const ad::Value& ia,
                         const ad::Value& ib);

// Decision-level variant: predicts a one-pair softmax map w_a and returns
// w_a*I_a + (1-w_a)*I_b. Requires ablation == decision_level.
ad::Value decision_fusion_forward(const ParamValues& theta_f, const ad::Value& ia,
                                  const ad::Value& ib);

// The convex combination used by the decision-level head; exposed for tests.
ad::Value decision_combine(const ad::Value& wa, const ad::Value& ia, const ad::Value& ib);

// Shared trunk, two independent decoder branches; both outputs in [0,1].
std::pair<ad::Value, ad::Value> reconstruction_forward(const ParamValues& theta_r,
                                                       const ad::Value& ifused);

}  // namespace refusion::nets

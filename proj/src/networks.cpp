#include "refusion/networks.hpp"

#include <cmath>

#include "refusion/rng.hpp"

namespace refusion::nets {

using ad::Value;
namespace O = ad::ops;

namespace {

// ---- parameter declaration ----

enum class Init { kaiming, zeros, ones };

struct SpecEntry {
  std::string name;
  std::vector<int64_t> shape;
  Init init;
};

void conv_spec(std::vector<SpecEntry>& s, const std::string& name, int64_t co,
               int64_t cig, int k, Init w_init = Init::kaiming) {
  s.push_back({name + ".weight", {co, cig, k, k}, w_init});
  s.push_back({name + ".bias", {co, 1, 1}, Init::zeros});
}

void ln_spec(std::vector<SpecEntry>& s, const std::string& name, int64_t c) {
  s.push_back({name + ".gamma", {c, 1, 1}, Init::ones});
  s.push_back({name + ".beta", {c, 1, 1}, Init::zeros});
}

void block_spec(std::vector<SpecEntry>& s, const std::string& b, int64_t c, int heads) {
  ln_spec(s, b + ".ln1", c);
  conv_spec(s, b + ".attn.qkv", 3 * c, c, 1);
  conv_spec(s, b + ".attn.dw", 3 * c, 1, 3);
  s.push_back({b + ".attn.temp", {heads, 1, 1}, Init::ones});
  conv_spec(s, b + ".attn.proj", c, c, 1);
  ln_spec(s, b + ".ln2", c);
  conv_spec(s, b + ".ffn.expand", 4 * c, c, 1);
  conv_spec(s, b + ".ffn.dw", 4 * c, 1, 3);
  conv_spec(s, b + ".ffn.proj", c, 2 * c, 1);
}

std::vector<SpecEntry> param_spec(Role role, const NetConfig& cfg) {
  const int64_t c = cfg.base_channels;
  if (c <= 0 || cfg.num_blocks <= 0 || cfg.attention_heads <= 0)
    throw ConfigError("net config values must be positive");
  if (c % cfg.attention_heads != 0)
    throw ConfigError("base_channels must be divisible by attention_heads");
  std::vector<SpecEntry> s;
  switch (role) {
    case Role::P:
      conv_spec(s, "conv0", c, 6, 3);
      conv_spec(s, "conv1", c, c, 3);
      conv_spec(s, "head", 4, c, 3, Init::zeros);
      break;
    case Role::R:
      conv_spec(s, "trunk.conv0", c, 1, 3);
      conv_spec(s, "trunk.conv1", c, c, 3);
      for (const char* br : {"branch_a", "branch_b"}) {
        conv_spec(s, std::string(br) + ".conv0", c, c, 3);
        conv_spec(s, std::string(br) + ".head", 1, c, 3);
      }
      break;
    case Role::F: {
      for (const char* enc : {"enc_a", "enc_b"}) {
        conv_spec(s, std::string(enc) + ".conv0", c, 1, 3);
        conv_spec(s, std::string(enc) + ".conv1", c, c, 3);
      }
      const Ablation ab = cfg.ablation;
      if (ab != Ablation::concat_afm) {
        if (ab != Ablation::no_interaction)
          for (const char* st : {"afm.a", "afm.b"}) {
            conv_spec(s, std::string(st) + ".q", c, c, 1);
            conv_spec(s, std::string(st) + ".k", c, c, 1);
            conv_spec(s, std::string(st) + ".v", c, c, 1);
            conv_spec(s, std::string(st) + ".proj", c, c, 1);
          }
        if (ab != Ablation::no_gating) conv_spec(s, "afm.gate", 2 * c, 2 * c, 3);
      }
      conv_spec(s, "afm.fuse", c, 2 * c, 1);
      for (int i = 0; i < cfg.num_blocks; ++i)
        block_spec(s, "blk" + std::to_string(i), c, cfg.attention_heads);
      conv_spec(s, "dec.conv0", c, c, 3);
      conv_spec(s, "dec.head", 1, c, 3);
      break;
    }
  }
  return s;
}

// ---- layer helpers ----

Value conv(const ParamValues& p, const std::string& name, const Value& x, int groups = 1) {
  const Value& w = p.at(name + ".weight");
  const Value& b = p.at(name + ".bias");
  const int k = static_cast<int>(w.shape()[3]);
  const int pad = (k - 1) / 2;
  Value y = pad ? O::conv2d_valid(O::pad_replicate(x, pad, pad, pad, pad), w, groups)
                : O::conv2d_valid(x, w, groups);
  return O::add(y, b);
}

Value layernorm_c(const ParamValues& p, const std::string& name, const Value& x) {
  Value mu = O::mean_axis(x, 1);
  Value xc = O::sub(x, mu);
  Value var = O::mean_axis(O::square(xc), 1);
  Value xn = O::div(xc, O::sqrt_(O::add_scalar(var, 1e-6)));
  return O::add(O::mul(xn, p.at(name + ".gamma")), p.at(name + ".beta"));
}

// Channel-dimension self-attention (tokens are channels, features are pixels).
Value channel_attention(const ParamValues& p, const std::string& prefix, const Value& x,
                        int heads) {
  const auto& s = x.shape();
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t dc = C / heads;
  Value qkv = conv(p, prefix + ".qkv", x);
  qkv = conv(p, prefix + ".dw", qkv, static_cast<int>(3 * C));
  auto head_view = [&](const Value& t) {
    return O::reshape(t, {B, heads, dc, H * W});
  };
  Value q = O::l2_normalize_lastdim(head_view(O::slice_axis(qkv, 1, 0, C)));
  Value k = O::l2_normalize_lastdim(head_view(O::slice_axis(qkv, 1, C, C)));
  Value v = head_view(O::slice_axis(qkv, 1, 2 * C, C));
  Value attn = O::matmul(q, O::transpose_last2(k));           // [B,heads,dc,dc]
  attn = O::softmax_lastdim(O::mul(attn, p.at(prefix + ".temp")));
  Value out = O::reshape(O::matmul(attn, v), {B, C, H, W});
  return conv(p, prefix + ".proj", out);
}

Value gdfn(const ParamValues& p, const std::string& prefix, const Value& x) {
  const int64_t C = x.shape()[1];
  Value h = conv(p, prefix + ".expand", x);
  h = conv(p, prefix + ".dw", h, static_cast<int>(4 * C));
  Value u = O::slice_axis(h, 1, 0, 2 * C);
  Value v = O::slice_axis(h, 1, 2 * C, 2 * C);
  return conv(p, prefix + ".proj", O::mul(O::silu(u), v));
}

Value restormer_block(const ParamValues& p, const std::string& b, const Value& x, int heads) {
  Value y = O::add(x, channel_attention(p, b + ".attn", layernorm_c(p, b + ".ln1", x), heads));
  return O::add(y, gdfn(p, b + ".ffn", layernorm_c(p, b + ".ln2", y)));
}

// Spatial-token cross attention between the two source streams, run at half
// resolution to bound cost at 128x128.
Value cross_attention(const ParamValues& p, const std::string& prefix, const Value& xq,
                      const Value& xkv, int heads) {
  const auto& s = xq.shape();
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t dh = C / heads;
  const int64_t N = H * W;
  auto tokens = [&](const Value& t) {
    return O::transpose_last2(O::reshape(t, {B, heads, dh, N}));  // [B,heads,N,dh]
  };
  Value q = tokens(conv(p, prefix + ".q", xq));
  Value k = tokens(conv(p, prefix + ".k", xkv));
  Value v = tokens(conv(p, prefix + ".v", xkv));
  Value attn = O::mul_scalar(O::matmul(q, O::transpose_last2(k)),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  attn = O::softmax_lastdim(attn);
  Value out = O::reshape(O::transpose_last2(O::matmul(attn, v)), {B, C, H, W});
  return conv(p, prefix + ".proj", out);
}

Value encode(const ParamValues& p, const std::string& enc, const Value& x) {
  Value h = O::silu(conv(p, enc + ".conv0", x));
  return O::silu(conv(p, enc + ".conv1", h));
}

Value adaptive_fusion(const ParamValues& p, const NetConfig& cfg, const Value& fa,
                      const Value& fb) {
  if (cfg.ablation == Ablation::concat_afm)
    return conv(p, "afm.fuse", O::concat({fa, fb}, 1));

  Value ia = fa, ib = fb;
  if (cfg.ablation != Ablation::no_interaction) {
    const int64_t H = fa.shape()[2], W = fa.shape()[3];
    const int pb = static_cast<int>(H % 2), pr = static_cast<int>(W % 2);
    auto down = [&](const Value& t) {
      Value u = (pb || pr) ? O::pad_replicate(t, 0, pb, 0, pr) : t;
      return O::avgpool2(u);
    };
    auto up = [&](const Value& t) {
      Value u = O::upsample2(t);
      return (pb || pr) ? O::crop(u, 0, pb, 0, pr) : u;
    };
    Value fa2 = down(fa), fb2 = down(fb);
    ia = O::add(fa, up(cross_attention(p, "afm.a", fa2, fb2, cfg.attention_heads)));
    ib = O::add(fb, up(cross_attention(p, "afm.b", fb2, fa2, cfg.attention_heads)));
  }
  Value cat = O::concat({ia, ib}, 1);
  if (cfg.ablation != Ablation::no_gating)
    cat = O::mul(cat, O::sigmoid(conv(p, "afm.gate", cat)));
  return conv(p, "afm.fuse", cat);
}

Value fusion_trunk(const ParamValues& p, const Value& ia, const Value& ib) {
  const NetConfig& cfg = p.net_config();
  Value fa = encode(p, "enc_a", ia);
  Value fb = encode(p, "enc_b", ib);
  Value f = adaptive_fusion(p, cfg, fa, fb);
  for (int i = 0; i < cfg.num_blocks; ++i)
    f = restormer_block(p, "blk" + std::to_string(i), f, cfg.attention_heads);
  return O::silu(conv(p, "dec.conv0", f));
}

void check_pair(const Value& ia, const Value& ib, const char* who) {
  if (ia.shape().size() != 4 || ia.shape()[1] != 1)
    throw ShapeError(std::string(who) + ": expected [B,1,H,W], got " + shape_str(ia.shape()));
  if (ia.shape() != ib.shape())
    throw ShapeError(std::string(who) + ": source shapes differ: " + shape_str(ia.shape()) +
                     " vs " + shape_str(ib.shape()));
}

}  // namespace

ParameterCollection init_params(Role role, const NetConfig& cfg, uint64_t seed) {
  if (role != Role::F && cfg.ablation == Ablation::decision_level)
    throw ConfigError("decision_level ablation is only valid for the fusion module");
  ParameterCollection pc(role, cfg, seed);
  Rng rng = Rng(seed).split(static_cast<uint64_t>(role) + 101);
  for (const auto& e : param_spec(role, cfg)) {
    Tensor t = Tensor::zeros(e.shape);
    switch (e.init) {
      case Init::zeros:
        break;
      case Init::ones:
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = 1.0;
        break;
      case Init::kaiming: {
        int64_t fan_in = 1;
        for (size_t d = 1; d < e.shape.size(); ++d) fan_in *= e.shape[d];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(-bound, bound);
        break;
      }
    }
    pc.add(e.name, std::move(t));
  }
  return pc;
}

losses::WeightMaps proposal_forward(const ParamValues& theta_p, const Value& ia,
                                    const Value& ib, const losses::GradField& ga,
                                    const losses::GradField& gb) {
  theta_p.require_role(Role::P, "proposal_forward");
  check_pair(ia, ib, "proposal_forward");
  if (ga.gx.shape() != ia.shape() || gb.gx.shape() != ib.shape())
    throw ShapeError("proposal_forward: gradient fields do not match the sources");
  Value feats = O::concat(
      {ia, ib, O::abs_(ga.gx), O::abs_(ga.gy), O::abs_(gb.gx), O::abs_(gb.gy)}, 1);
  Value h = O::silu(conv(theta_p, "conv0", feats));
  h = O::silu(conv(theta_p, "conv1", h));
  Value logits = conv(theta_p, "head", h);  // [B,4,H,W]
  Value lwa = O::slice_axis(logits, 1, 0, 1);
  Value lwb = O::slice_axis(logits, 1, 1, 1);
  Value lva = O::slice_axis(logits, 1, 2, 1);
  Value lvb = O::slice_axis(logits, 1, 3, 1);
  // two-way softmax: sigmoid of the logit difference, complement for the twin
  Value wa = O::sigmoid(O::sub(lwa, lwb));
  Value va = O::sigmoid(O::sub(lva, lvb));
  return {wa, O::add_scalar(O::neg(wa), 1.0), va, O::add_scalar(O::neg(va), 1.0)};
}

losses::WeightMaps proposal_forward(const ParamValues& theta_p, const Value& ia,
                                    const Value& ib) {
  return proposal_forward(theta_p, ia, ib, losses::sobel_raw(ia), losses::sobel_raw(ib));
}

Value decision_combine(const Value& wa, const Value& ia, const Value& ib) {
  return O::add(O::mul(wa, ia), O::mul(O::add_scalar(O::neg(wa), 1.0), ib));
}

Value fusion_forward(const ParamValues& theta_f, const Value& ia, const Value& ib) {
  theta_f.require_role(Role::F, "fusion_forward");
  check_pair(ia, ib, "fusion_forward");
  Value h = fusion_trunk(theta_f, ia, ib);
  Value head = conv(theta_f, "dec.head", h);
  if (theta_f.net_config().ablation == Ablation::decision_level)
    return decision_combine(O::sigmoid(head), ia, ib);
  return O::sigmoid(head);
}

Value decision_fusion_forward(const ParamValues& theta_f, const Value& ia, const Value& ib) {
  if (theta_f.net_config().ablation != Ablation::decision_level)
    throw ConfigError("decision_fusion_forward requires ablation = decision_level");
  return fusion_forward(theta_f, ia, ib);
}

std::pair<Value, Value> reconstruction_forward(const ParamValues& theta_r,
                                               const Value& ifused) {
  theta_r.require_role(Role::R, "reconstruction_forward");
  if (ifused.shape().size() != 4 || ifused.shape()[1] != 1)
    throw ShapeError("reconstruction_forward: expected [B,1,H,W], got " +
                     shape_str(ifused.shape()));
  Value t = O::silu(conv(theta_r, "trunk.conv0", ifused));
  t = O::silu(conv(theta_r, "trunk.conv1", t));
  auto branch = [&](const char* br) {
    Value h = O::silu(conv(theta_r, std::string(br) + ".conv0", t));
    return O::sigmoid(conv(theta_r, std::string(br) + ".head", h));
  };
  return {branch("branch_a"), branch("branch_b")};
}

}  // namespace refusion::nets

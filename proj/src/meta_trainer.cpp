#include "refusion/meta_trainer.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace refusion::meta {

using ad::Value;
using data::BatchRole;
using data::TaskBatch;
using nets::ParameterCollection;
using nets::ParamValues;
namespace O = ad::ops;

namespace {

Value cv(const Tensor& t) { return Value::constant(t); }

void require_role(const TaskBatch& b, BatchRole want, const char* who) {
  if (b.role != want)
    throw ContractError(std::string(who) + ": expected a " + data::batch_role_str(want) +
                        " batch, got " + data::batch_role_str(b.role));
}

double global_norm(const std::vector<Value>& grads) {
  double s = 0.0;
  for (const auto& g : grads) {
    const double* p = g.val().data();
    for (int64_t i = 0; i < g.numel(); ++i) s += p[i] * p[i];
  }
  return std::sqrt(s);
}

double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads) {
    const double* p = g.data();
    for (int64_t i = 0; i < g.numel(); ++i) s += p[i] * p[i];
  }
  return std::sqrt(s);
}

void check_finite(const std::vector<Value>& grads, const char* stage) {
  for (const auto& g : grads)
    if (!g.val().all_finite())
      throw TrainingError(std::string("non-finite gradient in ") + stage);
}

void check_finite(const std::vector<Tensor>& grads, const char* stage) {
  for (const auto& g : grads)
    if (!g.all_finite())
      throw TrainingError(std::string("non-finite gradient in ") + stage);
}

// theta' = theta - eta * clip(g). The clip factor is detached: the
// second-order path differentiates the step, not the guard.
ParamValues sgd_step(const ParamValues& theta, const std::vector<Value>& grads,
                     double eta, double clip_norm) {
  double scale = 1.0;
  const double gn = global_norm(grads);
  if (clip_norm > 0.0 && gn > clip_norm) scale = clip_norm / gn;
  std::vector<Value> out;
  out.reserve(grads.size());
  const auto& items = theta.items();
  for (size_t i = 0; i < grads.size(); ++i)
    out.push_back(O::sub(items[i].second, O::mul_scalar(grads[i], eta * scale)));
  return theta.with_values(out);
}

}  // namespace

double rel_err(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

AdamState AdamState::init_like(const ParameterCollection& pc) {
  AdamState st;
  for (const auto& e : pc.entries()) {
    st.m.push_back(Tensor::zeros(e.tensor.shape()));
    st.v.push_back(Tensor::zeros(e.tensor.shape()));
  }
  return st;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adam_step(ParameterCollection& pc, AdamState& st, const std::vector<Tensor>& grads,
               double lr, double clip_norm) {
  if (grads.size() != pc.size()) throw ContractError("adam_step: gradient count mismatch");
  double scale = 1.0;
  const double gn = global_norm(grads);
  if (clip_norm > 0.0 && gn > clip_norm) scale = clip_norm / gn;
  st.t += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(st.t));
  for (size_t e = 0; e < grads.size(); ++e) {
    Tensor& theta = pc.entries()[e].tensor;
    Tensor& m = st.m[e];
    Tensor& v = st.v[e];
    const double* g = grads[e].data();
    for (int64_t i = 0; i < theta.numel(); ++i) {
      const double gi = g[i] * scale;
      m.at(i) = kBeta1 * m.at(i) + (1.0 - kBeta1) * gi;
      v.at(i) = kBeta2 * v.at(i) + (1.0 - kBeta2) * gi * gi;
      theta.at(i) -= lr * (m.at(i) / bc1) / (std::sqrt(v.at(i) / bc2) + kAdamEps);
    }
  }
}

std::vector<Tensor> to_tensors(const std::vector<Value>& vals) {
  std::vector<Tensor> out;
  out.reserve(vals.size());
  for (const auto& v : vals) out.push_back(v.val());
  return out;
}

}  // namespace

TrainState init_state(const nets::NetConfig& ncfg, const TrainConfig& cfg) {
  TrainState st;
  st.F = nets::init_params(nets::Role::F, ncfg, cfg.seed);
  st.R = nets::init_params(nets::Role::R, ncfg, cfg.seed);
  st.P = nets::init_params(nets::Role::P, ncfg, cfg.seed);
  st.adam_F = AdamState::init_like(st.F);
  st.adam_R = AdamState::init_like(st.R);
  st.adam_P = AdamState::init_like(st.P);
  st.data_rng = Rng(cfg.seed).split(0x5EED);
  return st;
}

losses::WeightMaps propose_maps(const ParamValues& theta_p, const TaskBatch& batch) {
  return nets::proposal_forward(theta_p, cv(batch.a), cv(batch.b));
}

InnerResult inner_update(const ParamValues& theta_f, const ParamValues& theta_r,
                         const ParamValues& theta_p, const TaskBatch& batch_mtr,
                         const TrainConfig& cfg) {
  require_role(batch_mtr, BatchRole::meta_train, "inner_update");
  theta_f.require_role(nets::Role::F, "inner_update");
  theta_r.require_role(nets::Role::R, "inner_update");
  theta_p.require_role(nets::Role::P, "inner_update");

  Value a = cv(batch_mtr.a), b = cv(batch_mtr.b);
  losses::WeightMaps maps = propose_maps(theta_p, batch_mtr);
  Value ifm = nets::fusion_forward(theta_f, a, b);
  Value lf = losses::fusion_loss(a, b, ifm, maps, cfg.loss);

  // Eq. 7: the theta_P dependency is retained through the proposal maps
  auto gF = ad::grad(lf, theta_f.values(), {.create_graph = !cfg.first_order_only});
  check_finite(gF, "inner_update (fusion)");
  ParamValues theta_fp = sgd_step(theta_f, gF, cfg.inner_lr_fusion, cfg.clip_norm);

  // Eq. 8: the fused input is produced by the current theta_F (Algorithm 1
  // computes it before the step); no meta path is routed through theta_R'
  // unless the experimental flag asks for the bookkeeping.
  Value recon_in = cfg.meta_through_recon ? ifm : ifm.detach();
  auto [ra, rb] = nets::reconstruction_forward(theta_r, recon_in);
  Value lr = losses::reconstruction_loss(a, b, ra, rb, cfg.loss);
  auto gR = ad::grad(lr, theta_r.values(), {.create_graph = cfg.meta_through_recon});
  check_finite(gR, "inner_update (reconstruction)");
  ParamValues theta_rp = sgd_step(theta_r, gR, cfg.inner_lr_recon, cfg.clip_norm);

  InnerResult res;
  res.theta_fp = std::move(theta_fp);
  res.theta_rp = std::move(theta_rp);
  res.retained = !cfg.first_order_only;
  res.lf = lf.item();
  res.lr = lr.item();
  res.batch_mtr = batch_mtr;
  return res;
}

std::vector<Tensor> meta_gradient(const ParamValues& theta_f, const ParamValues& theta_r,
                                  const ParamValues& theta_p, const InnerResult& inner,
                                  const TaskBatch& batch_mts, const TrainConfig& cfg,
                                  double* lr_mts_out) {
  require_role(batch_mts, BatchRole::meta_test, "outer_update");
  if (!cfg.first_order_only && !inner.retained)
    throw ContractError(
        "outer_update: theta_F' does not carry the retained theta_P dependency "
        "(inner step ran in first-order mode)");

  Value a = cv(batch_mts.a), b = cv(batch_mts.b);
  Value ifm = nets::fusion_forward(inner.theta_fp, a, b);
  auto [ra, rb] = nets::reconstruction_forward(inner.theta_rp, ifm);
  Value lr_mts = losses::reconstruction_loss(a, b, ra, rb, cfg.loss);
  if (lr_mts_out) *lr_mts_out = lr_mts.item();

  if (!cfg.first_order_only) {
    auto gP = ad::grad(lr_mts, theta_p.values());
    check_finite(gP, "outer_update");
    return to_tensors(gP);
  }

  // First-order route: meta_grad = -eta * d/dP <v, dL_f/dtheta_F> estimated
  // by a central difference of first gradients along v = dL_r/dtheta_F'.
  if (!inner.batch_mtr) throw ContractError("outer_update: inner result lacks its batch");
  auto v = ad::grad(lr_mts, inner.theta_fp.values());
  check_finite(v, "outer_update (sensitivity)");

  double vmax = 0.0, thmax = 0.0;
  for (const auto& g : v) vmax = std::max(vmax, g.val().max_abs());
  for (const auto& [_, t] : theta_f.items()) thmax = std::max(thmax, t.val().max_abs());
  const double eps = 1e-5 * (1.0 + thmax) / std::max(vmax, 1e-12);

  const TaskBatch& mtr = *inner.batch_mtr;
  Value am = cv(mtr.a), bm = cv(mtr.b);
  auto grad_p_at = [&](double sign) {
    std::vector<Value> shifted;
    const auto& items = theta_f.items();
    for (size_t i = 0; i < items.size(); ++i) {
      Tensor t = items[i].second.val().clone();
      const double* pv = v[i].val().data();
      for (int64_t k = 0; k < t.numel(); ++k) t.at(k) += sign * eps * pv[k];
      shifted.push_back(Value::constant(std::move(t)));
    }
    ParamValues th_shift = theta_f.with_values(shifted);
    losses::WeightMaps maps = propose_maps(theta_p, mtr);
    Value lf = losses::fusion_loss(am, bm, nets::fusion_forward(th_shift, am, bm), maps,
                                   cfg.loss);
    return ad::grad(lf, theta_p.values());
  };
  auto gp = grad_p_at(1.0);
  auto gm = grad_p_at(-1.0);
  std::vector<Tensor> meta;
  meta.reserve(gp.size());
  for (size_t i = 0; i < gp.size(); ++i) {
    Tensor t = Tensor::zeros(gp[i].shape());
    const double* pp = gp[i].val().data();
    const double* pm = gm[i].val().data();
    for (int64_t k = 0; k < t.numel(); ++k)
      t.at(k) = -cfg.inner_lr_fusion * (pp[k] - pm[k]) / (2.0 * eps);
    meta.push_back(std::move(t));
  }
  check_finite(meta, "outer_update (first-order)");
  return meta;
}

double outer_update(TrainState& state, const ParamValues& theta_f,
                    const ParamValues& theta_r, const ParamValues& theta_p,
                    const InnerResult& inner, const TaskBatch& batch_mts,
                    const TrainConfig& cfg) {
  (void)theta_r;
  double lr_mts = 0.0;
  auto gP = meta_gradient(theta_f, theta_r, theta_p, inner, batch_mts, cfg, &lr_mts);
  adam_step(state.P, state.adam_P, gP, cfg.outer_lr, cfg.clip_norm);
  return lr_mts;
}

namespace {

losses::WeightMaps uniform_maps(const Tensor& like) {
  Tensor half = Tensor::full(like.shape(), 0.5);
  return {cv(half), cv(half), cv(half), cv(half)};
}

}  // namespace

std::pair<double, double> fusion_update(TrainState& state, const TaskBatch& batch_ftr,
                                        const TrainConfig& cfg) {
  require_role(batch_ftr, BatchRole::fusion_train, "fusion_update");
  Value a = cv(batch_ftr.a), b = cv(batch_ftr.b);

  // Eq. 11: theta_P is frozen here; the maps enter as constants.
  losses::WeightMaps maps =
      cfg.fixed_uniform_maps
          ? uniform_maps(batch_ftr.a)
          : propose_maps(ParamValues::constants(state.P), batch_ftr);

  ParamValues thF = ParamValues::leaves(state.F);
  Value ifm = nets::fusion_forward(thF, a, b);
  Value lf = losses::fusion_loss(a, b, ifm, maps, cfg.loss);
  auto gF = ad::grad(lf, thF.values());
  check_finite(gF, "fusion_update (fusion)");
  adam_step(state.F, state.adam_F, to_tensors(gF), cfg.fusion_lr, cfg.clip_norm);

  // Eq. 12: the fused image is detached, so L_r never contributes to theta_F.
  ParamValues thR = ParamValues::leaves(state.R);
  auto [ra, rb] = nets::reconstruction_forward(thR, ifm.detach());
  Value lr = losses::reconstruction_loss(a, b, ra, rb, cfg.loss);
  auto gR = ad::grad(lr, thR.values());
  check_finite(gR, "fusion_update (reconstruction)");
  adam_step(state.R, state.adam_R, to_tensors(gR), cfg.recon_lr, cfg.clip_norm);

  return {lf.item(), lr.item()};
}

RoutingProbe loss_routing_probe(const TrainState& state, const TaskBatch& batch_ftr,
                                const TrainConfig& cfg) {
  require_role(batch_ftr, BatchRole::fusion_train, "loss_routing_probe");
  Value a = cv(batch_ftr.a), b = cv(batch_ftr.b);
  RoutingProbe probe;

  // Tap 1: the fusion step's loss, with theta_P lifted as live leaves but
  // consumed exactly the way fusion_update consumes it (detached constants).
  ParamValues thP = ParamValues::leaves(state.P);
  losses::WeightMaps maps = propose_maps(ParamValues::constants(state.P), batch_ftr);
  ParamValues thF = ParamValues::leaves(state.F);
  Value ifm = nets::fusion_forward(thF, a, b);
  Value lf = losses::fusion_loss(a, b, ifm, maps, cfg.loss);
  auto gP = ad::grad(lf, thP.values());
  probe.grad_p_from_lf = 0.0;
  for (const auto& g : gP) probe.grad_p_from_lf = std::max(probe.grad_p_from_lf, g.val().max_abs());

  // Tap 2: the reconstruction step's loss w.r.t. theta_F through the detached
  // fused image.
  ParamValues thR = ParamValues::leaves(state.R);
  auto [ra, rb] = nets::reconstruction_forward(thR, ifm.detach());
  Value lr = losses::reconstruction_loss(a, b, ra, rb, cfg.loss);
  auto gF = ad::grad(lr, thF.values());
  probe.grad_f_from_lr = 0.0;
  for (const auto& g : gF) probe.grad_f_from_lr = std::max(probe.grad_f_from_lr, g.val().max_abs());
  return probe;
}

double evaluate_recon_loss(const TrainState& state, const data::PairDataset& ds,
                           const TrainConfig& cfg, size_t max_pairs) {
  if (ds.empty()) throw ConstraintError("evaluate_recon_loss: empty dataset");
  ad::NoGradGuard ng;
  ParamValues thF = ParamValues::constants(state.F);
  ParamValues thR = ParamValues::constants(state.R);
  const size_t n = std::min(max_pairs, ds.size());
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const auto& p = ds[i];
    const int64_t H = p.lum_a.shape(0), W = p.lum_a.shape(1);
    Tensor a({1, 1, H, W}), b({1, 1, H, W});
    for (int64_t k = 0; k < H * W; ++k) {
      a.at(k) = p.lum_a.at(k);
      b.at(k) = p.lum_b.at(k);
    }
    Value av = cv(a), bv = cv(b);
    Value ifm = nets::fusion_forward(thF, av, bv);
    auto [ra, rb] = nets::reconstruction_forward(thR, ifm);
    acc += losses::reconstruction_loss(av, bv, ra, rb, cfg.loss).item();
  }
  return acc / static_cast<double>(n);
}

namespace {

uint64_t epoch_seed(uint64_t seed, int64_t epoch) {
  return Rng(seed).split(9000 + static_cast<uint64_t>(epoch)).next_u64();
}

std::string epoch_tag(int64_t e) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03lld", static_cast<long long>(e));
  return buf;
}

}  // namespace

void run_training(TrainState& st, const data::PairDataset& ftr,
                  const std::optional<std::pair<data::PairDataset, data::PairDataset>>&
                      fixed_split,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  if (ftr.empty()) throw ConstraintError("train: empty fusion-train dataset");
  if (fixed_split && (fixed_split->first.empty() || fixed_split->second.empty()))
    throw ConstraintError("train: empty meta split");

  // The held-out evaluation set is the (seed-fixed) epoch-1 meta-test split.
  data::PairDataset eval_split =
      fixed_split ? fixed_split->second : data::split_meta(ftr, epoch_seed(cfg.seed, 0)).second;

  if (st.epoch == 0 && st.history.empty())
    st.history.push_back({st.global_step, "eval", std::numeric_limits<double>::quiet_NaN(),
                          evaluate_recon_loss(st, eval_split, cfg)});

  while (st.epoch < cfg.epochs) {
    const int64_t epoch = st.epoch;
    auto split = fixed_split ? *fixed_split : data::split_meta(ftr, epoch_seed(cfg.seed, epoch));
    const data::PairDataset& mtr = split.first;
    const data::PairDataset& mts = split.second;

    if (!cfg.fixed_uniform_maps) {
      for (int m = 0; m < cfg.meta_steps; ++m) {
        TaskBatch bmtr = data::sample_patch_batch(mtr, cfg.batch_size, cfg.patch_size,
                                                  st.data_rng, BatchRole::meta_train);
        ParamValues thF = ParamValues::leaves(st.F);
        ParamValues thR = ParamValues::leaves(st.R);
        ParamValues thP = ParamValues::leaves(st.P);
        InnerResult inner = inner_update(thF, thR, thP, bmtr, cfg);
        TaskBatch bmts = data::sample_patch_batch(mts, cfg.batch_size, cfg.patch_size,
                                                  st.data_rng, BatchRole::meta_test);
        const double lr_mts = outer_update(st, thF, thR, thP, inner, bmts, cfg);
        st.global_step++;
        st.history.push_back({st.global_step, "meta", inner.lf, lr_mts});
      }
    }
    for (int n = 0; n < cfg.fusion_steps; ++n) {
      TaskBatch b = data::sample_patch_batch(ftr, cfg.batch_size, cfg.patch_size, st.data_rng,
                                             BatchRole::fusion_train);
      auto [lf, lr] = fusion_update(st, b, cfg);
      st.global_step++;
      st.history.push_back({st.global_step, "fusion", lf, lr});
    }
    st.epoch++;
    st.history.push_back({st.global_step, "eval", std::numeric_limits<double>::quiet_NaN(),
                          evaluate_recon_loss(st, eval_split, cfg)});
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0)
      st.save(out_dir / ("state_epoch_" + epoch_tag(st.epoch) + ".rfn"));
  }

  if (!out_dir.empty()) {
    st.save(out_dir / "state_final.rfn");
    st.F.save(out_dir / "F.rfn");
    st.R.save(out_dir / "R.rfn");
    st.P.save(out_dir / "P.rfn");
    write_loss_history(out_dir / "loss_history.csv", st.history);
  }
}

TrainState train(const data::PairDataset& ftr, const nets::NetConfig& ncfg,
                 const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  TrainState st = init_state(ncfg, cfg);
  run_training(st, ftr, std::nullopt, cfg, out_dir);
  return st;
}

TrainState train(const data::PairDataset& ftr, const data::PairDataset& mtr,
                 const data::PairDataset& mts, const nets::NetConfig& ncfg,
                 const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  TrainState st = init_state(ncfg, cfg);
  run_training(st, ftr, std::make_pair(mtr, mts), cfg, out_dir);
  return st;
}

void write_loss_history(const std::filesystem::path& path,
                        const std::vector<LossRecord>& history) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write loss history: " + path.string());
  os.precision(12);
  os << "step,stage,L_f,L_r\n";
  for (const auto& rec : history) {
    os << rec.step << "," << rec.stage << ",";
    if (std::isfinite(rec.lf)) os << rec.lf;
    os << ",";
    if (std::isfinite(rec.lr)) os << rec.lr;
    os << "\n";
  }
}

// ---- state serialization ----

void TrainState::save(const std::filesystem::path& path) const {
  using nlohmann::json;
  json hist = json::array();
  for (const auto& r : history) {
    json lf = std::isfinite(r.lf) ? json(r.lf) : json(nullptr);
    json lr = std::isfinite(r.lr) ? json(r.lr) : json(nullptr);
    hist.push_back(json::array({r.step, r.stage, lf, lr}));
  }
  const auto rng_state = data_rng.state();
  json header{{"kind", "train_state"},
              {"epoch", epoch},
              {"global_step", global_step},
              {"rng", {rng_state[0], rng_state[1], rng_state[2], rng_state[3]}},
              {"adam_t", {{"F", adam_F.t}, {"R", adam_R.t}, {"P", adam_P.t}}},
              {"seeds", {{"F", F.seed()}, {"R", R.seed()}, {"P", P.seed()}}},
              {"net",
               {{"base_channels", F.net_config().base_channels},
                {"num_blocks", F.net_config().num_blocks},
                {"attention_heads", F.net_config().attention_heads},
                {"ablation", nets::ablation_str(F.net_config().ablation)}}},
              {"history", std::move(hist)},
              {"framework_version", nets::kFrameworkVersion}};

  nets::Archive a;
  a.header_json = header.dump();
  auto push_collection = [&](const std::string& prefix, const ParameterCollection& pc) {
    for (const auto& e : pc.entries()) a.tensors.push_back({prefix + "/" + e.name, e.tensor});
  };
  auto push_adam = [&](const std::string& prefix, const ParameterCollection& pc,
                       const AdamState& ast) {
    for (size_t i = 0; i < pc.size(); ++i) {
      a.tensors.push_back({prefix + "/m/" + pc.entries()[i].name, ast.m[i]});
      a.tensors.push_back({prefix + "/v/" + pc.entries()[i].name, ast.v[i]});
    }
  };
  push_collection("F", F);
  push_collection("R", R);
  push_collection("P", P);
  push_adam("adam_F", F, adam_F);
  push_adam("adam_R", R, adam_R);
  push_adam("adam_P", P, adam_P);
  nets::save_archive(path, a);
}

TrainState TrainState::load(const std::filesystem::path& path) {
  using nlohmann::json;
  nets::Archive a = nets::load_archive(path);
  json header = json::parse(a.header_json);
  if (header.value("kind", "") != "train_state")
    throw IoError("not a train-state checkpoint: " + path.string());

  nets::NetConfig ncfg;
  ncfg.base_channels = header["net"]["base_channels"].get<int>();
  ncfg.num_blocks = header["net"]["num_blocks"].get<int>();
  ncfg.attention_heads = header["net"]["attention_heads"].get<int>();
  ncfg.ablation = nets::ablation_from(header["net"]["ablation"].get<std::string>());

  std::map<std::string, Tensor> by_name;
  for (auto& e : a.tensors) by_name.emplace(e.name, std::move(e.tensor));

  TrainState st;
  auto load_collection = [&](const std::string& prefix, nets::Role role, uint64_t seed) {
    ParameterCollection pc(role, ncfg, seed);
    // the parameter spec order is deterministic; rebuild it from a fresh init
    ParameterCollection ref = nets::init_params(role, ncfg, seed);
    for (const auto& e : ref.entries()) {
      auto it = by_name.find(prefix + "/" + e.name);
      if (it == by_name.end()) throw IoError("missing tensor " + prefix + "/" + e.name);
      pc.add(e.name, std::move(it->second));
    }
    return pc;
  };
  auto load_adam = [&](const std::string& prefix, const ParameterCollection& pc, int64_t t) {
    AdamState ast;
    ast.t = t;
    for (const auto& e : pc.entries()) {
      ast.m.push_back(by_name.at(prefix + "/m/" + e.name));
      ast.v.push_back(by_name.at(prefix + "/v/" + e.name));
    }
    return ast;
  };

  st.F = load_collection("F", nets::Role::F, header["seeds"]["F"].get<uint64_t>());
  st.R = load_collection("R", nets::Role::R, header["seeds"]["R"].get<uint64_t>());
  st.P = load_collection("P", nets::Role::P, header["seeds"]["P"].get<uint64_t>());
  st.adam_F = load_adam("adam_F", st.F, header["adam_t"]["F"].get<int64_t>());
  st.adam_R = load_adam("adam_R", st.R, header["adam_t"]["R"].get<int64_t>());
  st.adam_P = load_adam("adam_P", st.P, header["adam_t"]["P"].get<int64_t>());
  st.epoch = header["epoch"].get<int64_t>();
  st.global_step = header["global_step"].get<int64_t>();
  std::array<uint64_t, 4> rng_state{};
  for (int i = 0; i < 4; ++i) rng_state[i] = header["rng"][i].get<uint64_t>();
  st.data_rng.set_state(rng_state);
  for (const auto& rec : header["history"]) {
    LossRecord r;
    r.step = rec[0].get<int64_t>();
    r.stage = rec[1].get<std::string>();
    r.lf = rec[2].is_null() ? std::numeric_limits<double>::quiet_NaN() : rec[2].get<double>();
    r.lr = rec[3].is_null() ? std::numeric_limits<double>::quiet_NaN() : rec[3].get<double>();
    st.history.push_back(std::move(r));
  }
  return st;
}

// ---- oracles ----

namespace {

// L_r(mts) after a plain inner update; the numeric path matches the
// differentiable one exactly.
double composed_meta_loss(const ParameterCollection& F, const ParameterCollection& R,
                          const ParameterCollection& P, const TaskBatch& mtr,
                          const TaskBatch& mts, const TrainConfig& cfg) {
  TrainConfig plain = cfg;
  plain.first_order_only = true;  // no graph retention needed for a value
  ParamValues thF = ParamValues::leaves(F);
  ParamValues thR = ParamValues::leaves(R);
  ParamValues thP = ParamValues::constants(P);
  InnerResult inner = inner_update(thF, thR, thP, mtr, plain);
  ad::NoGradGuard ng;
  Value a = cv(mts.a), b = cv(mts.b);
  Value ifm = nets::fusion_forward(inner.theta_fp, a, b);
  auto [ra, rb] = nets::reconstruction_forward(inner.theta_rp, ifm);
  return losses::reconstruction_loss(a, b, ra, rb, cfg.loss).item();
}

void guard_tiny(const ParameterCollection& F, const ParameterCollection& R,
                const ParameterCollection& P) {
  const int64_t total = F.total_values() + R.total_values() + P.total_values();
  if (total > 10000)
    throw ContractError("oracle guard: " + std::to_string(total) +
                        " parameters exceed the 1e4 oracle budget");
}

}  // namespace

double meta_gradient_oracle(const ParameterCollection& F, const ParameterCollection& R,
                            const ParameterCollection& P, const TaskBatch& batch_mtr,
                            const TaskBatch& batch_mts, const TrainConfig& cfg,
                            int64_t entry_index, double step) {
  guard_tiny(F, R, P);
  ParameterCollection Pp = P.deep_copy();
  int64_t remaining = entry_index;
  for (auto& e : Pp.entries()) {
    if (remaining < e.tensor.numel()) {
      const double orig = e.tensor.at(remaining);
      e.tensor.at(remaining) = orig + step;
      const double lp = composed_meta_loss(F, R, Pp, batch_mtr, batch_mts, cfg);
      e.tensor.at(remaining) = orig - step;
      const double lm = composed_meta_loss(F, R, Pp, batch_mtr, batch_mts, cfg);
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw TrainingError("meta_gradient_oracle: non-finite loss at perturbed point");
      return (lp - lm) / (2.0 * step);
    }
    remaining -= e.tensor.numel();
  }
  throw ContractError("meta_gradient_oracle: entry index out of range");
}

namespace {

// Near-zero entries are dominated by finite-difference truncation noise, so
// the relative-error floor scales with the gradient's own magnitude (the
// usual atol/rtol mix). A wrong formula produces errors on the scale of the
// gradients themselves and still trips the tolerance.
double grad_floor(const std::vector<ad::Value>& grads) {
  double gmax = 0.0;
  for (const auto& g : grads) gmax = std::max(gmax, g.val().max_abs());
  return std::max(1e-6, 1e-3 * gmax);
}

double grad_floor(const std::vector<Tensor>& grads) {
  double gmax = 0.0;
  for (const auto& g : grads) gmax = std::max(gmax, g.max_abs());
  return std::max(1e-6, 1e-3 * gmax);
}

}  // namespace

GradCheckReport check_fusion_gradient(const ParameterCollection& F,
                                      const ParameterCollection& P, const TaskBatch& batch,
                                      const TrainConfig& cfg, double step) {
  auto loss_at = [&](const ParameterCollection& Fc) {
    ad::NoGradGuard ng;
    Value a = cv(batch.a), b = cv(batch.b);
    ParamValues thP = ParamValues::constants(P);
    losses::WeightMaps maps = nets::proposal_forward(thP, a, b);
    Value ifm = nets::fusion_forward(ParamValues::constants(Fc), a, b);
    return losses::fusion_loss(a, b, ifm, maps, cfg.loss).item();
  };

  Value a = cv(batch.a), b = cv(batch.b);
  ParamValues thF = ParamValues::leaves(F);
  losses::WeightMaps maps = nets::proposal_forward(ParamValues::constants(P), a, b);
  Value lf = losses::fusion_loss(a, b, nets::fusion_forward(thF, a, b), maps, cfg.loss);
  auto grads = ad::grad(lf, thF.values());

  GradCheckReport rep;
  const double floor = grad_floor(grads);
  ParameterCollection Fc = F.deep_copy();
  for (size_t e = 0; e < Fc.size(); ++e) {
    Tensor& t = Fc.entries()[e].tensor;
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double orig = t.at(i);
      t.at(i) = orig + step;
      const double lp = loss_at(Fc);
      t.at(i) = orig - step;
      const double lm = loss_at(Fc);
      t.at(i) = orig;
      rep.max_rel_err = std::max(
          rep.max_rel_err, rel_err((lp - lm) / (2.0 * step), grads[e].val().at(i), floor));
      rep.entries++;
    }
  }
  return rep;
}

GradCheckReport check_recon_gradient(const ParameterCollection& R,
                                     const ParameterCollection& F, const TaskBatch& batch,
                                     const TrainConfig& cfg, double step) {
  Value a = cv(batch.a), b = cv(batch.b);
  Tensor fused;
  {
    ad::NoGradGuard ng;
    fused = nets::fusion_forward(ParamValues::constants(F), a, b).val();
  }
  auto loss_at = [&](const ParameterCollection& Rc) {
    ad::NoGradGuard ng;
    auto [ra, rb] = nets::reconstruction_forward(ParamValues::constants(Rc), cv(fused));
    return losses::reconstruction_loss(a, b, ra, rb, cfg.loss).item();
  };

  ParamValues thR = ParamValues::leaves(R);
  auto [ra, rb] = nets::reconstruction_forward(thR, cv(fused));
  Value lr = losses::reconstruction_loss(a, b, ra, rb, cfg.loss);
  auto grads = ad::grad(lr, thR.values());

  GradCheckReport rep;
  const double floor = grad_floor(grads);
  ParameterCollection Rc = R.deep_copy();
  for (size_t e = 0; e < Rc.size(); ++e) {
    Tensor& t = Rc.entries()[e].tensor;
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double orig = t.at(i);
      t.at(i) = orig + step;
      const double lp = loss_at(Rc);
      t.at(i) = orig - step;
      const double lm = loss_at(Rc);
      t.at(i) = orig;
      rep.max_rel_err = std::max(
          rep.max_rel_err, rel_err((lp - lm) / (2.0 * step), grads[e].val().at(i), floor));
      rep.entries++;
    }
  }
  return rep;
}

GradCheckReport check_meta_gradient(const ParameterCollection& F, const ParameterCollection& R,
                                    const ParameterCollection& P, const TaskBatch& batch_mtr,
                                    const TaskBatch& batch_mts, const TrainConfig& cfg) {
  guard_tiny(F, R, P);
  ParamValues thF = ParamValues::leaves(F);
  ParamValues thR = ParamValues::leaves(R);
  ParamValues thP = ParamValues::leaves(P);
  InnerResult inner = inner_update(thF, thR, thP, batch_mtr, cfg);
  auto analytic = meta_gradient(thF, thR, thP, inner, batch_mts, cfg);

  GradCheckReport rep;
  const double floor = grad_floor(analytic);
  int64_t flat = 0;
  for (const auto& g : analytic) {
    for (int64_t i = 0; i < g.numel(); ++i, ++flat) {
      const double fd = meta_gradient_oracle(F, R, P, batch_mtr, batch_mts, cfg, flat);
      rep.max_rel_err = std::max(rep.max_rel_err, rel_err(g.at(i), fd, floor));
      rep.entries++;
    }
  }
  return rep;
}

std::pair<double, double> toy_meta_case() {
  const double eta = 0.1;
  auto outer_loss = [&](double p) {
    Value thF = Value::leaf(Tensor::scalar(0.0));
    Value thP = Value::leaf(Tensor::scalar(p));
    Value w = O::sigmoid(thP);
    Value lf = O::add(O::mul(w, O::square(thF)),
                      O::mul(O::add_scalar(O::neg(w), 1.0),
                             O::square(O::add_scalar(thF, -1.0))));
    auto gF = ad::grad(lf, {thF}, {.create_graph = true});
    Value thFp = O::sub(thF, O::mul_scalar(gF[0], eta));
    return O::square(O::add_scalar(thFp, -1.0));
  };
  // analytic
  Value thF = Value::leaf(Tensor::scalar(0.0));
  Value thP = Value::leaf(Tensor::scalar(0.0));
  Value w = O::sigmoid(thP);
  Value lf = O::add(O::mul(w, O::square(thF)),
                    O::mul(O::add_scalar(O::neg(w), 1.0), O::square(O::add_scalar(thF, -1.0))));
  auto gF = ad::grad(lf, {thF}, {.create_graph = true});
  Value thFp = O::sub(thF, O::mul_scalar(gF[0], eta));
  Value lr = O::square(O::add_scalar(thFp, -1.0));
  const double analytic = ad::grad(lr, {thP})[0].item();
  // finite difference
  const double h = 1e-5;
  const double fd = (outer_loss(h).item() - outer_loss(-h).item()) / (2.0 * h);
  return {analytic, fd};
}

}  // namespace refusion::meta

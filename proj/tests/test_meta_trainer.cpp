#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "refusion/meta_trainer.hpp"

using namespace refusion;
using namespace refusion::meta;
using data::BatchRole;
using data::TaskBatch;
using nets::ParameterCollection;
using nets::ParamValues;
namespace fs = std::filesystem;

namespace {

nets::NetConfig tiny_cfg() {
  return {.base_channels = 4, .num_blocks = 1, .attention_heads = 1,
          .ablation = nets::Ablation::full};
}

TrainConfig tiny_train_cfg(uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.inner_lr_fusion = 1e-2;
  cfg.inner_lr_recon = 1e-2;
  cfg.seed = seed;
  cfg.batch_size = 2;
  cfg.patch_size = 8;
  return cfg;
}

TaskBatch random_batch(int64_t b, int64_t hw, BatchRole role, uint64_t seed,
                       const char* flavor = "plain") {
  Rng rng = Rng(seed).split(std::hash<std::string>{}(flavor));
  Tensor a({b, 1, hw, hw}), bb({b, 1, hw, hw});
  for (int64_t i = 0; i < a.numel(); ++i) {
    a.at(i) = rng.next_double();
    bb.at(i) = rng.next_double();
  }
  return TaskBatch(std::move(a), std::move(bb), role);
}

struct TinySystem {
  ParameterCollection F, R, P;
};

TinySystem tiny_system(uint64_t seed, double perturb = 0.2) {
  TinySystem s{nets::init_params(nets::Role::F, tiny_cfg(), seed),
               nets::init_params(nets::Role::R, tiny_cfg(), seed),
               nets::init_params(nets::Role::P, tiny_cfg(), seed)};
  // move the proposal head off its zero init so the meta-gradient is generic
  Rng rng(seed + 7);
  for (auto* pc : {&s.F, &s.R, &s.P})
    for (auto& e : pc->entries())
      for (int64_t i = 0; i < e.tensor.numel(); ++i)
        e.tensor.at(i) += rng.uniform(-perturb, perturb);
  return s;
}

data::PairDataset tiny_dataset(int pairs, int64_t size, uint64_t seed) {
  data::SynthConfig sc;
  sc.pairs = pairs;
  sc.image_size = size;
  sc.blur_sigma = 2.0;
  return data::make_synthetic_dataset(data::TaskKind::multifocus, sc, seed);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("refusion_meta_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("toy scalar meta-gradient: analytic 0.09, oracle agrees") {
  auto [analytic, fd] = toy_meta_case();
  CHECK(std::abs(analytic - 0.09) <= 1e-9);
  CHECK(std::abs(fd - 0.09) <= 1e-6);
}

TEST_CASE("inner update is a plain SGD step that matches finite differences") {
  auto sys = tiny_system(3);
  auto batch = random_batch(2, 8, BatchRole::meta_train, 11);
  TrainConfig cfg = tiny_train_cfg(3);

  ParamValues thF = ParamValues::leaves(sys.F);
  ParamValues thR = ParamValues::leaves(sys.R);
  ParamValues thP = ParamValues::leaves(sys.P);
  InnerResult inner = inner_update(thF, thR, thP, batch, cfg);
  CHECK(inner.retained);
  CHECK(inner.lf > 0.0);

  // (theta_F - theta_F') / eta equals dL_f/dtheta_F, which the first-order
  // oracle certifies against central differences
  auto rep = check_fusion_gradient(sys.F, sys.P, batch, cfg);
  CHECK(rep.entries == sys.F.total_values());
  CHECK(rep.max_rel_err <= 1e-4);

  const auto& f_items = thF.items();
  auto grads = ad::grad(
      losses::fusion_loss(ad::Value::constant(batch.a), ad::Value::constant(batch.b),
                          nets::fusion_forward(thF, ad::Value::constant(batch.a),
                                               ad::Value::constant(batch.b)),
                          propose_maps(thP, batch), cfg.loss),
      thF.values());
  for (size_t e = 0; e < f_items.size(); ++e)
    for (int64_t i = 0; i < grads[e].numel(); ++i) {
      const double implied =
          (f_items[e].second.val().at(i) - inner.theta_fp.items()[e].second.val().at(i)) /
          cfg.inner_lr_fusion;
      CHECK(std::abs(implied - grads[e].val().at(i)) <= 1e-9);
    }
}

TEST_CASE("zero inner learning rate keeps theta' identical") {
  auto sys = tiny_system(5);
  auto batch = random_batch(1, 8, BatchRole::meta_train, 13);
  TrainConfig cfg = tiny_train_cfg(5);
  cfg.inner_lr_fusion = 0.0;
  cfg.inner_lr_recon = 0.0;
  ParamValues thF = ParamValues::leaves(sys.F);
  ParamValues thR = ParamValues::leaves(sys.R);
  ParamValues thP = ParamValues::leaves(sys.P);
  InnerResult inner = inner_update(thF, thR, thP, batch, cfg);
  for (size_t e = 0; e < thF.items().size(); ++e)
    for (int64_t i = 0; i < thF.items()[e].second.numel(); ++i)
      CHECK(inner.theta_fp.items()[e].second.val().at(i) ==
            thF.items()[e].second.val().at(i));
}

TEST_CASE("inner update rejects wrong batch roles") {
  auto sys = tiny_system(7);
  auto batch = random_batch(1, 8, BatchRole::fusion_train, 17);
  TrainConfig cfg = tiny_train_cfg(7);
  ParamValues thF = ParamValues::leaves(sys.F);
  ParamValues thR = ParamValues::leaves(sys.R);
  ParamValues thP = ParamValues::leaves(sys.P);
  CHECK_THROWS_AS(inner_update(thF, thR, thP, batch, cfg), ContractError);
}

TEST_CASE("recon gradient oracle passes at 1e-4") {
  auto sys = tiny_system(9);
  auto batch = random_batch(2, 8, BatchRole::meta_train, 19);
  auto rep = check_recon_gradient(sys.R, sys.F, batch, tiny_train_cfg(9));
  CHECK(rep.entries == sys.R.total_values());
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("meta-gradient equals the end-to-end finite-difference oracle") {
  auto sys = tiny_system(11);
  auto mtr = random_batch(2, 8, BatchRole::meta_train, 23, "mtr");
  auto mts = random_batch(2, 8, BatchRole::meta_test, 23, "mts");
  auto rep = check_meta_gradient(sys.F, sys.R, sys.P, mtr, mts, tiny_train_cfg(11));
  CHECK(rep.entries == sys.P.total_values());
  CHECK(rep.max_rel_err <= 1e-3);
}

TEST_CASE("eta_F' = 0 kills the meta-gradient exactly") {
  auto sys = tiny_system(13);
  auto mtr = random_batch(1, 8, BatchRole::meta_train, 29, "mtr");
  auto mts = random_batch(1, 8, BatchRole::meta_test, 29, "mts");
  TrainConfig cfg = tiny_train_cfg(13);
  cfg.inner_lr_fusion = 0.0;
  ParamValues thF = ParamValues::leaves(sys.F);
  ParamValues thR = ParamValues::leaves(sys.R);
  ParamValues thP = ParamValues::leaves(sys.P);
  InnerResult inner = inner_update(thF, thR, thP, mtr, cfg);
  auto g = meta_gradient(thF, thR, thP, inner, mts, cfg);
  for (const auto& t : g) CHECK(t.max_abs() == 0.0);

  // the oracle agrees
  CHECK(std::abs(meta_gradient_oracle(sys.F, sys.R, sys.P, mtr, mts, cfg, 0)) <= 1e-8);
}

TEST_CASE("first-order mode approximates the full meta-gradient closely here") {
  // L_f is linear in (W,V), so the FD-HVP route should track the exact value
  auto sys = tiny_system(15);
  auto mtr = random_batch(2, 8, BatchRole::meta_train, 31, "mtr");
  auto mts = random_batch(2, 8, BatchRole::meta_test, 31, "mts");
  TrainConfig cfg = tiny_train_cfg(15);

  ParamValues thF = ParamValues::leaves(sys.F);
  ParamValues thR = ParamValues::leaves(sys.R);
  ParamValues thP = ParamValues::leaves(sys.P);
  InnerResult inner_full = inner_update(thF, thR, thP, mtr, cfg);
  auto g_full = meta_gradient(thF, thR, thP, inner_full, mts, cfg);

  TrainConfig fo = cfg;
  fo.first_order_only = true;
  ParamValues thF2 = ParamValues::leaves(sys.F);
  ParamValues thR2 = ParamValues::leaves(sys.R);
  ParamValues thP2 = ParamValues::leaves(sys.P);
  InnerResult inner_fo = inner_update(thF2, thR2, thP2, mtr, fo);
  CHECK_FALSE(inner_fo.retained);
  auto g_fo = meta_gradient(thF2, thR2, thP2, inner_fo, mts, fo);

  // full mode demands the retained graph
  CHECK_THROWS_AS(meta_gradient(thF2, thR2, thP2, inner_fo, mts, cfg), ContractError);

  double gmax = 0.0;
  for (const auto& g : g_full) gmax = std::max(gmax, g.max_abs());
  double worst = 0.0;
  for (size_t e = 0; e < g_full.size(); ++e)
    for (int64_t i = 0; i < g_full[e].numel(); ++i)
      worst = std::max(worst, rel_err(g_full[e].at(i), g_fo[e].at(i),
                                      std::max(1e-7, 1e-3 * gmax)));
  CHECK(worst <= 1e-3);
}

TEST_CASE("loss routing: theta_F never sees L_r, theta_P never sees the fusion step") {
  auto ds = tiny_dataset(4, 16, 400);
  TrainConfig cfg = tiny_train_cfg(99);
  TrainState st = init_state(tiny_cfg(), cfg);
  Rng rng(50);
  auto batch = data::sample_patch_batch(ds, 2, 8, rng, BatchRole::fusion_train);
  auto probe = loss_routing_probe(st, batch, cfg);
  CHECK(probe.grad_p_from_lf == 0.0);
  CHECK(probe.grad_f_from_lr == 0.0);

  // theta_F after fusion_update equals theta_F updated by L_f alone: rerun the
  // same step from a cloned state with the reconstruction loss unplugged by
  // construction and compare.
  TrainState st2 = init_state(tiny_cfg(), cfg);
  auto [lf, lr] = fusion_update(st, batch, cfg);
  CHECK(lf > 0.0);
  CHECK(lr > 0.0);
  {
    // manual L_f-only step
    ParamValues thF = ParamValues::leaves(st2.F);
    ad::Value a = ad::Value::constant(batch.a), b = ad::Value::constant(batch.b);
    auto maps = propose_maps(ParamValues::constants(st2.P), batch);
    ad::Value ifm = nets::fusion_forward(thF, a, b);
    ad::Value lfv = losses::fusion_loss(a, b, ifm, maps, cfg.loss);
    auto gF = ad::grad(lfv, thF.values());
    std::vector<Tensor> gt;
    for (auto& g : gF) gt.push_back(g.val());
    // replicate the Adam step
    AdamState adam = AdamState::init_like(st2.F);
    double gn = 0.0;
    for (auto& g : gt)
      for (int64_t i = 0; i < g.numel(); ++i) gn += g.at(i) * g.at(i);
    gn = std::sqrt(gn);
    const double scale = (cfg.clip_norm > 0 && gn > cfg.clip_norm) ? cfg.clip_norm / gn : 1.0;
    for (size_t e = 0; e < gt.size(); ++e) {
      Tensor& th = st2.F.entries()[e].tensor;
      for (int64_t i = 0; i < th.numel(); ++i) {
        const double gi = gt[e].at(i) * scale;
        adam.m[e].at(i) = 0.9 * adam.m[e].at(i) + 0.1 * gi;
        adam.v[e].at(i) = 0.999 * adam.v[e].at(i) + 0.001 * gi * gi;
        th.at(i) -= cfg.fusion_lr * (adam.m[e].at(i) / 0.1) /
                    (std::sqrt(adam.v[e].at(i) / 0.001) + 1e-8);
      }
    }
  }
  for (size_t e = 0; e < st.F.size(); ++e)
    for (int64_t i = 0; i < st.F.entries()[e].tensor.numel(); ++i)
      CHECK(st.F.entries()[e].tensor.at(i) ==
            doctest::Approx(st2.F.entries()[e].tensor.at(i)).epsilon(1e-12));
}

TEST_CASE("repeated fusion updates decrease the loss on a fixed batch") {
  auto ds = tiny_dataset(4, 16, 500);
  TrainConfig cfg = tiny_train_cfg(123);
  cfg.fusion_lr = 1e-4;
  cfg.recon_lr = 1e-4;
  TrainState st = init_state(tiny_cfg(), cfg);
  Rng rng(61);
  auto batch = data::sample_patch_batch(ds, 4, 8, rng, BatchRole::fusion_train);
  std::vector<double> lfs;
  for (int i = 0; i < 20; ++i) lfs.push_back(fusion_update(st, batch, cfg).first);
  int nonmono = 0;
  for (size_t i = 1; i < lfs.size(); ++i)
    if (lfs[i] > lfs[i - 1]) nonmono++;
  CHECK(nonmono <= 2);
  CHECK(lfs.back() < lfs.front());
}

TEST_CASE("train executes the exact stage counts and is deterministic") {
  auto ds = tiny_dataset(4, 16, 600);
  TrainConfig cfg = tiny_train_cfg(77);
  cfg.epochs = 1;
  cfg.meta_steps = 1;
  cfg.fusion_steps = 1;
  TempDir td1, td2;
  TrainState s1 = train(ds, tiny_cfg(), cfg, td1.path);
  int meta = 0, fusion = 0, eval = 0;
  for (const auto& r : s1.history) {
    if (r.stage == "meta") meta++;
    if (r.stage == "fusion") fusion++;
    if (r.stage == "eval") eval++;
  }
  CHECK(meta == 1);
  CHECK(fusion == 1);
  CHECK(eval == 2);  // init + end of epoch
  CHECK(fs::exists(td1.path / "state_final.rfn"));
  CHECK(fs::exists(td1.path / "F.rfn"));
  CHECK(fs::exists(td1.path / "loss_history.csv"));

  TrainState s2 = train(ds, tiny_cfg(), cfg, td2.path);
  CHECK(file_bytes(td1.path / "state_final.rfn") == file_bytes(td2.path / "state_final.rfn"));
  CHECK(file_bytes(td1.path / "F.rfn") == file_bytes(td2.path / "F.rfn"));
}

TEST_CASE("checkpoint round-trip resumes training bit-exactly") {
  auto ds = tiny_dataset(4, 16, 700);
  TrainConfig cfg = tiny_train_cfg(88);
  cfg.epochs = 2;
  cfg.meta_steps = 2;
  cfg.fusion_steps = 2;
  TempDir straight_dir, resumed_dir;

  TrainState straight = train(ds, tiny_cfg(), cfg, straight_dir.path);

  TrainConfig first_half = cfg;
  first_half.epochs = 1;
  TempDir half_dir;
  TrainState half = train(ds, tiny_cfg(), first_half, half_dir.path);
  TrainState resumed = TrainState::load(half_dir.path / "state_final.rfn");
  run_training(resumed, ds, std::nullopt, cfg, resumed_dir.path);

  resumed.save(resumed_dir.path / "final_check.rfn");
  straight.save(straight_dir.path / "final_check.rfn");
  CHECK(file_bytes(straight_dir.path / "final_check.rfn") ==
        file_bytes(resumed_dir.path / "final_check.rfn"));
}

TEST_CASE("fixed uniform maps skip the meta stages") {
  auto ds = tiny_dataset(4, 16, 800);
  TrainConfig cfg = tiny_train_cfg(99);
  cfg.epochs = 1;
  cfg.meta_steps = 3;
  cfg.fusion_steps = 2;
  cfg.fixed_uniform_maps = true;
  TrainState st = train(ds, tiny_cfg(), cfg);
  for (const auto& r : st.history) CHECK(r.stage != "meta");
  // P stayed at init
  auto p0 = nets::init_params(nets::Role::P, tiny_cfg(), cfg.seed);
  for (size_t e = 0; e < p0.size(); ++e)
    for (int64_t i = 0; i < p0.entries()[e].tensor.numel(); ++i)
      CHECK(st.P.entries()[e].tensor.at(i) == p0.entries()[e].tensor.at(i));
}

TEST_CASE("training errors on empty datasets") {
  TrainConfig cfg = tiny_train_cfg(1);
  cfg.epochs = 1;
  data::PairDataset empty;
  CHECK_THROWS_AS(train(empty, tiny_cfg(), cfg), ConstraintError);
}

TEST_CASE("loss history file format") {
  TempDir td;
  std::vector<LossRecord> hist{{0, "eval", std::numeric_limits<double>::quiet_NaN(), 0.5},
                               {1, "meta", 0.25, 0.5},
                               {2, "fusion", 0.2, 0.4}};
  write_loss_history(td.path / "h.csv", hist);
  std::ifstream is(td.path / "h.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "step,stage,L_f,L_r");
  std::getline(is, line);
  CHECK(line == "0,eval,,0.5");
  std::getline(is, line);
  CHECK(line == "1,meta,0.25,0.5");
}

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "refusion/image_io.hpp"
#include "refusion/meta_trainer.hpp"
#include "refusion/metrics.hpp"
#include "refusion/plot.hpp"
#include "refusion/run_config.hpp"

namespace fs = std::filesystem;
using namespace refusion;
using config::RunConfig;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitInputError = 2;

data::PairDataset build_dataset(const RunConfig& cfg) {
  if (!cfg.synthetic()) return data::load_pair_dataset(*cfg.dir_a, *cfg.dir_b);
  return data::make_synthetic_dataset(cfg.task, cfg.synth, cfg.seed);
}

Tensor lum_to_batch1(const Tensor& lum) {
  const int64_t H = lum.shape(0), W = lum.shape(1);
  Tensor t({1, 1, H, W});
  for (int64_t i = 0; i < H * W; ++i) t.at(i) = lum.at(i);
  return t;
}

Tensor batch1_to_lum(const Tensor& t) {
  const int64_t H = t.shape(2), W = t.shape(3);
  Tensor lum({H, W});
  for (int64_t i = 0; i < H * W; ++i) lum.at(i) = std::clamp(t.at(i), 0.0, 1.0);
  return lum;
}

// compact viridis ramp for the W_a heatmaps
void heatmap_png(const fs::path& path, const Tensor& map01) {
  static const double stops[5][3] = {{0.267, 0.005, 0.329},
                                     {0.229, 0.322, 0.546},
                                     {0.127, 0.566, 0.551},
                                     {0.369, 0.789, 0.383},
                                     {0.993, 0.906, 0.144}};
  const int64_t H = map01.shape(0), W = map01.shape(1);
  Tensor rgb({3, H, W});
  for (int64_t i = 0; i < H * W; ++i) {
    const double v = std::clamp(map01.at(i), 0.0, 1.0) * 4.0;
    const int s = std::min(3, static_cast<int>(v));
    const double f = v - s;
    for (int c = 0; c < 3; ++c)
      rgb.at(c * H * W + i) = stops[s][c] * (1.0 - f) + stops[s + 1][c] * f;
  }
  imageio::write_png_rgb8(path, rgb);
}

int cmd_train(const std::string& config_path) {
  RunConfig cfg = config::load_run_config(config_path);
  const fs::path out = config::resolve_out_dir(cfg);
  data::PairDataset ds = build_dataset(cfg);
  std::printf("training on %zu pairs (%s), out dir %s\n", ds.size(),
              cfg.synthetic() ? "synthetic" : "loaded", out.string().c_str());

  meta::TrainState st = meta::train(ds, cfg.net, cfg.train, out);
  config::write_config_snapshot(out / "config.json", cfg);
  plot::render_loss_curves(out / "loss_curve.png", st.history);

  double first_eval = -1, last_eval = -1;
  for (const auto& r : st.history)
    if (r.stage == "eval") {
      if (first_eval < 0) first_eval = r.lr;
      last_eval = r.lr;
    }
  std::printf("done: %lld steps, eval L_r %.6f -> %.6f\n",
              static_cast<long long>(st.global_step), first_eval, last_eval);
  return kExitOk;
}

int cmd_synth(const std::string& config_path) {
  RunConfig cfg = config::load_run_config(config_path);
  const fs::path out = config::resolve_out_dir(cfg);
  data::PairDataset ds = data::make_synthetic_dataset(cfg.task, cfg.synth, cfg.seed);
  for (size_t i = 0; i < ds.size(); ++i) {
    const auto& p = ds[i];
    imageio::write_png_gray8(out / "a" / p.name, p.lum_a);
    imageio::write_png_gray8(out / "b" / p.name, p.lum_b);
    if (p.mask) imageio::write_png_gray8(out / "masks" / p.name, *p.mask);
  }
  config::write_config_snapshot(out / "config.json", cfg);
  std::printf("wrote %zu synthetic pairs under %s\n", ds.size(), out.string().c_str());
  return kExitOk;
}

int cmd_fuse(const std::string& ckpt, const std::string& dir_a, const std::string& dir_b,
             const std::string& out_dir, const std::string& proposal_ckpt,
             const std::string& chroma_from) {
  nets::ParameterCollection F = nets::ParameterCollection::load(ckpt);
  if (F.role() != nets::Role::F)
    throw RoleError("fuse: checkpoint '" + ckpt + "' holds role " + nets::role_str(F.role()) +
                    ", expected F");
  std::optional<nets::ParameterCollection> P;
  if (!proposal_ckpt.empty()) {
    P = nets::ParameterCollection::load(proposal_ckpt);
    if (P->role() != nets::Role::P)
      throw RoleError("fuse: proposal checkpoint holds role " + nets::role_str(P->role()));
  }
  if (chroma_from != "a" && chroma_from != "b")
    throw ConfigError("fuse: --chroma-from must be 'a' or 'b'");

  data::PairDataset ds = data::load_pair_dataset(dir_a, dir_b);
  const fs::path out(out_dir);
  ad::NoGradGuard ng;
  nets::ParamValues thF = nets::ParamValues::constants(F);
  for (size_t i = 0; i < ds.size(); ++i) {
    const auto& p = ds[i];
    ad::Value a = ad::Value::constant(lum_to_batch1(p.lum_a));
    ad::Value b = ad::Value::constant(lum_to_batch1(p.lum_b));
    Tensor fused = batch1_to_lum(nets::fusion_forward(thF, a, b).val());
    const auto& chroma = chroma_from == "a" ? p.chroma_a : p.chroma_b;
    if (chroma)
      imageio::write_png_rgb8(out / p.name, imageio::ycbcr_to_rgb(fused, *chroma));
    else
      imageio::write_png_gray8(out / p.name, fused);
    if (P) {
      losses::WeightMaps maps = nets::proposal_forward(nets::ParamValues::constants(*P), a, b);
      fs::path heat = out / (fs::path(p.name).stem().string() + "_wa.png");
      heatmap_png(heat, batch1_to_lum(maps.wa.val()));
    }
  }
  std::printf("fused %zu pairs into %s\n", ds.size(), out.string().c_str());
  return kExitOk;
}

int cmd_evaluate(const std::string& dir_a, const std::string& dir_b,
                 const std::string& fused_dir, const std::string& out_path) {
  data::PairDataset ds = data::load_pair_dataset(dir_a, dir_b);
  std::vector<Tensor> fused;
  for (size_t i = 0; i < ds.size(); ++i) {
    const fs::path f = fs::path(fused_dir) / ds[i].name;
    if (!fs::exists(f)) throw IoError("evaluate: missing fused image " + f.string());
    fused.push_back(imageio::read_png(f).lum);
  }
  metrics::MetricsReport rep = metrics::evaluate(ds, fused, metrics::all_metric_names());

  fs::path base(out_path);
  if (base.extension() == ".csv" || base.extension() == ".json") base.replace_extension();
  metrics::write_report_csv(fs::path(base).replace_extension(".csv"), rep);
  metrics::write_report_json(fs::path(base).replace_extension(".json"), rep);

  std::printf("mean");
  for (const auto& m : rep.metric_names) std::printf(" %s=%.4f", m.c_str(), rep.means.at(m));
  std::printf(" over %zu images\n", rep.ids.size());
  return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, bool first_order_only) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = config::load_run_config(config_path);

  nets::NetConfig tiny{.base_channels = 4, .num_blocks = 1, .attention_heads = 1,
                       .ablation = nets::Ablation::full};
  meta::TrainConfig tcfg = cfg.train;
  tcfg.inner_lr_fusion = 1e-2;
  tcfg.inner_lr_recon = 1e-2;

  auto sys_f = nets::init_params(nets::Role::F, tiny, cfg.seed);
  auto sys_r = nets::init_params(nets::Role::R, tiny, cfg.seed);
  auto sys_p = nets::init_params(nets::Role::P, tiny, cfg.seed);
  Rng prng(cfg.seed + 7);
  for (auto* pc : {&sys_f, &sys_r, &sys_p})
    for (auto& e : pc->entries())
      for (int64_t i = 0; i < e.tensor.numel(); ++i) e.tensor.at(i) += prng.uniform(-0.2, 0.2);

  auto batch = [&](data::BatchRole role, uint64_t salt) {
    Rng rng = Rng(cfg.seed).split(salt);
    Tensor a({2, 1, 8, 8}), b({2, 1, 8, 8});
    for (int64_t i = 0; i < a.numel(); ++i) {
      a.at(i) = rng.next_double();
      b.at(i) = rng.next_double();
    }
    return data::TaskBatch(std::move(a), std::move(b), role);
  };

  bool ok = true;
  auto rep_f =
      meta::check_fusion_gradient(sys_f, sys_p, batch(data::BatchRole::meta_train, 1), tcfg);
  std::printf("first-order dL_f/dtheta_F : max rel err %.3e over %lld entries (tol %.1e)\n",
              rep_f.max_rel_err, static_cast<long long>(rep_f.entries), cfg.tol_first_order);
  ok = ok && rep_f.max_rel_err <= cfg.tol_first_order;

  auto rep_r =
      meta::check_recon_gradient(sys_r, sys_f, batch(data::BatchRole::meta_train, 2), tcfg);
  std::printf("first-order dL_r/dtheta_R : max rel err %.3e over %lld entries (tol %.1e)\n",
              rep_r.max_rel_err, static_cast<long long>(rep_r.entries), cfg.tol_first_order);
  ok = ok && rep_r.max_rel_err <= cfg.tol_first_order;

  auto mtr = batch(data::BatchRole::meta_train, 3);
  auto mts = batch(data::BatchRole::meta_test, 4);
  auto rep_m = meta::check_meta_gradient(sys_f, sys_r, sys_p, mtr, mts, tcfg);
  std::printf("second-order dL_r/dtheta_P: max rel err %.3e over %lld entries (tol %.1e)\n",
              rep_m.max_rel_err, static_cast<long long>(rep_m.entries), cfg.tol_second_order);
  ok = ok && rep_m.max_rel_err <= cfg.tol_second_order;

  auto [toy_analytic, toy_fd] = meta::toy_meta_case();
  std::printf("toy scalar meta-gradient  : analytic %.6f, finite difference %.6f\n",
              toy_analytic, toy_fd);
  ok = ok && std::abs(toy_analytic - 0.09) <= 1e-6 && std::abs(toy_fd - 0.09) <= 1e-5;

  if (first_order_only) {
    nets::ParamValues thF = nets::ParamValues::leaves(sys_f);
    nets::ParamValues thR = nets::ParamValues::leaves(sys_r);
    nets::ParamValues thP = nets::ParamValues::leaves(sys_p);
    meta::InnerResult inner = meta::inner_update(thF, thR, thP, mtr, tcfg);
    auto g_full = meta::meta_gradient(thF, thR, thP, inner, mts, tcfg);
    meta::TrainConfig fo = tcfg;
    fo.first_order_only = true;
    nets::ParamValues thF2 = nets::ParamValues::leaves(sys_f);
    nets::ParamValues thR2 = nets::ParamValues::leaves(sys_r);
    nets::ParamValues thP2 = nets::ParamValues::leaves(sys_p);
    meta::InnerResult inner_fo = meta::inner_update(thF2, thR2, thP2, mtr, fo);
    auto g_fo = meta::meta_gradient(thF2, thR2, thP2, inner_fo, mts, fo);
    double gap = 0.0;
    for (size_t e = 0; e < g_full.size(); ++e)
      for (int64_t i = 0; i < g_full[e].numel(); ++i)
        gap = std::max(gap, meta::rel_err(g_full[e].at(i), g_fo[e].at(i), 1e-7));
    std::printf("first-order approximation gap: max rel err %.3e vs full mode\n", gap);
  }

  std::printf("%s\n", ok ? "gradcheck PASS" : "gradcheck FAIL");
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ReFusion: image fusion trained by a meta-learned fusion loss"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train = app.add_subcommand("train", "run the full training loop from a config file");
  train->add_option("-c,--config", config_path, "JSON run config")->required();

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset as PNG directories");
  synth->add_option("-c,--config", config_path, "JSON run config")->required();

  std::string ckpt, dir_a, dir_b, out_dir, proposal, chroma_from = "a";
  auto* fuse = app.add_subcommand("fuse", "fuse image pairs with a trained checkpoint");
  fuse->add_option("--checkpoint", ckpt, "role-F checkpoint (.rfn)")->required();
  fuse->add_option("--dir-a", dir_a)->required();
  fuse->add_option("--dir-b", dir_b)->required();
  fuse->add_option("--out", out_dir)->required();
  fuse->add_option("--proposal", proposal, "role-P checkpoint; also writes W_a heatmaps");
  fuse->add_option("--chroma-from", chroma_from, "source donating chroma (a|b)");

  std::string fused_dir, report_path;
  auto* evaluate = app.add_subcommand("evaluate", "score fused images against source pairs");
  evaluate->add_option("--dir-a", dir_a)->required();
  evaluate->add_option("--dir-b", dir_b)->required();
  evaluate->add_option("--fused", fused_dir)->required();
  evaluate->add_option("--out", report_path, "report path base (.csv/.json)")->required();

  bool first_order_only = false;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference oracles on tiny networks");
  gradcheck->add_option("-c,--config", config_path, "JSON run config (tolerances, seed)");
  gradcheck->add_flag("--first-order-only", first_order_only,
                      "also report the first-order approximation gap");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path);
    if (synth->parsed()) return cmd_synth(config_path);
    if (fuse->parsed()) return cmd_fuse(ckpt, dir_a, dir_b, out_dir, proposal, chroma_from);
    if (evaluate->parsed()) return cmd_evaluate(dir_a, dir_b, fused_dir, report_path);
    if (gradcheck->parsed()) return cmd_gradcheck(config_path, first_order_only);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const IoError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const RoleError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const ShapeError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitOk;
}

#include "refusion/run_config.hpp"

#include <cstdlib>
#include <fstream>

#include <json.hpp>

namespace refusion::config {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown config key '" + where + "." + key + "'");
  }
}

template <class T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string base_kind_str(data::BaseKind k) {
  switch (k) {
    case data::BaseKind::noise: return "noise";
    case data::BaseKind::checker: return "checker";
    case data::BaseKind::gradient: return "gradient";
    case data::BaseKind::mixed: return "mixed";
  }
  return "?";
}

data::BaseKind base_kind_from(const std::string& s) {
  if (s == "noise") return data::BaseKind::noise;
  if (s == "checker") return data::BaseKind::checker;
  if (s == "gradient") return data::BaseKind::gradient;
  if (s == "mixed") return data::BaseKind::mixed;
  throw ConfigError("unknown synthetic base kind '" + s + "'");
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "", {"task", "out_dir", "seed", "data", "net", "loss", "train", "fuse",
                     "gradcheck"});
  RunConfig cfg;
  if (j.contains("task")) cfg.task = data::task_from(j.at("task").get<std::string>());
  maybe(j, "out_dir", cfg.out_dir);
  maybe(j, "seed", cfg.seed);

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, "data", {"dir_a", "dir_b", "synthetic"});
    if (d.contains("dir_a") != d.contains("dir_b"))
      throw ConfigError("data.dir_a and data.dir_b must be given together");
    if (d.contains("dir_a")) {
      cfg.dir_a = d.at("dir_a").get<std::string>();
      cfg.dir_b = d.at("dir_b").get<std::string>();
    }
    if (d.contains("synthetic")) {
      const json& s = d.at("synthetic");
      check_keys(s, "data.synthetic",
                 {"pairs", "image_size", "blur_sigma", "gamma_low", "gamma_high", "base",
                  "eval_pairs"});
      maybe(s, "pairs", cfg.synth.pairs);
      maybe(s, "image_size", cfg.synth.image_size);
      maybe(s, "blur_sigma", cfg.synth.blur_sigma);
      maybe(s, "gamma_low", cfg.synth.gamma_low);
      maybe(s, "gamma_high", cfg.synth.gamma_high);
      maybe(s, "eval_pairs", cfg.eval_pairs);
      if (s.contains("base")) cfg.synth.base = base_kind_from(s.at("base").get<std::string>());
    }
  }

  if (j.contains("net")) {
    const json& n = j.at("net");
    check_keys(n, "net", {"base_channels", "num_blocks", "attention_heads", "ablation"});
    maybe(n, "base_channels", cfg.net.base_channels);
    maybe(n, "num_blocks", cfg.net.num_blocks);
    maybe(n, "attention_heads", cfg.net.attention_heads);
    if (n.contains("ablation"))
      cfg.net.ablation = nets::ablation_from(n.at("ablation").get<std::string>());
  }

  if (j.contains("loss")) {
    const json& l = j.at("loss");
    check_keys(l, "loss", {"alpha1", "alpha2"});
    maybe(l, "alpha1", cfg.train.loss.alpha1);
    maybe(l, "alpha2", cfg.train.loss.alpha2);
    if (cfg.train.loss.alpha1 < 0 || cfg.train.loss.alpha2 < 0)
      throw ConfigError("loss.alpha1/alpha2 must be nonnegative");
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train",
               {"epochs", "meta_steps", "fusion_steps", "inner_lr_fusion", "inner_lr_recon",
                "outer_lr", "fusion_lr", "recon_lr", "batch_size", "patch_size",
                "first_order_only", "meta_through_recon", "fixed_uniform_maps", "clip_norm",
                "checkpoint_every"});
    maybe(t, "epochs", cfg.train.epochs);
    maybe(t, "meta_steps", cfg.train.meta_steps);
    maybe(t, "fusion_steps", cfg.train.fusion_steps);
    maybe(t, "inner_lr_fusion", cfg.train.inner_lr_fusion);
    maybe(t, "inner_lr_recon", cfg.train.inner_lr_recon);
    maybe(t, "outer_lr", cfg.train.outer_lr);
    maybe(t, "fusion_lr", cfg.train.fusion_lr);
    maybe(t, "recon_lr", cfg.train.recon_lr);
    maybe(t, "batch_size", cfg.train.batch_size);
    maybe(t, "patch_size", cfg.train.patch_size);
    maybe(t, "first_order_only", cfg.train.first_order_only);
    maybe(t, "meta_through_recon", cfg.train.meta_through_recon);
    maybe(t, "fixed_uniform_maps", cfg.train.fixed_uniform_maps);
    maybe(t, "clip_norm", cfg.train.clip_norm);
    maybe(t, "checkpoint_every", cfg.train.checkpoint_every);
    for (double lr : {cfg.train.inner_lr_fusion, cfg.train.inner_lr_recon, cfg.train.outer_lr,
                      cfg.train.fusion_lr, cfg.train.recon_lr})
      if (lr < 0.0) throw ConfigError("learning rates must be nonnegative");
    if (cfg.train.epochs <= 0 || cfg.train.meta_steps < 0 || cfg.train.fusion_steps < 0 ||
        cfg.train.batch_size <= 0 || cfg.train.patch_size <= 0)
      throw ConfigError("train counts must be positive");
  }
  cfg.train.seed = cfg.seed;

  if (j.contains("fuse")) {
    const json& f = j.at("fuse");
    check_keys(f, "fuse", {"chroma_from"});
    maybe(f, "chroma_from", cfg.chroma_from);
    if (cfg.chroma_from != "a" && cfg.chroma_from != "b")
      throw ConfigError("fuse.chroma_from must be 'a' or 'b'");
  }

  if (j.contains("gradcheck")) {
    const json& g = j.at("gradcheck");
    check_keys(g, "gradcheck", {"tol_first_order", "tol_second_order"});
    maybe(g, "tol_first_order", cfg.tol_first_order);
    maybe(g, "tol_second_order", cfg.tol_second_order);
  }

  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file: " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), {});
  return run_config_from_json_text(text);
}

std::string run_config_to_json(const RunConfig& cfg) {
  json d{{"synthetic",
          {{"pairs", cfg.synth.pairs},
           {"image_size", cfg.synth.image_size},
           {"blur_sigma", cfg.synth.blur_sigma},
           {"gamma_low", cfg.synth.gamma_low},
           {"gamma_high", cfg.synth.gamma_high},
           {"base", base_kind_str(cfg.synth.base)},
           {"eval_pairs", cfg.eval_pairs}}}};
  if (cfg.dir_a) {
    d["dir_a"] = *cfg.dir_a;
    d["dir_b"] = *cfg.dir_b;
  }
  json j{{"task", data::task_str(cfg.task)},
         {"out_dir", cfg.out_dir},
         {"seed", cfg.seed},
         {"data", std::move(d)},
         {"net",
          {{"base_channels", cfg.net.base_channels},
           {"num_blocks", cfg.net.num_blocks},
           {"attention_heads", cfg.net.attention_heads},
           {"ablation", nets::ablation_str(cfg.net.ablation)}}},
         {"loss", {{"alpha1", cfg.train.loss.alpha1}, {"alpha2", cfg.train.loss.alpha2}}},
         {"train",
          {{"epochs", cfg.train.epochs},
           {"meta_steps", cfg.train.meta_steps},
           {"fusion_steps", cfg.train.fusion_steps},
           {"inner_lr_fusion", cfg.train.inner_lr_fusion},
           {"inner_lr_recon", cfg.train.inner_lr_recon},
           {"outer_lr", cfg.train.outer_lr},
           {"fusion_lr", cfg.train.fusion_lr},
           {"recon_lr", cfg.train.recon_lr},
           {"batch_size", cfg.train.batch_size},
           {"patch_size", cfg.train.patch_size},
           {"first_order_only", cfg.train.first_order_only},
           {"meta_through_recon", cfg.train.meta_through_recon},
           {"fixed_uniform_maps", cfg.train.fixed_uniform_maps},
           {"clip_norm", cfg.train.clip_norm},
           {"checkpoint_every", cfg.train.checkpoint_every}}},
         {"fuse", {{"chroma_from", cfg.chroma_from}}},
         {"gradcheck",
          {{"tol_first_order", cfg.tol_first_order},
           {"tol_second_order", cfg.tol_second_order}}}};
  return j.dump(2);
}

void write_config_snapshot(const std::filesystem::path& path, const RunConfig& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write config snapshot: " + path.string());
  os << run_config_to_json(cfg) << "\n";
}

std::filesystem::path resolve_out_dir(const RunConfig& cfg) {
  std::filesystem::path out(cfg.out_dir);
  const char* root = std::getenv("REFUSION_OUTPUT_ROOT");
  if (root && *root && out.is_relative()) return std::filesystem::path(root) / out;
  return out;
}

}  // namespace refusion::config

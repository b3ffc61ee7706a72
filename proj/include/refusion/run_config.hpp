#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "refusion/data.hpp"
#include "refusion/meta_trainer.hpp"
#include "refusion/networks.hpp"

namespace refusion::config {

// One declarative file drives every knob; the CLI only selects the command
// and the config path. The emitted snapshot reproduces the run.
struct RunConfig {
  data::TaskKind task = data::TaskKind::multifocus;
  std::string out_dir = "runs/out";
  uint64_t seed = 0;

  std::optional<std::string> dir_a, dir_b;  // dataset directories; absent => synthetic
  data::SynthConfig synth;
  int eval_pairs = 8;  // extra held-out synthetic pairs for reporting

  nets::NetConfig net;
  meta::TrainConfig train;  // train.loss carries alpha1/alpha2

  std::string chroma_from = "a";  // which source donates chroma at fuse time

  double tol_first_order = 1e-4;
  double tol_second_order = 1e-3;

  bool synthetic() const { return !dir_a.has_value(); }
};

RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json_text(const std::string& text);
std::string run_config_to_json(const RunConfig& cfg);
void write_config_snapshot(const std::filesystem::path& path, const RunConfig& cfg);

// out_dir resolved against the REFUSION_OUTPUT_ROOT environment override
// (relative paths are placed under the root).
std::filesystem::path resolve_out_dir(const RunConfig& cfg);

}  // namespace refusion::config

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "refusion/rng.hpp"
#include "refusion/tensor.hpp"

namespace refusion::data {

enum class BatchRole { fusion_train, meta_train, meta_test };
std::string batch_role_str(BatchRole r);

// A batch of co-registered source pairs. The role is fixed at construction;
// the trainer's stages check it.
struct TaskBatch {
  Tensor a, b;                  // [B,1,H,W]
  BatchRole role;
  std::optional<Tensor> mask;   // [B,1,H,W] oracle focus mask (synthetic tasks)

  TaskBatch(Tensor a_, Tensor b_, BatchRole role_, std::optional<Tensor> mask_ = {});
};

struct ImagePair {
  std::string name;
  Tensor lum_a, lum_b;                      // [H,W] in [0,1]
  std::optional<Tensor> chroma_a, chroma_b; // [2,H,W]
  std::optional<Tensor> mask;               // [H,W] oracle (synthetic multifocus)
};

class PairDataset {
 public:
  void add(ImagePair p);
  size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }
  const ImagePair& operator[](size_t i) const { return pairs_[i]; }
  const std::vector<ImagePair>& pairs() const { return pairs_; }

 private:
  std::vector<ImagePair> pairs_;
};

// Pairs matched by filename (sorted); scales to [0,1]; color becomes
// luminance with chroma kept for recombination.
PairDataset load_pair_dataset(const std::filesystem::path& dir_a,
                              const std::filesystem::path& dir_b);

// Disjoint 50/50 split (odd size: meta-train gets the extra), deterministic.
std::pair<PairDataset, PairDataset> split_meta(const PairDataset& ds, uint64_t seed);

// Aligned uniform random crops; the same window is used for both sources (and
// the mask when present).
TaskBatch sample_patch_batch(const PairDataset& ds, int batch, int patch, Rng& rng,
                             BatchRole role);

// Truncated (radius ceil(3*sigma)) renormalized separable Gaussian on [H,W].
Tensor gaussian_blur(const Tensor& img, double sigma);

// ia is sharp where mask=1, blurred elsewhere; ib is the complement.
std::tuple<Tensor, Tensor, Tensor> synth_multifocus(const Tensor& sharp,
                                                    const Tensor& mask,
                                                    double blur_sigma);

// Underexposed (gamma_low > 1) and overexposed (gamma_high < 1) renderings.
std::pair<Tensor, Tensor> synth_multiexposure(const Tensor& base, double gamma_low,
                                              double gamma_high);

enum class BaseKind { noise, checker, gradient, mixed };
Tensor synth_base(BaseKind kind, int64_t h, int64_t w, Rng& rng);
// Smooth random blob mask covering roughly half the area.
Tensor synth_blob_mask(int64_t h, int64_t w, Rng& rng);

enum class TaskKind { multimodal, multifocus, multiexposure, medical };
TaskKind task_from(const std::string& s);
std::string task_str(TaskKind t);

struct SynthConfig {
  int pairs = 64;
  int64_t image_size = 64;
  double blur_sigma = 3.0;
  double gamma_low = 2.2;
  double gamma_high = 0.45;
  BaseKind base = BaseKind::mixed;
};

// Procedural datasets so training and the acceptance suite need no external
// data. Supported: multifocus, multiexposure.
PairDataset make_synthetic_dataset(TaskKind task, const SynthConfig& cfg, uint64_t seed);

}  // namespace refusion::data

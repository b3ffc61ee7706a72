#include "refusion/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "refusion/image_io.hpp"

namespace refusion::data {

std::string batch_role_str(BatchRole r) {
  switch (r) {
    case BatchRole::fusion_train: return "fusion_train";
    case BatchRole::meta_train: return "meta_train";
    case BatchRole::meta_test: return "meta_test";
  }
  return "?";
}

TaskBatch::TaskBatch(Tensor a_, Tensor b_, BatchRole role_, std::optional<Tensor> mask_)
    : a(std::move(a_)), b(std::move(b_)), role(role_), mask(std::move(mask_)) {
  if (a.ndim() != 4 || a.shape(1) != 1)
    throw ShapeError("TaskBatch: expected [B,1,H,W], got " + shape_str(a.shape()));
  if (!a.same_shape(b)) throw ShapeError("TaskBatch: source shapes differ");
  if (mask && !mask->same_shape(a)) throw ShapeError("TaskBatch: mask shape differs");
  if (!a.all_finite() || !b.all_finite())
    throw ConstraintError("TaskBatch: non-finite image values");
}

void PairDataset::add(ImagePair p) {
  if (p.lum_a.ndim() != 2) throw ShapeError("ImagePair: expected [H,W] luminance");
  if (!p.lum_a.same_shape(p.lum_b))
    throw ShapeError("ImagePair '" + p.name + "': shape mismatch " +
                     shape_str(p.lum_a.shape()) + " vs " + shape_str(p.lum_b.shape()));
  if (p.lum_a.shape(0) < 3 || p.lum_a.shape(1) < 3)
    throw ShapeError("ImagePair '" + p.name + "': images must be at least 3x3");
  if (!p.lum_a.all_finite() || !p.lum_b.all_finite())
    throw ConstraintError("ImagePair '" + p.name + "': non-finite values");
  pairs_.push_back(std::move(p));
}

PairDataset load_pair_dataset(const std::filesystem::path& dir_a,
                              const std::filesystem::path& dir_b) {
  namespace fs = std::filesystem;
  for (const auto& d : {dir_a, dir_b})
    if (!fs::is_directory(d)) throw IoError("not a directory: " + d.string());

  auto list_pngs = [](const fs::path& dir) {
    std::map<std::string, fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      std::string ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
      if (ext == ".png") files[e.path().filename().string()] = e.path();
    }
    return files;  // std::map keeps lexicographic order
  };

  auto fa = list_pngs(dir_a);
  auto fb = list_pngs(dir_b);
  for (const auto& [name, _] : fa)
    if (!fb.count(name)) throw IoError("unmatched file '" + name + "' (missing in b/)");
  for (const auto& [name, _] : fb)
    if (!fa.count(name)) throw IoError("unmatched file '" + name + "' (missing in a/)");

  PairDataset ds;
  for (const auto& [name, pa] : fa) {
    imageio::LoadedImage la = imageio::read_png(pa);
    imageio::LoadedImage lb = imageio::read_png(fb.at(name));
    ImagePair p;
    p.name = name;
    p.lum_a = std::move(la.lum);
    p.lum_b = std::move(lb.lum);
    p.chroma_a = std::move(la.chroma);
    p.chroma_b = std::move(lb.chroma);
    ds.add(std::move(p));
  }
  return ds;
}

std::pair<PairDataset, PairDataset> split_meta(const PairDataset& ds, uint64_t seed) {
  const size_t n = ds.size();
  if (n < 2) throw ConstraintError("split_meta: dataset needs at least 2 pairs");
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = Rng(seed).split(0xB5);
  for (size_t i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
  const size_t n_train = (n + 1) / 2;
  PairDataset mtr, mts;
  for (size_t i = 0; i < n; ++i)
    (i < n_train ? mtr : mts).add(ds[idx[i]]);
  return {std::move(mtr), std::move(mts)};
}

TaskBatch sample_patch_batch(const PairDataset& ds, int batch, int patch, Rng& rng,
                             BatchRole role) {
  if (ds.empty()) throw ConstraintError("sample_patch_batch: empty dataset");
  if (batch <= 0 || patch <= 0) throw ConfigError("batch and patch must be positive");
  const bool all_masks = std::all_of(ds.pairs().begin(), ds.pairs().end(),
                                     [](const ImagePair& p) { return p.mask.has_value(); });
  Tensor a({batch, 1, patch, patch});
  Tensor b({batch, 1, patch, patch});
  std::optional<Tensor> mask;
  if (all_masks) mask = Tensor({batch, 1, patch, patch});

  for (int k = 0; k < batch; ++k) {
    const ImagePair& p = ds[rng.below(ds.size())];
    const int64_t H = p.lum_a.shape(0), W = p.lum_a.shape(1);
    if (H < patch || W < patch)
      throw ShapeError("sample_patch_batch: image '" + p.name + "' (" + shape_str(p.lum_a.shape()) +
                       ") smaller than patch " + std::to_string(patch));
    const int64_t oy = static_cast<int64_t>(rng.below(static_cast<uint64_t>(H - patch + 1)));
    const int64_t ox = static_cast<int64_t>(rng.below(static_cast<uint64_t>(W - patch + 1)));
    for (int64_t i = 0; i < patch; ++i)
      for (int64_t j = 0; j < patch; ++j) {
        const int64_t src = (oy + i) * W + ox + j;
        const int64_t dst = (static_cast<int64_t>(k) * patch + i) * patch + j;
        a.at(dst) = p.lum_a.at(src);
        b.at(dst) = p.lum_b.at(src);
        if (mask) mask->at(dst) = p.mask->at(src);
      }
  }
  return TaskBatch(std::move(a), std::move(b), role, std::move(mask));
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
  if (img.ndim() != 2) throw ShapeError("gaussian_blur expects [H,W]");
  if (sigma <= 0) throw ConfigError("gaussian_blur: sigma must be positive");
  const int64_t H = img.shape(0), W = img.shape(1);
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));

  // separable passes; the kernel is renormalized over the in-bounds support
  Tensor tmp({H, W});
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      double acc = 0.0, wsum = 0.0;
      for (int d = -r; d <= r; ++d) {
        const int64_t jj = j + d;
        if (jj < 0 || jj >= W) continue;
        acc += k[d + r] * img.at(i * W + jj);
        wsum += k[d + r];
      }
      tmp.at(i * W + j) = acc / wsum;
    }
  Tensor out({H, W});
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      double acc = 0.0, wsum = 0.0;
      for (int d = -r; d <= r; ++d) {
        const int64_t ii = i + d;
        if (ii < 0 || ii >= H) continue;
        acc += k[d + r] * tmp.at(ii * W + j);
        wsum += k[d + r];
      }
      out.at(i * W + j) = acc / wsum;
    }
  return out;
}

std::tuple<Tensor, Tensor, Tensor> synth_multifocus(const Tensor& sharp,
                                                    const Tensor& mask,
                                                    double blur_sigma) {
  if (!sharp.same_shape(mask)) throw ShapeError("synth_multifocus: mask shape differs");
  Tensor blurred = gaussian_blur(sharp, blur_sigma);
  Tensor ia(sharp.shape()), ib(sharp.shape());
  for (int64_t i = 0; i < sharp.numel(); ++i) {
    const double m = mask.at(i);
    ia.at(i) = sharp.at(i) * m + blurred.at(i) * (1.0 - m);
    ib.at(i) = sharp.at(i) * (1.0 - m) + blurred.at(i) * m;
  }
  return {std::move(ia), std::move(ib), mask.clone()};
}

std::pair<Tensor, Tensor> synth_multiexposure(const Tensor& base, double gamma_low,
                                              double gamma_high) {
  if (gamma_low <= 1.0) throw ConfigError("synth_multiexposure: gamma_low must be > 1");
  if (gamma_high >= 1.0 || gamma_high <= 0.0)
    throw ConfigError("synth_multiexposure: gamma_high must be in (0,1)");
  Tensor ia(base.shape()), ib(base.shape());
  for (int64_t i = 0; i < base.numel(); ++i) {
    const double v = base.at(i);
    if (v < 0.0 || v > 1.0) throw ConstraintError("synth_multiexposure: base not in [0,1]");
    ia.at(i) = std::pow(v, gamma_low);
    ib.at(i) = std::pow(v, gamma_high);
  }
  return {std::move(ia), std::move(ib)};
}

namespace {

void normalize01(Tensor& t, double lo = 0.02, double hi = 0.98) {
  double mn = t.at(0), mx = t.at(0);
  for (int64_t i = 0; i < t.numel(); ++i) {
    mn = std::min(mn, t.at(i));
    mx = std::max(mx, t.at(i));
  }
  const double span = mx - mn < 1e-12 ? 1.0 : mx - mn;
  for (int64_t i = 0; i < t.numel(); ++i)
    t.at(i) = lo + (hi - lo) * (t.at(i) - mn) / span;
}

Tensor white_noise(int64_t h, int64_t w, Rng& rng) {
  Tensor t({h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal();
  return t;
}

}  // namespace

Tensor synth_base(BaseKind kind, int64_t h, int64_t w, Rng& rng) {
  if (kind == BaseKind::mixed) {
    const BaseKind kinds[3] = {BaseKind::noise, BaseKind::checker, BaseKind::gradient};
    BaseKind pick = kinds[rng.below(3)];
    Tensor base = synth_base(pick, h, w, rng);
    // overlay fine texture so every region carries gradient signal
    Tensor tex = gaussian_blur(white_noise(h, w, rng), 1.0);
    normalize01(tex, -0.2, 0.2);
    for (int64_t i = 0; i < base.numel(); ++i) base.at(i) += tex.at(i);
    normalize01(base);
    return base;
  }
  switch (kind) {
    case BaseKind::noise: {
      // two spectral scales: coarse structure plus fine detail
      Tensor coarse = gaussian_blur(white_noise(h, w, rng), rng.uniform(3.0, 6.0));
      Tensor fine = gaussian_blur(white_noise(h, w, rng), 1.0);
      normalize01(coarse, 0.0, 1.0);
      normalize01(fine, 0.0, 0.5);
      for (int64_t i = 0; i < coarse.numel(); ++i) coarse.at(i) += fine.at(i);
      normalize01(coarse);
      return coarse;
    }
    case BaseKind::checker: {
      const int64_t cell = 4 + static_cast<int64_t>(rng.below(12));
      const double v0 = rng.uniform(0.05, 0.45), v1 = rng.uniform(0.55, 0.95);
      Tensor t({h, w});
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
          t.at(i * w + j) = (((i / cell) + (j / cell)) % 2 == 0 ? v0 : v1) +
                            0.1 * static_cast<double>(j) / static_cast<double>(w);
      normalize01(t);
      return t;
    }
    case BaseKind::gradient: {
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      const double fx = std::cos(theta), fy = std::sin(theta);
      const double freq = rng.uniform(1.0, 4.0);
      Tensor t({h, w});
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
          const double u = (fx * j + fy * i) / static_cast<double>(std::max(h, w));
          t.at(i * w + j) = 0.5 + 0.35 * u + 0.15 * std::sin(2.0 * M_PI * freq * u);
        }
      normalize01(t);
      return t;
    }
    default:
      throw ConfigError("unknown base kind");
  }
}

Tensor synth_blob_mask(int64_t h, int64_t w, Rng& rng) {
  Tensor field = gaussian_blur(white_noise(h, w, rng), static_cast<double>(std::max(h, w)) / 8.0);
  std::vector<double> sorted(field.data(), field.data() + field.numel());
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double median = sorted[sorted.size() / 2];
  Tensor mask({h, w});
  for (int64_t i = 0; i < mask.numel(); ++i) mask.at(i) = field.at(i) > median ? 1.0 : 0.0;
  return mask;
}

TaskKind task_from(const std::string& s) {
  if (s == "multimodal") return TaskKind::multimodal;
  if (s == "multifocus") return TaskKind::multifocus;
  if (s == "multiexposure") return TaskKind::multiexposure;
  if (s == "medical") return TaskKind::medical;
  throw ConfigError("unknown task '" + s + "'");
}

std::string task_str(TaskKind t) {
  switch (t) {
    case TaskKind::multimodal: return "multimodal";
    case TaskKind::multifocus: return "multifocus";
    case TaskKind::multiexposure: return "multiexposure";
    case TaskKind::medical: return "medical";
  }
  return "?";
}

PairDataset make_synthetic_dataset(TaskKind task, const SynthConfig& cfg, uint64_t seed) {
  if (task != TaskKind::multifocus && task != TaskKind::multiexposure)
    throw ConfigError("no synthetic generator for task '" + task_str(task) +
                      "'; provide dataset directories instead");
  PairDataset ds;
  Rng root = Rng(seed).split(0xDA7A);
  for (int n = 0; n < cfg.pairs; ++n) {
    Rng rng = root.split(static_cast<uint64_t>(n));
    Tensor base = synth_base(cfg.base, cfg.image_size, cfg.image_size, rng);
    ImagePair p;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth_%04d.png", n);
    p.name = buf;
    if (task == TaskKind::multifocus) {
      Tensor mask = synth_blob_mask(cfg.image_size, cfg.image_size, rng);
      auto [ia, ib, m] = synth_multifocus(base, mask, cfg.blur_sigma);
      p.lum_a = std::move(ia);
      p.lum_b = std::move(ib);
      p.mask = std::move(m);
    } else {
      auto [ia, ib] = synth_multiexposure(base, cfg.gamma_low, cfg.gamma_high);
      p.lum_a = std::move(ia);
      p.lum_b = std::move(ib);
    }
    ds.add(std::move(p));
  }
  return ds;
}

}  // namespace refusion::data

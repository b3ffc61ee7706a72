#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "refusion/data.hpp"
#include "refusion/image_io.hpp"

using namespace refusion;
using namespace refusion::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("refusion_data_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Tensor ramp_image(int64_t h, int64_t w, double scale = 1.0) {
  Tensor t({h, w});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      t.at(i * w + j) = scale * static_cast<double>(i * w + j) / static_cast<double>(h * w);
  return t;
}

}  // namespace

TEST_CASE("png round trip hits exact 8-bit codes") {
  TempDir td;
  Tensor img({4, 4});
  for (int64_t i = 0; i < 16; ++i) img.at(i) = static_cast<double>(i * 17) / 255.0;
  img.at(15) = 1.0;  // 255 must map to exactly 1.0
  imageio::write_png_gray8(td.path / "t.png", img);
  auto back = imageio::read_png(td.path / "t.png");
  CHECK(back.bit_depth == 8);
  CHECK_FALSE(back.chroma.has_value());
  for (int64_t i = 0; i < 16; ++i)
    CHECK(back.lum.at(i) == doctest::Approx(img.at(i)).epsilon(1e-9));
  CHECK(back.lum.at(15) == 1.0);
}

TEST_CASE("pure gray color image has luminance equal to any channel") {
  TempDir td;
  Tensor rgb({3, 5, 5});
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 25; ++i) rgb.at(c * 25 + i) = (i % 5) / 4.0;
  imageio::write_png_rgb8(td.path / "g.png", rgb);
  auto back = imageio::read_png(td.path / "g.png");
  REQUIRE(back.chroma.has_value());
  for (int64_t i = 0; i < 25; ++i) {
    CHECK(std::abs(back.lum.at(i) - rgb.at(i)) <= 1e-6 + 0.5 / 255.0);
    CHECK(back.chroma->at(i) == doctest::Approx(0.5).epsilon(1e-6));
  }
}

TEST_CASE("chroma recombination inverts the color transform") {
  Tensor rgb({3, 4, 4});
  Rng rng(5);
  for (int64_t i = 0; i < rgb.numel(); ++i) rgb.at(i) = rng.next_double();
  Tensor lum = imageio::rgb_to_lum(rgb);
  Tensor ch = imageio::rgb_to_chroma(rgb);
  Tensor back = imageio::ycbcr_to_rgb(lum, ch);
  for (int64_t i = 0; i < rgb.numel(); ++i)
    CHECK(back.at(i) == doctest::Approx(rgb.at(i)).epsilon(1e-9));
}

TEST_CASE("load_pair_dataset matches by filename in sorted order") {
  TempDir td;
  fs::create_directories(td.path / "a");
  fs::create_directories(td.path / "b");
  for (const char* name : {"c.png", "a.png", "b.png"}) {
    imageio::write_png_gray8(td.path / "a" / name, ramp_image(6, 6));
    imageio::write_png_gray8(td.path / "b" / name, ramp_image(6, 6, 0.5));
  }
  auto ds = load_pair_dataset(td.path / "a", td.path / "b");
  REQUIRE(ds.size() == 3);
  CHECK(ds[0].name == "a.png");
  CHECK(ds[1].name == "b.png");
  CHECK(ds[2].name == "c.png");

  imageio::write_png_gray8(td.path / "a" / "extra.png", ramp_image(6, 6));
  CHECK_THROWS_AS(load_pair_dataset(td.path / "a", td.path / "b"), IoError);
  fs::remove(td.path / "a" / "extra.png");

  imageio::write_png_gray8(td.path / "b" / "c.png", ramp_image(7, 6));
  CHECK_THROWS_AS(load_pair_dataset(td.path / "a", td.path / "b"), ShapeError);

  CHECK_THROWS_AS(load_pair_dataset(td.path / "missing", td.path / "b"), IoError);
}

TEST_CASE("split_meta partitions deterministically") {
  auto make_ds = [](size_t n) {
    PairDataset ds;
    for (size_t i = 0; i < n; ++i) {
      ImagePair p;
      p.name = "p" + std::to_string(i);
      p.lum_a = ramp_image(5, 5, 1.0 + i);
      p.lum_b = ramp_image(5, 5, 2.0 + i);
      ds.add(std::move(p));
    }
    return ds;
  };

  auto [mtr, mts] = split_meta(make_ds(4), 7);
  CHECK(mtr.size() == 2);
  CHECK(mts.size() == 2);
  std::set<std::string> names;
  for (size_t i = 0; i < mtr.size(); ++i) names.insert(mtr[i].name);
  for (size_t i = 0; i < mts.size(); ++i) names.insert(mts[i].name);
  CHECK(names.size() == 4);

  auto [mtr5, mts5] = split_meta(make_ds(5), 7);
  CHECK(mtr5.size() == 3);
  CHECK(mts5.size() == 2);

  auto [mtr2, mts2] = split_meta(make_ds(4), 7);
  for (size_t i = 0; i < mtr.size(); ++i) CHECK(mtr[i].name == mtr2[i].name);

  CHECK_THROWS_AS(split_meta(make_ds(1), 7), ConstraintError);
}

TEST_CASE("sample_patch_batch crops aligned windows deterministically") {
  PairDataset ds;
  ImagePair p;
  p.name = "x";
  p.lum_a = ramp_image(10, 12);
  p.lum_b = ramp_image(10, 12, 2.0);
  ds.add(std::move(p));

  Rng rng(3);
  TaskBatch tb = sample_patch_batch(ds, 4, 6, rng, BatchRole::meta_train);
  CHECK(tb.a.shape() == std::vector<int64_t>{4, 1, 6, 6});
  CHECK(tb.role == BatchRole::meta_train);
  // aligned crop: b = 2*a everywhere
  for (int64_t i = 0; i < tb.a.numel(); ++i)
    CHECK(tb.b.at(i) == doctest::Approx(2.0 * tb.a.at(i)));

  Rng rng2(3);
  TaskBatch tb2 = sample_patch_batch(ds, 4, 6, rng2, BatchRole::meta_train);
  for (int64_t i = 0; i < tb.a.numel(); ++i) CHECK(tb.a.at(i) == tb2.a.at(i));

  // degenerate crop: patch == image size
  PairDataset sq;
  ImagePair q;
  q.name = "sq";
  q.lum_a = ramp_image(8, 8);
  q.lum_b = ramp_image(8, 8);
  sq.add(std::move(q));
  Rng rng3(1);
  TaskBatch full = sample_patch_batch(sq, 1, 8, rng3, BatchRole::fusion_train);
  for (int64_t i = 0; i < 64; ++i) CHECK(full.a.at(i) == sq[0].lum_a.at(i));

  Rng rng4(1);
  CHECK_THROWS_AS(sample_patch_batch(sq, 1, 9, rng4, BatchRole::fusion_train), ShapeError);
}

TEST_CASE("gaussian blur preserves constants and tends to identity") {
  Tensor c = Tensor::full({8, 8}, 0.37);
  Tensor bc = gaussian_blur(c, 2.0);
  for (int64_t i = 0; i < bc.numel(); ++i) CHECK(bc.at(i) == doctest::Approx(0.37).epsilon(1e-12));

  Rng rng(9);
  Tensor img = synth_base(BaseKind::noise, 16, 16, rng);
  Tensor tiny = gaussian_blur(img, 1e-3);
  double worst = 0.0;
  for (int64_t i = 0; i < img.numel(); ++i)
    worst = std::max(worst, std::abs(tiny.at(i) - img.at(i)));
  CHECK(worst <= 1e-3);

  CHECK_THROWS_AS(gaussian_blur(img, 0.0), ConfigError);
}

TEST_CASE("synthetic multifocus construction") {
  Rng rng(11);
  Tensor sharp = synth_base(BaseKind::noise, 16, 16, rng);
  Tensor ones = Tensor::full({16, 16}, 1.0);
  auto [ia, ib, m] = synth_multifocus(sharp, ones, 2.0);
  Tensor blurred = gaussian_blur(sharp, 2.0);
  for (int64_t i = 0; i < sharp.numel(); ++i) {
    CHECK(ia.at(i) == sharp.at(i));
    CHECK(ib.at(i) == doctest::Approx(blurred.at(i)));
  }

  Tensor mask = synth_blob_mask(16, 16, rng);
  auto [pa, pb, m1] = synth_multifocus(sharp, mask, 2.0);
  Tensor inv(mask.shape());
  for (int64_t i = 0; i < inv.numel(); ++i) inv.at(i) = 1.0 - mask.at(i);
  auto [qa, qb, m2] = synth_multifocus(sharp, inv, 2.0);
  for (int64_t i = 0; i < pa.numel(); ++i) {
    CHECK(pa.at(i) == doctest::Approx(qb.at(i)));
    CHECK(pb.at(i) == doctest::Approx(qa.at(i)));
  }
}

TEST_CASE("synthetic multiexposure construction") {
  Tensor base = Tensor::full({4, 4}, 0.5);
  auto [ia, ib] = synth_multiexposure(base, 2.0, 0.5);
  CHECK(ia.at(0) == doctest::Approx(0.25));
  CHECK(ib.at(0) == doctest::Approx(std::sqrt(0.5)));

  Rng rng(13);
  Tensor b2 = synth_base(BaseKind::gradient, 8, 8, rng);
  auto [ja, jb] = synth_multiexposure(b2, 1.0 + 1e-9, 1.0 - 1e-9);
  for (int64_t i = 0; i < b2.numel(); ++i) {
    CHECK(ja.at(i) == doctest::Approx(b2.at(i)).epsilon(1e-6));
    CHECK(jb.at(i) == doctest::Approx(b2.at(i)).epsilon(1e-6));
    CHECK(ja.at(i) >= 0.0);
    CHECK(ja.at(i) <= 1.0);
  }

  CHECK_THROWS_AS(synth_multiexposure(base, 1.0, 0.5), ConfigError);
  CHECK_THROWS_AS(synth_multiexposure(base, 2.0, 1.0), ConfigError);
}

TEST_CASE("synthetic datasets are deterministic and mask-complete") {
  SynthConfig cfg;
  cfg.pairs = 6;
  cfg.image_size = 24;
  auto d1 = make_synthetic_dataset(TaskKind::multifocus, cfg, 99);
  auto d2 = make_synthetic_dataset(TaskKind::multifocus, cfg, 99);
  REQUIRE(d1.size() == 6);
  for (size_t k = 0; k < d1.size(); ++k) {
    REQUIRE(d1[k].mask.has_value());
    for (int64_t i = 0; i < d1[k].lum_a.numel(); ++i) {
      CHECK(d1[k].lum_a.at(i) == d2[k].lum_a.at(i));
      CHECK(d1[k].lum_a.at(i) >= 0.0);
      CHECK(d1[k].lum_a.at(i) <= 1.0);
    }
  }
  auto d3 = make_synthetic_dataset(TaskKind::multiexposure, cfg, 5);
  CHECK(d3.size() == 6);
  CHECK_FALSE(d3[0].mask.has_value());
  CHECK_THROWS_AS(make_synthetic_dataset(TaskKind::multimodal, cfg, 1), ConfigError);
}

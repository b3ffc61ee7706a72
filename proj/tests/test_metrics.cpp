#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "refusion/data.hpp"
#include "refusion/metrics.hpp"
#include "refusion/rng.hpp"

using namespace refusion;
using namespace refusion::metrics;

namespace {

// Input recipes shared with tests/fixtures/gen_metric_fixtures.py.
Tensor lcg_image(int64_t h, int64_t w, int64_t mul, int64_t add) {
  Tensor t({h, w});
  for (int64_t i = 0; i < h * w; ++i)
    t.at(i) = static_cast<double>((i * mul + add) % 256) / 255.0;
  return t;
}

Tensor checkerboard(int64_t h, int64_t w, int64_t cell) {
  Tensor t({h, w});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) t.at(i * w + j) = ((i / cell) + (j / cell)) % 2;
  return t;
}

Tensor inverted(const Tensor& t) {
  Tensor o = t.clone();
  for (int64_t i = 0; i < o.numel(); ++i) o.at(i) = 1.0 - o.at(i);
  return o;
}

nlohmann::json load_fixtures() {
  std::ifstream is(std::string(REFUSION_SOURCE_DIR) + "/tests/fixtures/metric_fixtures.json");
  REQUIRE(is.good());
  return nlohmann::json::parse(is);
}

Tensor random_img(int64_t h, int64_t w, Rng& rng) {
  Tensor t({h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.next_double();
  return t;
}

}  // namespace

TEST_CASE("brute-force fixtures match to 1e-9") {
  auto fx = load_fixtures();
  Tensor a8 = lcg_image(8, 8, 37, 11);
  Tensor b8 = lcg_image(8, 8, 101, 29);
  Tensor f8 = lcg_image(8, 8, 59, 3);
  Tensor mean8({8, 8});
  for (int64_t i = 0; i < 64; ++i) mean8.at(i) = 0.5 * (a8.at(i) + b8.at(i));

  CHECK(std::abs(entropy_en(a8) - fx["en_a8"].get<double>()) <= 1e-9);
  CHECK(std::abs(std_sd(a8) - fx["sd_a8"].get<double>()) <= 1e-9);
  CHECK(std::abs(spatial_frequency_sf(a8) - fx["sf_a8"].get<double>()) <= 1e-9);
  CHECK(std::abs(average_gradient_ag(a8) - fx["ag_a8"].get<double>()) <= 1e-9);
  CHECK(std::abs(scd(a8, b8, f8) - fx["scd_a8_b8_f8"].get<double>()) <= 1e-9);
  CHECK(std::abs(scd(a8, b8, mean8) - fx["scd_mean8"].get<double>()) <= 1e-9);

  Tensor x16 = lcg_image(16, 16, 37, 11);
  Tensor y16 = lcg_image(16, 16, 151, 7);
  CHECK(std::abs(ssim(x16, y16) - fx["ssim_x16_y16"].get<double>()) <= 1e-9);
  Tensor cb = checkerboard(16, 16, 2);
  CHECK(std::abs(ssim(cb, inverted(cb)) - fx["ssim_checker_inverted"].get<double>()) <= 1e-9);

  Tensor u64 = lcg_image(64, 64, 37, 11);
  Tensor v64 = lcg_image(64, 64, 151, 7);
  CHECK(std::abs(vif(u64, v64) - fx["vif_u64_v64"].get<double>()) <= 1e-9);
}

TEST_CASE("entropy analytic anchors") {
  CHECK(entropy_en(Tensor::full({8, 8}, 0.31)) == 0.0);

  // every 8-bit level exactly once
  Tensor all({16, 16});
  for (int64_t i = 0; i < 256; ++i) all.at(i) = static_cast<double>(i) / 255.0;
  CHECK(std::abs(entropy_en(all) - 8.0) <= 1e-9);

  // two equally frequent levels
  Tensor coin({4, 4});
  for (int64_t i = 0; i < 16; ++i) coin.at(i) = i % 2 ? 1.0 : 0.0;
  CHECK(std::abs(entropy_en(coin) - 1.0) <= 1e-12);
  CHECK(entropy_en(all) <= 8.0 + 1e-12);
}

TEST_CASE("standard deviation anchors and permutation invariance") {
  CHECK(std_sd(Tensor::full({5, 5}, 0.7)) == 0.0);

  Tensor half({4, 4});
  for (int64_t i = 0; i < 16; ++i) half.at(i) = i < 8 ? 0.0 : 1.0;
  CHECK(std_sd(half) == doctest::Approx(127.5).epsilon(1e-12));

  Rng rng(3);
  Tensor img = random_img(6, 6, rng);
  Tensor perm = img.clone();
  // reverse is a permutation
  for (int64_t i = 0; i < img.numel(); ++i) perm.at(i) = img.at(img.numel() - 1 - i);
  CHECK(std_sd(perm) == doctest::Approx(std_sd(img)).epsilon(1e-12));
}

TEST_CASE("spatial frequency anchors and transpose symmetry") {
  CHECK(spatial_frequency_sf(Tensor::full({4, 4}, 0.2)) == 0.0);

  Tensor alt({4, 4});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) alt.at(i * 4 + j) = j % 2 ? 1.0 : 0.0;
  CHECK(spatial_frequency_sf(alt) == doctest::Approx(255.0).epsilon(1e-12));

  Rng rng(5);
  Tensor img = random_img(5, 7, rng);
  Tensor t({7, 5});
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 7; ++j) t.at(j * 5 + i) = img.at(i * 7 + j);
  CHECK(spatial_frequency_sf(t) == doctest::Approx(spatial_frequency_sf(img)).epsilon(1e-12));
}

TEST_CASE("average gradient anchors and linearity") {
  CHECK(average_gradient_ag(Tensor::full({4, 4}, 0.9)) == 0.0);

  // one 8-bit step per column
  Tensor ramp({5, 5});
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 5; ++j) ramp.at(i * 5 + j) = static_cast<double>(j) / 255.0;
  CHECK(average_gradient_ag(ramp) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));

  Rng rng(7);
  Tensor img = random_img(6, 6, rng);
  Tensor scaled = img.clone();
  for (int64_t i = 0; i < img.numel(); ++i) scaled.at(i) *= 0.37;
  CHECK(average_gradient_ag(scaled) ==
        doctest::Approx(0.37 * average_gradient_ag(img)).epsilon(1e-10));
}

TEST_CASE("scd conventions and symmetry") {
  Rng rng(9);
  Tensor a = random_img(8, 8, rng);
  Tensor b = random_img(8, 8, rng);
  // ifused = ia: first correlation is of identical signals, second has a
  // zero-variance operand
  CHECK(scd(a, b, a) == doctest::Approx(1.0).epsilon(1e-12));

  Tensor f = random_img(8, 8, rng);
  CHECK(scd(a, b, f) == doctest::Approx(scd(b, a, f)).epsilon(1e-12));
}

TEST_CASE("ssim anchors") {
  Rng rng(11);
  Tensor x = random_img(16, 16, rng);
  CHECK(std::abs(ssim(x, x) - 1.0) <= 1e-9);

  Tensor y = random_img(16, 16, rng);
  CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-12));
  CHECK(ssim(x, y) >= -1.0);
  CHECK(ssim(x, y) <= 1.0);

  Tensor cb = checkerboard(16, 16, 2);
  CHECK(ssim(cb, inverted(cb)) < 0.0);

  CHECK_THROWS_AS(ssim(random_img(8, 8, rng), random_img(8, 8, rng)), ShapeError);
}

TEST_CASE("vif anchors") {
  Rng rng(13);
  Tensor x = random_img(64, 64, rng);
  CHECK(std::abs(vif(x, x) - 1.0) <= 1e-6);

  // information loss under blur
  Tensor blurred2d = data::gaussian_blur(x, 2.0);
  CHECK(vif(x, blurred2d) < 1.0);
  CHECK(vif(x, blurred2d) > 0.0);

  // contrast boost may exceed 1; only positivity is guaranteed
  Tensor boosted = x.clone();
  for (int64_t i = 0; i < boosted.numel(); ++i)
    boosted.at(i) = std::clamp(0.5 + 1.5 * (boosted.at(i) - 0.5), 0.0, 1.0);
  CHECK(vif(x, boosted) > 0.0);

  CHECK_THROWS_AS(vif(random_img(16, 16, rng), random_img(16, 16, rng)), ShapeError);
}

TEST_CASE("evaluate produces ordered complete reports") {
  data::PairDataset ds;
  Rng rng(17);
  std::vector<Tensor> fused;
  for (int k = 0; k < 3; ++k) {
    data::ImagePair p;
    p.name = "img" + std::to_string(k) + ".png";
    p.lum_a = random_img(64, 64, rng);
    p.lum_b = random_img(64, 64, rng);
    ds.add(std::move(p));
    fused.push_back(random_img(64, 64, rng));
  }

  auto r = evaluate(ds, fused, all_metric_names());
  CHECK(r.ids.size() == 3);
  CHECK(r.metric_names == std::vector<std::string>{"EN", "SD", "SF", "AG", "SCD", "SSIM", "VIF"});
  for (const auto& row : r.per_image)
    for (const auto& m : r.metric_names) CHECK(row.count(m) == 1);
  for (const auto& m : r.metric_names) {
    double s = 0.0;
    for (const auto& row : r.per_image) s += row.at(m);
    CHECK(r.means.at(m) == doctest::Approx(s / 3.0).epsilon(1e-12));
  }

  // identical triples: SSIM exactly 1, SCD by convention 0 (both diffs equal)
  data::PairDataset same;
  data::ImagePair p;
  p.name = "same.png";
  p.lum_a = fused[0].clone();
  p.lum_b = fused[0].clone();
  same.add(std::move(p));
  auto r2 = evaluate(same, {fused[0].clone()}, {"SSIM", "EN"});
  CHECK(r2.metric_names == std::vector<std::string>{"EN", "SSIM"});
  CHECK(r2.per_image[0].at("SSIM") == doctest::Approx(1.0).epsilon(1e-12));

  // empty metric set: identifiers only
  auto r3 = evaluate(same, {fused[0].clone()}, {});
  CHECK(r3.ids.size() == 1);
  CHECK(r3.metric_names.empty());

  CHECK_THROWS_AS(evaluate(ds, {fused[0]}, {"EN"}), ConstraintError);
  CHECK_THROWS_AS(evaluate(same, {fused[0].clone()}, {"NOPE"}), ConfigError);
}

TEST_CASE("report serialization round-trips through both formats") {
  data::PairDataset ds;
  Rng rng(23);
  data::ImagePair p;
  p.name = "one.png";
  p.lum_a = random_img(16, 16, rng);
  p.lum_b = random_img(16, 16, rng);
  ds.add(std::move(p));
  auto r = evaluate(ds, {random_img(16, 16, rng)}, {"EN", "SD", "SSIM"});

  auto dir = std::filesystem::temp_directory_path() / "refusion_metrics_test";
  std::filesystem::create_directories(dir);
  write_report_csv(dir / "r.csv", r);
  write_report_json(dir / "r.json", r);

  std::ifstream cs(dir / "r.csv");
  std::string header;
  std::getline(cs, header);
  CHECK(header == "id,EN,SD,SSIM");

  std::ifstream js(dir / "r.json");
  auto j = nlohmann::json::parse(js);
  CHECK(j["columns"] == nlohmann::json::array({"EN", "SD", "SSIM"}));
  CHECK(j["per_image"].size() == 1);
  CHECK(std::abs(j["means"]["EN"].get<double>() - r.means.at("EN")) <= 1e-12);
  std::filesystem::remove_all(dir);
}

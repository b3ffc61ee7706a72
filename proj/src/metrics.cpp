#include "refusion/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace refusion::metrics {

namespace {

void check_img(const Tensor& t, const char* who) {
  if (t.ndim() != 2) throw ShapeError(std::string(who) + ": expected [H,W]");
  if (t.shape(0) < 3 || t.shape(1) < 3)
    throw ShapeError(std::string(who) + ": image smaller than 3x3");
  if (!t.all_finite()) throw ConstraintError(std::string(who) + ": non-finite values");
}

void check_same(const Tensor& a, const Tensor& b, const char* who) {
  if (!a.same_shape(b)) throw ShapeError(std::string(who) + ": shape mismatch");
}

// [H,W] grid scaled to 8-bit range
std::vector<double> scaled(const Tensor& t) {
  std::vector<double> x(t.data(), t.data() + t.numel());
  for (double& v : x) v *= 255.0;
  return x;
}

struct Grid {
  std::vector<double> v;
  int64_t h = 0, w = 0;
  double operator()(int64_t i, int64_t j) const { return v[i * w + j]; }
  double& operator()(int64_t i, int64_t j) { return v[i * w + j]; }
};

Grid to_grid(const Tensor& t, double scale = 255.0) {
  Grid g;
  g.h = t.shape(0);
  g.w = t.shape(1);
  g.v.assign(t.data(), t.data() + t.numel());
  for (double& x : g.v) x *= scale;
  return g;
}

Grid gaussian_window(int n, double sd) {
  Grid w;
  w.h = w.w = n;
  w.v.resize(static_cast<size_t>(n) * n);
  const double c = (n - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double d2 = (i - c) * (i - c) + (j - c) * (j - c);
      w(i, j) = std::exp(-d2 / (2.0 * sd * sd));
      sum += w(i, j);
    }
  for (double& x : w.v) x /= sum;
  return w;
}

Grid filter_valid(const Grid& img, const Grid& win) {
  const int64_t n = win.h;
  Grid out;
  out.h = img.h - n + 1;
  out.w = img.w - n + 1;
  if (out.h < 1 || out.w < 1) throw ShapeError("image too small for the filter window");
  out.v.resize(static_cast<size_t>(out.h) * out.w);
  for (int64_t i = 0; i < out.h; ++i)
    for (int64_t j = 0; j < out.w; ++j) {
      double s = 0.0;
      for (int64_t u = 0; u < n; ++u)
        for (int64_t v = 0; v < n; ++v) s += win(u, v) * img(i + u, j + v);
      out(i, j) = s;
    }
  return out;
}

Grid downsample2(const Grid& g) {
  Grid out;
  out.h = (g.h + 1) / 2;
  out.w = (g.w + 1) / 2;
  out.v.resize(static_cast<size_t>(out.h) * out.w);
  for (int64_t i = 0; i < out.h; ++i)
    for (int64_t j = 0; j < out.w; ++j) out(i, j) = g(2 * i, 2 * j);
  return out;
}

Grid gmul(const Grid& a, const Grid& b) {
  Grid out = a;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

double corr_or_zero(const std::vector<double>& x, const std::vector<double>& y) {
  const size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

double entropy_en(const Tensor& img) {
  check_img(img, "entropy_en");
  std::array<int64_t, 256> hist{};
  for (int64_t i = 0; i < img.numel(); ++i) {
    const long q = std::lround(std::clamp(img.at(i), 0.0, 1.0) * 255.0);
    hist[static_cast<size_t>(q)]++;
  }
  const double n = static_cast<double>(img.numel());
  double h = 0.0;
  for (int64_t c : hist)
    if (c > 0) {
      const double p = static_cast<double>(c) / n;
      h -= p * std::log2(p);
    }
  return h;
}

double std_sd(const Tensor& img) {
  check_img(img, "std_sd");
  const auto x = scaled(img);
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x) s += (v - mu) * (v - mu);
  return std::sqrt(s / static_cast<double>(x.size()));
}

double spatial_frequency_sf(const Tensor& img) {
  check_img(img, "spatial_frequency_sf");
  const Grid x = to_grid(img);
  double rf = 0.0, cf = 0.0;
  for (int64_t i = 0; i < x.h; ++i)
    for (int64_t j = 1; j < x.w; ++j) rf += (x(i, j) - x(i, j - 1)) * (x(i, j) - x(i, j - 1));
  for (int64_t i = 1; i < x.h; ++i)
    for (int64_t j = 0; j < x.w; ++j) cf += (x(i, j) - x(i - 1, j)) * (x(i, j) - x(i - 1, j));
  rf /= static_cast<double>(x.h * (x.w - 1));
  cf /= static_cast<double>((x.h - 1) * x.w);
  return std::sqrt(rf + cf);
}

double average_gradient_ag(const Tensor& img) {
  check_img(img, "average_gradient_ag");
  const Grid x = to_grid(img);
  double acc = 0.0;
  for (int64_t i = 0; i + 1 < x.h; ++i)
    for (int64_t j = 0; j + 1 < x.w; ++j) {
      const double dx = x(i, j + 1) - x(i, j);
      const double dy = x(i + 1, j) - x(i, j);
      acc += std::sqrt((dx * dx + dy * dy) / 2.0);
    }
  return acc / static_cast<double>((x.h - 1) * (x.w - 1));
}

double scd(const Tensor& ia, const Tensor& ib, const Tensor& ifused) {
  check_img(ia, "scd");
  check_same(ia, ib, "scd");
  check_same(ia, ifused, "scd");
  const int64_t n = ia.numel();
  std::vector<double> d1(n), d2(n), d3(n), d4(n);
  for (int64_t i = 0; i < n; ++i) {
    d1[i] = ifused.at(i) - ib.at(i);
    d2[i] = ia.at(i) - ib.at(i);
    d3[i] = ifused.at(i) - ia.at(i);
    d4[i] = ib.at(i) - ia.at(i);
  }
  return corr_or_zero(d1, d2) + corr_or_zero(d3, d4);
}

double ssim(const Tensor& x, const Tensor& y) {
  check_img(x, "ssim");
  check_same(x, y, "ssim");
  if (x.shape(0) < 11 || x.shape(1) < 11)
    throw ShapeError("ssim: image smaller than the 11x11 window");
  const Grid gx = to_grid(x), gy = to_grid(y);
  const Grid win = gaussian_window(11, 1.5);
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  const Grid mu1 = filter_valid(gx, win);
  const Grid mu2 = filter_valid(gy, win);
  const Grid xx = filter_valid(gmul(gx, gx), win);
  const Grid yy = filter_valid(gmul(gy, gy), win);
  const Grid xy = filter_valid(gmul(gx, gy), win);
  double acc = 0.0;
  for (size_t i = 0; i < mu1.v.size(); ++i) {
    const double m1 = mu1.v[i], m2 = mu2.v[i];
    const double s1 = xx.v[i] - m1 * m1;
    const double s2 = yy.v[i] - m2 * m2;
    const double s12 = xy.v[i] - m1 * m2;
    acc += ((2 * m1 * m2 + c1) * (2 * s12 + c2)) / ((m1 * m1 + m2 * m2 + c1) * (s1 + s2 + c2));
  }
  return acc / static_cast<double>(mu1.v.size());
}

double vif(const Tensor& ref_t, const Tensor& dist_t) {
  check_img(ref_t, "vif");
  check_same(ref_t, dist_t, "vif");
  Grid ref = to_grid(ref_t), dist = to_grid(dist_t);
  const double sigma_nsq = 2.0;
  double num = 0.0, den = 0.0;
  for (int scale = 1; scale <= 4; ++scale) {
    const int n = (1 << (4 - scale + 1)) + 1;
    const Grid win = gaussian_window(n, n / 5.0);
    if (scale > 1) {
      ref = downsample2(filter_valid(ref, win));
      dist = downsample2(filter_valid(dist, win));
    }
    const Grid mu1 = filter_valid(ref, win);
    const Grid mu2 = filter_valid(dist, win);
    const Grid xx = filter_valid(gmul(ref, ref), win);
    const Grid yy = filter_valid(gmul(dist, dist), win);
    const Grid xy = filter_valid(gmul(ref, dist), win);
    for (size_t i = 0; i < mu1.v.size(); ++i) {
      double s1 = std::max(xx.v[i] - mu1.v[i] * mu1.v[i], 0.0);
      double s2 = std::max(yy.v[i] - mu2.v[i] * mu2.v[i], 0.0);
      const double s12 = xy.v[i] - mu1.v[i] * mu2.v[i];
      double g = s12 / (s1 + 1e-10);
      double sv = s2 - g * s12;
      if (s1 < 1e-10) {
        g = 0.0;
        sv = s2;
        s1 = 0.0;
      }
      if (s2 < 1e-10) {
        g = 0.0;
        sv = 0.0;
      }
      if (g < 0.0) {
        sv = s2;
        g = 0.0;
      }
      sv = std::max(sv, 1e-10);
      num += std::log10(1.0 + g * g * s1 / (sv + sigma_nsq));
      den += std::log10(1.0 + s1 / sigma_nsq);
    }
  }
  if (den == 0.0) throw ConstraintError("vif: reference carries no information");
  return num / den;
}

double ssim_fusion(const Tensor& ifused, const Tensor& ia, const Tensor& ib) {
  return 0.5 * (ssim(ifused, ia) + ssim(ifused, ib));
}

double vif_fusion(const Tensor& ifused, const Tensor& ia, const Tensor& ib) {
  return 0.5 * (vif(ia, ifused) + vif(ib, ifused));
}

const std::vector<std::string>& all_metric_names() {
  static const std::vector<std::string> names{"EN", "SD", "SF", "AG", "SCD", "SSIM", "VIF"};
  return names;
}

MetricsReport evaluate(const data::PairDataset& pairs, const std::vector<Tensor>& fused,
                       const std::vector<std::string>& metric_set) {
  if (pairs.size() != fused.size())
    throw ConstraintError("evaluate: pair/fused count mismatch (" +
                          std::to_string(pairs.size()) + " vs " +
                          std::to_string(fused.size()) + ")");
  // keep the paper's column order regardless of request order
  std::vector<std::string> cols;
  for (const auto& name : all_metric_names())
    if (std::find(metric_set.begin(), metric_set.end(), name) != metric_set.end())
      cols.push_back(name);
  for (const auto& name : metric_set)
    if (std::find(all_metric_names().begin(), all_metric_names().end(), name) ==
        all_metric_names().end())
      throw ConfigError("unknown metric '" + name + "'");

  MetricsReport r;
  r.metric_names = cols;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const Tensor& f = fused[i];
    std::map<std::string, double> row;
    for (const auto& m : cols) {
      if (m == "EN") row[m] = entropy_en(f);
      else if (m == "SD") row[m] = std_sd(f);
      else if (m == "SF") row[m] = spatial_frequency_sf(f);
      else if (m == "AG") row[m] = average_gradient_ag(f);
      else if (m == "SCD") row[m] = scd(p.lum_a, p.lum_b, f);
      else if (m == "SSIM") row[m] = ssim_fusion(f, p.lum_a, p.lum_b);
      else if (m == "VIF") row[m] = vif_fusion(f, p.lum_a, p.lum_b);
    }
    r.ids.push_back(p.name);
    r.per_image.push_back(std::move(row));
  }
  for (const auto& m : cols) {
    double s = 0.0;
    for (const auto& row : r.per_image) s += row.at(m);
    r.means[m] = r.per_image.empty() ? 0.0 : s / static_cast<double>(r.per_image.size());
  }
  return r;
}

void write_report_csv(const std::filesystem::path& path, const MetricsReport& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write report: " + path.string());
  os << "id";
  for (const auto& m : r.metric_names) os << "," << m;
  os << "\n";
  os.precision(10);
  for (size_t i = 0; i < r.ids.size(); ++i) {
    os << r.ids[i];
    for (const auto& m : r.metric_names) os << "," << r.per_image[i].at(m);
    os << "\n";
  }
  os << "mean";
  for (const auto& m : r.metric_names) os << "," << r.means.at(m);
  os << "\n";
}

void write_report_json(const std::filesystem::path& path, const MetricsReport& r) {
  nlohmann::json j;
  j["columns"] = r.metric_names;
  j["per_image"] = nlohmann::json::array();
  for (size_t i = 0; i < r.ids.size(); ++i) {
    nlohmann::json row{{"id", r.ids[i]}};
    for (const auto& m : r.metric_names) row[m] = r.per_image[i].at(m);
    j["per_image"].push_back(std::move(row));
  }
  j["means"] = r.means;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write report: " + path.string());
  os << j.dump(2) << "\n";
}

}  // namespace refusion::metrics

#include "refusion/plot.hpp"

#include <algorithm>
#include <cmath>

#include "refusion/image_io.hpp"

namespace refusion::plot {

namespace {

struct Canvas {
  int64_t h, w;
  Tensor rgb;  // [3,H,W]
  Canvas(int64_t h_, int64_t w_) : h(h_), w(w_), rgb({3, h_, w_}) {
    for (int64_t i = 0; i < rgb.numel(); ++i) rgb.at(i) = 1.0;
  }
  void put(int64_t y, int64_t x, double r, double g, double b) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    rgb.at(0 * h * w + y * w + x) = r;
    rgb.at(1 * h * w + y * w + x) = g;
    rgb.at(2 * h * w + y * w + x) = b;
  }
  void line(int64_t y0, int64_t x0, int64_t y1, int64_t x1, double r, double g, double b) {
    const int64_t dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int64_t sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int64_t err = dx + dy;
    while (true) {
      put(y0, x0, r, g, b);
      if (x0 == x1 && y0 == y1) break;
      const int64_t e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
};

struct Series {
  std::vector<std::pair<double, double>> pts;  // (step, value)
  double r, g, b;
};

}  // namespace

void render_loss_curves(const std::filesystem::path& out_png,
                        const std::vector<meta::LossRecord>& history) {
  const int64_t W = 900, H = 540, ml = 70, mr = 20, mt = 20, mb = 50;
  Canvas cv(H, W);

  Series lf{{}, 0.80, 0.25, 0.20};
  Series lr{{}, 0.15, 0.35, 0.80};
  Series ev{{}, 0.10, 0.60, 0.25};
  for (const auto& rec : history) {
    if (std::isfinite(rec.lf)) lf.pts.push_back({static_cast<double>(rec.step), rec.lf});
    if (std::isfinite(rec.lr)) {
      (rec.stage == "eval" ? ev : lr)
          .pts.push_back({static_cast<double>(rec.step), rec.lr});
    }
  }

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const Series* s : {&lf, &lr, &ev})
    for (const auto& [x, y] : s->pts) {
      if (!any) {
        xmin = xmax = x;
        ymin = ymax = y;
        any = true;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (!any) {
    xmax = ymax = 1.0;
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) {
    return ml + static_cast<int64_t>((x - xmin) / (xmax - xmin) * (W - ml - mr));
  };
  auto py = [&](double y) {
    return H - mb - static_cast<int64_t>((y - ymin) / (ymax - ymin) * (H - mt - mb));
  };

  // frame and light horizontal grid
  cv.line(mt, ml, H - mb, ml, 0, 0, 0);
  cv.line(H - mb, ml, H - mb, W - mr, 0, 0, 0);
  for (int i = 1; i <= 4; ++i) {
    const int64_t y = mt + i * (H - mt - mb) / 5;
    cv.line(y, ml, y, W - mr, 0.85, 0.85, 0.85);
  }

  for (const Series* s : {&lf, &lr, &ev}) {
    for (size_t i = 1; i < s->pts.size(); ++i)
      cv.line(py(s->pts[i - 1].second), px(s->pts[i - 1].first), py(s->pts[i].second),
              px(s->pts[i].first), s->r, s->g, s->b);
    // point markers help when a series has few samples
    for (const auto& [x, y] : s->pts)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) cv.put(py(y) + dy, px(x) + dx, s->r, s->g, s->b);
  }

  // legend swatches, top-right: L_f, L_r, eval L_r
  int64_t ly = mt + 8;
  for (const Series* s : {&lf, &lr, &ev}) {
    for (int64_t dy = 0; dy < 8; ++dy)
      for (int64_t dx = 0; dx < 24; ++dx) cv.put(ly + dy, W - mr - 40 + dx, s->r, s->g, s->b);
    ly += 16;
  }

  imageio::write_png_rgb8(out_png, cv.rgb);
}

}  // namespace refusion::plot

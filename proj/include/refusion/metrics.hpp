#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "refusion/data.hpp"
#include "refusion/tensor.hpp"

namespace refusion::metrics {

// All metrics take [H,W] luminance in [0,1] and evaluate on the 8-bit scale
// (values multiplied by 255), the convention the fusion literature reports.

double entropy_en(const Tensor& img);           // Shannon entropy of the 256-bin histogram, bits
double std_sd(const Tensor& img);               // population standard deviation
double spatial_frequency_sf(const Tensor& img); // sqrt(RF^2 + CF^2), interior differences
double average_gradient_ag(const Tensor& img);  // mean sqrt((dx^2+dy^2)/2), forward differences

// corr(F-B, A-B) + corr(F-A, B-A); a zero-variance operand zeroes that term.
double scd(const Tensor& ia, const Tensor& ib, const Tensor& ifused);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), valid positions only.
// Requires min(H,W) >= 11.
double ssim(const Tensor& x, const Tensor& y);

// Pixel-domain multi-scale VIF (4 scales, Gaussian channel model).
double vif(const Tensor& ref, const Tensor& dist);

// Fusion-context wrappers: mean over both sources.
double ssim_fusion(const Tensor& ifused, const Tensor& ia, const Tensor& ib);
double vif_fusion(const Tensor& ifused, const Tensor& ia, const Tensor& ib);

// Column order follows the paper's tables.
const std::vector<std::string>& all_metric_names();

struct MetricsReport {
  std::vector<std::string> ids;
  std::vector<std::string> metric_names;                 // column order
  std::vector<std::map<std::string, double>> per_image;  // aligned with ids
  std::map<std::string, double> means;
};

MetricsReport evaluate(const data::PairDataset& pairs, const std::vector<Tensor>& fused,
                       const std::vector<std::string>& metric_set);

void write_report_csv(const std::filesystem::path& path, const MetricsReport& r);
void write_report_json(const std::filesystem::path& path, const MetricsReport& r);

}  // namespace refusion::metrics

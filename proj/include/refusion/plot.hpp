#pragma once

#include <filesystem>
#include <vector>

#include "refusion/meta_trainer.hpp"

namespace refusion::plot {

// Renders the L_f / L_r training curves to a static PNG.
void render_loss_curves(const std::filesystem::path& out_png,
                        const std::vector<meta::LossRecord>& history);

}  // namespace refusion::plot

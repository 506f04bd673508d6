#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "config.hpp"

namespace causalscope::cli {

void cmd_gen_data(const RunConfig& config);
void cmd_syntax_scan(const RunConfig& config);
void cmd_patch_sweep(const RunConfig& config);
void cmd_lens(const RunConfig& config);
void cmd_ablate(const RunConfig& config);
// Renders SVGs for heatmap, sweep and loss JSON artifacts. Output goes next
// to each input unless out_dir is set.
std::vector<std::filesystem::path> cmd_render(const std::vector<std::filesystem::path>& inputs,
                                              const std::filesystem::path& out_dir);

} // namespace causalscope::cli

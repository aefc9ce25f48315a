#pragma once

// Fixed reference networks at 200x200x1 used by the benchmarks.

#include <vector>

#include "tdn/archdsl.hpp"

namespace tdn {

/// Residual network with plain 3x3 blocks, about 1.1 GFLOPs.
ArchGraph reference_net(int size = 200);
/// Shallow residual network of depthwise-separable blocks, about 97 MFLOPs.
ArchGraph compact_net(int size = 200);

/// DSL text of a residual network: 7x7 stem, 3x3 max pool, then stages of
/// (width, blocks); the first block of every stage after the first is strided.
std::string residual_net_text(int size, int stem, const std::vector<std::pair<int, int>>& stages, bool depthwise,
                              int classes = 6);

}  // namespace tdn

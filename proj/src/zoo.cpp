#include "tdn/zoo.hpp"

#include <sstream>

namespace tdn {

std::string residual_net_text(int size, int stem, const std::vector<std::pair<int, int>>& stages, bool depthwise,
                              int classes) {
  std::ostringstream t;
  t << "input " << size << " " << size << " 1\n";
  t << "conv stem k=7 s=2 f=" << stem << " pad=same bn=1 act=relu\n";
  t << "maxpool pool k=3 s=2\n";
  std::string cur = "pool";
  int channels = stem;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto [width, blocks] = stages[s];
    for (int b = 0; b < blocks; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string p = "s" + std::to_string(s + 1) + "b" + std::to_string(b + 1);
      std::string shortcut = cur;
      if (stride != 1 || channels != width) {
        t << "conv " << p << "_sc k=1 s=" << stride << " f=" << width << " pad=same bn=1 act=none from=" << cur
          << "\n";
        shortcut = p + "_sc";
      }
      if (depthwise) {
        t << "dwconv " << p << "_d1 k=3 s=" << stride << " pad=same bn=1 act=relu from=" << cur << "\n";
        t << "conv " << p << "_p1 k=1 s=1 f=" << width << " pad=same bn=1 act=relu\n";
        t << "dwconv " << p << "_d2 k=3 s=1 pad=same bn=1 act=relu\n";
        t << "conv " << p << "_p2 k=1 s=1 f=" << width << " pad=same bn=1 act=none\n";
        t << "add " << p << "_add from=" << shortcut << "," << p << "_p2 act=relu\n";
      } else {
        t << "conv " << p << "_c1 k=3 s=" << stride << " f=" << width << " pad=same bn=1 act=relu from=" << cur
          << "\n";
        t << "conv " << p << "_c2 k=3 s=1 f=" << width << " pad=same bn=1 act=none\n";
        t << "add " << p << "_add from=" << shortcut << "," << p << "_c2 act=relu\n";
      }
      cur = p + "_add";
      channels = width;
    }
  }
  t << "gap gap from=" << cur << "\n";
  t << "dense fc units=" << classes << " act=none\n";
  t << "softmax prob\n";
  return t.str();
}

ArchGraph reference_net(int size) {
  return infer_shapes(parse_arch(residual_net_text(size, 32, {{40, 2}, {80, 2}, {160, 2}, {288, 2}}, false)));
}

ArchGraph compact_net(int size) {
  return infer_shapes(parse_arch(residual_net_text(size, 16, {{32, 2}, {72, 2}, {128, 2}}, true)));
}

}  // namespace tdn

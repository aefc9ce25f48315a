#pragma once

// Seeded random graphs, parameters and inputs shared by the unit and acceptance tests.

#include <sstream>
#include <string>

#include "tdn/archdsl.hpp"
#include "tdn/params.hpp"
#include "tdn/rng.hpp"
#include "tdn/tensor.hpp"

namespace tdn::testkit {

struct RandomGraphOptions {
  int min_size = 8;
  int max_size = 16;
  int max_channels = 64;
  int max_layers = 12;
  int max_input_channels = 3;
  bool softmax = true;
};

/// DSL text of a random valid graph: a chain of conv / dwconv / maxpool
/// layers and residual blocks, then gap, one or two dense layers and
/// (optionally) softmax. Every node is consumed.
inline std::string random_graph_text(std::uint64_t seed, const RandomGraphOptions& o = {}) {
  Rng rng(seed);
  const int size = rng.range(o.min_size, o.max_size);
  int h = size;
  int w = rng.coin() ? size : rng.range(o.min_size, o.max_size);
  int c = rng.range(1, o.max_input_channels);
  std::ostringstream t;
  t << "input " << h << " " << w << " " << c << "\n";
  std::string cur = "input";
  int layers = 1;
  const int tail = (o.softmax ? 2 : 1) + 1;
  const int hidden_dense = rng.coin() ? 1 : 0;
  const int body_budget = o.max_layers - tail - hidden_dense;
  int n = 0;
  auto fresh = [&](const char* p) { return std::string(p) + std::to_string(++n); };
  auto channels = [&] { return rng.range(1, o.max_channels / 4) * (rng.coin() ? 4 : 1); };
  auto flags = [&](std::ostringstream& s) {
    const bool bn = rng.coin();
    s << " bn=" << bn << " act=" << (rng.coin() ? "relu" : "none");
    if (rng.below(3) == 0) s << " bias=" << !bn;
  };
  auto shrink = [](int x, int k, int s, bool same) { return same ? (x + s - 1) / s : (x - k) / s + 1; };
  while (layers < body_budget) {
    const int room = body_budget - layers;
    const int choice = static_cast<int>(rng.below(room >= 3 ? 5 : 3));
    const int kernels[] = {1, 3, 5, 7};
    if (choice == 0 || choice == 1) {
      int k = kernels[rng.below(4)];
      const int s = rng.coin() ? 1 : 2;
      bool same = rng.below(3) != 0;
      if (std::min(h, w) < k) {
        k = 1;
      }
      if (!same && (std::min(h, w) - k) / s + 1 < 1) same = true;
      const std::string id = fresh(choice == 0 ? "c" : "d");
      std::ostringstream s_line;
      if (choice == 0) {
        c = channels();
        s_line << "conv " << id << " k=" << k << " s=" << s << " f=" << c << " pad=" << (same ? "same" : "valid");
      } else {
        s_line << "dwconv " << id << " k=" << k << " s=" << s << " pad=" << (same ? "same" : "valid");
      }
      flags(s_line);
      t << s_line.str() << " from=" << cur << "\n";
      h = shrink(h, k, s, same);
      w = shrink(w, k, s, same);
      cur = id;
      layers += 1;
    } else if (choice == 2) {
      const int k = std::min({static_cast<int>(rng.range(2, 3)), h, w});
      const int s = rng.range(1, 2);
      if (k < 2) continue;
      const std::string id = fresh("m");
      t << "maxpool " << id << " k=" << k << " s=" << s << " from=" << cur << "\n";
      h = (h - k) / s + 1;
      w = (w - k) / s + 1;
      cur = id;
      layers += 1;
    } else if (choice == 3) {
      // identity residual: one or two same-padded stride-1 convs back to c channels
      const int k = rng.coin() ? 3 : 1;
      const std::string a = fresh("r");
      std::ostringstream l1;
      l1 << "conv " << a << " k=" << k << " s=1 f=" << c << " pad=same";
      flags(l1);
      t << l1.str() << " from=" << cur << "\n";
      std::string branch = a;
      layers += 1;
      if (room >= 4 && rng.coin()) {
        const std::string b = fresh("r");
        std::ostringstream l2;
        l2 << (rng.coin() ? "conv " + b + " k=3 s=1 f=" + std::to_string(c) : "dwconv " + b + " k=3 s=1")
           << " pad=same";
        flags(l2);
        t << l2.str() << " from=" << branch << "\n";
        branch = b;
        layers += 1;
      }
      const std::string add = fresh("a");
      t << "add " << add << " from=" << (rng.coin() ? cur + "," + branch : branch + "," + cur)
        << (rng.coin() ? " act=relu" : "") << "\n";
      cur = add;
      layers += 1;
    } else {
      // projection residual: strided 1x1 shortcut next to a strided kxk branch
      const int s = rng.coin() ? 1 : 2;
      const int f = channels();
      const std::string sc = fresh("p");
      const std::string br = fresh("p");
      std::ostringstream l1, l2;
      l1 << "conv " << sc << " k=1 s=" << s << " f=" << f << " pad=same";
      flags(l1);
      l2 << "conv " << br << " k=3 s=" << s << " f=" << f << " pad=same";
      flags(l2);
      t << l1.str() << " from=" << cur << "\n" << l2.str() << " from=" << cur << "\n";
      const std::string add = fresh("a");
      t << "add " << add << " from=" << br << "," << sc << (rng.coin() ? " act=relu" : "") << "\n";
      h = (h + s - 1) / s;
      w = (w + s - 1) / s;
      c = f;
      cur = add;
      layers += 3;
    }
  }
  t << "gap g from=" << cur << "\n";
  if (hidden_dense) t << "dense fh units=" << rng.range(2, 16) << " act=relu\n";
  t << "dense fc units=" << rng.range(2, 8) << " act=none\n";
  if (o.softmax) t << "softmax prob\n";
  return t.str();
}

inline ArchGraph random_graph(std::uint64_t seed, const RandomGraphOptions& o = {}) {
  return infer_shapes(parse_arch(random_graph_text(seed, o)));
}

/// Glorot weights plus random biases and non-trivial batch-norm statistics.
template <typename Scalar>
ModelParams<Scalar> random_params(const ArchGraph& g, std::uint64_t seed) {
  ModelParams<Scalar> p = init_params<Scalar>(g, seed);
  Rng rng(derive_seed(seed, 99));
  for (auto& l : p.layers) {
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = static_cast<Scalar>(rng.uniform(-0.2, 0.2));
    for (Eigen::Index i = 0; i < l.bn_scale.size(); ++i) {
      l.bn_scale[i] = static_cast<Scalar>(rng.uniform(0.5, 1.5));
      l.bn_shift[i] = static_cast<Scalar>(rng.uniform(-0.2, 0.2));
      l.bn_mean[i] = static_cast<Scalar>(rng.uniform(-0.2, 0.2));
      l.bn_var[i] = static_cast<Scalar>(rng.uniform(0.5, 1.5));
    }
  }
  return p;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(int n, const TensorShape& s, std::uint64_t seed) {
  Tensor<Scalar> t(n, s);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<Scalar>(rng.uniform());
  return t;
}

}  // namespace tdn::testkit

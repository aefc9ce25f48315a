#include "tdn/runtime.hpp"

#include <immintrin.h>
#include <pthread.h>
#include <sched.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <list>
#include <mutex>
#include <numeric>
#include <thread>

#include "tdn/error.hpp"
#include "tdn/rng.hpp"

namespace tdn {

namespace {

using AlignedFloats = std::vector<float, Eigen::aligned_allocator<float>>;
constexpr std::int64_t kArenaAlign = 16;  // floats (64 bytes)
constexpr Eigen::Index kRowChunk = 256;

std::int64_t align_up(std::int64_t n) { return (n + kArenaAlign - 1) / kArenaAlign * kArenaAlign; }

enum class Scratch { Patches, Panel };

/// Scratch buffers retained up to capacity; a request takes the smallest
/// retained buffer of its kind that is large enough, else the least recently
/// used entry is evicted. Entries handed out since begin_op() are never
/// evicted. Capacity 0 allocates on every request.
class ScratchCache {
 public:
  explicit ScratchCache(int capacity) : capacity_(std::max(capacity, 0)) {}

  void begin_op() { op_start_ = tick_ + 1; }

  float* acquire(std::size_t floats, Scratch kind = Scratch::Patches) {
    ++tick_;
    Entry* best = nullptr;
    for (auto& e : entries_) {
      if (e.kind == kind && e.buffer.size() >= floats && (!best || e.buffer.size() < best->buffer.size())) best = &e;
    }
    if (best) {
      best->last_used = tick_;
      return best->buffer.data();
    }
    if (static_cast<int>(entries_.size()) >= capacity_) {
      auto lru = entries_.end();
      for (auto it = entries_.begin(); it != entries_.end(); ++it) {
        if (it->last_used < op_start_ && (lru == entries_.end() || it->last_used < lru->last_used)) lru = it;
      }
      if (lru == entries_.end()) {
        auto& t = transient_[static_cast<int>(kind)];
        t = AlignedFloats(floats);
        return t.data();
      }
      entries_.erase(lru);
    }
    entries_.push_back({AlignedFloats(floats), kind, tick_});
    return entries_.back().buffer.data();
  }

  std::size_t retained() const { return entries_.size(); }

 private:
  struct Entry {
    AlignedFloats buffer;
    Scratch kind;
    std::uint64_t last_used = 0;
  };
  int capacity_;
  std::uint64_t tick_ = 0;
  std::uint64_t op_start_ = 0;
  std::vector<Entry> entries_;
  AlignedFloats transient_[2];
};

}  // namespace

struct Workspace {
  Workspace(const ExecutionPlan& plan)
      : cache(plan.config.primitive_cache_capacity) {
    if (plan.config.mempool_enable) {
      arena.assign(static_cast<std::size_t>(plan.arena_floats), 0.0f);
    } else {
      buffers.reserve(plan.values.size());
      for (const auto& v : plan.values) buffers.emplace_back(static_cast<std::size_t>(v.size()), 0.0f);
    }
  }

  float* value(const ExecutionPlan& plan, int v) {
    if (plan.config.mempool_enable) return arena.data() + plan.values[v].offset;
    return buffers[v].data();
  }

  AlignedFloats arena;
  std::vector<AlignedFloats> buffers;
  ScratchCache cache;
};

struct WorkspacePool {
  std::mutex mutex;
  std::vector<std::unique_ptr<Workspace>> idle;
  std::size_t limit = 0;

  std::unique_ptr<Workspace> acquire(const ExecutionPlan& plan) {
    {
      std::lock_guard lock(mutex);
      if (!idle.empty()) {
        auto ws = std::move(idle.back());
        idle.pop_back();
        return ws;
      }
    }
    return std::make_unique<Workspace>(plan);
  }

  void release(std::unique_ptr<Workspace> ws) {
    std::lock_guard lock(mutex);
    if (idle.size() < limit) idle.push_back(std::move(ws));
  }
};

std::string PlanOp::label() const {
  switch (kind) {
    case OpKind::Conv: {
      std::string s = "conv";
      if (residual >= 0) s += "_add";
      if (relu) s += "_relu";
      return s;
    }
    case OpKind::DepthwiseConv:
      return relu ? "dwconv_relu" : "dwconv";
    case OpKind::MaxPool:
      return "maxpool";
    case OpKind::GlobalAvgPool:
      return "gap";
    case OpKind::Add:
      return relu ? "add_relu" : "add";
    case OpKind::Dense:
      return relu ? "dense_relu" : "dense";
    case OpKind::Softmax:
      return "softmax";
  }
  return "?";
}

std::vector<int> parse_core_list(const std::string& spec) {
  std::vector<int> cores;
  std::size_t pos = 0;
  auto bad = [&]() -> ConfigError { return ConfigError(0, "malformed core list '" + spec + "'"); };
  while (pos < spec.size()) {
    std::size_t comma = spec.find(',', pos);
    std::string part = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    pos = comma == std::string::npos ? spec.size() : comma + 1;
    if (part.empty()) throw bad();
    auto dash = part.find('-');
    try {
      std::size_t used = 0;
      if (dash == std::string::npos) {
        int c = std::stoi(part, &used);
        if (used != part.size() || c < 0) throw bad();
        cores.push_back(c);
      } else {
        std::string lo_s = part.substr(0, dash), hi_s = part.substr(dash + 1);
        int lo = std::stoi(lo_s, &used);
        if (used != lo_s.size()) throw bad();
        int hi = std::stoi(hi_s, &used);
        if (used != hi_s.size() || lo < 0 || hi < lo) throw bad();
        for (int c = lo; c <= hi; ++c) cores.push_back(c);
      }
    } catch (const std::logic_error&) {
      throw bad();
    }
  }
  return cores;
}

RuntimeConfig apply_env_overrides(RuntimeConfig cfg) {
  auto read_int = [](const char* name, int& target, int lo) {
    if (const char* v = std::getenv(name)) {
      char* end = nullptr;
      long x = std::strtol(v, &end, 10);
      if (end == v || *end != '\0' || x < lo || x > 1 << 20) {
        throw ConfigError(0, std::string(name) + ": expected an integer >= " + std::to_string(lo));
      }
      target = static_cast<int>(x);
    }
  };
  auto read_bool = [&](const char* name, bool& target) {
    int x = target ? 1 : 0;
    read_int(name, x, 0);
    if (x > 1) throw ConfigError(0, std::string(name) + ": expected 0 or 1");
    target = x == 1;
  };
  read_int("TDN_PRIMITIVE_CACHE_CAPACITY", cfg.primitive_cache_capacity, 0);
  read_bool("TDN_BLOCKED_FORMAT", cfg.blocked_format);
  read_bool("TDN_MEMPOOL_ENABLE", cfg.mempool_enable);
  read_int("TDN_TENSOR_POOL_LIMIT", cfg.tensor_pool_limit, 0);
  read_bool("TDN_CONV_ADD_FUSION_SAFE", cfg.conv_add_fusion_safe);
  read_int("TDN_NUM_THREADS", cfg.num_threads, 1);
  if (const char* v = std::getenv("TDN_CPU_AFFINITY")) {
    cfg.cpu_affinity = v;
    if (!cfg.cpu_affinity.empty()) parse_core_list(cfg.cpu_affinity);
  }
  return cfg;
}

namespace {

void check_finite(const ArchGraph& graph, const ModelParams<float>& params) {
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    bool ok = true;
    for_each_learnable(params.layers[i], [&](const char*, const float* d, Eigen::Index n) {
      ok = ok && Eigen::Map<const Eigen::ArrayXf>(d, n).allFinite();
    });
    const auto& p = params.layers[i];
    ok = ok && p.bn_mean.allFinite() && p.bn_var.allFinite() && (p.bn_var.array() >= 0).all();
    if (!ok) throw NumericError(graph.nodes[i].id, "non-finite or invalid weights");
  }
}

PackedWeights fold_weights(const LayerParams<float>& p, int out_channels, bool blocked) {
  PackedWeights w;
  w.matrix = p.weight;
  w.bias = p.bias.size() ? p.bias : Vector<float>::Zero(out_channels);
  if (p.bn_scale.size()) {
    // Double precision for the fold; the result is stored as float.
    Vector<double> a, b;
    bn_affine<double>(p.bn_scale.cast<double>(), p.bn_shift.cast<double>(), p.bn_mean.cast<double>(),
                      p.bn_var.cast<double>(), kBatchNormEps, a, b);
    w.matrix = (p.weight.cast<double>().array().rowwise() * a.transpose().array()).cast<float>();
    w.bias = (w.bias.cast<double>().array() * a.array() + b.array()).cast<float>().matrix();
  }
  if (blocked) {
    const Eigen::Index taps = w.matrix.rows();
    w.blocks = (out_channels + 7) / 8;
    w.blocked.assign(static_cast<std::size_t>(w.blocks * taps * 8), 0.0f);
    for (int b = 0; b < w.blocks; ++b) {
      for (Eigen::Index t = 0; t < taps; ++t) {
        for (int j = 0; j < 8 && b * 8 + j < out_channels; ++j) {
          w.blocked[(static_cast<std::size_t>(b) * taps + t) * 8 + j] = w.matrix(t, b * 8 + j);
        }
      }
    }
  }
  return w;
}

constexpr int kTile = 12;

struct Epilogue {
  const float* bias;
  const float* residual;  // same layout as the output, or null
  bool relu;
};

// One tile of kTile rows against blocks b, b+1. Element (r, t) of the tile is
// at tile[t * kTile + r] when packed, else at tile[r * taps + t].
// The epilogue (bias, residual, relu) is applied in registers.
template <bool Packed>
void blocked_tile(const float* tile, Eigen::Index taps, const float* w0, const float* w1, int rn, int cn,
                  const Epilogue& ep, float* dst, int ldo) {
  const Eigen::Index rs = Packed ? 1 : taps;
  const Eigen::Index ts = Packed ? kTile : 1;
#if defined(__AVX512F__)
  const __mmask16 mask = static_cast<__mmask16>((1u << cn) - 1u);
  __m512 acc[kTile];
  for (auto& x : acc) x = _mm512_maskz_loadu_ps(mask, ep.bias);
  for (Eigen::Index t = 0; t < taps; ++t) {
    const __m512 wv =
        _mm512_insertf32x8(_mm512_castps256_ps512(_mm256_load_ps(w0 + t * 8)), _mm256_load_ps(w1 + t * 8), 1);
    const float* pt = tile + t * ts;
#pragma GCC unroll 12
    for (int r = 0; r < kTile; ++r) acc[r] = _mm512_fmadd_ps(_mm512_set1_ps(pt[r * rs]), wv, acc[r]);
  }
#pragma GCC unroll 12
  for (int r = 0; r < kTile; ++r) {
    const __mmask16 m = r < rn ? mask : __mmask16{0};
    const int row = r < rn ? r : 0;
    if (ep.residual) acc[r] = _mm512_add_ps(acc[r], _mm512_maskz_loadu_ps(m, ep.residual + row * ldo));
    if (ep.relu) acc[r] = _mm512_max_ps(acc[r], _mm512_setzero_ps());
    _mm512_mask_storeu_ps(dst + row * ldo, m, acc[r]);
  }
#else
  using Lane = Eigen::Array<float, 8, 1>;
  Lane acc[kTile][2];
  for (auto& row : acc) row[0].setZero(), row[1].setZero();
  for (Eigen::Index t = 0; t < taps; ++t) {
    const Lane lo = Eigen::Map<const Lane, Eigen::Aligned32>(w0 + t * 8);
    const Lane hi = Eigen::Map<const Lane, Eigen::Aligned32>(w1 + t * 8);
    for (int r = 0; r < kTile; ++r) {
      acc[r][0] += tile[r * rs + t * ts] * lo;
      acc[r][1] += tile[r * rs + t * ts] * hi;
    }
  }
  for (int r = 0; r < rn; ++r) {
    for (int j = 0; j < cn; ++j) {
      float v = acc[r][j / 8][j % 8] + ep.bias[j];
      if (ep.residual) v += ep.residual[r * ldo + j];
      dst[r * ldo + j] = ep.relu && v < 0.0f ? 0.0f : v;
    }
  }
#endif
}

// out (rows x cout) = a (rows x taps) * W, W given as 8-wide column blocks.
// A tile is packed tap-major when more than two block pairs reuse it or it is partial.
void gemm_blocked(const float* a, Eigen::Index rows, Eigen::Index taps, const PackedWeights& w, int cout,
                  const float* residual, bool relu, float* out, float* panel) {
  const int pairs = (w.blocks + 1) / 2;
  for (Eigen::Index r0 = 0; r0 < rows; r0 += kTile) {
    const int rn = static_cast<int>(std::min<Eigen::Index>(kTile, rows - r0));
    const bool packed = rn < kTile || pairs > 2;
    if (packed) {
      if (rn < kTile) std::fill(panel, panel + kTile * taps, 0.0f);
      for (int r = 0; r < rn; ++r) {
        const float* src = a + (r0 + r) * taps;
        for (Eigen::Index t = 0; t < taps; ++t) panel[t * kTile + r] = src[t];
      }
    }
    for (int b = 0; b < w.blocks; b += 2) {
      const float* w0 = w.blocked.data() + static_cast<std::size_t>(b) * taps * 8;
      const bool pair = b + 1 < w.blocks;
      const float* w1 = pair ? w0 + taps * 8 : w0;
      const int cn = std::min(pair ? 16 : 8, cout - b * 8);
      const Eigen::Index at = r0 * cout + b * 8;
      const Epilogue ep{w.bias.data() + b * 8, residual ? residual + at : nullptr, relu};
      if (packed) {
        blocked_tile<true>(panel, taps, w0, w1, rn, cn, ep, out + at, cout);
      } else {
        blocked_tile<false>(a + r0 * taps, taps, w0, w1, rn, cn, ep, out + at, cout);
      }
    }
  }
}

// panel is null unless the blocked kernel is used.
void conv_rows(const PlanOp& op, const PackedWeights& w, float* panel, const float* a, Eigen::Index r0,
               Eigen::Index rn, const float* residual, float* out) {
  const Eigen::Index taps = op.geometry.taps();
  const Eigen::Index cout = op.geometry.out_c;
  if (panel) {
    gemm_blocked(a, rn, taps, w, static_cast<int>(cout), residual ? residual + r0 * cout : nullptr, op.relu,
                 out + r0 * cout, panel);
    return;
  }
  Eigen::Map<RowMatrix<float>> o(out + r0 * cout, rn, cout);
  o.noalias() = Eigen::Map<const RowMatrix<float>>(a, rn, taps) * w.matrix;
  o.rowwise() += w.bias.transpose();
  if (residual) o += Eigen::Map<const RowMatrix<float>>(residual + r0 * cout, rn, cout);
  if (op.relu) o = o.cwiseMax(0.0f);
}

// Patches are built one band of output rows at a time so they stay in cache.
void run_conv(const PlanOp& op, const PackedWeights& w, bool blocked, const float* in, const float* residual,
              float* out, ScratchCache& cache) {
  const ConvGeometry& g = op.geometry;
  const Eigen::Index pixels = g.out_pixels();
  const Eigen::Index taps = g.taps();
  cache.begin_op();
  float* panel = blocked ? cache.acquire(static_cast<std::size_t>(kTile * taps), Scratch::Panel) : nullptr;
  if (g.is_pointwise()) {
    for (Eigen::Index r0 = 0; r0 < pixels; r0 += kRowChunk) {
      conv_rows(op, w, panel, in + r0 * taps, r0, std::min(kRowChunk, pixels - r0), residual, out);
    }
    return;
  }
  const int band = static_cast<int>(std::max<Eigen::Index>(1, kRowChunk / g.out_w));
  float* col = cache.acquire(static_cast<std::size_t>(std::min(band, g.out_h) * g.out_w * taps));
  for (int oy = 0; oy < g.out_h; oy += band) {
    const int oy_end = std::min(g.out_h, oy + band);
    im2col(in, g, col, oy, oy_end);
    conv_rows(op, w, panel, col, static_cast<Eigen::Index>(oy) * g.out_w,
              static_cast<Eigen::Index>(oy_end - oy) * g.out_w, residual, out);
  }
}

// Kernel window of one output pixel clipped to the input.
struct Window {
  int y0, x0, ky_lo, ky_hi, kx_lo, kx_hi;
};

Window window_at(const ConvGeometry& g, int oy, int ox) {
  Window w;
  w.y0 = oy * g.stride - g.pad_top;
  w.x0 = ox * g.stride - g.pad_left;
  w.ky_lo = std::max(0, -w.y0);
  w.ky_hi = std::min(g.kernel, g.in_h - w.y0);
  w.kx_lo = std::max(0, -w.x0);
  w.kx_hi = std::min(g.kernel, g.in_w - w.x0);
  return w;
}

template <int L>
using Lanes = Eigen::Array<float, L, 1>;

// P horizontally adjacent output pixels sharing one clipped window.
template <int L, int P>
void depthwise_lanes(const float* in, const ConvGeometry& g, const Window& win, const float* wt, const float* bias,
                     bool relu, int ch, float* dst) {
  const int c = g.in_c;
  Lanes<L> acc[P];
  for (auto& a : acc) a = Eigen::Map<const Lanes<L>>(bias + ch);
  for (int ky = win.ky_lo; ky < win.ky_hi; ++ky) {
    const float* row = in + (static_cast<Eigen::Index>(win.y0 + ky) * g.in_w + win.x0) * c + ch;
    const float* wrow = wt + static_cast<Eigen::Index>(ky) * g.kernel * c + ch;
    for (int kx = win.kx_lo; kx < win.kx_hi; ++kx) {
      const Lanes<L> w = Eigen::Map<const Lanes<L>>(wrow + kx * c);
      for (int p = 0; p < P; ++p) acc[p] += Eigen::Map<const Lanes<L>>(row + (kx + p * g.stride) * c) * w;
    }
  }
  for (int p = 0; p < P; ++p) {
    if (relu) acc[p] = acc[p].max(0.0f);
    Eigen::Map<Lanes<L>>(dst + p * c + ch) = acc[p];
  }
}

template <int P>
void depthwise_pixels(const float* in, const ConvGeometry& g, const Window& win, const PackedWeights& w, bool relu,
                      float* dst) {
  const int c = g.in_c;
  const float* wt = w.matrix.data();
  const float* bias = w.bias.data();
  int ch = 0;
  for (; ch + 16 <= c; ch += 16) depthwise_lanes<16, P>(in, g, win, wt, bias, relu, ch, dst);
  for (; ch + 8 <= c; ch += 8) depthwise_lanes<8, P>(in, g, win, wt, bias, relu, ch, dst);
  for (; ch < c; ++ch) depthwise_lanes<1, P>(in, g, win, wt, bias, relu, ch, dst);
}

void run_depthwise(const PlanOp& op, const PackedWeights& w, const float* in, float* out) {
  constexpr int kRun = 4;
  const ConvGeometry& g = op.geometry;
  const int c = g.in_c;
  for (int oy = 0; oy < g.out_h; ++oy) {
    int ox = 0;
    while (ox < g.out_w) {
      const Window win = window_at(g, oy, ox);
      float* dst = out + (static_cast<Eigen::Index>(oy) * g.out_w + ox) * c;
      const bool run =
          win.kx_lo == 0 && ox + kRun <= g.out_w && win.x0 + (kRun - 1) * g.stride + g.kernel <= g.in_w;
      if (run) {
        depthwise_pixels<kRun>(in, g, win, w, op.relu, dst);
        ox += kRun;
      } else {
        depthwise_pixels<1>(in, g, win, w, op.relu, dst);
        ++ox;
      }
    }
  }
}

template <int L>
void maxpool_lanes(const float* in, const ConvGeometry& g, const Window& win, int ch, float* dst) {
  const int c = g.in_c;
  Lanes<L> best = Lanes<L>::Constant(-std::numeric_limits<float>::infinity());
  for (int ky = win.ky_lo; ky < win.ky_hi; ++ky) {
    const float* row = in + (static_cast<Eigen::Index>(win.y0 + ky) * g.in_w + win.x0) * c + ch;
    for (int kx = win.kx_lo; kx < win.kx_hi; ++kx) best = best.max(Eigen::Map<const Lanes<L>>(row + kx * c));
  }
  Eigen::Map<Lanes<L>>(dst + ch) = best;
}

void run_maxpool(const PlanOp& op, const float* in, float* out) {
  const ConvGeometry& g = op.geometry;
  const int c = g.in_c;
  for (int oy = 0; oy < g.out_h; ++oy) {
    for (int ox = 0; ox < g.out_w; ++ox) {
      const Window win = window_at(g, oy, ox);
      float* dst = out + (static_cast<Eigen::Index>(oy) * g.out_w + ox) * c;
      int ch = 0;
      for (; ch + 16 <= c; ch += 16) maxpool_lanes<16>(in, g, win, ch, dst);
      for (; ch + 8 <= c; ch += 8) maxpool_lanes<8>(in, g, win, ch, dst);
      for (; ch < c; ++ch) maxpool_lanes<1>(in, g, win, ch, dst);
    }
  }
}

void run_op(const ExecutionPlan& plan, const PlanOp& op, Workspace& ws) {
  const PlanValue& out_v = plan.values[op.output];
  float* out = ws.value(plan, op.output);
  const float* in = ws.value(plan, op.input);
  const Eigen::Index n_out = out_v.size();
  switch (op.kind) {
    case OpKind::Conv:
      run_conv(op, plan.weights[op.weights], plan.config.blocked_format, in,
               op.residual >= 0 ? ws.value(plan, op.residual) : nullptr, out, ws.cache);
      break;
    case OpKind::DepthwiseConv:
      run_depthwise(op, plan.weights[op.weights], in, out);
      break;
    case OpKind::MaxPool:
      run_maxpool(op, in, out);
      break;
    case OpKind::GlobalAvgPool: {
      const TensorShape& s = plan.values[op.input].shape;
      Eigen::Map<Eigen::RowVectorXf>(out, s.channels) =
          Eigen::Map<const RowMatrix<float>>(in, static_cast<Eigen::Index>(s.height) * s.width, s.channels)
              .colwise()
              .mean();
      break;
    }
    case OpKind::Add: {
      Eigen::Map<Eigen::ArrayXf> o(out, n_out);
      o = Eigen::Map<const Eigen::ArrayXf>(in, n_out) +
          Eigen::Map<const Eigen::ArrayXf>(ws.value(plan, op.residual), n_out);
      if (op.relu) o = o.max(0.0f);
      break;
    }
    case OpKind::Dense: {
      const PackedWeights& w = plan.weights[op.weights];
      Eigen::Map<Eigen::RowVectorXf> o(out, n_out);
      o.noalias() = Eigen::Map<const Eigen::RowVectorXf>(in, w.matrix.rows()) * w.matrix;
      o += w.bias.transpose();
      if (op.relu) o = o.cwiseMax(0.0f);
      break;
    }
    case OpKind::Softmax: {
      Eigen::Map<Eigen::RowVectorXf> o(out, n_out);
      o = Eigen::Map<const Eigen::RowVectorXf>(in, n_out);
      softmax_rows(o);
      break;
    }
  }
  if (!Eigen::Map<const Eigen::ArrayXf>(out, n_out).allFinite()) {
    throw NumericError(op.id, "non-finite activation");
  }
}

void pin_to_core(const std::vector<int>& cores, int worker) {
  if (cores.empty()) return;
  const int core = cores[static_cast<std::size_t>(worker) % cores.size()];
  if (core >= CPU_SETSIZE) return;
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(core, &set);
  // Best effort: the OS may refuse cores outside the process mask.
  (void)pthread_setaffinity_np(pthread_self(), sizeof(set), &set);
}

RowMatrix<float> execute(const ExecutionPlan& plan, const Tensor<float>& batch, int result_value) {
  if (!(batch.shape() == plan.input_shape)) {
    throw ShapeError("batch spatial shape does not match the plan input");
  }
  const int n = batch.batch;
  const int classes = static_cast<int>(plan.values[result_value].size());
  RowMatrix<float> result(n, classes);
  if (n == 0) return result;
  int last_op = static_cast<int>(plan.ops.size()) - 1;
  while (last_op >= 0 && plan.ops[last_op].output != result_value) --last_op;

  const int workers = std::max(1, std::min(plan.config.num_threads, n));
  std::vector<int> cores;
  if (!plan.config.cpu_affinity.empty()) {
    try {
      cores = parse_core_list(plan.config.cpu_affinity);
    } catch (const ConfigError&) {
      cores.clear();
    }
  }
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](int w) {
    try {
      if (workers > 1) pin_to_core(cores, w);
      auto ws = plan.pool->acquire(plan);
      const int begin = static_cast<int>(static_cast<std::int64_t>(n) * w / workers);
      const int end = static_cast<int>(static_cast<std::int64_t>(n) * (w + 1) / workers);
      const Eigen::Index in_size = plan.values[0].size();
      for (int s = begin; s < end; ++s) {
        std::copy(batch.sample(s), batch.sample(s) + in_size, ws->value(plan, 0));
        for (int t = 0; t <= last_op; ++t) {
          run_op(plan, plan.ops[t], *ws);
          if (plan.config.instrumented) {
            for (std::size_t v = 0; v < plan.values.size(); ++v) {
              if (plan.values[v].last_use == t && static_cast<int>(v) != result_value) {
                float* p = ws->value(plan, static_cast<int>(v));
                std::fill(p, p + plan.values[v].size(), std::numeric_limits<float>::quiet_NaN());
              }
            }
          }
        }
        const float* r = ws->value(plan, result_value);
        result.row(s) = Eigen::Map<const Eigen::RowVectorXf>(r, classes);
      }
      plan.pool->release(std::move(ws));
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(work, w);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return result;
}

}  // namespace

bool ExecutionPlan::arena_is_safe() const {
  if (!config.mempool_enable) return true;
  for (std::size_t a = 0; a < values.size(); ++a) {
    for (std::size_t b = a + 1; b < values.size(); ++b) {
      const auto& va = values[a];
      const auto& vb = values[b];
      const bool live_together = va.producer <= vb.last_use && vb.producer <= va.last_use;
      const bool overlap = va.offset < vb.offset + vb.size() && vb.offset < va.offset + va.size();
      if (live_together && overlap) return false;
      if (va.offset < 0 || va.offset + va.size() > arena_floats) return false;
    }
  }
  return true;
}

ExecutionPlan build_plan(const ArchGraph& graph, const ModelParams<float>& params, const RuntimeConfig& cfg) {
  if (!graph.shapes_resolved()) throw ShapeError("build_plan requires a shape-inferred graph");
  check_params_match(graph, params);
  check_finite(graph, params);
  if (cfg.num_threads < 1) throw ConfigError(0, "num_threads must be >= 1");
  if (cfg.primitive_cache_capacity < 0 || cfg.tensor_pool_limit < 0) {
    throw ConfigError(0, "cache capacity and pool limit must be >= 0");
  }

  const int n = static_cast<int>(graph.nodes.size());
  const auto consumers = graph.consumers();

  // conv + add fusion decisions.
  std::vector<int> fused_add(n, -1);
  std::vector<bool> absorbed(n, false);
  for (int a = 1; a < n; ++a) {
    if (!std::holds_alternative<AddLayer>(graph.nodes[a].kind)) continue;
    auto preds = graph.inputs_of(a);
    if (preds[0] == preds[1]) continue;
    std::sort(preds.begin(), preds.end(), std::greater<>());
    for (int k = 0; k < 2; ++k) {
      const int c = preds[k];
      const int other = preds[1 - k];
      const auto* conv = std::get_if<ConvLayer>(&graph.nodes[c].kind);
      if (!conv || conv->activation != Activation::None) continue;
      if (consumers[c].size() != 1 || other > c) continue;
      if (cfg.conv_add_fusion_safe && consumers[other].size() != 1) continue;
      fused_add[c] = a;
      absorbed[a] = true;
      break;
    }
  }

  ExecutionPlan plan;
  plan.config = cfg;
  plan.input_shape = graph.input_shape;
  std::vector<int> node_value(n, -1);
  auto new_value = [&](int node, int producer) {
    PlanValue v;
    v.shape = graph.resolved_shapes[node];
    v.producer = producer;
    v.last_use = producer;
    v.node_id = graph.nodes[node].id;
    plan.values.push_back(v);
    node_value[node] = static_cast<int>(plan.values.size()) - 1;
    return node_value[node];
  };
  new_value(0, -1);

  for (int i = 1; i < n; ++i) {
    if (absorbed[i]) continue;
    const auto& node = graph.nodes[i];
    const auto preds = graph.inputs_of(i);
    const int t = static_cast<int>(plan.ops.size());
    PlanOp op;
    op.id = node.id;
    op.input = node_value[preds[0]];
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            op.kind = OpKind::Conv;
            op.geometry = node_geometry(graph, i);
            op.relu = layer.activation == Activation::Relu;
            plan.weights.push_back(fold_weights(params.layers[i], layer.out_channels, cfg.blocked_format));
            op.weights = static_cast<int>(plan.weights.size()) - 1;
            if (fused_add[i] >= 0) {
              const int a = fused_add[i];
              const auto add_preds = graph.inputs_of(a);
              const int other = add_preds[0] == i ? add_preds[1] : add_preds[0];
              op.residual = node_value[other];
              op.relu = std::get<AddLayer>(graph.nodes[a].kind).activation == Activation::Relu;
              op.id = node.id + "+" + graph.nodes[a].id;
              op.output = new_value(a, t);
            }
          } else if constexpr (std::is_same_v<T, DepthwiseConvLayer>) {
            op.kind = OpKind::DepthwiseConv;
            op.geometry = node_geometry(graph, i);
            op.relu = layer.activation == Activation::Relu;
            plan.weights.push_back(fold_weights(params.layers[i], op.geometry.in_c, false));
            op.weights = static_cast<int>(plan.weights.size()) - 1;
          } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
            op.kind = OpKind::MaxPool;
            op.geometry = node_geometry(graph, i);
          } else if constexpr (std::is_same_v<T, GlobalAvgPoolLayer>) {
            op.kind = OpKind::GlobalAvgPool;
          } else if constexpr (std::is_same_v<T, AddLayer>) {
            op.kind = OpKind::Add;
            op.residual = node_value[preds[1]];
            op.relu = layer.activation == Activation::Relu;
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            op.kind = OpKind::Dense;
            op.relu = layer.activation == Activation::Relu;
            plan.weights.push_back(fold_weights(params.layers[i], layer.units, false));
            op.weights = static_cast<int>(plan.weights.size()) - 1;
          } else if constexpr (std::is_same_v<T, SoftmaxLayer>) {
            op.kind = OpKind::Softmax;
          } else {
            throw ShapeError("input node must come first");
          }
        },
        node.kind);
    if (op.output < 0) op.output = new_value(i, t);
    for (int v : {op.input, op.residual}) {
      if (v >= 0) plan.values[v].last_use = std::max(plan.values[v].last_use, t);
    }
    if (op.kind == OpKind::Conv && !op.geometry.is_pointwise()) {
      plan.max_scratch_floats = std::max(plan.max_scratch_floats, op.geometry.out_pixels() * op.geometry.taps());
    }
    plan.ops.push_back(op);
  }
  plan.output_value = plan.ops.empty() ? 0 : plan.ops.back().output;
  plan.logits_value = plan.output_value;
  if (!plan.ops.empty() && plan.ops.back().kind == OpKind::Softmax) plan.logits_value = plan.ops.back().input;
  plan.values[plan.output_value].last_use = static_cast<int>(plan.ops.size());

  // First-fit arena layout over live intervals.
  struct Block {
    std::int64_t offset, size;
    int last_use;
  };
  std::vector<Block> active;
  for (auto& v : plan.values) {
    const int t = v.producer;
    std::erase_if(active, [&](const Block& b) { return b.last_use < t; });
    std::sort(active.begin(), active.end(), [](const Block& a, const Block& b) { return a.offset < b.offset; });
    const std::int64_t need = align_up(v.size());
    std::int64_t cursor = 0;
    for (const auto& b : active) {
      if (b.offset - cursor >= need) break;
      cursor = std::max(cursor, b.offset + b.size);
    }
    v.offset = cursor;
    active.push_back({cursor, need, v.last_use});
    plan.arena_floats = std::max(plan.arena_floats, cursor + need);
  }

  plan.pool = std::make_shared<WorkspacePool>();
  plan.pool->limit = static_cast<std::size_t>(cfg.tensor_pool_limit) * static_cast<std::size_t>(cfg.num_threads);
  return plan;
}

RowMatrix<float> infer(const ExecutionPlan& plan, const Tensor<float>& batch) {
  return execute(plan, batch, plan.output_value);
}

RowMatrix<float> infer_logits(const ExecutionPlan& plan, const Tensor<float>& batch) {
  return execute(plan, batch, plan.logits_value);
}

BenchReport summarize_latencies(int batch_size, int warmup, std::vector<double> latencies) {
  BenchReport r;
  r.batch_size = batch_size;
  r.warmup_iters = warmup;
  r.timed_iters = static_cast<int>(latencies.size());
  r.latencies = latencies;
  if (latencies.empty()) return r;
  std::vector<double> sorted = latencies;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  r.median_seconds = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  r.mean_seconds = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(m);
  double var = 0;
  for (double x : sorted) var += (x - r.mean_seconds) * (x - r.mean_seconds);
  r.std_seconds = std::sqrt(var / static_cast<double>(m));
  r.per_image_seconds = r.median_seconds / batch_size;
  r.throughput = batch_size / r.median_seconds;
  return r;
}

BenchReport bench(const ExecutionPlan& plan, int batch_size, int warmup, int iters, std::uint64_t seed) {
  if (iters < 3) throw ConfigError(0, "bench needs at least 3 timed iterations");
  if (batch_size < 1) throw ConfigError(0, "bench needs batch_size >= 1");
  Tensor<float> input(batch_size, plan.input_shape);
  Rng rng(seed);
  for (Eigen::Index k = 0; k < input.data.size(); ++k) input.data[k] = static_cast<float>(rng.uniform());
  for (int w = 0; w < warmup; ++w) (void)infer(plan, input);
  std::vector<double> latencies;
  for (int it = 0; it < iters; ++it) {
    const auto start = std::chrono::steady_clock::now();
    (void)infer(plan, input);
    const auto stop = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(stop - start).count();
    latencies.push_back(std::max(s, 1e-9));
  }
  return summarize_latencies(batch_size, warmup, std::move(latencies));
}

double speedup(const BenchReport& a, const BenchReport& b) {
  if (a.latencies.empty() || b.latencies.empty()) throw NumericError("speedup", "empty bench report");
  if (!(a.per_image_seconds > 0) || !(b.per_image_seconds > 0)) throw NumericError("speedup", "zero latency");
  return a.per_image_seconds / b.per_image_seconds;
}

nlohmann::json to_json(const BenchReport& r) {
  return {{"batch_size", r.batch_size},
          {"warmup_iters", r.warmup_iters},
          {"timed_iters", r.timed_iters},
          {"latencies", r.latencies},
          {"median_seconds", r.median_seconds},
          {"mean_seconds", r.mean_seconds},
          {"std_seconds", r.std_seconds},
          {"per_image_seconds", r.per_image_seconds},
          {"throughput", r.throughput}};
}

nlohmann::json to_json(const RuntimeConfig& c) {
  return {{"primitive_cache_capacity", c.primitive_cache_capacity},
          {"blocked_format", c.blocked_format},
          {"mempool_enable", c.mempool_enable},
          {"tensor_pool_limit", c.tensor_pool_limit},
          {"conv_add_fusion_safe", c.conv_add_fusion_safe},
          {"num_threads", c.num_threads},
          {"cpu_affinity", c.cpu_affinity}};
}

}  // namespace tdn

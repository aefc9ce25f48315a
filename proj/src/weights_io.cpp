#include "tdn/weights_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "tdn/error.hpp"

namespace tdn {

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
    }
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("TDNW: truncated file");
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

template <typename Matrix>
NamedTensor make_tensor(std::string name, std::vector<std::uint32_t> dims, const Matrix& m) {
  NamedTensor t{std::move(name), std::move(dims), {}};
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

}  // namespace

std::vector<std::uint8_t> encode_tdnw(const std::vector<NamedTensor>& tensors) {
  Writer w;
  for (char c : std::string("TDNW")) w.put(static_cast<std::uint8_t>(c));
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw IoError("TDNW: tensor name too long");
    if (t.dims.size() > 0xff) throw IoError("TDNW: rank too large");
    std::uint64_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.values.size()) throw IoError("TDNW: " + t.name + " dims do not match payload");
    w.put(static_cast<std::uint16_t>(t.name.size()));
    for (char c : t.name) w.put(static_cast<std::uint8_t>(c));
    w.put(std::uint8_t{0});
    w.put(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put(d);
    for (float v : t.values) w.put_f32(v);
  }
  return std::move(w.bytes);
}

std::vector<NamedTensor> decode_tdnw(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.get_string(4) != "TDNW") throw IoError("TDNW: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw IoError("TDNW: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.get_string(r.get<std::uint16_t>());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 0) throw IoError("TDNW: " + t.name + " has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>();
    std::uint64_t elems = 1;
    for (int d = 0; d < rank; ++d) {
      t.dims.push_back(r.get<std::uint32_t>());
      elems *= t.dims.back();
      if (elems > (std::uint64_t{1} << 34)) throw IoError("TDNW: " + t.name + " is implausibly large");
    }
    r.need(elems * 4);
    t.values.resize(elems);
    for (auto& v : t.values) v = r.get_f32();
    out.push_back(std::move(t));
  }
  if (!r.done()) throw IoError("TDNW: trailing bytes after last tensor");
  return out;
}

std::vector<NamedTensor> to_named_tensors(const ArchGraph& graph, const ModelParams<float>& params) {
  check_params_match(graph, params);
  std::vector<NamedTensor> out;
  for (int i = 0; i < static_cast<int>(graph.nodes.size()); ++i) {
    const auto& node = graph.nodes[i];
    const auto& p = params.layers[i];
    if (p.weight.size()) {
      std::vector<std::uint32_t> dims;
      const auto in = graph.resolved_shapes[graph.inputs_of(i)[0]];
      if (const auto* c = std::get_if<ConvLayer>(&node.kind)) {
        dims = {std::uint32_t(c->kernel), std::uint32_t(c->kernel), std::uint32_t(in.channels),
                std::uint32_t(c->out_channels)};
      } else if (const auto* d = std::get_if<DepthwiseConvLayer>(&node.kind)) {
        dims = {std::uint32_t(d->kernel), std::uint32_t(d->kernel), std::uint32_t(in.channels)};
      } else {
        dims = {std::uint32_t(p.weight.rows()), std::uint32_t(p.weight.cols())};
      }
      out.push_back(make_tensor(node.id + ".weight", dims, p.weight));
    }
    auto vec = [&](const char* suffix, const Vector<float>& v) {
      if (v.size()) out.push_back(make_tensor(node.id + suffix, {std::uint32_t(v.size())}, v));
    };
    vec(".bias", p.bias);
    vec(".bn_scale", p.bn_scale);
    vec(".bn_shift", p.bn_shift);
    vec(".bn_mean", p.bn_mean);
    vec(".bn_var", p.bn_var);
  }
  return out;
}

ModelParams<float> from_named_tensors(const ArchGraph& graph, const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) throw IoError("TDNW: duplicate tensor " + t.name);
  }
  ModelParams<float> params;
  std::size_t used = 0;
  for (int i = 0; i < static_cast<int>(graph.nodes.size()); ++i) {
    auto p = zero_layer_params<float>(graph, i);
    const std::string& id = graph.nodes[i].id;
    auto fill = [&](const std::string& suffix, float* data, Eigen::Index size) {
      if (size == 0) return;
      auto it = by_name.find(id + suffix);
      if (it == by_name.end()) throw ShapeError("weights file is missing " + id + suffix);
      if (static_cast<Eigen::Index>(it->second->values.size()) != size) {
        throw ShapeError(id + suffix + ": expected " + std::to_string(size) + " values, found " +
                         std::to_string(it->second->values.size()));
      }
      for (float v : it->second->values) {
        if (!std::isfinite(v)) throw NumericError(id, "non-finite value in " + id + suffix);
      }
      std::memcpy(data, it->second->values.data(), sizeof(float) * size);
      ++used;
    };
    fill(".weight", p.weight.data(), p.weight.size());
    fill(".bias", p.bias.data(), p.bias.size());
    fill(".bn_scale", p.bn_scale.data(), p.bn_scale.size());
    fill(".bn_shift", p.bn_shift.data(), p.bn_shift.size());
    fill(".bn_mean", p.bn_mean.data(), p.bn_mean.size());
    fill(".bn_var", p.bn_var.data(), p.bn_var.size());
    params.layers.push_back(std::move(p));
  }
  if (used != tensors.size()) throw ShapeError("weights file holds tensors the graph does not use");
  return params;
}

void save_weights(const std::string& path, const ArchGraph& graph, const ModelParams<float>& params) {
  const auto bytes = encode_tdnw(to_named_tensors(graph, params));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write weights file '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

ModelParams<float> load_weights(const std::string& path, const ArchGraph& graph) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_named_tensors(graph, decode_tdnw(bytes));
}

}  // namespace tdn

#include "tdn/archdsl.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <unordered_map>

#include "tdn/error.hpp"

namespace tdn {

namespace {

constexpr int kMaxExtent = 1 << 16;

struct Token {
  std::string_view text;
  int column;
};

std::vector<Token> tokenize(std::string_view line) {
  std::vector<Token> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    if (i >= line.size()) break;
    std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    tokens.push_back({line.substr(start, i - start), static_cast<int>(start) + 1});
  }
  return tokens;
}

bool valid_identifier(std::string_view id) {
  if (id.empty() || id.size() > 128) return false;
  for (char c : id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '_' || c == '-' || c == '.';
    if (!ok) return false;
  }
  return true;
}

class LineParser {
 public:
  LineParser(int line_no, std::vector<Token> tokens) : line_(line_no), tokens_(std::move(tokens)) {}

  [[noreturn]] void fail(int column, const std::string& what) const {
    throw ParseError(line_, column, what);
  }

  int parse_int(const Token& tok, std::string_view value, int value_column, int lo, int hi) const {
    int out = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
      fail(value_column, "expected integer, got '" + std::string(value) + "'");
    }
    if (out < lo || out > hi) {
      fail(value_column, "value " + std::string(value) + " out of range [" + std::to_string(lo) +
                             ", " + std::to_string(hi) + "] in '" + std::string(tok.text) + "'");
    }
    return out;
  }

  // key=value attributes after the positional tokens.
  void collect_attributes(std::size_t first, const std::set<std::string_view>& allowed) {
    for (std::size_t i = first; i < tokens_.size(); ++i) {
      const Token& tok = tokens_[i];
      auto eq = tok.text.find('=');
      if (eq == std::string_view::npos || eq == 0) {
        fail(tok.column, "expected key=value attribute, got '" + std::string(tok.text) + "'");
      }
      std::string_view key = tok.text.substr(0, eq);
      if (!allowed.contains(key)) {
        fail(tok.column, "unknown attribute '" + std::string(key) + "'");
      }
      if (attrs_.contains(key)) {
        fail(tok.column, "duplicate attribute '" + std::string(key) + "'");
      }
      attrs_[key] = {tok, tok.text.substr(eq + 1), tok.column + static_cast<int>(eq) + 1};
    }
  }

  std::optional<int> int_attr(std::string_view key, int lo, int hi) const {
    auto it = attrs_.find(key);
    if (it == attrs_.end()) return std::nullopt;
    return parse_int(it->second.token, it->second.value, it->second.column, lo, hi);
  }

  int required_int(std::string_view key, int lo, int hi) const {
    auto v = int_attr(key, lo, hi);
    if (!v) fail(tokens_[0].column, "missing required attribute '" + std::string(key) + "'");
    return *v;
  }

  std::optional<bool> flag_attr(std::string_view key) const {
    auto v = int_attr(key, 0, 1);
    if (!v) return std::nullopt;
    return *v == 1;
  }

  std::optional<Activation> act_attr() const {
    auto it = attrs_.find("act");
    if (it == attrs_.end()) return std::nullopt;
    if (it->second.value == "none") return Activation::None;
    if (it->second.value == "relu") return Activation::Relu;
    fail(it->second.column, "act must be none or relu");
  }

  std::optional<Padding> pad_attr() const {
    auto it = attrs_.find("pad");
    if (it == attrs_.end()) return std::nullopt;
    if (it->second.value == "same") return Padding::Same;
    if (it->second.value == "valid") return Padding::Valid;
    fail(it->second.column, "pad must be same or valid");
  }

  int kernel_attr(int fallback) const {
    auto v = int_attr("k", 1, 7);
    int k = v.value_or(fallback);
    if (k % 2 == 0) fail(attrs_.at("k").column, "kernel must be one of 1, 3, 5, 7");
    return k;
  }

  int stride_attr() const { return int_attr("s", 1, 2).value_or(1); }

  // from= value split on ','. Empty when absent.
  std::vector<std::pair<std::string, int>> from_attr() const {
    std::vector<std::pair<std::string, int>> out;
    auto it = attrs_.find("from");
    if (it == attrs_.end()) return out;
    std::string_view rest = it->second.value;
    int column = it->second.column;
    while (true) {
      auto comma = rest.find(',');
      std::string_view part = rest.substr(0, comma);
      if (!valid_identifier(part)) fail(column, "invalid node id '" + std::string(part) + "'");
      out.emplace_back(std::string(part), column);
      if (comma == std::string_view::npos) break;
      column += static_cast<int>(comma) + 1;
      rest = rest.substr(comma + 1);
    }
    return out;
  }

  const std::vector<Token>& tokens() const { return tokens_; }
  int line() const { return line_; }

 private:
  struct Attr {
    Token token;
    std::string_view value;
    int column;
  };
  int line_;
  std::vector<Token> tokens_;
  std::map<std::string_view, Attr> attrs_;
};

std::string_view act_name(Activation a) { return a == Activation::Relu ? "relu" : "none"; }
std::string_view pad_name(Padding p) { return p == Padding::Same ? "same" : "valid"; }

}  // namespace

int ArchGraph::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id == id) return static_cast<int>(i);
  }
  return -1;
}

std::vector<int> ArchGraph::inputs_of(int i) const {
  std::vector<int> out;
  out.reserve(nodes[i].predecessors.size());
  for (const auto& p : nodes[i].predecessors) out.push_back(index_of(p));
  return out;
}

std::vector<std::vector<int>> ArchGraph::consumers() const {
  std::unordered_map<std::string_view, int> index;
  for (std::size_t i = 0; i < nodes.size(); ++i) index[nodes[i].id] = static_cast<int>(i);
  std::vector<std::vector<int>> out(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& p : nodes[i].predecessors) out[index.at(p)].push_back(static_cast<int>(i));
  }
  return out;
}

bool same_structure(const ArchGraph& a, const ArchGraph& b) {
  return a.input_shape == b.input_shape && a.nodes == b.nodes;
}

std::string_view kind_name(const LayerKind& kind) {
  struct Visitor {
    std::string_view operator()(const InputLayer&) const { return "input"; }
    std::string_view operator()(const ConvLayer&) const { return "conv"; }
    std::string_view operator()(const DepthwiseConvLayer&) const { return "dwconv"; }
    std::string_view operator()(const MaxPoolLayer&) const { return "maxpool"; }
    std::string_view operator()(const GlobalAvgPoolLayer&) const { return "gap"; }
    std::string_view operator()(const AddLayer&) const { return "add"; }
    std::string_view operator()(const DenseLayer&) const { return "dense"; }
    std::string_view operator()(const SoftmaxLayer&) const { return "softmax"; }
  };
  return std::visit(Visitor{}, kind);
}

ArchGraph parse_arch(std::string_view text) {
  ArchGraph graph;
  std::unordered_map<std::string, int> ids;
  std::vector<int> decl_line;
  int line_no = 0;
  int last_line = 0;

  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = (nl == std::string_view::npos) ? text.size() + 1 : nl + 1;
    ++line_no;
    last_line = line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);

    LineParser p(line_no, tokenize(line));
    const auto& tok = p.tokens();
    if (tok.empty()) continue;
    const std::string_view keyword = tok[0].text;

    if (keyword == "input") {
      if (!graph.nodes.empty()) {
        p.fail(tok[0].column, graph.index_of("input") >= 0 ? "duplicate input declaration"
                                                            : "input must be the first node");
      }
      if (tok.size() != 4) p.fail(tok[0].column, "input expects H W C");
      TensorShape s;
      s.height = p.parse_int(tok[1], tok[1].text, tok[1].column, 1, kMaxExtent);
      s.width = p.parse_int(tok[2], tok[2].text, tok[2].column, 1, kMaxExtent);
      s.channels = p.parse_int(tok[3], tok[3].text, tok[3].column, 1, kMaxExtent);
      graph.input_shape = s;
      graph.nodes.push_back({"input", InputLayer{s}, {}});
      ids.emplace("input", 0);
      decl_line.push_back(line_no);
      continue;
    }

    static const std::set<std::string_view> known = {"conv", "dwconv", "maxpool", "gap",
                                                     "add",  "dense",  "softmax"};
    if (!known.contains(keyword)) {
      p.fail(tok[0].column, "unknown layer kind '" + std::string(keyword) + "'");
    }
    if (graph.nodes.empty()) p.fail(tok[0].column, "missing input: the first node must be 'input H W C'");
    if (tok.size() < 2) p.fail(tok[0].column, "missing node id");
    const Token& id_tok = tok[1];
    if (id_tok.text.find('=') != std::string_view::npos || !valid_identifier(id_tok.text)) {
      p.fail(id_tok.column, "invalid node id '" + std::string(id_tok.text) + "'");
    }
    std::string id(id_tok.text);
    if (ids.contains(id)) p.fail(id_tok.column, "duplicate id '" + id + "'");

    LayerSpec spec;
    spec.id = id;
    if (keyword == "conv") {
      p.collect_attributes(2, {"k", "s", "f", "pad", "bn", "act", "bias", "from"});
      ConvLayer c;
      c.out_channels = p.required_int("f", 1, kMaxExtent);
      c.kernel = p.kernel_attr(3);
      c.stride = p.stride_attr();
      c.padding = p.pad_attr().value_or(Padding::Same);
      c.batch_norm = p.flag_attr("bn").value_or(false);
      c.has_bias = p.flag_attr("bias").value_or(!c.batch_norm);
      c.activation = p.act_attr().value_or(Activation::Relu);
      spec.kind = c;
    } else if (keyword == "dwconv") {
      p.collect_attributes(2, {"k", "s", "pad", "bn", "act", "bias", "from"});
      DepthwiseConvLayer c;
      c.kernel = p.kernel_attr(3);
      c.stride = p.stride_attr();
      c.padding = p.pad_attr().value_or(Padding::Same);
      c.batch_norm = p.flag_attr("bn").value_or(false);
      c.has_bias = p.flag_attr("bias").value_or(!c.batch_norm);
      c.activation = p.act_attr().value_or(Activation::Relu);
      spec.kind = c;
    } else if (keyword == "maxpool") {
      p.collect_attributes(2, {"k", "s", "from"});
      MaxPoolLayer m;
      m.kernel = p.int_attr("k", 1, 16).value_or(2);
      m.stride = p.int_attr("s", 1, 16).value_or(m.kernel);
      spec.kind = m;
    } else if (keyword == "gap") {
      p.collect_attributes(2, {"from"});
      spec.kind = GlobalAvgPoolLayer{};
    } else if (keyword == "add") {
      p.collect_attributes(2, {"from", "act"});
      spec.kind = AddLayer{p.act_attr().value_or(Activation::None)};
    } else if (keyword == "dense") {
      p.collect_attributes(2, {"units", "act", "from"});
      DenseLayer d;
      d.units = p.required_int("units", 1, kMaxExtent);
      d.activation = p.act_attr().value_or(Activation::None);
      spec.kind = d;
    } else {
      p.collect_attributes(2, {"from"});
      spec.kind = SoftmaxLayer{};
    }

    auto from = p.from_attr();
    const bool is_add = keyword == "add";
    if (is_add) {
      if (from.size() != 2) p.fail(id_tok.column, "add requires from=ID,ID");
    } else if (from.size() > 1) {
      p.fail(from[1].second, "'" + std::string(keyword) + "' takes a single predecessor");
    }
    if (from.empty()) {
      spec.predecessors.push_back(graph.nodes.back().id);
    } else {
      for (const auto& [ref, column] : from) {
        if (!ids.contains(ref)) p.fail(column, "reference to undeclared id '" + ref + "'");
        spec.predecessors.push_back(ref);
      }
    }
    for (const auto& ref : spec.predecessors) {
      if (std::holds_alternative<SoftmaxLayer>(graph.nodes[ids.at(ref)].kind)) {
        p.fail(id_tok.column, "softmax '" + ref + "' must be terminal");
      }
    }
    ids.emplace(id, static_cast<int>(graph.nodes.size()));
    graph.nodes.push_back(std::move(spec));
    decl_line.push_back(line_no);
  }

  if (graph.nodes.empty()) throw ParseError(last_line, 0, "missing input declaration");

  // Every node but the last must feed something.
  auto consumers = graph.consumers();
  for (std::size_t i = 0; i + 1 < graph.nodes.size(); ++i) {
    if (consumers[i].empty()) {
      throw ParseError(decl_line[i], 0, "node '" + graph.nodes[i].id + "' is never used");
    }
  }
  return graph;
}

int conv_output_extent(int in, int kernel, int stride, Padding padding) {
  if (padding == Padding::Same) return (in + stride - 1) / stride;
  return in >= kernel ? (in - kernel) / stride + 1 : 0;
}

int conv_padding_before(int in, int out, int kernel, int stride, Padding padding) {
  if (padding == Padding::Valid) return 0;
  const int total = std::max((out - 1) * stride + kernel - in, 0);
  return total / 2;
}

ArchGraph infer_shapes(ArchGraph graph) {
  if (graph.nodes.empty()) throw ShapeError("empty graph");
  std::vector<TensorShape> shapes(graph.nodes.size());
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const LayerSpec& node = graph.nodes[i];
    std::vector<TensorShape> in;
    for (int p : graph.inputs_of(static_cast<int>(i))) {
      if (p < 0 || p >= static_cast<int>(i)) {
        throw ShapeError(node.id + ": predecessor not declared before use");
      }
      in.push_back(shapes[p]);
    }
    auto spatial = [&](int kernel, int stride, Padding pad, int channels) {
      TensorShape out;
      out.height = conv_output_extent(in[0].height, kernel, stride, pad);
      out.width = conv_output_extent(in[0].width, kernel, stride, pad);
      out.channels = channels;
      if (out.height < 1 || out.width < 1) {
        throw ShapeError(node.id + ": kernel " + std::to_string(kernel) + " larger than input " +
                         std::to_string(in[0].height) + "x" + std::to_string(in[0].width));
      }
      return out;
    };
    auto require_vector = [&](const char* what) {
      if (in[0].height != 1 || in[0].width != 1) {
        throw ShapeError(node.id + ": " + what + " applied to spatial tensor " +
                         std::to_string(in[0].height) + "x" + std::to_string(in[0].width) + "x" +
                         std::to_string(in[0].channels));
      }
    };
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, InputLayer>) {
            if (i != 0) throw ShapeError("input must be the first node");
            shapes[i] = layer.shape;
          } else if constexpr (std::is_same_v<T, ConvLayer>) {
            shapes[i] = spatial(layer.kernel, layer.stride, layer.padding, layer.out_channels);
          } else if constexpr (std::is_same_v<T, DepthwiseConvLayer>) {
            shapes[i] = spatial(layer.kernel, layer.stride, layer.padding, in[0].channels);
          } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
            shapes[i] = spatial(layer.kernel, layer.stride, Padding::Valid, in[0].channels);
          } else if constexpr (std::is_same_v<T, GlobalAvgPoolLayer>) {
            shapes[i] = {1, 1, in[0].channels};
          } else if constexpr (std::is_same_v<T, AddLayer>) {
            if (!(in[0] == in[1])) {
              throw ShapeError(node.id + ": add shape mismatch " + std::to_string(in[0].height) +
                               "x" + std::to_string(in[0].width) + "x" +
                               std::to_string(in[0].channels) + " vs " +
                               std::to_string(in[1].height) + "x" + std::to_string(in[1].width) +
                               "x" + std::to_string(in[1].channels));
            }
            shapes[i] = in[0];
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            require_vector("dense");
            shapes[i] = {1, 1, layer.units};
          } else {
            require_vector("softmax");
            shapes[i] = in[0];
          }
        },
        node.kind);
  }
  graph.resolved_shapes = std::move(shapes);
  return graph;
}

std::string serialize_arch(const ArchGraph& graph) {
  std::ostringstream out;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const LayerSpec& node = graph.nodes[i];
    auto from = [&]() -> std::string {
      if (node.predecessors.size() == 1 && i > 0 && node.predecessors[0] == graph.nodes[i - 1].id) {
        return "";
      }
      std::string s = " from=";
      for (std::size_t k = 0; k < node.predecessors.size(); ++k) {
        if (k) s += ",";
        s += node.predecessors[k];
      }
      return s;
    };
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, InputLayer>) {
            out << "input " << layer.shape.height << " " << layer.shape.width << " "
                << layer.shape.channels;
          } else if constexpr (std::is_same_v<T, ConvLayer>) {
            out << "conv " << node.id << " k=" << layer.kernel << " s=" << layer.stride
                << " f=" << layer.out_channels << " pad=" << pad_name(layer.padding)
                << " bn=" << layer.batch_norm << " act=" << act_name(layer.activation);
            if (layer.has_bias == layer.batch_norm) out << " bias=" << layer.has_bias;
            out << from();
          } else if constexpr (std::is_same_v<T, DepthwiseConvLayer>) {
            out << "dwconv " << node.id << " k=" << layer.kernel << " s=" << layer.stride
                << " pad=" << pad_name(layer.padding) << " bn=" << layer.batch_norm
                << " act=" << act_name(layer.activation);
            if (layer.has_bias == layer.batch_norm) out << " bias=" << layer.has_bias;
            out << from();
          } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
            out << "maxpool " << node.id << " k=" << layer.kernel << " s=" << layer.stride << from();
          } else if constexpr (std::is_same_v<T, GlobalAvgPoolLayer>) {
            out << "gap " << node.id << from();
          } else if constexpr (std::is_same_v<T, AddLayer>) {
            out << "add " << node.id << " from=" << node.predecessors.at(0) << ","
                << node.predecessors.at(1);
            if (layer.activation == Activation::Relu) out << " act=relu";
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            out << "dense " << node.id << " units=" << layer.units
                << " act=" << act_name(layer.activation) << from();
          } else {
            out << "softmax " << node.id << from();
          }
        },
        node.kind);
    out << "\n";
  }
  return out.str();
}

ArchGraph load_arch(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open architecture file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return infer_shapes(parse_arch(buffer.str()));
}

void save_arch(const ArchGraph& graph, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write architecture file '" + path + "'");
  out << serialize_arch(graph);
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace tdn

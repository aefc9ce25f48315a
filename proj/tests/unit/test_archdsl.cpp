#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "support.hpp"
#include "tdn/archdsl.hpp"
#include "tdn/error.hpp"
#include "tdn/rng.hpp"
#include "tdn/zoo.hpp"

using namespace tdn;

namespace {

const char* kMinimal = "input 8 8 1\ngap g1\ndense d1 units=6\nsoftmax s1\n";

int parse_error_line(const std::string& text) {
  try {
    parse_arch(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  return -1;
}

}  // namespace

TEST(Parse, MinimalProgram) {
  const ArchGraph g = parse_arch(kMinimal);
  ASSERT_EQ(g.nodes.size(), 4u);
  EXPECT_TRUE(std::holds_alternative<InputLayer>(g.nodes[0].kind));
  EXPECT_TRUE(std::holds_alternative<GlobalAvgPoolLayer>(g.nodes[1].kind));
  const auto& d = std::get<DenseLayer>(g.nodes[2].kind);
  EXPECT_EQ(d.units, 6);
  EXPECT_EQ(d.activation, Activation::None);
  EXPECT_TRUE(std::holds_alternative<SoftmaxLayer>(g.nodes[3].kind));
  EXPECT_EQ(g.nodes[2].predecessors, std::vector<std::string>{"g1"});
  EXPECT_EQ(g.input_shape, (TensorShape{8, 8, 1}));
  EXPECT_FALSE(g.shapes_resolved());
}

TEST(Parse, ResidualSnippetPredecessors) {
  const ArchGraph g = parse_arch(
      "input 8 8 4\n"
      "conv c1 k=3 s=1 f=4 pad=same bn=0 act=relu\n"
      "conv c2 k=3 s=1 f=4 pad=same bn=0 act=none from=c1\n"
      "add a1 from=input,c2\n"
      "gap g\n");
  const int a = g.index_of("a1");
  ASSERT_GE(a, 0);
  EXPECT_EQ(g.nodes[a].predecessors, (std::vector<std::string>{"input", "c2"}));
  EXPECT_EQ(g.inputs_of(a), (std::vector<int>{0, 2}));
}

TEST(Parse, DefaultsFollowBatchNorm) {
  const ArchGraph g = parse_arch("input 8 8 1\nconv c1 f=8\nconv c2 f=8 bn=1\ngap g\ndense d units=2\n");
  const auto& c1 = std::get<ConvLayer>(g.nodes[1].kind);
  EXPECT_EQ(c1.kernel, 3);
  EXPECT_EQ(c1.stride, 1);
  EXPECT_EQ(c1.padding, Padding::Same);
  EXPECT_TRUE(c1.has_bias);
  EXPECT_EQ(c1.activation, Activation::Relu);
  const auto& c2 = std::get<ConvLayer>(g.nodes[2].kind);
  EXPECT_TRUE(c2.batch_norm);
  EXPECT_FALSE(c2.has_bias);
  EXPECT_EQ(std::get<DenseLayer>(g.nodes[4].kind).activation, Activation::None);
}

TEST(Parse, CommentsAndBlankLines) {
  const ArchGraph g = parse_arch("# header\n\ninput 8 8 1   # trailing\n  gap g1\n\ndense d1 units=6\n");
  EXPECT_EQ(g.nodes.size(), 3u);
}

TEST(ParseErrors, DanglingReference) {
  try {
    parse_arch("input 8 8 1\nconv c1 f=4\nadd a1 from=c1,missing\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos);
  }
}

TEST(ParseErrors, ReportLines) {
  EXPECT_EQ(parse_error_line("input 8 8 1\nfrobnicate x\n"), 2);
  EXPECT_EQ(parse_error_line("input 8 8 1\nconv c1 f=4\nconv c1 f=4\n"), 3);
  EXPECT_EQ(parse_error_line("conv c1 f=4\n"), 1);
  EXPECT_EQ(parse_error_line("input 8 8 1\nconv c1 k=4 f=4\n"), 2);
  EXPECT_EQ(parse_error_line("input 8 8 1\nconv c1 k=3 s=3 f=4\n"), 2);
  EXPECT_EQ(parse_error_line("input 8 8 1\nconv c1 f=4 pad=mirror\n"), 2);
  EXPECT_EQ(parse_error_line("input 8 8 1\nconv c1 f=x\n"), 2);
  EXPECT_EQ(parse_error_line("input 8 8 1\nconv c1 f=4 color=red\n"), 2);
  EXPECT_EQ(parse_error_line("input 8 8 1\ngap g\nsoftmax s\ndense d units=2\n"), 4);
  EXPECT_EQ(parse_error_line("input 8 8 1\ninput 8 8 1\n"), 2);
  EXPECT_EQ(parse_error_line(""), 1);
}

TEST(ParseErrors, ColumnPointsAtToken) {
  try {
    parse_arch("input 8 8 1\nconv c1 f=4 pad=mirror\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.column(), 17);
  }
}

TEST(ParseErrors, UnusedNode) {
  EXPECT_THROW(parse_arch("input 8 8 1\nconv a f=4\nconv b f=4 from=input\ngap g\n"), ParseError);
}

TEST(Shapes, SamePaddingIsCeil) {
  const ArchGraph g = infer_shapes(parse_arch("input 200 200 1\nconv c k=3 s=2 f=16\n"));
  EXPECT_EQ(g.resolved_shapes[1], (TensorShape{100, 100, 16}));
  const ArchGraph odd = infer_shapes(parse_arch("input 7 5 1\nconv c k=3 s=2 f=2\n"));
  EXPECT_EQ(odd.resolved_shapes[1], (TensorShape{4, 3, 2}));
}

TEST(Shapes, ValidPadding) {
  const ArchGraph g = infer_shapes(parse_arch("input 8 8 1\nconv c k=3 s=1 f=4 pad=valid\n"));
  EXPECT_EQ(g.resolved_shapes[1], (TensorShape{6, 6, 4}));
  EXPECT_THROW(infer_shapes(parse_arch("input 4 4 1\nconv c k=5 s=1 f=4 pad=valid\n")), ShapeError);
}

TEST(Shapes, GapDenseSoftmax) {
  const ArchGraph g = infer_shapes(parse_arch(kMinimal));
  EXPECT_EQ(g.resolved_shapes[1], (TensorShape{1, 1, 1}));
  EXPECT_EQ(g.resolved_shapes[2], (TensorShape{1, 1, 6}));
  EXPECT_EQ(g.output_shape(), (TensorShape{1, 1, 6}));
}

TEST(Shapes, AddMismatch) {
  EXPECT_THROW(infer_shapes(parse_arch("input 20 20 1\nconv a k=3 s=2 f=16\nconv b k=3 s=2 f=16\n"
                                       "add x from=a,b\n")),
               ShapeError);
}

TEST(Shapes, DenseOnSpatialTensor) {
  EXPECT_THROW(infer_shapes(parse_arch("input 8 8 1\ndense d units=6\n")), ShapeError);
}

TEST(Shapes, ExtentHelpers) {
  EXPECT_EQ(conv_output_extent(200, 3, 2, Padding::Same), 100);
  EXPECT_EQ(conv_output_extent(8, 3, 1, Padding::Valid), 6);
  EXPECT_EQ(conv_output_extent(7, 7, 2, Padding::Valid), 1);
  // total padding for same: (out-1)*s + k - in, split with the extra row after
  EXPECT_EQ(conv_padding_before(8, 4, 3, 2, Padding::Same), 0);
  EXPECT_EQ(conv_padding_before(8, 8, 3, 1, Padding::Same), 1);
  EXPECT_EQ(conv_padding_before(8, 8, 7, 1, Padding::Same), 3);
  EXPECT_EQ(conv_padding_before(8, 6, 3, 1, Padding::Valid), 0);
}

TEST(Shapes, FormattingDoesNotMatter) {
  const ArchGraph a = infer_shapes(parse_arch("input 16 16 1\nconv c k=3 s=2 f=8\ngap g\n"));
  const ArchGraph b =
      infer_shapes(parse_arch("#x\ninput   16 16 1\n\nconv  c  f=8   s=2  k=3  # c\ngap g from=c\n"));
  EXPECT_TRUE(same_structure(a, b));
  EXPECT_EQ(a.resolved_shapes, b.resolved_shapes);
}

TEST(Serialize, MinimalRoundTrip) {
  const ArchGraph g = parse_arch(kMinimal);
  const ArchGraph back = parse_arch(serialize_arch(g));
  EXPECT_EQ(g.nodes, back.nodes);
  EXPECT_EQ(serialize_arch(back), serialize_arch(g));
}

TEST(Serialize, CanonicalAttributeOrder) {
  const ArchGraph g = parse_arch("input 8 8 1\nconv c1 act=relu bn=0 pad=same f=8 s=1 k=3\n");
  EXPECT_EQ(serialize_arch(g), "input 8 8 1\nconv c1 k=3 s=1 f=8 pad=same bn=0 act=relu\n");
}

TEST(Serialize, RandomGraphsRoundTrip) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const ArchGraph g = testkit::random_graph(seed);
    const ArchGraph back = infer_shapes(parse_arch(serialize_arch(g)));
    ASSERT_TRUE(same_structure(g, back)) << "seed " << seed;
    ASSERT_EQ(g.resolved_shapes, back.resolved_shapes);
  }
}

TEST(Serialize, ZooRoundTrip) {
  for (const ArchGraph& g : {reference_net(), compact_net()}) {
    const ArchGraph back = infer_shapes(parse_arch(serialize_arch(g)));
    EXPECT_TRUE(same_structure(g, back));
  }
}

TEST(Serialize, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "tdn_archdsl_roundtrip.tdn";
  const ArchGraph g = testkit::random_graph(5);
  save_arch(g, path.string());
  EXPECT_TRUE(same_structure(load_arch(path.string()), g));
  std::filesystem::remove(path);
  EXPECT_THROW(load_arch(path.string()), IoError);
}

TEST(Fuzz, RandomBytesNeverCrash) {
  Rng rng(2024);
  const std::string alphabet = "inputconvdwmaxplgadesfotk=s,0123456789 \n#\t-_xyzbr\xff";
  for (int trial = 0; trial < 3000; ++trial) {
    std::string text;
    const int len = rng.range(0, 120);
    for (int i = 0; i < len; ++i) text += alphabet[rng.below(alphabet.size())];
    try {
      infer_shapes(parse_arch(text));
    } catch (const ParseError& e) {
      EXPECT_GE(e.line(), 0);
    } catch (const Error&) {
    }
  }
}

TEST(Fuzz, MutatedProgramsReportLines) {
  Rng rng(7);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string text = testkit::random_graph_text(trial % 50);
    const int edits = rng.range(1, 4);
    for (int e = 0; e < edits; ++e) {
      const auto pos = rng.below(text.size());
      switch (rng.below(3)) {
        case 0: text.erase(pos, 1); break;
        case 1: text.insert(pos, 1, static_cast<char>(rng.range(32, 126))); break;
        default: text[pos] = static_cast<char>(rng.range(0, 255)); break;
      }
    }
    try {
      infer_shapes(parse_arch(text));
    } catch (const ParseError& e) {
      const int lines = static_cast<int>(std::count(text.begin(), text.end(), '\n')) + 1;
      EXPECT_GE(e.line(), 0);
      EXPECT_LE(e.line(), lines);
    } catch (const Error&) {
    }
  }
}

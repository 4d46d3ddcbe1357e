#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "vig3d/error.hpp"
#include "vig3d/network.hpp"
#include "vig3d/ops.hpp"

using namespace vig3d;
using vig3d::testing::naive_linear;
using vig3d::testing::random_tensor;

namespace {

// Tiny topology with two channels everywhere; cheap enough for whole-volume tests.
ModelConfig slim(std::array<std::size_t, 3> patch = {32, 64, 64}) {
  ModelConfig c = ModelConfig::tiny();
  c.cnn_channels = {2, 2, 2, 2};
  c.vig_channels = {2, 2};
  c.ffn_expansion = 1;
  c.patch_shape = patch;
  return c;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("vig3d_net_" + name);
}

Shape5 spatial_shape(std::size_t n, std::size_t c, std::array<std::size_t, 3> p, std::size_t div) {
  return Shape5(n, c, p[0] / div, p[1] / div, p[2] / div);
}

}  // namespace

TEST(ModelConfigTest, ProfilesValidate) {
  EXPECT_NO_THROW(ModelConfig::tiny().validate());
  EXPECT_NO_THROW(ModelConfig::micro().validate());
  EXPECT_NO_THROW(ModelConfig::large().validate());
  EXPECT_EQ(ModelConfig::tiny().knn_k, 7u);
  EXPECT_EQ(ModelConfig::tiny().head_count(), 3u);
  EXPECT_EQ(ModelConfig::large().head_count(), 5u);
}

TEST(ModelConfigTest, RejectsInvalid) {
  ModelConfig c = ModelConfig::tiny();
  c.cnn_channels.pop_back();
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.patch_shape = {24, 64, 64};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.vig_units_per_stage = {1, 0};
  EXPECT_THROW(c.validate(), ConfigError);
  c.use_vig3d = false;
  EXPECT_NO_THROW(c.validate());
  c = ModelConfig::tiny();
  c.knn_k = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::micro();
  c.knn_k = 8;  // only 8 nodes at the ViG stage
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(Model(c, 0), ConfigError);
}

TEST(ModelConfigTest, TextRoundTripAndErrors) {
  ModelConfig c = ModelConfig::large();
  c.use_offset_decoder = false;
  c.knn_space = graph::KnnSpace::kSpatial;
  EXPECT_EQ(ModelConfig::parse(c.to_text()), c);
  ModelConfig d;
  d.set("profile", "micro");
  d.set("knn_k", " 3 ");
  EXPECT_EQ(d.knn_k, 3u);
  EXPECT_EQ(d.stages, 3u);
  EXPECT_THROW(d.set("knn", "3"), ConfigError);
  EXPECT_THROW(d.set("knn_k", "-1"), ConfigError);
  EXPECT_THROW(d.set("knn_k", "3x"), ConfigError);
  EXPECT_THROW(d.set("use_vig3d", "maybe"), ConfigError);
  EXPECT_THROW(d.set("patch_shape", "8,8"), ConfigError);
  EXPECT_THROW(d.set("profile", "huge"), ConfigError);
}

TEST(ModelTest, BlockCountFollowsUnits) {
  ModelConfig c = ModelConfig::large();
  c.cnn_channels = {2, 2, 2, 2, 2, 2};
  c.vig_channels = {2, 2, 2, 2};
  c.vig_units_per_stage = {1, 1, 2, 1};
  Model m(c, 0);
  EXPECT_EQ(m.vig_block_count(), 5u);
  std::size_t blocks = 0;
  for (const Parameter* p : std::as_const(m).parameters())
    if (p->name.size() > 7 && p->name.ends_with(".in.w")) ++blocks;
  EXPECT_EQ(blocks, 5u);
}

TEST(ModelTest, ParameterCountDeterministic) {
  Model a(ModelConfig::tiny(), 3), b(ModelConfig::tiny(), 3), other(ModelConfig::tiny(), 4);
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  const auto pa = std::as_const(a).parameters(), pb = std::as_const(b).parameters(), po = std::as_const(other).parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(max_abs_diff(pa[i]->value, pb[i]->value), 0.0);
    differs |= max_abs_diff(pa[i]->value, po[i]->value) > 0.0;
  }
  EXPECT_TRUE(differs);
}

TEST(StemTest, OutputIsQuarterResolution) {
  Model m(slim(), 1);
  Tape tape(false);
  Var s = m.stem_forward(tape.constant(random_tensor(Shape5(1, 1, 32, 64, 64), 2)));
  EXPECT_EQ(s.shape(), Shape5(1, 2, 8, 16, 16));
  Tape t2(false);
  EXPECT_THROW(m.stem_forward(t2.constant(Tensor5(Shape5(1, 1, 30, 64, 64)))), ConfigError);
}

TEST(StemTest, PaperPatchGivesNodeCount) {
  ModelConfig c = slim();
  c.vig_channels = {1, 1};
  Model m(c, 1);
  Tape tape(false);
  Var s = m.stem_forward(tape.constant(Tensor5(Shape5(1, 1, 80, 192, 160), 0.25)));
  EXPECT_EQ(s.shape(), Shape5(1, 1, 20, 48, 40));
  EXPECT_EQ(s.shape().spatial(), 38400u);
}

TEST(CnnBranchTest, ShapesAndZeroInput) {
  ModelConfig c = ModelConfig::tiny();
  Model m(c, 1);
  Tape tape(false);
  auto levels = m.cnn_branch_forward(tape.constant(Tensor5(Shape5(1, 1, 32, 64, 64))));
  ASSERT_EQ(levels.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(levels[i].shape(), spatial_shape(1, c.cnn_channels[i], c.patch_shape, std::size_t{2} << i));
    for (double v : levels[i].value().data()) ASSERT_EQ(v, 0.0);
  }
}

TEST(VigBranchTest, StageResolutionsPairWithCnn) {
  ModelConfig c = slim();
  c.vig_channels = {3, 5};  // unequal widths go through a 1x1x1 projection
  Model m(c, 1);
  EXPECT_NE(m.find("vig.0.proj.w"), nullptr);
  Tape tape(false);
  Var x = tape.constant(random_tensor(Shape5(2, 1, 32, 64, 64), 5));
  auto vig = m.vig_branch_forward(x);
  auto cnn = m.cnn_branch_forward(x);
  ASSERT_EQ(vig.size(), 2u);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(vig[j].shape(), cnn[j + 2].shape());
  EXPECT_EQ(tape.op_count("knn_graph"), 2u * 3u);
}

TEST(VigBranchTest, ConstantFieldEntersFirstBlockUniform) {
  Model m(ModelConfig::tiny(), 2);
  m.parameter("vig.pos").value.fill(0.0);
  Tape tape(false);
  Var s = ops::add_broadcast_batch(m.stem_forward(tape.constant(Tensor5(Shape5(1, 1, 32, 64, 64)))), tape.constant(m.parameter("vig.pos").value));
  graph::NodeGraph nodes = graph::grid_to_nodes(s.value(), 0);
  const std::size_t ch = nodes.features.shape().cols();
  for (std::size_t i = 1; i < nodes.num_nodes(); ++i)
    for (std::size_t q = 0; q < ch; ++q) ASSERT_EQ(nodes.features[i * ch + q], nodes.features[q]);
  Var agg = graph::max_relative_aggregate(tape.constant(nodes.features), graph::knn_graph(nodes.features, 7));
  for (std::size_t i = 0; i < nodes.num_nodes(); ++i)
    for (std::size_t q = 0; q < ch; ++q) ASSERT_EQ(agg.value()[i * 2 * ch + ch + q], 0.0);
}

TEST(ChannelAttentionTest, ZeroMlpHalvesConcat) {
  Model m(slim(), 1);
  for (const char* n : {"fuse.0.fc1.w", "fuse.0.fc1.b", "fuse.0.fc2.w", "fuse.0.fc2.b"}) m.parameter(n).value.fill(0.0);
  Tape tape(false);
  Tensor5 a = random_tensor(Shape5(2, 2, 4, 8, 8), 1), b = random_tensor(Shape5(2, 2, 4, 8, 8), 2);
  Var y = m.channel_attention_fuse(tape.constant(a), tape.constant(b), 0);
  Var cat = ops::concat_channels(tape.constant(a), tape.constant(b));
  for (std::size_t i = 0; i < y.value().numel(); ++i) ASSERT_EQ(y.value()[i], 0.5 * cat.value()[i]);
}

TEST(ChannelAttentionTest, MatchesScriptedOracleAndIsBounded) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model m(slim(), seed);
    for (const char* n : {"fuse.1.fc1.b", "fuse.1.fc2.b"}) m.parameter(n).value = random_tensor(m.parameter(n).value.shape(), seed + 40);
    Tape tape(false);
    const Shape5 s(2, 2, 2, 4, 4);
    Tensor5 a = random_tensor(s, seed), b = random_tensor(s, seed + 9, -3.0, 3.0);
    Var y = m.channel_attention_fuse(tape.constant(a), tape.constant(b), 1);

    const std::size_t ch = 4, vox = s.spatial();
    Tensor5 pooled = Tensor5::matrix(2, ch);
    Tensor5 cat(Shape5(2, ch, s.d(), s.h(), s.w()));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < ch; ++c) {
        const Tensor5& src = c < 2 ? a : b;
        double acc = 0;
        for (std::size_t v = 0; v < vox; ++v) {
          const double x = src.channel(n, c % 2)[v];
          cat.channel(n, c)[v] = x;
          acc += x;
        }
        pooled[n * ch + c] = acc / static_cast<double>(vox);
      }
    Tensor5 h = naive_linear(pooled, m.parameter("fuse.1.fc1.w").value, &m.parameter("fuse.1.fc1.b").value);
    for (double& v : h.data()) v = std::max(0.0, v);
    Tensor5 gate = naive_linear(h, m.parameter("fuse.1.fc2.w").value, &m.parameter("fuse.1.fc2.b").value);
    for (double& v : gate.data()) v = 1.0 / (1.0 + std::exp(-v));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < ch; ++c) {
        ASSERT_GT(gate[n * ch + c], 0.0);
        ASSERT_LT(gate[n * ch + c], 1.0);
        for (std::size_t v = 0; v < vox; ++v) {
          const double expect = cat.channel(n, c)[v] * gate[n * ch + c];
          ASSERT_NEAR(y.value().channel(n, c)[v], expect, 1e-12);
          ASSERT_LE(std::abs(y.value().channel(n, c)[v]), std::abs(cat.channel(n, c)[v]));
        }
      }
  }
}

TEST(ChannelAttentionTest, SpatialMismatchThrows) {
  Model m(slim(), 1);
  Tape tape(false);
  EXPECT_THROW(m.channel_attention_fuse(tape.constant(Tensor5(Shape5(1, 2, 2, 4, 4))), tape.constant(Tensor5(Shape5(1, 2, 2, 4, 2))), 0),
               DimensionMismatch);
}

TEST(ModelForwardTest, TinyProfileShapesAndDeterminism) {
  ModelConfig c = ModelConfig::tiny();
  Model m(c, 11);
  Tensor5 x = random_tensor(Shape5(1, 1, 32, 64, 64), 3, 0.0, 1.0);
  Tape t1(false), t2(false);
  ForwardResult a = m.forward(t1.constant(x));
  ForwardResult b = m.forward(t2.constant(x));
  ASSERT_EQ(a.heads.size(), 3u);
  EXPECT_EQ(a.logits().shape(), Shape5(1, 2, 32, 64, 64));
  for (std::size_t d = 0; d < a.heads.size(); ++d) {
    EXPECT_EQ(a.heads[d].shape(), spatial_shape(1, 2, c.patch_shape, std::size_t{1} << d));
    EXPECT_EQ(max_abs_diff(a.heads[d].value(), b.heads[d].value()), 0.0);
  }
  Tape t3(false);
  EXPECT_THROW(m.forward(t3.constant(Tensor5(Shape5(1, 1, 32, 64, 32)))), DimensionMismatch);
}

TEST(ModelForwardTest, AblationsChangeWiring) {
  ModelConfig c = slim();
  c.use_vig3d = false;
  Model no_vig(c, 1);
  EXPECT_EQ(no_vig.find("stem.0.w"), nullptr);
  Tape tape;
  Var x = tape.input(random_tensor(Shape5(1, 1, 32, 64, 64), 2));
  ForwardResult r = no_vig.forward(x);
  EXPECT_EQ(tape.op_count("knn_graph"), 0u);
  EXPECT_EQ(tape.op_count("max_relative_aggregate"), 0u);
  EXPECT_EQ(r.logits().shape(), Shape5(1, 2, 32, 64, 64));

  Model full(slim(), 1);
  Tape t2(false);
  full.forward(t2.constant(x.value()));
  EXPECT_EQ(t2.op_count("max_relative_aggregate"), full.vig_block_count());

  // All flags off: every skip is the raw CNN level, as in a plain U-Net.
  ModelConfig plain = ModelConfig::tiny();
  plain.use_vig3d = plain.use_channel_attention = plain.use_offset_decoder = false;
  Model unet(plain, 1);
  for (const Parameter* p : std::as_const(unet).parameters()) {
    EXPECT_FALSE(p->name.starts_with("fuse.") || p->name.starts_with("vig.") || p->name.starts_with("stem.")) << p->name;
  }
  for (std::size_t l = 0; l + 1 < 4; ++l) {
    EXPECT_EQ(unet.find("dec." + std::to_string(l) + ".conv1.w")->value.shape().dims[1], 2 * plain.cnn_channels[l]);
  }
  EXPECT_EQ(unet.find("dec.3.conv1.w")->value.shape().dims[1], plain.cnn_channels[3]);

  // Without the offset decoder the fused levels also receive the raw CNN features.
  ModelConfig dense = ModelConfig::tiny();
  dense.use_offset_decoder = false;
  Model d(dense, 1);
  EXPECT_EQ(d.find("dec.3.conv1.w")->value.shape().dims[1], 3 * dense.cnn_channels[3]);
  EXPECT_EQ(Model(ModelConfig::tiny(), 1).find("dec.3.conv1.w")->value.shape().dims[1], 2 * dense.cnn_channels[3]);

  ModelConfig no_ca = slim();
  no_ca.use_channel_attention = false;
  Model m3(no_ca, 1);
  EXPECT_EQ(m3.find("fuse.0.fc1.w"), nullptr);
  Tape t3(false);
  EXPECT_EQ(m3.forward(t3.constant(x.value())).logits().shape(), Shape5(1, 2, 32, 64, 64));
}

TEST(SlidingWindowTest, WindowOrigins) {
  EXPECT_EQ(window_origins(96, 32, 0.5), (std::vector<std::size_t>{0, 16, 32, 48, 64}));
  EXPECT_EQ(window_origins(70, 32, 0.5), (std::vector<std::size_t>{0, 16, 32, 38}));
  EXPECT_EQ(window_origins(96, 32, 0.0), (std::vector<std::size_t>{0, 32, 64}));
  EXPECT_EQ(window_origins(20, 32, 0.5), (std::vector<std::size_t>{0}));
  EXPECT_THROW(window_origins(64, 32, 1.0), ConfigError);
  EXPECT_THROW(window_origins(64, 32, -0.1), ConfigError);
}

TEST(SlidingWindowTest, SingleWindowEqualsForward) {
  Model m(ModelConfig::micro(), 4);
  Tensor5 x = random_tensor(Shape5(1, 1, 8, 8, 8), 6);
  Tape tape(false);
  Var p = ops::softmax_channel(m.forward(tape.constant(x)).logits());
  auto labels = sliding_window_predict(m, x, 0.5);
  ASSERT_EQ(labels.size(), 512u);
  for (std::size_t i = 0; i < 512; ++i) EXPECT_EQ(labels[i], p.value().channel(0, 1)[i] > p.value().channel(0, 0)[i] ? 1 : 0);
  EXPECT_EQ(max_abs_diff(sliding_window_probabilities(m, x, 0.0), p.value()), 0.0);
}

TEST(SlidingWindowTest, ConstantVolumeAveragesOneWindowMap) {
  Model m(ModelConfig::micro(), 5);
  Tensor5 vol(Shape5(1, 1, 12, 16, 8), 0.7);
  Tape tape(false);
  Var p = ops::softmax_channel(m.forward(tape.constant(Tensor5(Shape5(1, 1, 8, 8, 8), 0.7))).logits());
  Tensor5 got = sliding_window_probabilities(m, vol, 0.5);
  const auto oz = window_origins(12, 8, 0.5), oy = window_origins(16, 8, 0.5), ox = window_origins(8, 8, 0.5);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t z = 0; z < 12; ++z)
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          double acc = 0;
          int n = 0;
          for (std::size_t a : oz)
            for (std::size_t b : oy)
              for (std::size_t e : ox)
                if (z >= a && z < a + 8 && y >= b && y < b + 8 && x >= e && x < e + 8) {
                  acc += p.value().at(0, c, z - a, y - b, x - e);
                  ++n;
                }
          ASSERT_NEAR(got.at(0, c, z, y, x), acc / n, 1e-14);
        }
}

TEST(SlidingWindowTest, ShapesIncludingSmallVolumes) {
  Model m(slim({32, 32, 32}), 2);
  auto labels = sliding_window_predict(m, random_tensor(Shape5(1, 1, 96, 96, 96), 1, 0.0, 1.0), 0.0);
  EXPECT_EQ(labels.size(), 96u * 96u * 96u);
  Model micro(ModelConfig::micro(), 2);
  Tensor5 small = random_tensor(Shape5(1, 1, 5, 8, 3), 2);
  Tensor5 p = sliding_window_probabilities(micro, small, 0.5);
  EXPECT_EQ(p.shape(), Shape5(1, 2, 5, 8, 3));
  for (std::size_t i = 0; i < p.shape().spatial(); ++i) EXPECT_NEAR(p.channel(0, 0)[i] + p.channel(0, 1)[i], 1.0, 1e-12);
}

TEST(CheckpointTest, RoundTripIsBitExact) {
  ModelConfig c = ModelConfig::micro();
  c.use_offset_decoder = false;
  Model m(c, 9);
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(path, m);
  Model back = load_checkpoint(path);
  EXPECT_EQ(back.config(), c);
  const auto pa = std::as_const(m).parameters(), pb = std::as_const(back).parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i]->name, pb[i]->name);
    for (std::size_t k = 0; k < pa[i]->value.numel(); ++k)
      ASSERT_EQ(std::bit_cast<std::uint64_t>(pa[i]->value[k]), std::bit_cast<std::uint64_t>(pb[i]->value[k]));
  }
  std::filesystem::remove(path);
}

TEST(CheckpointTest, CorruptionGivesStructuredErrors) {
  Model m(ModelConfig::micro(), 9);
  const auto path = temp_file("corrupt.ckpt");
  save_checkpoint(path, m);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto expect_kind = [&](std::string data, ParseError::Kind kind, std::uint64_t offset) {
    std::ofstream(path, std::ios::binary | std::ios::trunc).write(data.data(), static_cast<std::streamsize>(data.size()));
    try {
      load_checkpoint(path);
      ADD_FAILURE() << "no error";
    } catch (const ParseError& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
      if (offset != ~0ull) EXPECT_EQ(e.offset(), offset);
    }
  };
  std::string bad = bytes;
  bad[0] = 'X';
  expect_kind(bad, ParseError::Kind::kMagicMismatch, 0);
  bad = bytes;
  bad[5] = '2';
  expect_kind(bad, ParseError::Kind::kUnsupportedVersion, 5);
  expect_kind(bytes.substr(0, bytes.size() - 3), ParseError::Kind::kTruncated, ~0ull);
  expect_kind(bytes.substr(0, 4), ParseError::Kind::kTruncated, ~0ull);
  expect_kind(bytes + "x", ParseError::Kind::kBadField, ~0ull);
  bad = bytes;
  bad[6] = '\xff';
  bad[7] = '\xff';
  bad[8] = '\xff';
  expect_kind(bad, ParseError::Kind::kBadField, 6);
  EXPECT_THROW(load_checkpoint(temp_file("does_not_exist")), ParseError);
  std::filesystem::remove(path);
}

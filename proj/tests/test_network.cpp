#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "stvnet/checkpoint.hpp"
#include "stvnet/gradcheck.hpp"
#include "stvnet/network.hpp"
#include "stvnet/training.hpp"
#include "test_util.hpp"

using namespace stvnet;
using stvnet::test::random_tensor;
namespace fs = std::filesystem;

namespace {

NetworkSpec make_spec(Arch arch, int base, int T_len, Extent3 e) {
  NetworkSpec s;
  s.arch = arch;
  s.base_channels = base;
  s.window_T = T_len;
  s.input_shape = e;
  return s;
}

// Hand count: a normalized block carries kernel, bias, gamma and beta.
std::size_t block(std::size_t in, std::size_t out, std::size_t k, bool normalized = true) {
  return out * in * k * k * k + out + (normalized ? 2 * out : 0);
}

std::size_t expected_params(Arch arch, std::size_t C, Extent3 e) {
  std::size_t n = block(1, C, 3) + block(C, C, 3) + block(C, 2 * C, 3) + block(2 * C, 2 * C, 3) +
                  block(2 * C, 4 * C, 3) + block(4 * C, 4 * C, 3);
  if (arch == Arch::kSTNet) {
    n += block(4 * C, 2 * C, 3) + block(2 * C, 2 * C, 3);
  } else {
    n += block(4 * C, 2 * C, 2) + block(4 * C, 2 * C, 3);
  }
  n += 2 * block(2 * C, 2 * C, 3);
  n += arch == Arch::kSTNet ? block(2 * C, C, 3) : block(2 * C, C, 2);
  n += block(2 * C, C, 3) + 3 * block(C, C, 3) + block(C, 1, 1, false);
  if (arch != Arch::kVNet) {
    const std::size_t lstm = 4 * C * 2 * C * 27 + 4 * C + 3 * C * e.voxels();
    n += 2 * lstm;
  }
  return n;
}

fs::path fresh_file(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stvnet_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(NetworkSpec, Validation) {
  EXPECT_THROW(make_spec(Arch::kVNet, 4, 2, {32, 32, 12}).validate(), ConfigError);
  EXPECT_THROW(make_spec(Arch::kSTVNet, 4, 2, {30, 32, 12}).validate(), ConfigError);
  EXPECT_NO_THROW(make_spec(Arch::kSTNet, 4, 2, {30, 31, 9}).validate());
  EXPECT_THROW(make_spec(Arch::kSTVNet, 0, 2, {32, 32, 12}).validate(), ConfigError);
  EXPECT_THROW(Network<float>::build(make_spec(Arch::kVNet, 4, 2, {32, 32, 12}), 0), ConfigError);
}

TEST(NetworkSpec, JsonRoundTrip) {
  auto s = make_spec(Arch::kSTNet, 6, 3, {16, 20, 8});
  s.structure = Structure::kEpicardium;
  s.activation_mode = LstmMode::kConventional;
  EXPECT_EQ(spec_from_json(to_json(s)), s);
  EXPECT_THROW(parse_arch("unet"), ConfigError);
}

TEST(Network, ParameterCountMatchesHandFormula) {
  const Extent3 e{16, 16, 8};
  for (Arch arch : {Arch::kVNet, Arch::kSTNet, Arch::kSTVNet}) {
    for (int C : {2, 8}) {
      const int T_len = arch == Arch::kVNet ? 1 : 2;
      auto net = Network<float>::build(make_spec(arch, C, T_len, e), 1);
      EXPECT_EQ(net.parameter_count(), expected_params(arch, std::size_t(C), e)) << to_string(arch) << " C=" << C;
    }
  }
}

TEST(Network, ChannelLadder) {
  auto net = Network<float>::build(make_spec(Arch::kVNet, 8, 1, {16, 16, 8}), 1);
  std::map<std::string, int> out;
  for (auto& b : net.blocks()) out[b.name] = b.transpose ? b.kernel.value.dim(1) : b.kernel.value.dim(0);
  EXPECT_EQ(out["enc0b"], 8);
  EXPECT_EQ(out["enc1b"], 16);
  EXPECT_EQ(out["enc2b"], 32);
  EXPECT_EQ(out["up1"], 16);
  EXPECT_EQ(out["up0"], 8);
  EXPECT_EQ(out["head"], 1);
}

TEST(Network, BuildIsDeterministic) {
  const auto spec = make_spec(Arch::kSTVNet, 2, 2, {8, 8, 4});
  auto a = Network<float>::build(spec, 5), b = Network<float>::build(spec, 5), c = Network<float>::build(spec, 6);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value);
    any_diff |= !(pa[i]->value == pc[i]->value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Network, OutputShapeAndRangeForEveryArch) {
  const Extent3 e{8, 8, 4};
  for (Arch arch : {Arch::kVNet, Arch::kSTNet, Arch::kSTVNet}) {
    const int T_len = arch == Arch::kVNet ? 1 : 3;
    auto net = Network<double>::build(make_spec(arch, 2, T_len, e), 3);
    for (bool training : {true, false}) {
      Tape<double> tape;
      const auto y = net.forward(tape, random_tensor<double>({2, T_len, 4, 8, 8}, 4, 0, 1), training).value();
      EXPECT_EQ(y.shape(), (Shape{2, 1, 4, 8, 8}));
      for (double v : y.storage()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(Network, ZeroInputGivesHalfForVNetInEval) {
  auto net = Network<double>::build(make_spec(Arch::kVNet, 4, 1, {8, 8, 4}), 9);
  Tape<double> tape;
  const auto y = net.forward(tape, Tensor<double>({1, 1, 4, 8, 8}), false).value();
  for (double v : y.storage()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Network, GateOrderMatters) {
  auto net = Network<double>::build(make_spec(Arch::kSTVNet, 2, 3, {8, 8, 4}), 2);
  auto x = random_tensor<double>({1, 3, 4, 8, 8}, 1, 0, 1);
  // Swap the first two gates; the last gate (and so the V-Net path) is unchanged.
  Tensor<double> swapped = x;
  const std::size_t vox = 4 * 8 * 8;
  std::copy_n(x.ptr(), vox, swapped.ptr() + vox);
  std::copy_n(x.ptr() + vox, vox, swapped.ptr());
  Tape<double> t1, t2;
  const auto a = net.forward(t1, x, false).value(), b = net.forward(t2, swapped, false).value();
  EXPECT_GT(max_abs_diff(a, b), 1e-9);
}

TEST(Network, SingleGateSTVNetRuns) {
  auto net = Network<float>::build(make_spec(Arch::kSTVNet, 2, 1, {8, 8, 4}), 2);
  Tape<float> tape;
  const auto y = net.forward(tape, random_tensor<float>({2, 1, 4, 8, 8}, 1, 0, 1), true);
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Network, WindowAndExtentMismatchThrow) {
  auto net = Network<float>::build(make_spec(Arch::kSTVNet, 2, 2, {8, 8, 4}), 2);
  Tape<float> tape;
  EXPECT_THROW(net.forward(tape, Tensor<float>({1, 3, 4, 8, 8}), false), ShapeError);
  EXPECT_THROW(net.forward(tape, Tensor<float>({1, 2, 4, 8, 12}), false), ShapeError);
}

TEST(Network, EndToEndGradientMatchesFiniteDifferences) {
  for (Arch arch : {Arch::kVNet, Arch::kSTNet, Arch::kSTVNet}) {
    const int T_len = arch == Arch::kVNet ? 1 : 2;
    auto net = Network<double>::build(make_spec(arch, 2, T_len, {8, 8, 4}), 21);
    const auto x = random_tensor<double>({2, T_len, 4, 8, 8}, 22, 0, 1);
    auto y = random_tensor<double>({2, 1, 4, 8, 8}, 23, 0, 1);
    for (auto& v : y.storage()) v = v > 0.6 ? 1 : 0;
    const auto params = net.parameters();
    auto loss = [&](Tape<double>& t) {
      std::vector<Var<double>> w;
      for (auto* p : params) w.push_back(t.param(*p));
      return add(dice_loss(net.forward(t, x, true), y), l1_penalty(w, 1e-5));
    };
    const auto rep = finite_diff_check<double>(loss, params, 1e-6, 0.01, 7, 1e-6);
    EXPECT_LT(rep.max_rel_error, 1e-3) << to_string(arch) << " checked " << rep.checked;
    EXPECT_GT(rep.checked, 20u);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto path = fresh_file("ckpt.bin");
  auto spec = make_spec(Arch::kSTVNet, 2, 2, {8, 8, 4});
  auto net = Network<float>::build(spec, 13);
  // Perturb running stats so buffers are not at their defaults.
  {
    Tape<float> tape;
    net.forward(tape, random_tensor<float>({2, 2, 4, 8, 8}, 3, 0, 1), true);
  }
  save_checkpoint(net, path, 42);
  CheckpointInfo info;
  auto back = load_checkpoint<float>(path, &info);
  EXPECT_EQ(info.epoch, 42);
  EXPECT_EQ(info.seed, 13u);
  EXPECT_EQ(info.spec, spec);
  auto a = net.parameters(), b = back.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value);
  auto ba = net.buffers(), bb = back.buffers();
  ASSERT_EQ(ba.size(), bb.size());
  for (std::size_t i = 0; i < ba.size(); ++i) EXPECT_EQ(*ba[i].second, *bb[i].second);
  save_checkpoint(back, fresh_file("ckpt2.bin"), 42);
  EXPECT_EQ(io::read_file(path), io::read_file(fs::temp_directory_path() / "stvnet_ckpt2.bin"));
  fs::remove(path);
}

TEST(Checkpoint, CorruptionsGiveNamedErrors) {
  const auto path = fresh_file("ckpt_bad.bin");
  auto net = Network<float>::build(make_spec(Arch::kVNet, 2, 1, {8, 8, 4}), 1);
  save_checkpoint(net, path);
  const std::string good = io::read_file(path);
  auto expect_kind = [&](const std::string& bytes, FormatError::Kind kind) {
    io::write_file(path, bytes);
    try {
      load_checkpoint<float>(path);
      ADD_FAILURE() << "no error";
    } catch (const FormatError& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
    }
  };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  expect_kind(bad_magic, FormatError::Kind::kBadMagic);
  expect_kind(good.substr(0, good.size() - 10), FormatError::Kind::kTruncatedBlob);
  expect_kind(good + "extra", FormatError::Kind::kDimensionMismatch);
  std::string bad_json = good;
  bad_json[16] = '#';
  expect_kind(bad_json, FormatError::Kind::kMalformedHeader);
  expect_kind(good.substr(0, 20), FormatError::Kind::kTruncatedBlob);

  // Header claiming a different channel count than the blob was written for.
  std::uint64_t len = 0;
  io::read_le(good.data() + 8, 1, &len);
  std::string header = good.substr(16, len);
  const auto pos = header.find("\"base_channels\":2");
  ASSERT_NE(pos, std::string::npos);
  header.replace(pos, 17, "\"base_channels\":3");
  expect_kind(good.substr(0, 16) + header + good.substr(16 + len), FormatError::Kind::kSpecMismatch);

  io::write_file(path, good);
  EXPECT_THROW(load_checkpoint<double>(path), FormatError);
  fs::remove(path);
  try {
    load_checkpoint<float>(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatError::Kind::kMissingFile);
  }
}

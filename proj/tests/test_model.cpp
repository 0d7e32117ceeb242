#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "bnadapt/model.hpp"

using namespace bnadapt;
namespace fs = std::filesystem;

namespace {

Tensor random_rows(std::size_t n, std::size_t d, std::uint64_t seed, double shift = 0.0) {
  RandomStream rs(seed, 11);
  Tensor t = Tensor::zeros(n, d);
  for (auto& v : t.values()) v = shift + rs.normal();
  return t;
}

// Tensor-level forward pass with explicit loops, used as an oracle for the
// graph forward. `stats` null means running statistics.
Tensor oracle_logits(const Model& m, const Tensor& x, const std::vector<BatchStats>* stats) {
  Tensor h = x;
  const auto& arch = m.architecture();
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
    const Linear& l = m.layers()[i];
    Tensor z = matmul(h, l.weight);
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += l.bias[c];
    if (arch.norm == NormMode::batchnorm) {
      BNLayerState st = m.norms()[i];
      z = stats ? batchnorm_forward(z, st, BatchNormMode::eval_context_stats, &(*stats)[i])
                : batchnorm_forward(z, st, BatchNormMode::eval_running_stats);
    } else if (arch.norm == NormMode::per_sample) {
      const BNLayerState& st = m.norms()[i];
      for (std::size_t r = 0; r < z.rows(); ++r) {
        double mu = 0, var = 0;
        for (std::size_t c = 0; c < z.cols(); ++c) mu += z(r, c);
        mu /= static_cast<double>(z.cols());
        for (std::size_t c = 0; c < z.cols(); ++c) var += (z(r, c) - mu) * (z(r, c) - mu);
        var /= static_cast<double>(z.cols());
        for (std::size_t c = 0; c < z.cols(); ++c)
          z(r, c) = st.gamma[c] * (z(r, c) - mu) / std::sqrt(var + st.epsilon) + st.beta[c];
      }
    }
    for (auto& v : z.values()) v = std::max(v, 0.0);
    h = z;
  }
  const Linear& head = m.layers().back();
  Tensor out = matmul(h, head.weight);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += head.bias[c];
  return out;
}

Architecture small_arch(NormMode norm = NormMode::batchnorm) {
  Architecture a;
  a.input_dim = 4;
  a.hidden = {6, 5};
  a.classes = 3;
  a.norm = norm;
  return a;
}

Model scalar_model() {
  Architecture a;
  a.input_dim = 1;
  a.hidden = {1};
  a.classes = 2;
  Model m(a);
  m.layers()[0].weight = Tensor::matrix({{1.0}});
  m.layers()[0].bias = Tensor::zeros(1, 1);
  return m;
}

// Perturb gamma/beta and running stats so identity defaults do not hide bugs.
void scramble_norms(Model& m, std::uint64_t seed) {
  RandomStream rs(seed, 3);
  for (auto& n : m.norms()) {
    for (auto& v : n.gamma.values()) v = 0.5 + rs.uniform();
    for (auto& v : n.beta.values()) v = rs.normal();
    for (auto& v : n.running_mean.values()) v = rs.normal();
    for (auto& v : n.running_var.values()) v = 0.5 + rs.uniform();
  }
}

}  // namespace

TEST(Model, ZeroHeadGivesUniformPredictions) {
  Architecture a;
  Model m(a, ModelInit{3, true});
  const auto out = forward(m, random_rows(10, 16, 1), StatSource::batch());
  for (double p : out.probs.values()) EXPECT_DOUBLE_EQ(p, 0.125);
}

TEST(Model, RunningForwardMatchesOracle) {
  Model m(small_arch(), ModelInit{5});
  scramble_norms(m, 5);
  const Tensor x = random_rows(7, 4, 2);
  EXPECT_LT(max_abs_diff(forward(m, x).logits, oracle_logits(m, x, nullptr)), 1e-12);
}

TEST(Model, BatchForwardMatchesOracleWithSequentialStats) {
  Model m(small_arch(), ModelInit{6});
  scramble_norms(m, 6);
  const Tensor x = random_rows(9, 4, 3);
  // Oracle stats: layer-by-layer batch statistics of the pre-norm activations.
  std::vector<BatchStats> stats;
  Tensor h = x;
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor z = matmul(h, m.layers()[i].weight);
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += m.layers()[i].bias[c];
    stats.push_back(batch_statistics(z));
    BNLayerState st = m.norms()[i];
    z = batchnorm_forward(z, st, BatchNormMode::eval_context_stats, &stats.back());
    for (auto& v : z.values()) v = std::max(v, 0.0);
    h = z;
  }
  EXPECT_LT(max_abs_diff(forward(m, x, StatSource::batch()).logits, oracle_logits(m, x, &stats)), 1e-12);
}

TEST(Model, PerSampleAndNoNormMatchOracle) {
  for (NormMode mode : {NormMode::per_sample, NormMode::none}) {
    Model m(small_arch(mode), ModelInit{8});
    scramble_norms(m, 8);
    const Tensor x = random_rows(6, 4, 4);
    EXPECT_LT(max_abs_diff(forward(m, x).logits, oracle_logits(m, x, nullptr)), 1e-12) << to_string(mode);
  }
}

TEST(Model, PerSampleRowsAreIndependentOfTheBatch) {
  Model m(small_arch(NormMode::per_sample), ModelInit{9});
  const Tensor x = random_rows(5, 4, 5);
  const Tensor all = forward(m, x, StatSource::batch()).logits;
  for (std::size_t i = 0; i < 5; ++i) {
    const Tensor one = forward(m, slice_rows(x, i, i + 1), StatSource::batch()).logits;
    EXPECT_EQ(one, slice_rows(all, i, i + 1));
  }
}

TEST(Snapshot, ForwardWithSnapshotEqualsBatchMode) {
  Model m(small_arch(), ModelInit{10});
  const Tensor x = random_rows(12, 4, 6, 2.0);
  const BNSnapshot s = collect_bn_snapshot(m, x);
  ASSERT_EQ(s.layers.size(), 2u);
  const Tensor a = forward(m, x, StatSource::from(s)).logits;
  const Tensor b = forward(m, x, StatSource::batch()).logits;
  EXPECT_LT(max_abs_diff(a, b), 1e-12);
}

TEST(Snapshot, ScalarContextMeanAndVariance) {
  const Model m = scalar_model();
  const BNSnapshot s = collect_bn_snapshot(m, Tensor::matrix({{0.0}, {0.0}, {2.0}}));
  EXPECT_NEAR(s.layers[0].mean[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.layers[0].var[0], 8.0 / 9.0, 1e-15);
}

TEST(Snapshot, ShiftedContextMovesAdaptedMean) {
  const Model m = scalar_model();
  const Tensor ctx = random_rows(4000, 1, 7, 5.0);
  const Model adapted = swap_bn_stats(m, collect_bn_snapshot(m, ctx));
  EXPECT_NEAR(adapted.norms()[0].running_mean[0], 5.0, 0.1);
  EXPECT_EQ(m.norms()[0].running_mean[0], 0.0);
}

TEST(Snapshot, SwapIdentityAndInvolution) {
  Model m(small_arch(), ModelInit{11});
  scramble_norms(m, 11);
  const Model same = swap_bn_stats(m, running_snapshot(m));
  EXPECT_EQ(checkpoint_bytes(same), checkpoint_bytes(m));
  const BNSnapshot ctx = collect_bn_snapshot(m, random_rows(8, 4, 8));
  const Model there = swap_bn_stats(m, ctx);
  EXPECT_NE(checkpoint_bytes(there), checkpoint_bytes(m));
  EXPECT_EQ(checkpoint_bytes(swap_bn_stats(there, running_snapshot(m))), checkpoint_bytes(m));
}

TEST(Snapshot, Errors) {
  Model m(small_arch(), ModelInit{12});
  BNSnapshot s = collect_bn_snapshot(m, random_rows(4, 4, 9));
  s.layers.pop_back();
  EXPECT_THROW(swap_bn_stats(m, s), ShapeError);
  EXPECT_THROW(forward(m, random_rows(4, 4, 9), StatSource::from(s)), ShapeError);
  EXPECT_THROW(forward(m, random_rows(4, 3, 9)), ShapeError);
  Model none(small_arch(NormMode::none));
  EXPECT_THROW(collect_bn_snapshot(none, random_rows(4, 4, 9)), IncompatibleError);
}

TEST(Model, ContextEncoderRequirements) {
  Architecture a = small_arch();
  a.context_dim = 2;
  a.encoder_hidden = 3;
  Model m(a, ModelInit{13});
  const Tensor x = random_rows(5, 4, 10);
  EXPECT_THROW(forward(m, x), IncompatibleError);
  const Tensor cv = context_vector(m, random_rows(6, 4, 11));
  EXPECT_EQ(cv.cols(), 2u);
  EXPECT_EQ(forward(m, x, StatSource::batch(), &cv).logits.rows(), 5u);
  Model plain(small_arch());
  EXPECT_THROW(forward(plain, x, StatSource::running(), &cv), IncompatibleError);
}

TEST(Model, ChecksumSelectsParameterKinds) {
  Model m(small_arch(), ModelInit{14});
  auto not_norm = [](ParamKind k) { return k != ParamKind::norm_gamma && k != ParamKind::norm_beta; };
  auto all = [](ParamKind) { return true; };
  const auto frozen = parameter_checksum(m, not_norm);
  const auto full = parameter_checksum(m, all);
  m.norms()[1].gamma[0] += 1.0;
  EXPECT_EQ(parameter_checksum(m, not_norm), frozen);
  EXPECT_NE(parameter_checksum(m, all), full);
  m.layers()[0].weight(0, 0) += 1.0;
  EXPECT_NE(parameter_checksum(m, not_norm), frozen);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  Architecture a = small_arch();
  a.context_dim = 2;
  Model m(a, ModelInit{15});
  scramble_norms(m, 15);
  m.tvn_train_cov() = Tensor::identity(5);
  const fs::path p = fs::temp_directory_path() / "bnadapt-test-model.ckpt";
  write_checkpoint(p.string(), m, {{"seed", 15}});
  const Checkpoint ck = read_checkpoint(p.string());
  EXPECT_EQ(ck.header.at("seed"), 15);
  EXPECT_EQ(ck.model.architecture(), a);
  EXPECT_EQ(checkpoint_bytes(ck.model, {{"seed", 15}}), binio::read_file(p.string()));
  binio::write_file(p.string(), binio::read_file(p.string()) + "x");
  EXPECT_THROW(read_checkpoint(p.string()), IoError);
  binio::write_file(p.string(), "garbage!");
  EXPECT_THROW(read_checkpoint(p.string()), IoError);
  fs::remove(p);
}

TEST(Model, ParameterOrder) {
  Model m(small_arch(), ModelInit{16});
  const auto params = m.parameters();
  ASSERT_EQ(params.size(), 3u * 2 + 2u * 2);
  EXPECT_EQ(params[0].name, "layer0.weight");
  EXPECT_EQ(params[5].name, "layer2.bias");
  EXPECT_EQ(params[6].kind, ParamKind::norm_gamma);
  EXPECT_EQ(params[9].kind, ParamKind::norm_beta);
  EXPECT_EQ(m.parameter_count(), 4u * 6 + 6 + 6 * 5 + 5 + 5 * 3 + 3 + 2 * (6 + 5));
}

TEST(Model, AccuracyAndArgmax) {
  EXPECT_EQ(argmax_rows(Tensor::matrix({{0.1, 0.9}, {2.0, -1.0}})), (std::vector<int>{1, 0}));
  EXPECT_DOUBLE_EQ(accuracy({1, 0, 1, 1}, {1, 1, 1, 0}), 0.5);
  EXPECT_THROW(accuracy({1}, {1, 0}), ShapeError);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "bnadapt/binio.hpp"
#include "bnadapt/synthgen.hpp"

using namespace bnadapt;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.dim = 4;
  c.classes = 3;
  c.n_domains_train = 3;
  c.n_domains_val = 2;
  c.n_domains_test = 2;
  c.perturbed_per_domain = 12;
  c.controls_per_domain = 6;
  c.seed = 17;
  return c;
}

std::vector<std::size_t> counts(const std::vector<int>& y, std::size_t k) {
  std::vector<std::size_t> c(k, 0);
  for (int v : y) ++c[static_cast<std::size_t>(v)];
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bnadapt-test-" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(MetaDataset, NoiseFreeOffsetFreeSamplesEqualClassEffects) {
  GeneratorConfig c = small_config();
  c.noise_std = 0.0;
  c.domain_offset_scale = 0.0;
  const MetaDataset m = make_meta_dataset(c);
  for (const auto* split : {&m.train, &m.val, &m.test})
    for (const auto& d : *split) {
      for (std::size_t i = 0; i < d.perturbed_count(); ++i)
        for (std::size_t j = 0; j < c.dim; ++j)
          EXPECT_EQ(d.X(i, j), m.class_effects(static_cast<std::size_t>(d.y[i]), j));
      for (double v : d.Z.values()) EXPECT_EQ(v, 0.0);
    }
}

TEST(MetaDataset, ControlsCarryNoClassEffect) {
  GeneratorConfig c = small_config();
  c.noise_std = 0.0;
  const MetaDataset m = make_meta_dataset(c);
  for (const auto& d : m.train) {
    const Tensor& off = m.domain_offsets.at(d.domain_id);
    for (std::size_t i = 0; i < d.control_count(); ++i)
      for (std::size_t j = 0; j < c.dim; ++j) EXPECT_EQ(d.Z(i, j), off[j]);
    // Every perturbed row shares the domain's offset.
    for (std::size_t i = 0; i < d.perturbed_count(); ++i)
      for (std::size_t j = 0; j < c.dim; ++j)
        EXPECT_EQ(d.X(i, j), off[j] + m.class_effects(static_cast<std::size_t>(d.y[i]), j));
  }
}

TEST(MetaDataset, ValidationRejectsBadConfigs) {
  GeneratorConfig c = small_config();
  c.classes = 1;
  EXPECT_THROW(make_meta_dataset(c), ConfigError);
  c = small_config();
  c.perturbed_per_domain = 0;
  EXPECT_THROW(make_meta_dataset(c), ConfigError);
  c = small_config();
  c.n_domains_val = 0;
  EXPECT_THROW(make_meta_dataset(c), ConfigError);
  c = small_config();
  c.noise_std = -1.0;
  EXPECT_THROW(make_meta_dataset(c), ConfigError);
}

TEST(MetaDataset, ZeroControlsAllowed) {
  GeneratorConfig c = small_config();
  c.controls_per_domain = 0;
  const MetaDataset m = make_meta_dataset(c);
  for (const auto& d : m.train) EXPECT_EQ(d.control_count(), 0u);
}

TEST(MetaDataset, DeterministicAndSeedSensitive) {
  const MetaDataset a = make_meta_dataset(small_config());
  const MetaDataset b = make_meta_dataset(small_config());
  EXPECT_EQ(manifest_text(a), manifest_text(b));
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].X, b.train[i].X);
    EXPECT_EQ(a.train[i].Z, b.train[i].Z);
    EXPECT_EQ(a.train[i].y, b.train[i].y);
  }
  GeneratorConfig c = small_config();
  c.seed += 1;
  EXPECT_NE(make_meta_dataset(c).train[0].X, a.train[0].X);
}

TEST(MetaDataset, SplitsAreDisjoint) {
  const MetaDataset m = make_meta_dataset(GeneratorConfig{});
  std::set<std::string> ids;
  std::size_t total = 0;
  for (const auto* split : {&m.train, &m.val, &m.test})
    for (const auto& d : *split) {
      ids.insert(d.domain_id);
      ++total;
    }
  EXPECT_EQ(total, 29u);
  EXPECT_EQ(ids.size(), total);
  EXPECT_EQ(m.train.front().domain_id, "train-000");
  EXPECT_EQ(m.test.back().domain_id, "test-004");
}

TEST(Hierarchy, ChildOffsetIsParentPlusChild) {
  GeneratorConfig c = small_config();
  c.hierarchy.mode = Hierarchy::two_level;
  c.hierarchy.children_per_parent = 2;
  c.hierarchy.child_offset_scale = 0.7;
  const MetaDataset m = make_meta_dataset(c);
  const RandomStream root(c.seed, 0);
  std::size_t global = 0;
  for (const auto* split : {&m.train, &m.val, &m.test})
    for (const auto& d : *split) {
      ASSERT_TRUE(d.parent_id.has_value());
      RandomStream rs = root.child(stream_ids::domain_offsets).child(global++);
      const Tensor child = detail::gaussian_row(rs, c.dim, 0.7);
      const Tensor& parent = m.parent_offsets.at(*d.parent_id);
      const Tensor& off = m.domain_offsets.at(d.domain_id);
      for (std::size_t j = 0; j < c.dim; ++j) EXPECT_EQ(off[j], parent[j] + child[j]);
    }
  EXPECT_EQ(m.train[0].parent_id, m.train[1].parent_id);
  EXPECT_NE(m.train[1].parent_id, m.train[2].parent_id);
}

TEST(Hierarchy, ZeroChildScaleCopiesParent) {
  GeneratorConfig c = small_config();
  c.hierarchy.mode = Hierarchy::two_level;
  c.hierarchy.child_offset_scale = 0.0;
  const MetaDataset m = make_meta_dataset(c);
  for (const auto& d : m.train) EXPECT_EQ(m.domain_offsets.at(d.domain_id), m.parent_offsets.at(*d.parent_id));
  const RandomStream rs(1, 2);
  const Tensor parent = draw_parent_offset(m, rs);
  const TargetBatch tb = make_target_batch(m, NewChildDomain{"p", parent}, LabelMix::balanced(), 3, 2, rs);
  EXPECT_EQ(tb.offset, parent);
  EXPECT_EQ(tb.batch.parent_id, std::optional<std::string>("p"));
}

TEST(LabelShift, LargeAlphaIsNearlyBalanced) {
  RandomStream rs(0, 1);
  const auto y = sample_label_shift(1e6, 8, 8000, rs);
  for (std::size_t c : counts(y, 8)) {
    EXPECT_GE(c, 875u);
    EXPECT_LE(c, 1125u);
  }
}

TEST(LabelShift, SmallAlphaConcentratesOnOneClass) {
  int concentrated = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    RandomStream rs(seed, 1);
    const auto c = counts(sample_label_shift(0.01, 8, 36, rs), 8);
    if (*std::max_element(c.begin(), c.end()) >= 30) ++concentrated;
  }
  EXPECT_GE(concentrated, 900);
}

TEST(LabelShift, SameStreamSameLabels) {
  RandomStream a(5, 5), b(5, 5);
  EXPECT_EQ(sample_label_shift(0.1, 8, 100, a), sample_label_shift(0.1, 8, 100, b));
  EXPECT_THROW(sample_label_shift(0.0, 8, 10, a), ConfigError);
}

TEST(LabelShift, HugeAlphaDirichletIsBalanced) {
  RandomStream rs(3, 3);
  for (double p : rs.dirichlet(1e9, 8)) EXPECT_NEAR(p, 0.125, 0.02 * 0.125);
}

TEST(TargetBatch, Sizes) {
  const MetaDataset m = make_meta_dataset(GeneratorConfig{});
  const RandomStream rs(0, 99);
  const TargetBatch a = make_target_batch(m, NewDomain{}, LabelMix::dirichlet(0.01), 36, 288, rs);
  EXPECT_EQ(a.batch.X.rows(), 36u);
  EXPECT_EQ(a.batch.y.size(), 36u);
  EXPECT_EQ(a.batch.Z.rows(), 288u);
  const TargetBatch b = make_target_batch(m, NewDomain{}, LabelMix::balanced(), 1, 128, rs);
  EXPECT_EQ(b.batch.X.rows(), 1u);
  EXPECT_EQ(b.batch.Z.rows(), 128u);
  EXPECT_THROW(make_target_batch(m, NewDomain{}, LabelMix::balanced(), 0, 128, rs), ConfigError);
}

TEST(TargetBatch, MixChangesLabelsButNotOffsetOrControls) {
  const MetaDataset m = make_meta_dataset(GeneratorConfig{});
  const RandomStream rs(4, 4);
  const TargetBatch a = make_target_batch(m, NewDomain{}, LabelMix::balanced(), 36, 50, rs);
  const TargetBatch b = make_target_batch(m, NewDomain{}, LabelMix::dirichlet(0.01), 36, 50, rs);
  EXPECT_EQ(a.offset, b.offset);
  EXPECT_EQ(a.batch.Z, b.batch.Z);
  EXPECT_NE(a.batch.y, b.batch.y);
}

TEST(TargetBatch, ExistingDomainUsesStoredOffset) {
  const MetaDataset m = make_meta_dataset(small_config());
  const TargetBatch tb =
      make_target_batch(m, ExistingDomain{"train-001"}, LabelMix::balanced(), 5, 5, RandomStream(1, 1));
  EXPECT_EQ(tb.offset, m.domain_offsets.at("train-001"));
  EXPECT_EQ(tb.batch.domain_id, "train-001");
  EXPECT_THROW(make_target_batch(m, ExistingDomain{"nope"}, LabelMix::balanced(), 5, 5, RandomStream(1, 1)), Error);
}

TEST(TargetBatch, ControlMeanConvergesToDomainOffset) {
  const MetaDataset m = make_meta_dataset(GeneratorConfig{});
  const std::size_t c = 100000;
  const TargetBatch tb = make_target_batch(m, NewDomain{}, LabelMix::balanced(), 1, c, RandomStream(2, 2));
  const Tensor mean = column_mean(tb.batch.Z);
  const double bound = 5.0 * m.config.noise_std / std::sqrt(static_cast<double>(c));
  for (std::size_t j = 0; j < m.config.dim; ++j) EXPECT_LT(std::abs(mean[j] - tb.offset[j]), bound);
}

TEST(TargetBatch, PerturbedMeanConvergesToOffsetPlusLabelWeightedEffects) {
  const MetaDataset m = make_meta_dataset(GeneratorConfig{});
  const std::size_t n = 100000;
  const TargetBatch tb = make_target_batch(m, NewDomain{}, LabelMix::dirichlet(0.5), n, 1, RandomStream(6, 6));
  const Tensor mean = column_mean(tb.batch.X);
  const auto c = counts(tb.batch.y, m.config.classes);
  const double bound = 5.0 * m.config.noise_std / std::sqrt(static_cast<double>(n));
  for (std::size_t j = 0; j < m.config.dim; ++j) {
    double expect = tb.offset[j];
    for (std::size_t k = 0; k < c.size(); ++k)
      expect += m.class_effects(k, j) * static_cast<double>(c[k]) / static_cast<double>(n);
    EXPECT_LT(std::abs(mean[j] - expect), bound);
  }
}

TEST(DatasetFiles, RoundTrip) {
  const MetaDataset m = make_meta_dataset(small_config());
  const fs::path dir = fresh_dir("roundtrip");
  write_dataset(m, dir);
  const MetaDataset r = read_dataset(dir);
  EXPECT_EQ(manifest_text(r), manifest_text(m));
  ASSERT_EQ(r.train.size(), m.train.size());
  for (std::size_t i = 0; i < m.train.size(); ++i) {
    EXPECT_EQ(r.train[i].domain_id, m.train[i].domain_id);
    EXPECT_EQ(r.train[i].X, m.train[i].X);
    EXPECT_EQ(r.train[i].y, m.train[i].y);
    EXPECT_EQ(r.train[i].Z, m.train[i].Z);
  }
  EXPECT_EQ(r.class_effects, m.class_effects);
  EXPECT_EQ(r.domain_offsets, m.domain_offsets);
  fs::remove_all(dir);
}

TEST(DatasetFiles, HeaderLayout) {
  const MetaDataset m = make_meta_dataset(small_config());
  const fs::path dir = fresh_dir("layout");
  write_dataset(m, dir);
  const std::string bytes = binio::read_file((dir / "train-000.bin").string());
  EXPECT_EQ(bytes.substr(0, 8), "BNADAPT1");
  std::uint64_t d = 0;
  std::memcpy(&d, bytes.data() + 8, 8);
  EXPECT_EQ(d, 4u);
  const std::size_t expected = 8 + 4 * 8 + (12 * 4 + 12 + 6 * 4) * 8;
  EXPECT_EQ(bytes.size(), expected);
  binio::write_file((dir / "train-000.bin").string(), "NOTMAGIC" + bytes.substr(8));
  EXPECT_THROW(read_dataset(dir), IoError);
  fs::remove_all(dir);
}

TEST(DatasetFiles, ReferenceConfigWritesTwentyNineDomainsAndManifest) {
  const fs::path dir = fresh_dir("reference");
  write_dataset(make_meta_dataset(GeneratorConfig{}), dir);
  std::size_t bins = 0, other = 0;
  for (const auto& e : fs::directory_iterator(dir)) (e.path().extension() == ".bin" ? bins : other)++;
  EXPECT_EQ(bins, 29u);
  EXPECT_EQ(other, 1u);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  fs::remove_all(dir);
}

TEST(GeneratorConfigJson, RoundTripAndUnknownKey) {
  GeneratorConfig c = small_config();
  c.hierarchy.mode = Hierarchy::two_level;
  const GeneratorConfig r = generator_from_json(to_json(c));
  EXPECT_EQ(to_json(r).dump(), to_json(c).dump());
  Json j = to_json(c);
  j["bogus"] = 1;
  EXPECT_THROW(generator_from_json(j), ConfigError);
}

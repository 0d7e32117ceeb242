#pragma once

#include <cstdint>
#include <cstring>
#include <iomanip>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "bnadapt/binio.hpp"
#include "bnadapt/jsonutil.hpp"
#include "bnadapt/numcore.hpp"

// Synthetic multi-domain data: x = mu_domain + mu_class(y) + eps for
// perturbed samples and z = mu_domain + eps for negative controls.
namespace bnadapt {

enum class Hierarchy { flat, two_level };

inline std::string to_string(Hierarchy h) { return h == Hierarchy::flat ? "flat" : "two-level"; }

inline Hierarchy parse_hierarchy(const std::string& s) {
  if (s == "flat") return Hierarchy::flat;
  if (s == "two-level") return Hierarchy::two_level;
  throw ConfigError("unknown hierarchy \"" + s + "\" (expected flat or two-level)");
}

struct HierarchyConfig {
  Hierarchy mode = Hierarchy::flat;
  // Two-level only: parents use domain_offset_scale, children add this.
  double child_offset_scale = 1.0;
  std::size_t children_per_parent = 4;
};

struct GeneratorConfig {
  std::size_t dim = 16;
  std::size_t classes = 8;
  std::size_t n_domains_train = 20;
  std::size_t n_domains_val = 4;
  std::size_t n_domains_test = 5;
  std::size_t perturbed_per_domain = 256;
  std::size_t controls_per_domain = 256;
  double domain_offset_scale = 3.0;
  double class_effect_scale = 1.0;
  double noise_std = 0.5;
  HierarchyConfig hierarchy;
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 1) throw ConfigError("generator.D must be >= 1");
    if (classes < 2) throw ConfigError("generator.K must be >= 2, got " + std::to_string(classes));
    if (n_domains_train < 1 || n_domains_val < 1 || n_domains_test < 1)
      throw ConfigError("generator: every split needs at least one domain");
    if (perturbed_per_domain < 1) throw ConfigError("generator.N must be >= 1");
    if (noise_std < 0.0 || domain_offset_scale < 0.0 || class_effect_scale < 0.0)
      throw ConfigError("generator: scales must be non-negative");
    if (hierarchy.mode == Hierarchy::two_level && hierarchy.children_per_parent < 1)
      throw ConfigError("generator.hierarchy.children_per_parent must be >= 1");
  }

  std::size_t total_domains() const { return n_domains_train + n_domains_val + n_domains_test; }
};

inline Json to_json(const GeneratorConfig& c) {
  Json h = {{"mode", to_string(c.hierarchy.mode)},
            {"child_offset_scale", c.hierarchy.child_offset_scale},
            {"children_per_parent", c.hierarchy.children_per_parent}};
  return Json{{"D", c.dim},
              {"K", c.classes},
              {"n_domains_train", c.n_domains_train},
              {"n_domains_val", c.n_domains_val},
              {"n_domains_test", c.n_domains_test},
              {"N", c.perturbed_per_domain},
              {"C", c.controls_per_domain},
              {"domain_offset_scale", c.domain_offset_scale},
              {"class_effect_scale", c.class_effect_scale},
              {"noise_std", c.noise_std},
              {"hierarchy", h},
              {"seed", c.seed}};
}

inline GeneratorConfig generator_from_json(const Json& j, const std::string& where = "generator") {
  GeneratorConfig c;
  StrictObject o(j, where);
  o.read("D", c.dim);
  o.read("K", c.classes);
  o.read("n_domains_train", c.n_domains_train);
  o.read("n_domains_val", c.n_domains_val);
  o.read("n_domains_test", c.n_domains_test);
  o.read("N", c.perturbed_per_domain);
  o.read("C", c.controls_per_domain);
  o.read("domain_offset_scale", c.domain_offset_scale);
  o.read("class_effect_scale", c.class_effect_scale);
  o.read("noise_std", c.noise_std);
  o.read("seed", c.seed);
  if (const Json* h = o.child("hierarchy")) {
    StrictObject ho(*h, where + ".hierarchy");
    std::string mode = to_string(c.hierarchy.mode);
    ho.read("mode", mode);
    c.hierarchy.mode = parse_hierarchy(mode);
    ho.read("child_offset_scale", c.hierarchy.child_offset_scale);
    ho.read("children_per_parent", c.hierarchy.children_per_parent);
    ho.finish();
  }
  o.finish();
  c.validate();
  return c;
}

// One experimental batch: perturbed rows with labels plus control rows, all
// sharing one domain offset.
struct DomainBatch {
  std::string domain_id;
  std::optional<std::string> parent_id;
  Tensor X;            // L x D
  std::vector<int> y;  // length L
  Tensor Z;            // C x D

  std::size_t perturbed_count() const { return y.size(); }
  std::size_t control_count() const { return Z.empty() ? 0 : Z.rows(); }
};

struct MetaDataset {
  GeneratorConfig config;
  std::vector<DomainBatch> train;
  std::vector<DomainBatch> val;
  std::vector<DomainBatch> test;
  Tensor class_effects;                        // K x D, shared by all domains
  std::map<std::string, Tensor> domain_offsets;  // domain_id -> 1 x D
  std::map<std::string, Tensor> parent_offsets;  // two-level only

  const DomainBatch& find(const std::string& id) const {
    for (const auto* split : {&train, &val, &test})
      for (const auto& d : *split)
        if (d.domain_id == id) return d;
    throw Error("unknown domain id " + id);
  }
};

namespace stream_ids {
inline constexpr std::uint64_t class_effects = 1;
inline constexpr std::uint64_t domain_offsets = 2;
inline constexpr std::uint64_t domain_samples = 3;
inline constexpr std::uint64_t parent_offsets = 4;
}  // namespace stream_ids

namespace detail {

inline Tensor gaussian_row(RandomStream& rs, std::size_t d, double scale) {
  Tensor r = Tensor::zeros(1, d);
  for (auto& v : r.values()) v = scale * rs.normal();
  return r;
}

inline std::string domain_name(const char* split, std::size_t i) {
  std::ostringstream os;
  os << split << '-' << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

// Perturbed and control rows for a given offset; noise is drawn from
// dedicated sub-streams so label draws never shift the noise sequence.
inline DomainBatch sample_domain(const GeneratorConfig& cfg, const Tensor& class_effects, const Tensor& offset,
                                 const std::vector<int>& labels, std::size_t controls, RandomStream& noise_x,
                                 RandomStream& noise_z) {
  const std::size_t d = cfg.dim;
  DomainBatch b;
  b.y = labels;
  b.X = Tensor::zeros(labels.size(), d);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      b.X(i, j) = offset[j] + class_effects(static_cast<std::size_t>(labels[i]), j) + cfg.noise_std * noise_x.normal();
  b.Z = Tensor::zeros(controls, d);
  for (std::size_t i = 0; i < controls; ++i)
    for (std::size_t j = 0; j < d; ++j) b.Z(i, j) = offset[j] + cfg.noise_std * noise_z.normal();
  return b;
}

inline std::vector<int> uniform_labels(std::size_t n, std::size_t k, RandomStream& rs) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rs.uniform_index(k));
  return y;
}

}  // namespace detail

inline MetaDataset make_meta_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  MetaDataset meta;
  meta.config = cfg;
  const RandomStream root(cfg.seed, 0);

  {
    RandomStream rs = root.child(stream_ids::class_effects);
    meta.class_effects = Tensor::zeros(cfg.classes, cfg.dim);
    for (auto& v : meta.class_effects.values()) v = cfg.class_effect_scale * rs.normal();
  }

  std::size_t global = 0;
  std::size_t parent_global = 0;
  auto build_split = [&](const char* split, std::size_t count, std::vector<DomainBatch>& out) {
    for (std::size_t i = 0; i < count; ++i, ++global) {
      const std::string id = detail::domain_name(split, i);
      RandomStream offset_rs = root.child(stream_ids::domain_offsets).child(global);
      Tensor offset;
      std::optional<std::string> parent;
      if (cfg.hierarchy.mode == Hierarchy::flat) {
        offset = detail::gaussian_row(offset_rs, cfg.dim, cfg.domain_offset_scale);
      } else {
        const std::size_t p = i / cfg.hierarchy.children_per_parent;
        const std::string pid = std::string(split) + "-p" + std::to_string(p);
        if (!meta.parent_offsets.count(pid)) {
          RandomStream prs = root.child(stream_ids::parent_offsets).child(parent_global++);
          meta.parent_offsets[pid] = detail::gaussian_row(prs, cfg.dim, cfg.domain_offset_scale);
        }
        offset = detail::gaussian_row(offset_rs, cfg.dim, cfg.hierarchy.child_offset_scale);
        for (std::size_t j = 0; j < cfg.dim; ++j) offset[j] += meta.parent_offsets[pid][j];
        parent = pid;
      }
      RandomStream sample_rs = root.child(stream_ids::domain_samples).child(global);
      RandomStream label_rs = sample_rs.child(1);
      RandomStream nx = sample_rs.child(2);
      RandomStream nz = sample_rs.child(3);
      const auto labels = detail::uniform_labels(cfg.perturbed_per_domain, cfg.classes, label_rs);
      DomainBatch b = detail::sample_domain(cfg, meta.class_effects, offset, labels, cfg.controls_per_domain, nx, nz);
      b.domain_id = id;
      b.parent_id = parent;
      meta.domain_offsets[id] = std::move(offset);
      out.push_back(std::move(b));
    }
  };
  build_split("train", cfg.n_domains_train, meta.train);
  build_split("val", cfg.n_domains_val, meta.val);
  build_split("test", cfg.n_domains_test, meta.test);
  return meta;
}

// Labels ~ Multinomial(p) with p ~ Dirichlet(alpha 1_K). The drawn
// probability vector is written to `probs_out` when given.
inline std::vector<int> sample_label_shift(double alpha, std::size_t classes, std::size_t n, RandomStream& stream,
                                           std::vector<double>* probs_out = nullptr) {
  if (!(alpha > 0.0)) throw ConfigError("label shift alpha must be > 0");
  if (n < 1) throw ConfigError("label shift needs n >= 1");
  const std::vector<double> p = stream.dirichlet(alpha, classes);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(stream.categorical(p));
  if (probs_out) *probs_out = p;
  return y;
}

struct NewDomain {};
struct ExistingDomain {
  std::string domain_id;
};
// Fresh child domain of a given parent (two-level hierarchy).
struct NewChildDomain {
  std::string parent_id;
  Tensor parent_offset;
};
using TargetDomain = std::variant<NewDomain, ExistingDomain, NewChildDomain>;

// Fresh parent offset drawn like a training parent.
inline Tensor draw_parent_offset(const MetaDataset& meta, const RandomStream& stream) {
  RandomStream rs = stream.child(5);
  return detail::gaussian_row(rs, meta.config.dim, meta.config.domain_offset_scale);
}

// Class mixture of a target batch: balanced (uniform multinomial) when
// alpha is empty, otherwise Dirichlet(alpha) label shift.
struct LabelMix {
  std::optional<double> alpha;
  static LabelMix balanced() { return {}; }
  static LabelMix dirichlet(double a) { return {a}; }
};

struct TargetBatch {
  DomainBatch batch;
  std::vector<double> class_probs;  // mixture used for the labels
  Tensor offset;                    // true domain offset
};

// Fresh target batch. The stream is split into independent sub-streams for
// the offset, labels, perturbed noise and control noise, so two calls with
// the same stream and different mixes share noise and controls exactly.
inline TargetBatch make_target_batch(const MetaDataset& meta, const TargetDomain& domain, const LabelMix& mix,
                                     std::size_t labeled, std::size_t controls, const RandomStream& stream) {
  if (labeled < 1) throw ConfigError("target batch needs L >= 1");
  const GeneratorConfig& cfg = meta.config;
  TargetBatch tb;
  std::optional<std::string> parent;
  std::string id;
  if (const auto* existing = std::get_if<ExistingDomain>(&domain)) {
    const DomainBatch& src = meta.find(existing->domain_id);
    tb.offset = meta.domain_offsets.at(existing->domain_id);
    parent = src.parent_id;
    id = existing->domain_id;
  } else if (const auto* child = std::get_if<NewChildDomain>(&domain)) {
    if (child->parent_offset.cols() != cfg.dim) throw ShapeError("parent offset width mismatch");
    RandomStream ors = stream.child(1);
    tb.offset = detail::gaussian_row(ors, cfg.dim, cfg.hierarchy.child_offset_scale);
    for (std::size_t j = 0; j < cfg.dim; ++j) tb.offset[j] += child->parent_offset[j];
    parent = child->parent_id;
    id = "new";
  } else {
    RandomStream ors = stream.child(1);
    if (cfg.hierarchy.mode == Hierarchy::flat) {
      tb.offset = detail::gaussian_row(ors, cfg.dim, cfg.domain_offset_scale);
    } else {
      tb.offset = detail::gaussian_row(ors, cfg.dim, cfg.domain_offset_scale);
      const Tensor child = detail::gaussian_row(ors, cfg.dim, cfg.hierarchy.child_offset_scale);
      for (std::size_t j = 0; j < cfg.dim; ++j) tb.offset[j] += child[j];
    }
    id = "new";
  }
  RandomStream label_rs = stream.child(2);
  RandomStream nx = stream.child(3);
  RandomStream nz = stream.child(4);
  std::vector<int> labels;
  if (mix.alpha) {
    labels = sample_label_shift(*mix.alpha, cfg.classes, labeled, label_rs, &tb.class_probs);
  } else {
    labels = detail::uniform_labels(labeled, cfg.classes, label_rs);
    tb.class_probs.assign(cfg.classes, 1.0 / static_cast<double>(cfg.classes));
  }
  tb.batch = detail::sample_domain(cfg, meta.class_effects, tb.offset, labels, controls, nx, nz);
  tb.batch.domain_id = id;
  tb.batch.parent_id = parent;
  return tb;
}

// ---------------------------------------------------------------------------
// On-disk layout: one <domain_id>.bin per domain plus manifest.json.
//
//   bytes 0..7   magic "BNADAPT1"
//   u64 LE       D, K, L (perturbed rows), C (control rows)
//   f64 LE       X, L*D values row-major
//   f64 LE       y, L labels stored as doubles
//   f64 LE       Z, C*D values row-major

inline constexpr char kDatasetMagic[8] = {'B', 'N', 'A', 'D', 'A', 'P', 'T', '1'};

inline void write_domain_file(const std::string& path, const DomainBatch& b, std::size_t dim, std::size_t classes) {
  std::ostringstream os(std::ios::binary);
  os.write(kDatasetMagic, 8);
  binio::write_u64(os, dim);
  binio::write_u64(os, classes);
  binio::write_u64(os, b.perturbed_count());
  binio::write_u64(os, b.control_count());
  binio::write_doubles(os, b.X.values());
  std::vector<double> y(b.y.begin(), b.y.end());
  binio::write_doubles(os, y);
  binio::write_doubles(os, b.Z.values());
  binio::write_file(path, os.str());
}

inline DomainBatch read_domain_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kDatasetMagic, 8) != 0) throw IoError(path + ": bad magic");
  const auto d = binio::read_u64(in);
  const auto k = binio::read_u64(in);
  const auto l = binio::read_u64(in);
  const auto c = binio::read_u64(in);
  DomainBatch b;
  b.X = Tensor::matrix(l, d, binio::read_doubles(in, l * d));
  for (double v : binio::read_doubles(in, l)) {
    if (v < 0 || v >= static_cast<double>(k)) throw IoError(path + ": label out of range");
    b.y.push_back(static_cast<int>(v));
  }
  b.Z = Tensor::matrix(c, d, binio::read_doubles(in, c * d));
  return b;
}

inline Json tensor_rows_json(const Tensor& t) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    Json r = Json::array();
    for (std::size_t j = 0; j < t.cols(); ++j) r.push_back(t(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline Tensor tensor_from_rows_json(const Json& rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows[0].size() : 0;
  Tensor t = Tensor::zeros(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    if (rows[i].size() != c) throw IoError("ragged matrix in JSON");
    for (std::size_t j = 0; j < c; ++j) t(i, j) = rows[i][j].get<double>();
  }
  return t;
}

inline Json manifest_json(const MetaDataset& meta) {
  Json splits;
  Json parents = Json::object();
  for (const auto& [name, split] : {std::pair{"train", &meta.train}, {"val", &meta.val}, {"test", &meta.test}}) {
    Json ids = Json::array();
    for (const auto& d : *split) {
      ids.push_back(d.domain_id);
      if (d.parent_id) parents[d.domain_id] = *d.parent_id;
    }
    splits[name] = ids;
  }
  Json offsets = Json::object();
  for (const auto& [id, off] : meta.domain_offsets) offsets[id] = tensor_rows_json(off)[0];
  Json parent_offsets = Json::object();
  for (const auto& [id, off] : meta.parent_offsets) parent_offsets[id] = tensor_rows_json(off)[0];
  return Json{{"format", "bnadapt-dataset"},
              {"version", 1},
              {"seed", meta.config.seed},
              {"generator", to_json(meta.config)},
              {"splits", splits},
              {"parents", parents},
              {"true_parameters",
               {{"class_effects", tensor_rows_json(meta.class_effects)},
                {"domain_offsets", offsets},
                {"parent_offsets", parent_offsets}}}};
}

inline std::string manifest_text(const MetaDataset& meta) { return manifest_json(meta).dump(2) + "\n"; }

inline void write_dataset(const MetaDataset& meta, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto* split : {&meta.train, &meta.val, &meta.test})
    for (const auto& d : *split)
      write_domain_file((dir / (d.domain_id + ".bin")).string(), d, meta.config.dim, meta.config.classes);
  binio::write_file((dir / "manifest.json").string(), manifest_text(meta));
}

inline MetaDataset read_dataset(const std::filesystem::path& dir) {
  const Json m = Json::parse(binio::read_file((dir / "manifest.json").string()));
  MetaDataset meta;
  meta.config = generator_from_json(m.at("generator"));
  const Json& tp = m.at("true_parameters");
  meta.class_effects = tensor_from_rows_json(tp.at("class_effects"));
  for (auto it = tp.at("domain_offsets").begin(); it != tp.at("domain_offsets").end(); ++it)
    meta.domain_offsets[it.key()] = tensor_from_rows_json(Json::array({it.value()}));
  for (auto it = tp.at("parent_offsets").begin(); it != tp.at("parent_offsets").end(); ++it)
    meta.parent_offsets[it.key()] = tensor_from_rows_json(Json::array({it.value()}));
  const Json& parents = m.at("parents");
  for (const auto& [name, split] : {std::pair{"train", &meta.train}, {"val", &meta.val}, {"test", &meta.test}}) {
    for (const auto& id : m.at("splits").at(name)) {
      DomainBatch b = read_domain_file((dir / (id.get<std::string>() + ".bin")).string());
      b.domain_id = id.get<std::string>();
      if (parents.contains(b.domain_id)) b.parent_id = parents.at(b.domain_id).get<std::string>();
      split->push_back(std::move(b));
    }
  }
  return meta;
}

}  // namespace bnadapt

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bnadapt/binio.hpp"
#include "bnadapt/jsonutil.hpp"
#include "bnadapt/numcore.hpp"

namespace bnadapt {

enum class NormMode { batchnorm, per_sample, none };

inline std::string to_string(NormMode m) {
  switch (m) {
    case NormMode::batchnorm: return "batchnorm";
    case NormMode::per_sample: return "per-sample";
    case NormMode::none: return "none";
  }
  return "?";
}

inline NormMode parse_norm_mode(const std::string& s) {
  if (s == "batchnorm") return NormMode::batchnorm;
  if (s == "per-sample") return NormMode::per_sample;
  if (s == "none") return NormMode::none;
  throw ConfigError("unknown norm mode \"" + s + "\"");
}

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

// input -> [affine -> norm -> ReLU] x hidden.size() -> affine head. With
// context_dim > 0 a per-row encoder (affine -> ReLU -> affine) is
// mean-pooled over a context set and appended to every input row.
struct Architecture {
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t classes = 8;
  NormMode norm = NormMode::batchnorm;
  std::size_t context_dim = 0;
  std::size_t encoder_hidden = 64;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline Json to_json(const Architecture& a) {
  return Json{{"input_dim", a.input_dim},           {"hidden", a.hidden},
              {"classes", a.classes},               {"norm_mode", to_string(a.norm)},
              {"context_dim", a.context_dim},       {"encoder_hidden", a.encoder_hidden}};
}

inline Architecture architecture_from_json(const Json& j) {
  Architecture a;
  StrictObject o(j, "architecture");
  std::string norm = to_string(a.norm);
  o.require("input_dim", a.input_dim);
  o.require("hidden", a.hidden);
  o.require("classes", a.classes);
  o.require("norm_mode", norm);
  o.read("context_dim", a.context_dim);
  o.read("encoder_hidden", a.encoder_hidden);
  o.finish();
  a.norm = parse_norm_mode(norm);
  return a;
}

// Adapted per-layer statistics, one entry per BN layer.
struct BNSnapshot {
  std::vector<BatchStats> layers;
};

enum class ParamKind { weight, bias, norm_gamma, norm_beta, encoder };

struct ParamRef {
  std::string name;
  ParamKind kind;
  Tensor* tensor;
};

struct ConstParamRef {
  std::string name;
  ParamKind kind;
  const Tensor* tensor;
};

struct ModelInit {
  std::uint64_t seed = 0;
  bool zero_head = false;  // zero classifier weights and bias
};

class Model {
 public:
  using Init = ModelInit;

  Model() = default;

  explicit Model(const Architecture& arch, Init init = {}) : arch_(arch) {
    if (arch.classes < 2) throw ConfigError("model needs at least 2 classes");
    RandomStream rs(init.seed, 0x6d6f64656cULL);
    std::size_t in = arch.input_dim + arch.context_dim;
    for (std::size_t width : arch.hidden) {
      layers_.push_back(make_linear(in, width, rs));
      if (arch.norm != NormMode::none) norms_.push_back(BNLayerState::fresh(width));
      in = width;
    }
    layers_.push_back(make_linear(in, arch.classes, rs));
    if (init.zero_head) {
      layers_.back().weight = Tensor::zeros(in, arch.classes);
      layers_.back().bias = Tensor::zeros(1, arch.classes);
    }
    if (arch.context_dim > 0) {
      encoder_.push_back(make_linear(arch.input_dim, arch.encoder_hidden, rs));
      encoder_.push_back(make_linear(arch.encoder_hidden, arch.context_dim, rs));
    }
  }

  const Architecture& architecture() const { return arch_; }
  const std::vector<Linear>& layers() const { return layers_; }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<BNLayerState>& norms() const { return norms_; }
  std::vector<BNLayerState>& norms() { return norms_; }
  const std::vector<Linear>& encoder() const { return encoder_; }

  bool has_batchnorm() const { return arch_.norm == NormMode::batchnorm && !norms_.empty(); }
  bool has_context_encoder() const { return arch_.context_dim > 0; }
  std::size_t bn_layer_count() const { return arch_.norm == NormMode::batchnorm ? norms_.size() : 0; }

  // Trainable tensors in a fixed order: affine weights/biases layer by
  // layer, then norm gamma/beta, then encoder weights/biases.
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.push_back({"layer" + std::to_string(i) + ".weight", ParamKind::weight, &layers_[i].weight});
      out.push_back({"layer" + std::to_string(i) + ".bias", ParamKind::bias, &layers_[i].bias});
    }
    for (std::size_t i = 0; i < norms_.size(); ++i) {
      out.push_back({"norm" + std::to_string(i) + ".gamma", ParamKind::norm_gamma, &norms_[i].gamma});
      out.push_back({"norm" + std::to_string(i) + ".beta", ParamKind::norm_beta, &norms_[i].beta});
    }
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      out.push_back({"encoder" + std::to_string(i) + ".weight", ParamKind::encoder, &encoder_[i].weight});
      out.push_back({"encoder" + std::to_string(i) + ".bias", ParamKind::encoder, &encoder_[i].bias});
    }
    return out;
  }

  std::vector<ConstParamRef> parameters() const {
    std::vector<ConstParamRef> out;
    for (auto& p : const_cast<Model*>(this)->parameters()) out.push_back({p.name, p.kind, p.tensor});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  // Auxiliary covariance used by the TVN probe (empty otherwise).
  Tensor& tvn_train_cov() { return tvn_train_cov_; }
  const Tensor& tvn_train_cov() const { return tvn_train_cov_; }

 private:
  static Linear make_linear(std::size_t in, std::size_t out, RandomStream& rs) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l{Tensor::zeros(in, out), Tensor::zeros(1, out)};
    for (auto& v : l.weight.values()) v = rs.uniform(-bound, bound);
    for (auto& v : l.bias.values()) v = rs.uniform(-bound, bound);
    return l;
  }

  Architecture arch_;
  std::vector<Linear> layers_;
  std::vector<BNLayerState> norms_;
  std::vector<Linear> encoder_;
  Tensor tvn_train_cov_;
};

// Where BN layers take their normalization statistics from.
struct StatSource {
  enum class Kind { running, batch, snapshot };
  Kind kind = Kind::running;
  const BNSnapshot* snapshot = nullptr;
  // Batch mode only: statistics come from the first `stat_rows` rows
  // (0 = all rows); the remaining rows are normalized with them.
  std::size_t stat_rows = 0;

  static StatSource running() { return {}; }
  static StatSource batch(std::size_t stat_rows = 0) { return {Kind::batch, nullptr, stat_rows}; }
  static StatSource from(const BNSnapshot& s) { return {Kind::snapshot, &s, 0}; }
};

// Model parameters bound onto a tape. `trainable(kind)` picks which become
// differentiable leaves; the rest are constants.
struct BoundModel {
  std::vector<ag::Var> params;  // same order as Model::parameters()

  BoundModel(ag::Tape& tape, const Model& model, const std::function<bool(ParamKind)>& trainable = nullptr) {
    for (const auto& p : model.parameters()) {
      const bool train = trainable ? trainable(p.kind) : true;
      params.push_back(train ? tape.parameter(*p.tensor) : tape.constant(*p.tensor));
    }
  }

  static BoundModel constants(ag::Tape& tape, const Model& model) {
    return BoundModel(tape, model, [](ParamKind) { return false; });
  }
};

struct GraphOutput {
  ag::Var logits;
  ag::Var features;                     // input to the classifier head
  std::vector<BatchStats> batch_stats;  // statistics used by each BN layer
};

namespace detail {

struct ParamIndex {
  std::size_t layers, norms;
  std::size_t weight(std::size_t i) const { return 2 * i; }
  std::size_t bias(std::size_t i) const { return 2 * i + 1; }
  std::size_t gamma(std::size_t i) const { return 2 * layers + 2 * i; }
  std::size_t beta(std::size_t i) const { return 2 * layers + 2 * i + 1; }
  std::size_t encoder(std::size_t i) const { return 2 * layers + 2 * norms + i; }
};

inline ag::Var affine(const ag::Var& x, const ag::Var& w, const ag::Var& b) {
  return ag::add_row(ag::matmul(x, w), b);
}

}  // namespace detail

// Pooled context vector: mean over context rows of the encoder output.
inline ag::Var context_vector_graph(ag::Tape& tape, const Model& model, const BoundModel& bound,
                                    const ag::Var& context_rows) {
  (void)tape;
  if (!model.has_context_encoder()) throw IncompatibleError("model has no context encoder");
  const detail::ParamIndex ix{model.layers().size(), model.norms().size()};
  ag::Var h = ag::relu(detail::affine(context_rows, bound.params[ix.encoder(0)], bound.params[ix.encoder(1)]));
  h = detail::affine(h, bound.params[ix.encoder(2)], bound.params[ix.encoder(3)]);
  return ag::col_mean(h);
}

inline GraphOutput forward_graph(ag::Tape& tape, const Model& model, const BoundModel& bound, const ag::Var& input,
                                 const StatSource& source, std::optional<ag::Var> context_vector = std::nullopt) {
  const Architecture& arch = model.architecture();
  if (input.value().cols() != arch.input_dim) {
    throw ShapeError("forward: input width " + std::to_string(input.value().cols()) + " vs model input " +
                     std::to_string(arch.input_dim));
  }
  if (model.has_context_encoder() != context_vector.has_value()) {
    throw IncompatibleError(model.has_context_encoder() ? "model requires a context vector"
                                                        : "context vector given to a model without encoder");
  }
  if (source.kind == StatSource::Kind::snapshot) {
    if (!source.snapshot || source.snapshot->layers.size() != model.bn_layer_count())
      throw ShapeError("forward: snapshot does not match the model's BN layers");
  }
  const detail::ParamIndex ix{model.layers().size(), model.norms().size()};
  GraphOutput out;
  ag::Var h = context_vector ? ag::concat_cols_broadcast(input, *context_vector) : input;
  const std::size_t hidden = arch.hidden.size();
  for (std::size_t i = 0; i < hidden; ++i) {
    h = detail::affine(h, bound.params[ix.weight(i)], bound.params[ix.bias(i)]);
    if (arch.norm == NormMode::batchnorm) {
      const BNLayerState& st = model.norms()[i];
      ag::Var mean, var;
      switch (source.kind) {
        case StatSource::Kind::batch: {
          const std::size_t rows = h.value().rows();
          const std::size_t n = source.stat_rows == 0 ? rows : source.stat_rows;
          if (n > rows) throw ShapeError("forward: stat_rows exceeds batch");
          const ag::Var stat_in = n == rows ? h : ag::slice_rows(h, 0, n);
          mean = ag::col_mean(stat_in);
          var = ag::col_var(stat_in);
          break;
        }
        case StatSource::Kind::running:
          mean = tape.constant(st.running_mean);
          var = tape.constant(st.running_var);
          break;
        case StatSource::Kind::snapshot: {
          const BatchStats& s = source.snapshot->layers[i];
          if (s.mean.cols() != st.width() || s.var.cols() != st.width())
            throw ShapeError("forward: snapshot layer width mismatch");
          mean = tape.constant(s.mean);
          var = tape.constant(s.var);
          break;
        }
      }
      out.batch_stats.push_back({mean.value(), var.value()});
      h = ag::normalize(h, mean, var, st.epsilon);
      h = ag::add_row(ag::mul_row(h, bound.params[ix.gamma(i)]), bound.params[ix.beta(i)]);
    } else if (arch.norm == NormMode::per_sample) {
      h = ag::row_standardize(h, model.norms()[i].epsilon);
      h = ag::add_row(ag::mul_row(h, bound.params[ix.gamma(i)]), bound.params[ix.beta(i)]);
    }
    h = ag::relu(h);
  }
  out.features = h;
  out.logits = detail::affine(h, bound.params[ix.weight(hidden)], bound.params[ix.bias(hidden)]);
  return out;
}

struct ForwardOutput {
  Tensor logits;
  Tensor probs;
};

inline Tensor context_vector(const Model& model, const Tensor& context_rows) {
  if (context_rows.rows() == 0) throw ShapeError("context vector from empty context");
  ag::Tape tape;
  const BoundModel bound = BoundModel::constants(tape, model);
  return context_vector_graph(tape, model, bound, tape.constant(context_rows)).value();
}

// Inference. Does not touch running statistics.
inline ForwardOutput forward(const Model& model, const Tensor& x, const StatSource& source = StatSource::running(),
                             const Tensor* context_vec = nullptr) {
  ag::Tape tape;
  const BoundModel bound = BoundModel::constants(tape, model);
  std::optional<ag::Var> cv;
  if (context_vec) cv = tape.constant(*context_vec);
  GraphOutput g = forward_graph(tape, model, bound, tape.constant(x), source, cv);
  ForwardOutput out{g.logits.value(), Tensor{}};
  out.probs = softmax(out.logits);
  return out;
}

inline std::vector<int> argmax_rows(const Tensor& t) {
  std::vector<int> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < t.cols(); ++j)
      if (t(i, j) > t(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw ShapeError("accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// Population statistics of every BN layer's pre-normalization activations
// over the context rows. Layers run sequentially, so deeper layers see
// shallower layers already normalized with the context statistics.
inline BNSnapshot collect_bn_snapshot(const Model& model, const Tensor& context_rows,
                                      const Tensor* context_vec = nullptr) {
  if (context_rows.rows() == 0) throw ShapeError("collect_bn_snapshot: empty context");
  if (model.bn_layer_count() == 0) throw IncompatibleError("collect_bn_snapshot: model has no BN layers");
  ag::Tape tape;
  const BoundModel bound = BoundModel::constants(tape, model);
  std::optional<ag::Var> cv;
  if (context_vec) cv = tape.constant(*context_vec);
  GraphOutput g = forward_graph(tape, model, bound, tape.constant(context_rows), StatSource::batch(), cv);
  return BNSnapshot{std::move(g.batch_stats)};
}

inline BNSnapshot running_snapshot(const Model& model) {
  BNSnapshot s;
  for (std::size_t i = 0; i < model.bn_layer_count(); ++i)
    s.layers.push_back({model.norms()[i].running_mean, model.norms()[i].running_var});
  return s;
}

// Copy of `model` with the snapshot installed as its eval-time statistics.
inline Model swap_bn_stats(const Model& model, const BNSnapshot& snapshot) {
  if (snapshot.layers.size() != model.bn_layer_count()) throw ShapeError("swap_bn_stats: layer count mismatch");
  Model adapted = model;
  for (std::size_t i = 0; i < snapshot.layers.size(); ++i) {
    BNLayerState& st = adapted.norms()[i];
    const BatchStats& s = snapshot.layers[i];
    if (s.mean.cols() != st.width() || s.var.cols() != st.width()) throw ShapeError("swap_bn_stats: width mismatch");
    st.running_mean = s.mean;
    st.running_var = s.var;
  }
  return adapted;
}

// FNV-1a over the raw bytes of the selected parameters.
inline std::uint64_t parameter_checksum(const Model& model, const std::function<bool(ParamKind)>& include) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : model.parameters()) {
    if (!include(p.kind)) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor->values().data());
    for (std::size_t i = 0; i < p.tensor->size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint file:
//   bytes 0..7   magic "BNCKPT01"
//   u64 LE       header length H
//   H bytes      JSON header (architecture, norm_mode, seed, training config)
//   f64 LE       parameters in Model::parameters() order, each row-major,
//                then for each norm layer running_mean and running_var,
//                then the TVN train covariance if the header says so.

inline constexpr char kCheckpointMagic[8] = {'B', 'N', 'C', 'K', 'P', 'T', '0', '1'};

struct Checkpoint {
  Model model;
  Json header;
};

inline std::string checkpoint_bytes(const Model& model, const Json& extra = Json::object()) {
  Json header = {{"format", "bnadapt-checkpoint"},
                 {"version", 1},
                 {"architecture", to_json(model.architecture())},
                 {"parameter_count", model.parameter_count()},
                 {"tvn_train_cov_dim", model.tvn_train_cov().empty() ? 0 : model.tvn_train_cov().rows()}};
  for (auto it = extra.begin(); it != extra.end(); ++it) header[it.key()] = it.value();
  const std::string text = header.dump();
  std::ostringstream os(std::ios::binary);
  os.write(kCheckpointMagic, 8);
  binio::write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) binio::write_doubles(os, p.tensor->values());
  for (const auto& n : model.norms()) {
    binio::write_doubles(os, n.running_mean.values());
    binio::write_doubles(os, n.running_var.values());
  }
  if (!model.tvn_train_cov().empty()) binio::write_doubles(os, model.tvn_train_cov().values());
  return os.str();
}

inline void write_checkpoint(const std::string& path, const Model& model, const Json& extra = Json::object()) {
  binio::write_file(path, checkpoint_bytes(model, extra));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::istringstream in(binio::read_file(path), std::ios::binary);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw IoError(path + ": not a checkpoint");
  const auto len = binio::read_u64(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError(path + ": truncated header");
  Checkpoint ck{Model{}, Json::parse(text)};
  ck.model = Model(architecture_from_json(ck.header.at("architecture")));
  for (auto& p : ck.model.parameters()) p.tensor->values() = binio::read_doubles(in, p.tensor->size());
  for (auto& n : ck.model.norms()) {
    n.running_mean.values() = binio::read_doubles(in, n.width());
    n.running_var.values() = binio::read_doubles(in, n.width());
  }
  const auto cov_dim = ck.header.value("tvn_train_cov_dim", std::size_t{0});
  if (cov_dim > 0) ck.model.tvn_train_cov() = Tensor::matrix(cov_dim, cov_dim, binio::read_doubles(in, cov_dim * cov_dim));
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(path + ": trailing bytes");
  return ck;
}

}  // namespace bnadapt

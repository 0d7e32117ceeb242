#pragma once

#include <charconv>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "bnadapt/adapt.hpp"
#include "bnadapt/jsonutil.hpp"
#include "bnadapt/metatrain.hpp"
#include "bnadapt/synthgen.hpp"

namespace bnadapt::bench {

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {"erm-bn", "erm-psn", "adabn",     "tent",      "ben",      "arm-bn",
                                                 "arm-ben", "arm-cml", "cs-arm-bn", "tvn-probe", "coral-erm"};
  return names;
}

inline void require_method(const std::string& name) {
  for (const auto& n : method_names())
    if (n == name) return;
  std::string known;
  for (const auto& n : method_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown method \"" + name + "\" (known: " + known + ")");
}

// Label mixture of a target spec: nullopt = balanced.
using Alpha = std::optional<double>;

inline std::string format_alpha(const Alpha& a) {
  if (!a) return "balanced";
  char buf[40];
  // shortest form that parses back to the same double
  const auto r = std::to_chars(buf, buf + sizeof buf, *a);
  return std::string(buf, r.ptr);
}

inline Alpha parse_alpha(const std::string& s) {
  if (s == "balanced") return std::nullopt;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::logic_error&) {
    throw ConfigError("bad alpha \"" + s + "\"");
  }
  if (used != s.size() || !(v > 0.0)) throw ConfigError("alpha must be > 0 or \"balanced\", got \"" + s + "\"");
  return v;
}

struct ModelConfig {
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t context_dim = 8;  // arm-cml only
  std::size_t encoder_hidden = 64;
};

struct EvaluationConfig {
  std::vector<Alpha> alphas = {std::nullopt};
  std::vector<std::size_t> labeled_batch = {36};
  std::vector<std::size_t> controls = {288};
  Granularity granularity = Granularity::plate;
  std::size_t target_domains = 20;  // fresh unseen domains per seed
  TentConfig tent;
  double tvn_ridge = 1e-6;
  Recolor tvn_recolor = Recolor::full;
};

struct ExperimentConfig {
  GeneratorConfig generator;
  ModelConfig model;
  TrainConfig training;
  std::vector<std::string> methods = {"erm-bn", "adabn", "tent", "arm-bn", "cs-arm-bn"};
  EvaluationConfig evaluation;
  std::string output_dir = "bnadapt-out";
  std::vector<std::uint64_t> seeds = {0};

  void validate() const {
    generator.validate();
    training.validate();
    if (methods.empty()) throw ConfigError("training.methods must not be empty");
    for (const auto& m : methods) require_method(m);
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (evaluation.alphas.empty() || evaluation.labeled_batch.empty() || evaluation.controls.empty())
      throw ConfigError("evaluation: alpha, labeled_batch and controls lists must not be empty");
    for (auto l : evaluation.labeled_batch)
      if (l < 1) throw ConfigError("evaluation.labeled_batch entries must be >= 1");
    if (evaluation.target_domains < 1) throw ConfigError("evaluation.target_domains must be >= 1");
    if (evaluation.tvn_ridge < 0.0) throw ConfigError("evaluation.tvn_ridge must be >= 0");
    evaluation.tent.validate();
    if (model.context_dim < 1 || model.encoder_hidden < 1) throw ConfigError("model: context sizes must be >= 1");
  }
};

inline std::string to_string(Recolor r) {
  switch (r) {
    case Recolor::full: return "full";
    case Recolor::diagonal: return "diagonal";
    case Recolor::none: return "none";
  }
  return "?";
}

inline Recolor parse_recolor(const std::string& s) {
  if (s == "full") return Recolor::full;
  if (s == "diagonal") return Recolor::diagonal;
  if (s == "none") return Recolor::none;
  throw ConfigError("unknown tvn_recolor \"" + s + "\"");
}

inline Json to_json(const ExperimentConfig& c) {
  Json training = to_json(c.training);
  training["methods"] = c.methods;
  Json alphas = Json::array();
  for (const auto& a : c.evaluation.alphas) {
    if (a) alphas.push_back(*a);
    else alphas.push_back("balanced");
  }
  return Json{{"generator", to_json(c.generator)},
              {"model",
               {{"hidden", c.model.hidden},
                {"context_dim", c.model.context_dim},
                {"encoder_hidden", c.model.encoder_hidden}}},
              {"training", training},
              {"evaluation",
               {{"alpha", alphas},
                {"labeled_batch", c.evaluation.labeled_batch},
                {"controls", c.evaluation.controls},
                {"granularity", to_string(c.evaluation.granularity)},
                {"target_domains", c.evaluation.target_domains},
                {"tent", {{"steps", c.evaluation.tent.steps}, {"learning_rate", c.evaluation.tent.learning_rate}}},
                {"tvn_ridge", c.evaluation.tvn_ridge},
                {"tvn_recolor", to_string(c.evaluation.tvn_recolor)}}},
              {"output_dir", c.output_dir},
              {"seeds", c.seeds}};
}

inline ExperimentConfig experiment_from_json(const Json& j) {
  ExperimentConfig c;
  StrictObject o(j, "config");
  if (const Json* g = o.child("generator")) c.generator = generator_from_json(*g, "config.generator");
  if (const Json* m = o.child("model")) {
    StrictObject mo(*m, "config.model");
    mo.read("hidden", c.model.hidden);
    mo.read("context_dim", c.model.context_dim);
    mo.read("encoder_hidden", c.model.encoder_hidden);
    mo.finish();
  }
  if (const Json* t = o.child("training")) {
    StrictObject to(*t, "config.training");
    read_train_config(to, c.training);
    to.read("methods", c.methods);
    to.finish();
  }
  if (const Json* e = o.child("evaluation")) {
    StrictObject eo(*e, "config.evaluation");
    if (const Json* a = eo.child("alpha")) {
      if (!a->is_array()) throw ConfigError("config.evaluation.alpha: expected a list");
      c.evaluation.alphas.clear();
      for (const auto& v : *a) {
        if (v.is_number()) c.evaluation.alphas.push_back(parse_alpha(format_alpha(v.get<double>())));
        else if (v.is_string()) c.evaluation.alphas.push_back(parse_alpha(v.get<std::string>()));
        else throw ConfigError("config.evaluation.alpha: entries must be numbers or \"balanced\"");
      }
    }
    eo.read("labeled_batch", c.evaluation.labeled_batch);
    eo.read("controls", c.evaluation.controls);
    std::string gran = to_string(c.evaluation.granularity);
    eo.read("granularity", gran);
    c.evaluation.granularity = parse_granularity(gran);
    eo.read("target_domains", c.evaluation.target_domains);
    if (const Json* t = eo.child("tent")) {
      StrictObject tt(*t, "config.evaluation.tent");
      tt.read("steps", c.evaluation.tent.steps);
      tt.read("learning_rate", c.evaluation.tent.learning_rate);
      tt.finish();
    }
    eo.read("tvn_ridge", c.evaluation.tvn_ridge);
    std::string recolor = to_string(c.evaluation.tvn_recolor);
    eo.read("tvn_recolor", recolor);
    c.evaluation.tvn_recolor = parse_recolor(recolor);
    eo.finish();
  }
  o.read("output_dir", c.output_dir);
  o.read("seeds", c.seeds);
  o.finish();
  c.validate();
  return c;
}

// Parses config text; JSON syntax errors report line and column.
inline ExperimentConfig parse_experiment(const std::string& text, const std::string& origin = "config") {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < e.byte - 1 && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": JSON syntax error");
  }
  return experiment_from_json(j);
}

inline ExperimentConfig load_experiment(const std::string& path) {
  return parse_experiment(binio::read_file(path), path);
}

// Replication seed s shifts every master seed by s.
inline GeneratorConfig generator_for_seed(const ExperimentConfig& c, std::uint64_t s) {
  GeneratorConfig g = c.generator;
  g.seed += s;
  return g;
}

inline TrainConfig training_for_seed(const ExperimentConfig& c, std::uint64_t s) {
  TrainConfig t = c.training;
  t.seed += s;
  return t;
}

}  // namespace bnadapt::bench
